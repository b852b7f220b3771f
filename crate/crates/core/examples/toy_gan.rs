//! Train the GAN on the five-attribute toy population and print fidelity
//! metrics. Knobs come from environment variables (STEPS, SEED, LR, BATCH,
//! MARG, HARD, DIM, EMA).

use semapop_core::gan::{train_gan, GanArchitecture, GanTrainingConfig};
use semapop_core::marginal::MarginalSpec;
use semapop_core::metrics::evaluate;
use semapop_core::persona::{mock_embed, template_personas, PersonaMode};
use semapop_core::sampler::Sampler;
use semapop_core::{fit_schema_stats, ToyJointSpec};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> semapop_core::Result<()> {
    let toy = ToyJointSpec::mixed5();
    let pop = toy.sample(2000, env("DATA_SEED", 7))?;
    let schema = fit_schema_stats(&toy.schema()?, &pop)?.schema;
    let texts = template_personas(&pop, &schema, PersonaMode::Implicit)?;
    let emb = mock_embed(&texts, env("DIM", 32), 0)?;
    let lr = env("LR", 2e-4);
    let cfg = GanTrainingConfig {
        arch: GanArchitecture::compact(),
        noise_dim: 32,
        batch_size: env("BATCH", 256),
        steps: env("STEPS", 2000),
        lr_g: lr,
        lr_d: lr,
        beta1: env("BETA1", 0.5),
        beta2: 0.9,
        marg_reg: env("MARG", 1) == 1,
        lambda_m: env("LM", 0.4),
        train_hard: env("HARD", 0) == 1,
        seed: env("SEED", 1),
        n_critic: env("NCRIT", 5),
        gumbel_tau: env("TAU", 0.66),
        ema_decay: env("EMA", 0.0),
        ..GanTrainingConfig::default()
    };
    let t0 = std::time::Instant::now();
    let every = env("EVERY", 500);
    let spec = MarginalSpec::fit(&schema, &pop, 10)?;
    let big = emb.tile(env("TILE", 10));
    let cfg = GanTrainingConfig { checkpoint_every: every, ..cfg };
    let trained = train_gan(&pop, &emb, &schema, &cfg, |step, m| {
        let gen = m.sample(&big.to_f64(), 99)?;
        let rep = evaluate(&gen, &pop, &schema, &spec, None, None)?;
        let per: Vec<String> = rep.per_variable.iter().map(|v| format!("{:.3}", v.srmse)).collect();
        println!("step {step} srmse_m {:.4} F1 {:.1} [{}] {:.0}s", rep.srmse_m, rep.f1, per.join(" "), t0.elapsed().as_secs_f64());
        Ok(())
    })?;
    for r in trained.log.iter().filter(|r| r.step % every == 0) {
        println!("step {} L_D {:.4} L_G {:.4} marg {:.4} gp {:.4}", r.step, r.loss_d, r.loss_g, r.loss_marg, r.gp);
    }
    let gen = trained.model.sample(&big.to_f64(), 99)?;
    let rep = evaluate(&gen, &pop, &schema, &spec, None, None)?;
    println!(
        "srmse_m {:.4} srmse_b {:.4} P {:.1} R {:.1} F1 {:.1} ({:.1}s)",
        rep.srmse_m, rep.srmse_b, rep.precision, rep.recall, rep.f1, t0.elapsed().as_secs_f64()
    );
    let dg = semapop_core::metrics::discretize(&gen, &schema, &spec)?;
    let dr = semapop_core::metrics::discretize(&pop, &schema, &spec)?;
    for (j, v) in rep.per_variable.iter().enumerate() {
        let f = |d: &semapop_core::metrics::Discretized| {
            semapop_core::metrics::distribution(&d.codes[j], d.supports[j], None)
                .iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("  {} {:.4}\n    gen {}\n    ref {}", v.attribute, v.srmse, f(&dg), f(&dr));
    }
    for v in &spec.variables {
        println!("  {v:?}");
    }
    Ok(())
}
