//! Acceptance checks, one test per criterion. Every test writes a single
//! `criterion N (...): PASS|FAIL ...` line to stderr (bypassing the test
//! harness capture) before asserting, so a plain `cargo test` run shows the
//! whole table.
//!
//! Tests hold a shared lock: the machine may have a single core, and the
//! runtime bounds would be meaningless with trainings running alongside.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semapop_core::autodiff::Tape;
use semapop_core::calibration::{
    calibration_sweep, max_constrained_deviation, rake, rake_coded, CalibrationTargets, RakeConfig,
};
use semapop_core::counterfactual::{
    fit_direction, semantic_sweep, spearman, EmbeddingStandardizer, SemanticSweep, DEFAULT_ALPHAS,
};
use semapop_core::embedding::{EmbeddingMatrix, Provenance};
use semapop_core::gan::{gradient_penalty, train_gan, GanArchitecture, GanModel, GanTrainingConfig};
use semapop_core::marginal::{marginal_loss, MarginalSpec, MarginalTargets, DEFAULT_EPS};
use semapop_core::nn::ParamSet;
use semapop_core::metrics::{ess, evaluate, precision_recall_f1_coded, srmse, Discretized};
use semapop_core::persona::{mock_embed, template_personas, PersonaMode};
use semapop_core::pipeline::{ExperimentConfig, Pipeline, Stage};
use semapop_core::sampler::{standard_normal, Sampler};
use semapop_core::vae::{gaussian_kl, train_vae, VaeArchitecture, VaeModel, VaeTrainingConfig};
use semapop_core::{encode, fit_schema_stats, AttributeSchema, Population, ToyJointSpec};

const TARGET: &str = "Trips_of_PublicTransport";

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, what: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} ({what}): {verdict} {}", detail.as_ref());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Desk-scale toy setup shared by the training criteria.

struct Desk {
    schema: AttributeSchema,
    pop: Population,
    emb: EmbeddingMatrix,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let toy = ToyJointSpec::mixed5();
        let pop = toy.sample(2000, 7).unwrap();
        let schema = fit_schema_stats(&toy.schema().unwrap(), &pop).unwrap().schema;
        let texts = template_personas(&pop, &schema, PersonaMode::Implicit).unwrap();
        let emb = mock_embed(&texts, 32, 0).unwrap();
        Desk { schema, pop, emb }
    })
}

fn desk_gan(seed: u64, marg_reg: bool) -> GanTrainingConfig {
    GanTrainingConfig {
        arch: GanArchitecture::compact(),
        noise_dim: 32,
        batch_size: 256,
        steps: 5000,
        lr_g: 2e-4,
        lr_d: 2e-4,
        beta1: 0.5,
        beta2: 0.9,
        n_critic: 2,
        lambda_m: 5.0,
        train_hard: true,
        ema_decay: 0.99,
        marg_reg,
        seed,
        ..GanTrainingConfig::default()
    }
}

fn desk_vae(seed: u64) -> VaeTrainingConfig {
    VaeTrainingConfig {
        arch: VaeArchitecture::compact(),
        batch_size: 256,
        epochs: 200,
        lr: 1e-3,
        seed,
        ..VaeTrainingConfig::default()
    }
}

/// Generated agents per training agent when scoring a model.
const TILE: usize = 25;
const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Debug)]
struct Run {
    srmse_m: f64,
    f1: f64,
    secs: f64,
    first_loss: f64,
    last_loss: f64,
}

fn score(model: &dyn Sampler, spec: &MarginalSpec) -> (f64, f64) {
    let d = desk();
    let gen = model.sample(&d.emb.tile(TILE).to_f64(), 99).unwrap();
    let rep = evaluate(&gen, &d.pop, &d.schema, spec, None, None).unwrap();
    (rep.srmse_m, rep.f1)
}

fn gan_runs(marg_reg: bool) -> &'static [Run] {
    static REG: OnceLock<Vec<Run>> = OnceLock::new();
    static UNREG: OnceLock<Vec<Run>> = OnceLock::new();
    let cell = if marg_reg { &REG } else { &UNREG };
    cell.get_or_init(|| {
        let d = desk();
        SEEDS
            .iter()
            .map(|&s| {
                let t0 = Instant::now();
                let t = train_gan(&d.pop, &d.emb, &d.schema, &desk_gan(s, marg_reg), |_, _| Ok(())).unwrap();
                let secs = t0.elapsed().as_secs_f64();
                let (srmse_m, f1) = score(&t.model, &t.model.marginal_spec);
                Run {
                    srmse_m,
                    f1,
                    secs,
                    first_loss: t.log.first().map_or(f64::NAN, |r| r.loss_g),
                    last_loss: t.log.last().map_or(f64::NAN, |r| r.loss_g),
                }
            })
            .collect()
    })
}

fn vae_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let d = desk();
        SEEDS
            .iter()
            .map(|&s| {
                let t0 = Instant::now();
                let t = train_vae(&d.pop, &d.emb, &d.schema, &desk_vae(s), |_, _| Ok(())).unwrap();
                let secs = t0.elapsed().as_secs_f64();
                let (srmse_m, f1) = score(&t.model, &t.model.marginal_spec);
                Run {
                    srmse_m,
                    f1,
                    secs,
                    first_loss: t.log.first().unwrap().loss,
                    last_loss: t.log.last().unwrap().loss,
                }
            })
            .collect()
    })
}

fn fmt_runs(runs: &[Run], f: impl Fn(&Run) -> f64) -> String {
    runs.iter().map(|r| format!("{:.4}", f(r))).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------------------
// 1. Metric oracles.

fn oracle_srmse(p_hat: &[f64], p: &[f64]) -> f64 {
    let k = p.len();
    let mut sq = 0.0;
    let mut mass = 0.0;
    for i in 0..k {
        let diff = p_hat[i] - p[i];
        sq += diff * diff;
        mass += p[i];
    }
    (sq / k as f64).sqrt() / (mass / k as f64)
}

fn oracle_prf(gen: &[Vec<usize>], reference: &[Vec<usize>]) -> (f64, f64, f64) {
    let hit = |row: &Vec<usize>, other: &[Vec<usize>]| other.iter().any(|o| o == row);
    let p = 100.0 * gen.iter().filter(|r| hit(r, reference)).count() as f64 / gen.len() as f64;
    let r = 100.0 * reference.iter().filter(|r| hit(r, gen)).count() as f64 / reference.len() as f64;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

fn oracle_ess(w: &[f64]) -> f64 {
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    1.0 / sorted.iter().rev().map(|x| x * x).sum::<f64>()
}

fn random_coded(n: usize, supports: &[usize], rng: &mut ChaCha8Rng) -> (Discretized, Vec<Vec<usize>>) {
    let codes: Vec<Vec<usize>> = supports.iter().map(|&k| (0..n).map(|_| rng.random_range(0..k)).collect()).collect();
    let rows = (0..n).map(|i| codes.iter().map(|c| c[i]).collect()).collect();
    (
        Discretized {
            codes,
            supports: supports.to_vec(),
            n,
        },
        rows,
    )
}

#[test]
fn criterion_01_metric_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let k = 2 + trial % 9;
        let mut p: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let mut q: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        worst = worst.max((srmse(&p, &q).unwrap() - oracle_srmse(&p, &q)).abs());
    }
    for supports in [vec![2, 3, 2], vec![3, 2, 3, 4, 5], vec![10, 10]] {
        let (g, gr) = random_coded(500, &supports, &mut rng);
        let (r, rr) = random_coded(500, &supports, &mut rng);
        let got = precision_recall_f1_coded(&g, &r, None).unwrap();
        let want = oracle_prf(&gr, &rr);
        worst = worst
            .max((got.0 - want.0).abs())
            .max((got.1 - want.1).abs())
            .max((got.2 - want.2).abs());
    }
    for _ in 0..5 {
        let raw: Vec<f64> = (0..500).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let w_sum: f64 = w.iter().sum();
        // Renormalize once more so the sum check inside `ess` sees ~1.
        let w: Vec<f64> = w.iter().map(|x| x / w_sum).collect();
        worst = worst.max((ess(&w).unwrap() - oracle_ess(&w)).abs());
    }
    let hand_srmse = srmse(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let hand_ess = ess(&[0.5, 0.25, 0.25]).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && hand_srmse == 1.0 && (hand_ess - 8.0 / 3.0).abs() < 5e-5 && secs < 5.0;
    report(
        1,
        "metric oracles",
        pass,
        format!("max |diff| {worst:.2e}, srmse hand {hand_srmse}, ess hand {hand_ess:.4}, {secs:.2}s"),
    );
    assert!(worst <= 1e-10, "oracle disagreement {worst}");
    assert_eq!(hand_srmse, 1.0);
    assert!((hand_ess - 2.6667).abs() < 1e-4);
    assert!(secs < 5.0);
}

// ---------------------------------------------------------------------------
// 2. FiLM identity at initialization.

#[test]
fn criterion_02_film_identity() {
    let _g = serial();
    let d = desk();
    let rows: Vec<usize> = (0..100).collect();
    let e = d.emb.select(&rows).to_f64();
    let pop = d.pop.select(&rows);
    let spec = MarginalSpec::fit(&d.schema, &pop, 10).unwrap();

    let gan = GanModel::init(&d.schema, spec.clone(), e.ncols(), &desk_gan(5, true)).unwrap();
    let noise = gan.draw_noise(100, 17);
    let g_on = gan.generate_encoded(&e, &noise, false, true).unwrap().matrix;
    let g_off = gan.generate_encoded(&e, &noise, false, false).unwrap().matrix;
    let gan_same = g_on.iter().zip(g_off.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    let vae = VaeModel::init(&d.schema, spec, e.ncols(), &desk_vae(5)).unwrap();
    let z = standard_normal(100, vae.cfg.arch.latent_dim, &mut ChaCha8Rng::seed_from_u64(18));
    let v_on = vae.decoder_outputs(&z, &e, true).unwrap();
    let v_off = vae.decoder_outputs(&z, &e, false).unwrap();
    let vae_same = v_on.iter().zip(v_off.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    report(
        2,
        "FiLM identity",
        gan_same && vae_same,
        format!("generator bit-identical {gan_same}, decoder bit-identical {vae_same} over 100 inputs"),
    );
    assert!(gan_same && vae_same);
}

// ---------------------------------------------------------------------------
// 3. Gradient penalty of linear critics.

#[test]
fn criterion_03_gradient_penalty() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 7;
    let real = standard_normal(64, dim, &mut rng);
    let fake = standard_normal(64, dim, &mut rng);
    let dir = standard_normal(dim, 1, &mut rng);
    let unit = &dir / dir.mapv(|x| x * x).sum().sqrt();
    let mut gaps = Vec::new();
    for (norm, expected) in [(1.0, 0.0), (3.0, 4.0)] {
        let w = &unit * norm;
        let gp = gradient_penalty(&real, &fake, 11, |x| x.matmul(x.tape().constant(w.clone()))).unwrap();
        gaps.push((norm, gp, (gp - expected).abs()));
    }
    let pass = gaps.iter().all(|g| g.2 < 1e-6);
    let detail = gaps
        .iter()
        .map(|(n, gp, _)| format!("|w|={n}: {gp:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(3, "gradient penalty", pass, detail);
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Analytic gradients against central differences.

fn rel_err(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4)
}

/// Nonzero FiLM and prior weights so every path carries gradient.
fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        params
            .get_mut(&name)
            .unwrap()
            .mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
}

#[test]
fn criterion_04_differentiability() {
    let _g = serial();
    let toy = ToyJointSpec::mixed5();
    let pop = toy.sample(24, 21).unwrap();
    let schema = fit_schema_stats(&toy.schema().unwrap(), &pop).unwrap().schema;
    let texts = template_personas(&pop, &schema, PersonaMode::Implicit).unwrap();
    let e = mock_embed(&texts, 8, 1).unwrap().to_f64();
    let spec = MarginalSpec::fit(&schema, &pop, 4).unwrap();

    // Marginal loss through a micro generator, soft samples.
    let gcfg = GanTrainingConfig {
        arch: GanArchitecture {
            cond_dim: 4,
            adapter_hidden: 6,
            adapter_dropout: 0.0,
            generator_hidden: vec![6],
            critic_hidden: vec![6],
            ..GanArchitecture::default()
        },
        noise_dim: 3,
        seed: 4,
        ..GanTrainingConfig::default()
    };
    let mut gan = GanModel::init(&schema, spec.clone(), 8, &gcfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    jitter(&mut gan.params, &mut rng);
    let targets = MarginalTargets::new(&schema, &spec, DEFAULT_EPS).unwrap();
    let noise = gan.draw_noise(24, 6);
    let loss_of = |g: &ParamSet| -> (f64, Vec<Array2<f64>>) {
        let tape = Tape::new();
        let p = g.bind(&tape);
        let c = gan.generator.condition(&p, tape.constant(e.clone()), None);
        let x = gan
            .generator
            .forward(&p, tape.constant(noise.z.clone()), c, &noise.gumbel, gcfg.gumbel_tau, false, true);
        let (a, b) = targets.loss(x);
        let l = a + b;
        // The plain implementation agrees with the taped one.
        let plain = marginal_loss(x.value().view(), &schema, &spec, DEFAULT_EPS).unwrap().total;
        assert!((plain - l.item()).abs() < 1e-10);
        (l.item(), p.grads(l))
    };
    let gp = gan.generator_params();
    let (_, grads) = loss_of(&gp);
    let h = 1e-6;
    let mut worst_m: f64 = 0.0;
    let mut checked_m = 0;
    for (k, name) in gp.names().cloned().collect::<Vec<_>>().iter().enumerate() {
        let (r, c) = gp.get(name).unwrap().dim();
        for (i, j) in [(0, 0), (r - 1, c - 1)] {
            let mut up = gp.clone();
            up.get_mut(name).unwrap()[[i, j]] += h;
            let mut dn = gp.clone();
            dn.get_mut(name).unwrap()[[i, j]] -= h;
            let fd = (loss_of(&up).0 - loss_of(&dn).0) / (2.0 * h);
            worst_m = worst_m.max(rel_err(grads[k][[i, j]], fd));
            checked_m += 1;
        }
    }

    // Full VAE objective on a micro network.
    let vcfg = VaeTrainingConfig {
        arch: VaeArchitecture {
            latent_dim: 3,
            cond_dim: 4,
            adapter_hidden: 5,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            prior_hidden: 5,
            ..VaeArchitecture::compact()
        },
        seed: 7,
        ..VaeTrainingConfig::default()
    };
    let mut vae = VaeModel::init(&schema, spec, 8, &vcfg).unwrap();
    jitter(&mut vae.params, &mut rng);
    let x = encode(&pop, &schema).unwrap().matrix;
    let eps = standard_normal(24, 3, &mut rng);
    let (_, vgrads) = vae.loss_and_grads(&x, &e, &eps).unwrap();
    let names: Vec<String> = vae.params.names().cloned().collect();
    let mut worst_v: f64 = 0.0;
    let mut checked_v = 0;
    for (k, name) in names.iter().enumerate() {
        let (r, c) = vae.params.get(name).unwrap().dim();
        for (i, j) in [(0, 0), (r - 1, c - 1)] {
            let orig = vae.params.get(name).unwrap()[[i, j]];
            vae.params.get_mut(name).unwrap()[[i, j]] = orig + h;
            let up = vae.loss_and_grads(&x, &e, &eps).unwrap().0;
            vae.params.get_mut(name).unwrap()[[i, j]] = orig - h;
            let dn = vae.loss_and_grads(&x, &e, &eps).unwrap().0;
            vae.params.get_mut(name).unwrap()[[i, j]] = orig;
            worst_v = worst_v.max(rel_err(vgrads[k][[i, j]], (up - dn) / (2.0 * h)));
            checked_v += 1;
        }
    }
    let pass = worst_m < 1e-3 && worst_v < 1e-3;
    report(
        4,
        "differentiability",
        pass,
        format!(
            "marginal loss max rel err {worst_m:.2e} over {checked_m} entries, \
             vae loss max rel err {worst_v:.2e} over {checked_v} entries"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Raking.

#[test]
fn criterion_05_raking() {
    let _g = serial();
    let t0 = Instant::now();
    // Four agents, G = [0, 0, 0, 1], H = [0, 1, 0, 1], target on G only.
    let d = Discretized {
        codes: vec![vec![0, 0, 0, 1], vec![0, 1, 0, 1]],
        supports: vec![2, 2],
        n: 4,
    };
    let target = [0.5, 0.5];
    let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
    let w = rake_coded(&d, &[(0, &target)], 1, RakeConfig::default()).unwrap().weights;
    let exact = rake_coded(&d, &[(0, &target)], 1, RakeConfig { eps: 0.0, ..RakeConfig::default() })
        .unwrap()
        .weights;
    let hand_gap = w.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let exact_gap = exact.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Five attributes, targets from a population with shifted tables.
    let base = ToyJointSpec::mixed5();
    let mut shifted = base.clone();
    shifted.nodes[0].table = vec![vec![0.2, 0.3, 0.5]];
    shifted.nodes[1].table = vec![vec![0.6, 0.4], vec![0.5, 0.5], vec![0.3, 0.7]];
    let gen = base.sample(3000, 31).unwrap();
    let reference = shifted.sample(3000, 32).unwrap();
    let schema = fit_schema_stats(&base.schema().unwrap(), &gen).unwrap().schema;
    let spec = MarginalSpec::fit(&schema, &gen, 10).unwrap();
    let names = schema.names();
    let attrs: Vec<&str> = names.iter().map(String::as_str).collect();
    let targets = CalibrationTargets::from_reference(&reference, &schema, &spec, &attrs).unwrap();
    let before = max_constrained_deviation(&gen, &vec![1.0 / 3000.0; 3000], &schema, &spec, &targets).unwrap();
    let r = rake(&gen, &schema, &spec, &targets, 40, RakeConfig::default()).unwrap();
    let after = max_constrained_deviation(&gen, &r.weights, &schema, &spec, &targets).unwrap();
    let levels = [0, 1, 2, 5, 10, 20, 40];
    let sweep = calibration_sweep(&gen, &reference, &schema, &spec, &targets, &levels, RakeConfig::default()).unwrap();
    let n = gen.len() as f64;
    let ess_ok = sweep[0].ess == n && sweep.iter().all(|row| row.ess <= n);
    let secs = t0.elapsed().as_secs_f64();

    let pass = hand_gap < 1e-6 && exact_gap < 1e-15 && after < 1e-3 && ess_ok && secs < 10.0;
    let ess_list = sweep.iter().map(|r| format!("{:.0}", r.ess)).collect::<Vec<_>>().join("/");
    report(
        5,
        "raking",
        pass,
        format!(
            "hand fixture gap {hand_gap:.1e} (eps 0: {exact_gap:.1e}), 5-attribute deviation \
             {before:.4} -> {after:.2e} after 40 iterations, ESS {ess_list}, {secs:.2}s"
        ),
    );
    assert!(hand_gap < 1e-6 && exact_gap < 1e-15);
    assert!(after < 1e-3, "deviation {after}");
    assert!(ess_ok);
    assert!(secs < 10.0);
}

// ---------------------------------------------------------------------------
// 6. Desk-scale GAN training and the effect of marginal regularization.

#[test]
fn criterion_06_desk_gan() {
    let _g = serial();
    let reg = gan_runs(true);
    let unreg = gan_runs(false);
    let primary = &reg[0];
    let med_reg = median(reg.iter().map(|r| r.srmse_m).collect());
    let med_unreg = median(unreg.iter().map(|r| r.srmse_m).collect());
    let slowest = reg.iter().chain(unreg).map(|r| r.secs).fold(0.0, f64::max);
    let fidelity = primary.srmse_m <= 0.05 && primary.f1 >= 50.0;
    let ordering = med_unreg >= med_reg;
    let pass = fidelity && ordering && slowest <= 600.0;
    report(
        6,
        "desk GAN",
        pass,
        format!(
            "seed 1: SRMSE-M {:.4} F1 {:.1}; regularized [{}] median {med_reg:.4}; \
             unregularized [{}] median {med_unreg:.4}; slowest training {slowest:.0}s",
            primary.srmse_m,
            primary.f1,
            fmt_runs(reg, |r| r.srmse_m),
            fmt_runs(unreg, |r| r.srmse_m),
        ),
    );
    assert!(primary.srmse_m <= 0.05, "SRMSE-M {}", primary.srmse_m);
    assert!(primary.f1 >= 50.0, "F1 {}", primary.f1);
    assert!(ordering, "unregularized median {med_unreg} < regularized {med_reg}");
    assert!(slowest <= 600.0);
}

// ---------------------------------------------------------------------------
// 7. GAN against VAE.

#[test]
fn criterion_07_backbone_contrast() {
    let _g = serial();
    let gan = gan_runs(true);
    let vae = vae_runs();
    let mg = median(gan.iter().map(|r| r.f1).collect());
    let mv = median(vae.iter().map(|r| r.f1).collect());
    let pass = mg >= mv;
    report(
        7,
        "backbone contrast",
        pass,
        format!(
            "GAN F1 [{}] median {mg:.1}; VAE F1 [{}] median {mv:.1} (VAE SRMSE-M [{}])",
            fmt_runs(gan, |r| r.f1),
            fmt_runs(vae, |r| r.f1),
            fmt_runs(vae, |r| r.srmse_m),
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Probe recovers a planted direction.

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v = standard_normal(1, dim, rng).row(0).to_owned();
    &v / v.dot(&v).sqrt()
}

fn cosine(a: &[f64], b: &Array1<f64>) -> f64 {
    let a = Array1::from(a.to_vec());
    a.dot(b) / (a.dot(&a).sqrt() * b.dot(b).sqrt())
}

#[test]
fn criterion_08_probe_fidelity() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut pass = true;
    for (dim, seed) in [(8, 1u64), (16, 2), (32, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2000;
        let u = random_unit(dim, &mut rng);
        // Unit spread, class means 5 apart along u.
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let mut e = standard_normal(n, dim, &mut rng);
        for (mut row, &l) in e.axis_iter_mut(Axis(0)).zip(&labels) {
            row.scaled_add(if l { 2.5 } else { -2.5 }, &u);
        }
        let (stdz, e_std) = EmbeddingStandardizer::fit(&e).unwrap();
        // The planted axis in the standardized coordinates the probe sees.
        let u_std = &u / &Array1::from(stdz.sigma.clone());
        let d = fit_direction(&e_std, &labels, 1.0).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let d_flip = fit_direction(&e_std, &flipped, 1.0).unwrap();
        let c = cosine(&d.d, &u_std);
        let c_flip = cosine(&d_flip.d, &u_std);
        let reversed = d.d.iter().zip(&d_flip.d).all(|(a, b)| (a + b).abs() < 1e-6);
        pass &= c >= 0.95 && c_flip <= -0.95 && reversed;
        lines.push(format!("D={dim}: cos {c:.4}, flipped {c_flip:.4}"));
    }
    report(8, "probe fidelity", pass, lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9 and 10. Semantic sweep on a GAN trained with a planted direction.

struct Planted {
    sweep: SemanticSweep,
    secs: f64,
}

/// Embeddings `N(0, I) + s · t · u`, where `t` is the standardized target.
fn planted_embeddings(pop: &Population, schema: &AttributeSchema, u: &Array1<f64>, mean: f64, std: f64, seed: u64) -> EmbeddingMatrix {
    let j = schema.require_index(TARGET).unwrap();
    let trips = pop.numerical(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = standard_normal(pop.len(), u.len(), &mut rng);
    for (mut row, &t) in e.axis_iter_mut(Axis(0)).zip(trips) {
        row.scaled_add(3.0 * (t - mean) / std, u);
    }
    EmbeddingMatrix::from_f64(&e, Provenance::Mock).unwrap()
}

fn planted() -> &'static Planted {
    static P: OnceLock<Planted> = OnceLock::new();
    P.get_or_init(|| {
        let d = desk();
        let j = d.schema.require_index(TARGET).unwrap();
        let trips = d.pop.numerical(j);
        let mean = trips.iter().sum::<f64>() / trips.len() as f64;
        let std = (trips.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / trips.len() as f64).sqrt();
        let u = random_unit(16, &mut ChaCha8Rng::seed_from_u64(77));
        let train_e = planted_embeddings(&d.pop, &d.schema, &u, mean, std, 78);
        let t0 = Instant::now();
        let t = train_gan(&d.pop, &train_e, &d.schema, &desk_gan(1, true), |_, _| Ok(())).unwrap();
        let secs = t0.elapsed().as_secs_f64();

        let (_, e_std) = EmbeddingStandardizer::fit(&train_e.to_f64()).unwrap();
        let labels: Vec<bool> = trips.iter().map(|&t| t > 0.0).collect();
        let dir = fit_direction(&e_std, &labels, 1.0).unwrap();

        let eval_pop = ToyJointSpec::mixed5().sample(5000, 79).unwrap();
        let e0 = planted_embeddings(&eval_pop, &d.schema, &u, mean, std, 80).to_f64();
        let sweep = semantic_sweep(&t.model, &e0, &dir, &DEFAULT_ALPHAS, TARGET, 81).unwrap();
        Planted { sweep, secs }
    })
}

#[test]
fn criterion_09_counterfactual_monotonicity() {
    let _g = serial();
    let p = planted();
    let rows = &p.sweep.rows;
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_target).collect();
    let rho = spearman(&alphas, &means).unwrap();
    let monotone = rows.windows(2).all(|w| w[1].activation >= w[0].activation);
    let zero = alphas.iter().position(|&a| a == 0.0).unwrap();
    let same_z = p.sweep.populations[zero] == p.sweep.baseline;
    let pass = rho >= 0.9 && monotone && same_z;
    let curve = rows
        .iter()
        .map(|r| format!("{:+.1}:{:.3}/{:.3}", r.alpha, r.mean_target, r.activation))
        .collect::<Vec<_>>()
        .join(" ");
    report(
        9,
        "counterfactual monotonicity",
        pass,
        format!(
            "Spearman {rho:.3}, activation non-decreasing {monotone}, alpha=0 equals baseline {same_z}; \
             alpha:mean/activation {curve}; training {:.0}s",
            p.secs
        ),
    );
    assert!(rho >= 0.9, "Spearman {rho}");
    assert!(monotone);
    assert!(same_z);
}

#[test]
fn criterion_10_side_effect_locality() {
    let _g = serial();
    let p = planted();
    let alphas: Vec<f64> = p.sweep.rows.iter().map(|r| r.alpha).collect();
    let zero = alphas.iter().position(|&a| a == 0.0).unwrap();
    let top = alphas.iter().position(|&a| a == 1.5).unwrap();
    let schema = &desk().schema;
    let j = schema.require_index(TARGET).unwrap();
    let (a, b) = (p.sweep.populations[zero].numerical(j), p.sweep.populations[top].numerical(j));
    let target_delta = a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / a.len() as f64;
    let side = &p.sweep.rows[top].side_effects;
    let (worst_name, worst) = side
        .iter()
        .map(|(k, &v)| (k.clone(), v))
        .fold((String::new(), 0.0), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    let pass = target_delta > worst;
    let all = side.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ");
    report(
        10,
        "side-effect locality",
        pass,
        format!("target mean |delta| {target_delta:.4}; non-target {all}; max {worst_name} {worst:.4}"),
    );
    assert!(pass, "target {target_delta} vs {worst_name} {worst}");
}

// ---------------------------------------------------------------------------
// 11. End-to-end determinism.

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "provenance.json" && n != ".lock") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let _g = serial();
    let t0 = Instant::now();
    let config = r#"{
        "seed": 5,
        "data": {"source": "toy", "spec": "mixed5", "n": 2000, "seed": 7},
        "embedder": {"kind": "mock", "dim": 32, "seed": 0},
        "backbone": {"kind": "gan", "steps": 500, "batch_size": 256, "n_critic": 2, "noise_dim": 32,
                     "lr_g": 2e-4, "lr_d": 2e-4, "beta1": 0.5, "beta2": 0.9, "lambda_m": 5.0,
                     "train_hard": true, "ema_decay": 0.99,
                     "arch": {"cond_dim": 32, "adapter_hidden": 64, "generator_hidden": [64, 128, 64],
                              "critic_hidden": [64, 128, 64]}}
    }"#;
    let stages = [
        Stage::Prepare,
        Stage::Personas,
        Stage::Embed,
        Stage::Train,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Report,
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut trees = Vec::new();
    for dir in &dirs {
        let mut cfg = ExperimentConfig::from_json(config).unwrap();
        cfg.output_dir = dir.path().join("out");
        let pipeline = Pipeline::new(cfg).unwrap();
        for stage in stages {
            pipeline.run(stage).unwrap();
        }
        trees.push(files_under(&dir.path().join("out")));
    }
    let secs = t0.elapsed().as_secs_f64();
    let differing: Vec<String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    let has_report = trees[0].contains_key(Path::new("report/report.csv"));
    let pass = same_set && differing.is_empty() && has_report && secs < 180.0;
    report(
        11,
        "end-to-end determinism",
        pass,
        format!(
            "{} files compared, differing {:?}, two runs in {secs:.1}s",
            trees[0].len(),
            differing
        ),
    );
    assert!(same_set && differing.is_empty(), "differing files: {differing:?}");
    assert!(has_report);
    assert!(secs < 180.0);
}

// ---------------------------------------------------------------------------
// 12. VAE sanity.

#[test]
fn criterion_12_vae_sanity() {
    let _g = serial();
    let z = Array2::<f64>::zeros((1, 1));
    let one = Array2::<f64>::ones((1, 1));
    let kl_equal = gaussian_kl(&one, &z, &one, &z).unwrap();
    let kl_shift = gaussian_kl(&z, &z, &one, &z).unwrap();
    // Averaged over rows, summed over dimensions.
    let kl_rows = gaussian_kl(
        &Array2::zeros((3, 2)),
        &Array2::zeros((3, 2)),
        &Array2::ones((3, 2)),
        &Array2::zeros((3, 2)),
    )
    .unwrap();
    let runs = vae_runs();
    let decreasing = runs.iter().filter(|r| r.last_loss < r.first_loss).count();
    let pass = kl_equal == 0.0 && (kl_shift - 0.5).abs() < 1e-12 && (kl_rows - 1.0).abs() < 1e-12 && decreasing >= 2;
    report(
        12,
        "VAE sanity",
        pass,
        format!(
            "KL equal {kl_equal}, KL N(0,1)||N(1,1) {kl_shift}, loss first -> last {}; decreasing in {decreasing}/3",
            runs.iter()
                .map(|r| format!("{:.3}->{:.3}", r.first_loss, r.last_loss))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
    assert_eq!(kl_equal, 0.0);
    assert!((kl_shift - 0.5).abs() < 1e-12);
    assert!((kl_rows - 1.0).abs() < 1e-12);
    assert!(decreasing >= 2);
}
