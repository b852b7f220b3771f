//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Tape`]. Gradients are themselves recorded as tape
//! operations, so a gradient can be differentiated again. The gradient penalty
//! of the critic relies on this: it needs the gradient of a gradient norm with
//! respect to the critic parameters.
//!
//! Broadcasting is always explicit (`broadcast_rows`, `broadcast_cols`,
//! `broadcast_scalar`); elementwise operations require identical shapes.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Transpose(usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    id: usize,
    tape: &'t Tape,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            tape: self,
        }
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(ArrayView2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(nodes[a].value.view())
        };
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(ArrayView2<f64>, ArrayView2<f64>) -> Array2<f64>,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(nodes[a].value.view(), nodes[b].value.view())
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned gradients are tape values and can be differentiated
    /// again. Inputs that `output` does not depend on get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), (1, 1), "grad requires a scalar output");
        let n = output.id + 1;

        // Nodes downstream of some `wrt` entry; only these carry gradient.
        let mut on_path = vec![false; n];
        for w in wrt {
            if w.id < n {
                on_path[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if on_path[i] || !nodes[i].requires_grad {
                    continue;
                }
                on_path[i] = parents(&nodes[i].op).iter().any(|&p| on_path[p]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if on_path[output.id] {
            grads[output.id] = Some(self.scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let out = Var { id: i, tape: self };
            let mut send = |p: usize, contrib: Var<'t>| {
                if on_path[p] {
                    grads[p] = Some(match grads[p] {
                        Some(prev) => prev + contrib,
                        None => contrib,
                    });
                }
            };
            let v = |id: usize| Var { id, tape: self };
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if on_path[a] {
                        send(a, g.matmul(v(b).t()));
                    }
                    if on_path[b] {
                        send(b, v(a).t().matmul(g));
                    }
                }
                Op::Add(a, b) => {
                    send(a, g);
                    send(b, g);
                }
                Op::Sub(a, b) => {
                    send(a, g);
                    if on_path[b] {
                        send(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if on_path[a] {
                        send(a, g * v(b));
                    }
                    if on_path[b] {
                        send(b, g * v(a));
                    }
                }
                Op::Div(a, b) => {
                    if on_path[a] {
                        send(a, g / v(b));
                    }
                    if on_path[b] {
                        send(b, -(g * out / v(b)));
                    }
                }
                Op::Neg(a) => send(a, -g),
                Op::Scale(a, k) => send(a, g.scale(k)),
                Op::AddScalar(a) => send(a, g),
                Op::Exp(a) => send(a, g * out),
                Op::Log(a) => send(a, g / v(a)),
                Op::Sqrt(a) => send(a, (g / out).scale(0.5)),
                Op::Transpose(a) => send(a, g.t()),
                Op::SumRows(a) => {
                    let cols = v(a).shape().1;
                    send(a, g.broadcast_cols(cols));
                }
                Op::SumCols(a) => {
                    let rows = v(a).shape().0;
                    send(a, g.broadcast_rows(rows));
                }
                Op::SumAll(a) => {
                    let (r, c) = v(a).shape();
                    send(a, g.broadcast_scalar(r, c));
                }
                Op::BroadcastRows(a) => send(a, g.sum_cols()),
                Op::BroadcastCols(a) => send(a, g.sum_rows()),
                Op::BroadcastScalar(a) => send(a, g.sum_all()),
                Op::SliceCols(a, start) => {
                    let total = v(a).shape().1;
                    send(a, g.pad_cols(start, total));
                }
                Op::PadCols(a, start) => {
                    let width = v(a).shape().1;
                    send(a, g.slice_cols(start, start + width));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = v(p).shape().1;
                        if on_path[p] {
                            send(p, g.slice_cols(start, start + width));
                        }
                        start += width;
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = w.shape();
                    self.constant(Array2::zeros((r, c)))
                }
            })
            .collect()
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Transpose(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::SumAll(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::BroadcastScalar(a)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Read the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(ArrayView2<f64>) -> R) -> R {
        f(self.tape.nodes.borrow()[self.id].value.view())
    }

    /// Value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
            v[[0, 0]]
        })
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (_, k) = self.shape();
        let (k2, _) = rhs.shape();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        self.tape
            .binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| a.dot(&b))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, k), |a| a.mapv(|x| x * k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |a| a.mapv(|x| x + k))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.mapv(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| a.mapv(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), |a| a.t().to_owned())
    }

    /// Row sums: (r, c) -> (r, 1).
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |a| {
            a.sum_axis(Axis(1)).insert_axis(Axis(1))
        })
    }

    /// Column sums: (r, c) -> (1, c).
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            a.sum_axis(Axis(0)).insert_axis(Axis(0))
        })
    }

    pub fn sum_all(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| {
            Array2::from_elem((1, 1), a.sum())
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    /// Column means: (r, c) -> (1, c).
    pub fn mean_cols(self) -> Var<'t> {
        let (r, _) = self.shape();
        self.sum_cols().scale(1.0 / r as f64)
    }

    /// Repeat a (1, c) row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        assert_eq!(self.shape().0, 1, "broadcast_rows expects a single row");
        self.tape.unary(self.id, Op::BroadcastRows(self.id), |a| {
            let c = a.ncols();
            a.broadcast((rows, c)).unwrap().to_owned()
        })
    }

    /// Repeat an (r, 1) column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        assert_eq!(self.shape().1, 1, "broadcast_cols expects a single column");
        self.tape.unary(self.id, Op::BroadcastCols(self.id), |a| {
            let r = a.nrows();
            a.broadcast((r, cols)).unwrap().to_owned()
        })
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(self.shape(), (1, 1), "broadcast_scalar expects 1x1");
        self.tape.unary(self.id, Op::BroadcastScalar(self.id), |a| {
            Array2::from_elem((rows, cols), a[[0, 0]])
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        assert!(start <= end && end <= self.shape().1, "slice_cols out of range");
        self.tape.unary(self.id, Op::SliceCols(self.id, start), |a| {
            a.slice(s![.., start..end]).to_owned()
        })
    }

    /// Embed into a zero matrix of width `total`, starting at column `start`.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let (_, c) = self.shape();
        assert!(start + c <= total, "pad_cols out of range");
        self.tape.unary(self.id, Op::PadCols(self.id, start), |a| {
            let mut out = Array2::zeros((a.nrows(), total));
            out.slice_mut(s![.., start..start + c]).assign(&a);
            out
        })
    }

    /// Row-wise maximum as a constant (r, 1) column.
    fn row_max_const(self) -> Var<'t> {
        let m = self.with_value(|a| {
            a.map_axis(Axis(1), |row| {
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .insert_axis(Axis(1))
        });
        self.tape.constant(m)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let (_, c) = self.shape();
        let shifted = self - self.row_max_const().broadcast_cols(c);
        let e = shifted.exp();
        e / e.sum_rows().broadcast_cols(c)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let (_, c) = self.shape();
        let shifted = self - self.row_max_const().broadcast_cols(c);
        let lse = shifted.exp().sum_rows().ln();
        shifted - lse.broadcast_cols(c)
    }

    /// `x` where positive, `slope * x` elsewhere.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let mask = self.with_value(|a| a.mapv(|x| if x > 0.0 { 1.0 } else { slope }));
        self * self.tape.constant(mask)
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let (mask, fill) = self.with_value(|a| {
            (
                a.mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }),
                a.mapv(|x| if x < lo { lo } else if x > hi { hi } else { 0.0 }),
            )
        });
        self * self.tape.constant(mask) + self.tape.constant(fill)
    }

    /// Multiply by a constant matrix of the same shape.
    pub fn mul_const(self, c: Array2<f64>) -> Var<'t> {
        self * self.tape.constant(c)
    }
}

/// Horizontal concatenation.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape;
    let rows = parts[0].shape().0;
    for p in parts {
        assert_eq!(p.shape().0, rows, "concat_cols: row count mismatch");
    }
    let value = {
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
        concatenate(Axis(1), &views).expect("row counts checked")
    };
    let rg = parts.iter().any(|p| tape.requires(p.id));
    tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "add");
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| &a + &b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "sub");
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| &a - &b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "mul");
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| &a * &b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "div");
        self.tape
            .binary(self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| &a / &b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.mapv(|x| -x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central_diff(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn composite(x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let wv = tape.var(w.clone());
        let h = xv.matmul(wv).leaky_relu(0.2);
        let p = h.softmax_rows();
        let q = (h.square().add_scalar(1.0)).sqrt().ln();
        (p * q).sum_all().item() + h.exp().mean_all().item()
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let x = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let w = array![[0.4, -0.2], [0.1, 0.9], [-0.6, 0.3]];
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let wv = tape.var(w.clone());
        let h = xv.matmul(wv).leaky_relu(0.2);
        let p = h.softmax_rows();
        let q = (h.square().add_scalar(1.0)).sqrt().ln();
        let loss = (p * q).sum_all() + h.exp().mean_all();
        let g = tape.grad(loss, &[xv, wv]);
        let fd_x = central_diff(|x| composite(x, &w), &x, 1e-6);
        let fd_w = central_diff(|w| composite(&x, w), &w, 1e-6);
        assert_close(&g[0].value(), &fd_x, 1e-6);
        assert_close(&g[1].value(), &fd_w, 1e-6);
    }

    #[test]
    fn structural_ops_have_correct_gradients() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            let v = tape.var(x.clone());
            let a = v.slice_cols(1, 3).pad_cols(0, 4);
            let b = concat_cols(&[v, v.sum_rows()]);
            let c = (a * b).t().sum_cols().broadcast_rows(3);
            let d = v.sum_cols().broadcast_rows(2) / v.add_scalar(1.0);
            c.sum_all().item() + d.log_softmax_rows().sum_all().item() * 0.3
                + (-v).scale(2.0).mean_cols().sum_all().item()
        };
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let a = v.slice_cols(1, 3).pad_cols(0, 4);
        let b = concat_cols(&[v, v.sum_rows()]);
        let c = (a * b).t().sum_cols().broadcast_rows(3);
        let d = v.sum_cols().broadcast_rows(2) / v.add_scalar(1.0);
        let loss = c.sum_all() + d.log_softmax_rows().sum_all().scale(0.3)
            + (-v).scale(2.0).mean_cols().sum_all();
        let g = tape.grad(loss, &[v]);
        assert_close(&g[0].value(), &central_diff(f, &x, 1e-6), 1e-6);
    }

    #[test]
    fn second_order_gradient_of_gradient_norm() {
        // f(x) = sum(tanh-free smooth net); check d/dw ||df/dx||^2 by finite differences.
        let x = array![[0.3, -0.2], [0.1, 0.4]];
        let w = array![[0.5, -0.3, 0.2], [0.7, 0.1, -0.4]];
        let penalty = |w: &Array2<f64>| {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let wv = tape.constant(w.clone());
            let out = xv.matmul(wv).exp().sum_all();
            let gx = tape.grad(out, &[xv])[0];
            gx.square().sum_all().item()
        };
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let wv = tape.var(w.clone());
        let out = xv.matmul(wv).exp().sum_all();
        let gx = tape.grad(out, &[xv])[0];
        let pen = gx.square().sum_all();
        let gw = tape.grad(pen, &[wv])[0].value();
        assert_close(&gw, &central_diff(penalty, &w, 1e-6), 1e-5);
    }

    #[test]
    fn independent_input_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[1.0, 2.0]]);
        let b = tape.var(array![[3.0]]);
        let loss = a.sum_all();
        let g = tape.grad(loss, &[a, b]);
        assert_eq!(g[1].value(), array![[0.0]]);
        assert_eq!(g[0].value(), array![[1.0, 1.0]]);
    }

    #[test]
    fn constants_block_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[2.0]]);
        let loss = (a * a.detach()).sum_all();
        assert_eq!(tape.grad(loss, &[a])[0].item(), 2.0);
    }

    #[test]
    fn clamp_zeroes_gradient_outside_range() {
        let tape = Tape::new();
        let a = tape.var(array![[-10.0, 0.5, 10.0]]);
        let c = a.clamp(-7.0, 7.0);
        assert_eq!(c.value(), array![[-7.0, 0.5, 7.0]]);
        let g = tape.grad(c.sum_all(), &[a])[0].value();
        assert_eq!(g, array![[0.0, 1.0, 0.0]]);
    }
}
