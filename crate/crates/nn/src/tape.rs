//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! index is already a topological order and the backward sweep is a single
//! reverse pass. A cycle cannot be expressed.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::tensor::{gemm, Tensor};

/// What a backward closure sees: parent values, this node's value and the
/// gradient flowing into it.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

/// Returns one gradient per input (`None` for "no contribution").
pub type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}×{})", self.idx, v.rows, v.cols)
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros shaped like the variable when it did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let t = v.value();
                Tensor::zeros(t.rows, t.cols)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|p| nodes[*p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Vec::new(), None, true)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Vec::new(), None, false)
    }

    /// Records an operation computed outside the tape. `backward` receives
    /// the input values in the order of `inputs`.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "variable from a different tape");
        }
        self.push(value, inputs.iter().map(|v| v.idx).collect(), Some(backward), false)
    }

    /// Gradients of the scalar `out` with respect to every node that needs
    /// one. Only leaf gradients are retained.
    pub fn backward(&self, out: Var) -> Grads {
        let nodes = self.nodes.borrow();
        let v = &nodes[out.idx].value;
        assert_eq!(v.len(), 1, "backward needs a scalar output, got {}×{}", v.rows, v.cols);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.idx] = Some(Tensor::scalar(1.0));
        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.parents.is_empty() {
                grads[i] = Some(g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &nodes[*p].value).collect(),
                output: &node.value,
                grad: &g,
            };
            let pg = bw(&ctx);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), nodes[p].value.shape(), "gradient shape at node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Grads { grads }
    }
}

fn shape_panic(op: &str, axis: &str, expected: usize, got: usize) -> ! {
    panic!("shape mismatch in {op} along {axis}: expected {expected}, got {got}")
}

fn broadcast_dim(op: &str, axis: &str, a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        shape_panic(op, axis, a, b)
    }
}

/// Sums `g` (shape r×c) down to `rows × cols` where those are 1 or equal.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows == rows && g.cols == cols {
        return g;
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..g.rows {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..g.cols {
            let oj = if cols == 1 { 0 } else { j };
            out.data[oi * cols + oj] += g.data[i * g.cols + j];
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.value().rows
    }

    pub fn cols(&self) -> usize {
        self.value().cols
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn op(&self, value: Tensor, parents: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        self.tape.custom(parents, value, backward)
    }

    // ------------------------------------------------------------ elementwise

    /// Elementwise `f` with derivative `df(x, f(x))`.
    pub fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value = self.value().map(f);
        self.op(
            value,
            &[self],
            Box::new(move |c| {
                let data = c.inputs[0]
                    .data
                    .iter()
                    .zip(&c.output.data)
                    .zip(&c.grad.data)
                    .map(|((x, y), g)| g * df(*x, *y))
                    .collect();
                vec![Some(Tensor::new(c.output.rows, c.output.cols, data))]
            }),
        )
    }

    /// Broadcasting binary op: each operand's rows and columns must equal the
    /// result's or be 1.
    pub fn binary<F, DA, DB>(self, other: Var<'t>, name: &'static str, f: F, dfa: DA, dfb: DB) -> Var<'t>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64) -> f64 + 'static,
        DB: Fn(f64, f64) -> f64 + 'static,
    {
        let (value, ra, ca, rb, cb) = {
            let a = self.value();
            let b = other.value();
            let r = broadcast_dim(name, "rows", a.rows, b.rows);
            let c = broadcast_dim(name, "cols", a.cols, b.cols);
            let value = if a.shape() == b.shape() {
                Tensor::new(r, c, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
            } else {
                Tensor::from_fn(r, c, |i, j| {
                    let x = a.data[(if a.rows == 1 { 0 } else { i }) * a.cols + if a.cols == 1 { 0 } else { j }];
                    let y = b.data[(if b.rows == 1 { 0 } else { i }) * b.cols + if b.cols == 1 { 0 } else { j }];
                    f(x, y)
                })
            };
            (value, a.rows, a.cols, b.rows, b.cols)
        };
        self.op(
            value,
            &[self, other],
            Box::new(move |c| {
                let (a, b, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (r, cc) = (g.rows, g.cols);
                let mut ga = Tensor::zeros(r, cc);
                let mut gb = Tensor::zeros(r, cc);
                for i in 0..r {
                    for j in 0..cc {
                        let x = a.data[(if ra == 1 { 0 } else { i }) * ca + if ca == 1 { 0 } else { j }];
                        let y = b.data[(if rb == 1 { 0 } else { i }) * cb + if cb == 1 { 0 } else { j }];
                        let gv = g.data[i * cc + j];
                        ga.data[i * cc + j] = gv * dfa(x, y);
                        gb.data[i * cc + j] = gv * dfb(x, y);
                    }
                }
                vec![Some(reduce_to(ga, ra, ca)), Some(reduce_to(gb, rb, cb))]
            }),
        )
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(move |x| x + k, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    // ------------------------------------------------------------ linear algebra

    /// `(m×k)·(k×n)`.
    pub fn matmul(self, b: Var<'t>) -> Var<'t> {
        let value = {
            let (x, y) = (self.value(), b.value());
            if x.cols != y.rows {
                shape_panic("matmul", "inner", x.cols, y.rows);
            }
            let mut out = Tensor::zeros(x.rows, y.cols);
            gemm(x.rows, x.cols, y.cols, 1.0, &x.data, false, &y.data, false, 0.0, &mut out.data);
            out
        };
        self.op(
            value,
            &[self, b],
            Box::new(|c| {
                let (x, y, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (m, k, n) = (x.rows, x.cols, y.cols);
                let mut gx = Tensor::zeros(m, k);
                gemm(m, n, k, 1.0, &g.data, false, &y.data, true, 0.0, &mut gx.data);
                let mut gy = Tensor::zeros(k, n);
                gemm(k, m, n, 1.0, &x.data, true, &g.data, false, 0.0, &mut gy.data);
                vec![Some(gx), Some(gy)]
            }),
        )
    }

    /// `x·W + b` with `W` shaped `in × out` and `b` shaped `1 × out`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let value = {
            let (x, wv, bv) = (self.value(), w.value(), b.value());
            if x.cols != wv.rows {
                shape_panic("linear", "input features", wv.rows, x.cols);
            }
            if bv.cols != wv.cols || bv.rows != 1 {
                shape_panic("linear", "bias", wv.cols, bv.cols);
            }
            let mut out = Tensor::zeros(x.rows, wv.cols);
            for i in 0..x.rows {
                out.data[i * wv.cols..(i + 1) * wv.cols].copy_from_slice(&bv.data);
            }
            gemm(x.rows, x.cols, wv.cols, 1.0, &x.data, false, &wv.data, false, 1.0, &mut out.data);
            out
        };
        self.op(
            value,
            &[self, w, b],
            Box::new(|c| {
                let (x, w, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (m, k, n) = (x.rows, x.cols, w.cols);
                let mut gx = Tensor::zeros(m, k);
                gemm(m, n, k, 1.0, &g.data, false, &w.data, true, 0.0, &mut gx.data);
                let mut gw = Tensor::zeros(k, n);
                gemm(k, m, n, 1.0, &x.data, true, &g.data, false, 0.0, &mut gw.data);
                let gb = reduce_to(g.clone(), 1, n);
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.op(value, &[self], Box::new(|c| vec![Some(c.grad.transpose())]))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(self) -> Var<'t> {
        let (value, r, cc) = {
            let v = self.value();
            (Tensor::scalar(v.sum()), v.rows, v.cols)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| vec![Some(Tensor::full(r, cc, c.grad.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over rows, giving `1 × cols`.
    pub fn sum_rows(self) -> Var<'t> {
        let (value, r) = {
            let v = self.value();
            (reduce_to(v.clone(), 1, v.cols), v.rows)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| {
                let g = c.grad;
                vec![Some(Tensor::from_fn(r, g.cols, |_, j| g.data[j]))]
            }),
        )
    }

    /// Sum over columns, giving `rows × 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let (value, cc) = {
            let v = self.value();
            (reduce_to(v.clone(), v.rows, 1), v.cols)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| {
                let g = c.grad;
                vec![Some(Tensor::from_fn(g.rows, cc, |i, _| g.data[i]))]
            }),
        )
    }

    // ------------------------------------------------------------ reshaping

    /// Same row-major data viewed as `rows × cols`.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let (value, r0, c0) = {
            let v = self.value();
            if v.len() != rows * cols {
                shape_panic("reshape", "element count", v.len(), rows * cols);
            }
            (Tensor::new(rows, cols, v.data.clone()), v.rows, v.cols)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| vec![Some(Tensor::new(r0, c0, c.grad.data.clone()))]),
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(&idx)
    }

    /// Columns picked (possibly repeated) by index.
    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let (value, cc) = {
            let v = self.value();
            if let Some(bad) = idx.iter().find(|&&j| j >= v.cols) {
                shape_panic("gather_cols", "column index", v.cols, *bad);
            }
            (Tensor::from_fn(v.rows, idx.len(), |i, j| v.data[i * v.cols + idx[j]]), v.cols)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| {
                let g = c.grad;
                let mut out = Tensor::zeros(g.rows, cc);
                for i in 0..g.rows {
                    for (j, &src) in idx.iter().enumerate() {
                        out.data[i * cc + src] += g.data[i * g.cols + j];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Rows picked (possibly repeated) by index.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let (value, r) = {
            let v = self.value();
            if let Some(bad) = idx.iter().find(|&&i| i >= v.rows) {
                shape_panic("gather_rows", "row index", v.rows, *bad);
            }
            let mut data = Vec::with_capacity(idx.len() * v.cols);
            for &i in &idx {
                data.extend_from_slice(v.row_slice(i));
            }
            (Tensor::new(idx.len(), v.cols, data), v.rows)
        };
        self.op(
            value,
            &[self],
            Box::new(move |c| {
                let g = c.grad;
                let mut out = Tensor::zeros(r, g.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..g.cols {
                        out.data[i * g.cols + j] += g.data[k * g.cols + j];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    // ------------------------------------------------------------ network ops

    /// Per-row layer normalisation followed by `scale ⊙ x̂ + shift`. Rows
    /// whose variance is below 1e-12 normalise to 0.
    pub fn layer_norm(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let (value, xhat, inv_std) = {
            let (x, s, b) = (self.value(), scale.value(), shift.value());
            if s.cols != x.cols || b.cols != x.cols {
                shape_panic("layer_norm", "features", x.cols, s.cols);
            }
            let n = x.cols as f64;
            let mut xhat = Tensor::zeros(x.rows, x.cols);
            let mut inv_std = vec![0.0; x.rows];
            let mut out = Tensor::zeros(x.rows, x.cols);
            for i in 0..x.rows {
                let row = x.row_slice(i);
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let is = if var < 1e-12 { 0.0 } else { 1.0 / var.sqrt() };
                inv_std[i] = is;
                for j in 0..x.cols {
                    let h = (row[j] - mu) * is;
                    xhat.data[i * x.cols + j] = h;
                    out.data[i * x.cols + j] = s.data[j] * h + b.data[j];
                }
            }
            (out, xhat, inv_std)
        };
        self.op(
            value,
            &[self, scale, shift],
            Box::new(move |c| {
                let (s, g) = (c.inputs[1], c.grad);
                let (r, n) = (g.rows, g.cols);
                let nf = n as f64;
                let mut gx = Tensor::zeros(r, n);
                let mut gs = Tensor::zeros(1, n);
                let mut gb = Tensor::zeros(1, n);
                for i in 0..r {
                    let mut mean_gh = 0.0;
                    let mut mean_gh_h = 0.0;
                    for j in 0..n {
                        let gv = g.data[i * n + j];
                        let h = xhat.data[i * n + j];
                        gs.data[j] += gv * h;
                        gb.data[j] += gv;
                        let gh = gv * s.data[j];
                        mean_gh += gh;
                        mean_gh_h += gh * h;
                    }
                    mean_gh /= nf;
                    mean_gh_h /= nf;
                    let is = inv_std[i];
                    for j in 0..n {
                        let gh = g.data[i * n + j] * s.data[j];
                        let h = xhat.data[i * n + j];
                        gx.data[i * n + j] = is * (gh - mean_gh - h * mean_gh_h);
                    }
                }
                vec![Some(gx), Some(gs), Some(gb)]
            }),
        )
    }

    /// Circular 1-D cross-correlation. `self` is `B × (c_in·L)` with channel
    /// `c` occupying columns `c·L..(c+1)·L`; `kernel` is `c_out × (c_in·K)`
    /// with odd `K`; `bias` is `1 × c_out`. Output is `B × (c_out·L)`:
    /// `y[c, l] = bias[c] + Σ_{c', k} w[c, c', k] · x[c', (l + k − K/2) mod L]`.
    pub fn conv1d_circular(self, kernel: Var<'t>, bias: Var<'t>, length: usize) -> Var<'t> {
        let (value, c_in, ksize) = {
            let (x, w, b) = (self.value(), kernel.value(), bias.value());
            if x.cols % length != 0 {
                shape_panic("conv1d_circular", "input length", length, x.cols);
            }
            let c_in = x.cols / length;
            if w.cols % c_in != 0 {
                shape_panic("conv1d_circular", "kernel input channels", c_in, w.cols);
            }
            let ksize = w.cols / c_in;
            if b.cols != w.rows {
                shape_panic("conv1d_circular", "bias", w.rows, b.cols);
            }
            (conv_forward(&x, &w, &b, length, c_in, ksize), c_in, ksize)
        };
        self.op(
            value,
            &[self, kernel, bias],
            Box::new(move |c| {
                let (x, w, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (gx, gw, gb) = conv_backward(x, w, g, length, c_in, ksize);
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        )
    }
}

fn im2col(x: &Tensor, length: usize, c_in: usize, ksize: usize) -> Vec<f64> {
    let pad = ksize / 2;
    let width = c_in * ksize;
    let mut cols = vec![0.0; x.rows * length * width];
    for b in 0..x.rows {
        let row = x.row_slice(b);
        for l in 0..length {
            let dst = &mut cols[(b * length + l) * width..(b * length + l + 1) * width];
            for ci in 0..c_in {
                for k in 0..ksize {
                    let src = (l + k + length - pad % length) % length;
                    dst[ci * ksize + k] = row[ci * length + src];
                }
            }
        }
    }
    cols
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, length: usize, c_in: usize, ksize: usize) -> Tensor {
    let c_out = w.rows;
    let rows = x.rows * length;
    let cols = im2col(x, length, c_in, ksize);
    let mut yt = vec![0.0; rows * c_out];
    gemm(rows, c_in * ksize, c_out, 1.0, &cols, false, &w.data, true, 0.0, &mut yt);
    let mut out = Tensor::zeros(x.rows, c_out * length);
    for bi in 0..x.rows {
        for l in 0..length {
            for co in 0..c_out {
                out.data[bi * c_out * length + co * length + l] = yt[(bi * length + l) * c_out + co] + b.data[co];
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, length: usize, c_in: usize, ksize: usize) -> (Tensor, Tensor, Tensor) {
    let c_out = w.rows;
    let rows = x.rows * length;
    let width = c_in * ksize;
    let mut gt = vec![0.0; rows * c_out];
    let mut gb = Tensor::zeros(1, c_out);
    for bi in 0..x.rows {
        for co in 0..c_out {
            for l in 0..length {
                let v = g.data[bi * c_out * length + co * length + l];
                gt[(bi * length + l) * c_out + co] = v;
                gb.data[co] += v;
            }
        }
    }
    let cols = im2col(x, length, c_in, ksize);
    let mut gw = Tensor::zeros(c_out, width);
    gemm(c_out, rows, width, 1.0, &gt, true, &cols, false, 0.0, &mut gw.data);
    drop(cols);
    let mut gcols = vec![0.0; rows * width];
    gemm(rows, c_out, width, 1.0, &gt, false, &w.data, false, 0.0, &mut gcols);
    let pad = ksize / 2;
    let mut gx = Tensor::zeros(x.rows, x.cols);
    for bi in 0..x.rows {
        for l in 0..length {
            let src = &gcols[(bi * length + l) * width..(bi * length + l + 1) * width];
            for ci in 0..c_in {
                for k in 0..ksize {
                    let pos = (l + k + length - pad % length) % length;
                    gx.data[bi * x.cols + ci * length + pos] += src[ci * ksize + k];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Concatenates along columns; all parts need the same row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let (value, widths) = {
        let vals: Vec<Ref<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].rows;
        for v in &vals {
            if v.rows != r {
                shape_panic("concat_cols", "rows", r, v.rows);
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        (Tensor::new(r, total, data), widths)
    };
    tape.custom(
        parts,
        value,
        Box::new(move |c| {
            let g = c.grad;
            let mut offset = 0;
            widths
                .iter()
                .map(|&w| {
                    let t = Tensor::from_fn(g.rows, w, |i, j| g.data[i * g.cols + offset + j]);
                    offset += w;
                    Some(t)
                })
                .collect()
        }),
    )
}

/// Concatenates along rows; all parts need the same column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let (value, heights) = {
        let vals: Vec<Ref<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let c = vals[0].cols;
        let mut data = Vec::new();
        for v in &vals {
            if v.cols != c {
                shape_panic("concat_rows", "cols", c, v.cols);
            }
            data.extend_from_slice(&v.data);
        }
        let heights: Vec<usize> = vals.iter().map(|v| v.rows).collect();
        (Tensor::new(heights.iter().sum(), c, data), heights)
    };
    tape.custom(
        parts,
        value,
        Box::new(move |c| {
            let g = c.grad;
            let mut offset = 0;
            heights
                .iter()
                .map(|&h| {
                    let t = Tensor::new(h, g.cols, g.data[offset * g.cols..(offset + h) * g.cols].to_vec());
                    offset += h;
                    Some(t)
                })
                .collect()
        }),
    )
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        Var::add(self, o)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        Var::sub(self, o)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        Var::mul(self, o)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        Var::div(self, o)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.scale(k)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, k: f64) -> Var<'t> {
        self.add_scalar(k)
    }
}
