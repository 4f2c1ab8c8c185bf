//! Tape of dense matrix operations with reverse-mode differentiation.
//!
//! Every value is a 2-D `f64` matrix; scalars are `1×1`. Nodes are appended
//! in creation order, so the reverse of that order is a valid topological
//! order for the backward sweep.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Gelu(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    NormalizeRows(Var, Vec<f64>),
    NormalizeCols(Var, Vec<f64>, Vec<bool>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    Grl(Var, f64),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Per-column statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of one id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    // ---- elementwise binary ops with broadcasting over unit dimensions ----

    fn binary(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let rows = broadcast_dim(ra, rb);
        let cols = broadcast_dim(ca, cb);
        let av = self.value(a).broadcast((rows, cols)).expect("broadcast lhs");
        let bv = self.value(b).broadcast((rows, cols)).expect("broadcast rhs");
        let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: fn(Var) -> Op, f: fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(out, op(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus, softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs, f64::abs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu, gelu)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `n×m → 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Row sums, `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    // ---- structural ----

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((idx.len(), x.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&x.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat rows: column mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat cols: row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start, end), rg)
    }

    // ---- fused layers ----

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `1×m`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column-wise normalization with batch statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.ncols());
        let mut means = Vec::with_capacity(xv.ncols());
        let mut vars = Vec::with_capacity(xv.ncols());
        for mut col in xhat.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
            means.push(mean);
            vars.push(var);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, BatchStats { mean: means, var: vars })
    }

    /// Divides each row by its Euclidean norm. Callers reject zero rows first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a, norms), rg)
    }

    /// Divides each column by `max(‖column‖, eps)`.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut denom = Vec::with_capacity(x.ncols());
        let mut clamped = Vec::with_capacity(x.ncols());
        for mut col in out.columns_mut() {
            let n = col.dot(&col).sqrt();
            let d = n.max(eps);
            col.mapv_inplace(|v| v / d);
            denom.push(d);
            clamped.push(n < eps);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeCols(a, denom, clamped), rg)
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `tokens` rows each, laid out contiguously in `q`, `k`, `v` (`[batch·tokens × width]`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let (rows, width) = self.shape(q);
        assert_eq!(rows, batch * tokens, "attention: row count");
        assert_eq!(width % heads, 0, "attention: width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * tokens..(b + 1) * tokens;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut sc = qh.dot(&kh.t()) * scale;
                for mut row in sc.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![r.clone(), c]).assign(&sc.dot(&vh));
                probs.push(sc);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Gradient reversal: identity forward, upstream gradient scaled by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(a);
        self.push(out, Op::Grl(a, lambda), rg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, go: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Mat| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(go.clone(), self.shape(*a)));
                acc(*b, reduce_to(go.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(go.clone(), self.shape(*a)));
                acc(*b, reduce_to(-go, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, reduce_to(go * bv, av.dim()));
                }
                if self.rg(*b) {
                    acc(*b, reduce_to(go * av, bv.dim()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, reduce_to(go / bv, av.dim()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y/b
                    let g = -(go * y) / bv;
                    acc(*b, reduce_to(g, bv.dim()));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, go.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(go));
                }
            }
            Op::Transpose(a) => acc(*a, go.t().to_owned()),
            Op::Scale(a, c) => acc(*a, go * *c),
            Op::AddScalar(a) => acc(*a, go.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(go).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => acc(*a, Zip::from(go).and(y).map_collect(|&g, &t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, Zip::from(go).and(y).map_collect(|&g, &s| g * s * (1.0 - s))),
            Op::Exp(a) => acc(*a, go * y),
            Op::Log(a) => acc(*a, go / self.value(*a)),
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(go).and(x).map_collect(|&g, &x| g * sigmoid(x)));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(go).and(x).map_collect(|&g, &x| 2.0 * g * x));
            }
            Op::Sqrt(a) => acc(*a, Zip::from(go).and(y).map_collect(|&g, &r| 0.5 * g / r)),
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(go).and(x).map_collect(|&g, &x| g * sign(x)));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, Zip::from(go).and(x).map_collect(|&g, &x| g * gelu_grad(x)));
            }
            Op::Sum(a) => {
                let g = go[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), g));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a);
                acc(*a, go.broadcast(shape).expect("sum_rows grad").to_owned());
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                acc(*a, go.broadcast(shape).expect("sum_cols grad").to_owned());
            }
            Op::LogSoftmax(a) => {
                let mut g = go.clone();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = grow.sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|gv, &lv| *gv -= lv.exp() * s);
                }
                acc(*a, g);
            }
            Op::GatherRows(a, idx) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (o, &src) in idx.iter().enumerate() {
                    let mut row = g.row_mut(src);
                    row += &go.row(o);
                }
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if self.rg(*p) {
                        acc(*p, go.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.rg(*p) {
                        acc(*p, go.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*end]).assign(go);
                acc(*a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    acc(*gamma, (go * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, go.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = go * self.value(*gamma);
                    let m = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = is / m * (m * d - s1 - h * s2));
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    acc(*gamma, (go * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, go.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = go * self.value(*gamma);
                    let n = xhat.nrows() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for c in 0..xhat.ncols() {
                        let dh = dxhat.column(c);
                        let xh = xhat.column(c);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let is = inv_std[c];
                        Zip::from(dx.column_mut(c))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = is / n * (n * d - s1 - h * s2));
                    }
                    acc(*x, dx);
                }
            }
            Op::NormalizeRows(a, norms) => {
                let mut g = go.clone();
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = grow.dot(&yr);
                    let n = norms[r];
                    Zip::from(&mut grow).and(&yr).for_each(|gv, &yv| *gv = (*gv - yv * dot) / n);
                }
                acc(*a, g);
            }
            Op::NormalizeCols(a, denom, clamped) => {
                let mut g = go.clone();
                for (c, mut gcol) in g.columns_mut().into_iter().enumerate() {
                    let d = denom[c];
                    if clamped[c] {
                        gcol.mapv_inplace(|v| v / d);
                    } else {
                        let yc = y.column(c);
                        let dot = gcol.dot(&yc);
                        Zip::from(&mut gcol).and(&yc).for_each(|gv, &yv| *gv = (*gv - yv * dot) / d);
                    }
                }
                acc(*a, g);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let (rows, width) = self.shape(*q);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Array2::zeros((rows, width));
                let mut dk = Array2::zeros((rows, width));
                let mut dv = Array2::zeros((rows, width));
                for b in 0..*batch {
                    let r = b * tokens..(b + 1) * tokens;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let gout = go.slice(s![r.clone(), c.clone()]);
                        let vh = vv.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&gout));
                        let dp = gout.dot(&vh.t());
                        let mut ds = &dp * p;
                        for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let tot = dsr.sum();
                            Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d -= pv * tot);
                        }
                        ds *= scale;
                        let qh = qv.slice(s![r.clone(), c.clone()]);
                        let kh = kv.slice(s![r.clone(), c.clone()]);
                        dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qh));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Grl(a, lambda) => acc(*a, go * (-*lambda)),
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    /// Gradients of every trainable bound parameter, sorted by id.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = graph
            .bindings()
            .filter(|(_, v)| graph.requires_grad(*v))
            .map(|(id, v)| (id, self.get_or_zeros(v, graph.shape(v))))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("incompatible broadcast dims {a} vs {b}")
    }
}

fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
