//! Reverse-mode automatic differentiation over a flat tape of [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! in execution order and walks the tape backwards in [`Graph::backward`].
//! Non-differentiable reads of intermediate values go through
//! [`Graph::detach`] / [`Graph::detached_value`], which can record their
//! results and replay them later. Replay makes stop-gradient semantics
//! exact under finite differences: perturbed evaluations see the same
//! detached constants as the analytic pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::special;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Record/replay buffer for detached values.
#[derive(Debug, Clone, Default)]
pub enum Trace<T> {
    #[default]
    Off,
    Record(Vec<Tensor<T>>),
    Replay { values: Vec<Tensor<T>>, cursor: usize },
}

impl<T: Scalar> Trace<T> {
    pub fn record() -> Self {
        Trace::Record(Vec::new())
    }

    /// Converts a finished recording into a replay buffer.
    pub fn into_replay(self) -> Self {
        match self {
            Trace::Record(values) => Trace::Replay { values, cursor: 0 },
            Trace::Replay { values, .. } => Trace::Replay { values, cursor: 0 },
            Trace::Off => Trace::Off,
        }
    }

    pub fn rewound(&self) -> Self {
        self.clone().into_replay()
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    RowScale(Var, Vec<T>),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        qidx: Vec<usize>,
        heads: usize,
        scale: T,
        weights: Vec<T>,
    },
    Sum(Var),
    LaplaceNll {
        loc: Var,
        scale: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
    },
    VonMisesNll {
        loc: Var,
        conc: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
    },
    LogSoftmaxRows(Var, Vec<T>),
    LogSumExpRows(Var, Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of every tape node after a backward pass.
#[derive(Debug)]
pub struct NodeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> NodeGrads<T> {
    /// Gradient of the loss w.r.t. an intermediate value; `None` when the
    /// value does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    trace: Trace<T>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(4096),
            param_vars: vec![None; store.len()],
            trace: Trace::Off,
            dropout: None,
        }
    }

    pub fn with_trace(mut self, trace: Trace<T>) -> Self {
        self.trace = trace;
        self
    }

    /// Enables dropout at `rate` driven by `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn take_trace(&mut self) -> Trace<T> {
        std::mem::take(&mut self.trace)
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn trace_value(&mut self, t: Tensor<T>) -> Tensor<T> {
        match &mut self.trace {
            Trace::Off => t,
            Trace::Record(values) => {
                values.push(t.clone());
                t
            }
            Trace::Replay { values, cursor } => {
                let r = values
                    .get(*cursor)
                    .expect("replay trace exhausted: evaluation diverged from recording")
                    .clone();
                assert_eq!(r.shape(), t.shape(), "replayed value shape mismatch");
                *cursor += 1;
                r
            }
        }
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        let t = self.trace_value(t);
        self.constant(t)
    }

    /// The value of `v` for non-differentiable use (geometry, selection).
    pub fn detached_value(&mut self, v: Var) -> Tensor<T> {
        let t = self.value(v).clone();
        self.trace_value(t)
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(b), (1, n), "bias shape mismatch");
        let mut out = self.value(x).clone();
        let bv = &self.value(b).data;
        for r in 0..m {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= v;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o += c;
        }
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o *= c;
        }
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn mul_const(&mut self, a: Var, mask: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), mask.shape(), "mask shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &m) in out.data.iter_mut().zip(&mask.data) {
            *o *= m;
        }
        let ng = self.needs(a);
        self.push(out, Op::MulConst(a, mask), ng)
    }

    /// Multiplies row `r` by `s[r]`.
    pub fn row_scale(&mut self, a: Var, s: Vec<T>) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(m, s.len(), "row scale length mismatch");
        let mut out = self.value(a).clone();
        for (r, &sv) in s.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= sv;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowScale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o = gelu(*o);
        }
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o = softplus(*o);
        }
        let ng = self.needs(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let eps = T::of(1e-5);
        let nf = T::of(n as f64);
        let xv = self.value(x);
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = Tensor::zeros(m, n);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out.data[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Inverted dropout; identity when dropout is disabled.
    pub fn dropout(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return a;
        };
        let rate = *rate;
        let keep = T::of(1.0 / (1.0 - rate));
        let data = (0..m * n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(a, Tensor::from_vec(m, n, data))
    }

    // ---- structure --------------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), n);
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < m, "gather index {r} out of range {m}");
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, n, "concat_rows width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(rows, n, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, m, "concat_cols height mismatch");
            for r in 0..m {
                out.data[r * total + off..r * total + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice out of range");
        let av = self.value(a);
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Sparse multi-head attention over an explicit pair list.
    ///
    /// `k` and `v` hold one row per pair, `qidx[p]` is the query row of pair
    /// `p`. Each query's softmax runs over its own pairs; queries without
    /// pairs produce a zero row.
    pub fn pair_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        qidx: Vec<usize>,
        heads: usize,
    ) -> Var {
        let (nq, d) = self.shape(q);
        let (np, dk) = self.shape(k);
        assert_eq!(dk, d);
        assert_eq!(self.shape(v), (np, d));
        assert_eq!(qidx.len(), np);
        assert_eq!(d % heads, 0, "embedding not divisible by heads");
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut scores = vec![T::zero(); np * heads];
        let mut maxes = vec![T::neg_infinity(); nq * heads];
        for p in 0..np {
            let qr = qv.row(qidx[p]);
            let kr = kv.row(p);
            for h in 0..heads {
                let mut s = T::zero();
                for j in h * hd..(h + 1) * hd {
                    s += qr[j] * kr[j];
                }
                s *= scale;
                scores[p * heads + h] = s;
                let m = &mut maxes[qidx[p] * heads + h];
                if s > *m {
                    *m = s;
                }
            }
        }
        let mut sums = vec![T::zero(); nq * heads];
        for p in 0..np {
            for h in 0..heads {
                let e = (scores[p * heads + h] - maxes[qidx[p] * heads + h]).exp();
                scores[p * heads + h] = e;
                sums[qidx[p] * heads + h] += e;
            }
        }
        let mut out = Tensor::zeros(nq, d);
        for p in 0..np {
            let vr = vv.row(p);
            let qi = qidx[p];
            for h in 0..heads {
                let w = scores[p * heads + h] / sums[qi * heads + h];
                scores[p * heads + h] = w;
                let orow = &mut out.data[qi * d + h * hd..qi * d + (h + 1) * hd];
                for (o, &x) in orow.iter_mut().zip(&vr[h * hd..(h + 1) * hd]) {
                    *o += w * x;
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                qidx,
                heads,
                scale,
                weights: scores,
            },
            ng,
        )
    }

    /// Attention weights of a [`Graph::pair_attention`] node, `[pair * heads + h]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---- reductions and likelihoods ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<T>();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `sum w * (ln(2 b) + |t - mu| / b)` elementwise over matching shapes.
    pub fn laplace_nll(&mut self, loc: Var, scale: Var, target: Tensor<T>, weight: Tensor<T>) -> Var {
        let sh = self.shape(loc);
        assert_eq!(self.shape(scale), sh);
        assert_eq!(target.shape(), sh);
        assert_eq!(weight.shape(), sh);
        let (lv, sv) = (self.value(loc), self.value(scale));
        let two = T::of(2.0);
        let mut s = T::zero();
        for i in 0..lv.len() {
            let w = weight.data[i];
            if w != T::zero() {
                let b = sv.data[i];
                s += w * ((two * b).ln() + (target.data[i] - lv.data[i]).abs() / b);
            }
        }
        let ng = self.needs(loc) || self.needs(scale);
        self.push(
            Tensor::scalar(s),
            Op::LaplaceNll {
                loc,
                scale,
                target,
                weight,
            },
            ng,
        )
    }

    /// `sum w * (ln(2 pi I0(k)) - k cos(t - mu))` elementwise.
    pub fn von_mises_nll(&mut self, loc: Var, conc: Var, target: Tensor<T>, weight: Tensor<T>) -> Var {
        let sh = self.shape(loc);
        assert_eq!(self.shape(conc), sh);
        assert_eq!(target.shape(), sh);
        assert_eq!(weight.shape(), sh);
        let (lv, cv) = (self.value(loc), self.value(conc));
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut s = T::zero();
        for i in 0..lv.len() {
            let w = weight.data[i];
            if w != T::zero() {
                let k = cv.data[i].f64();
                let d = (target.data[i] - lv.data[i]).f64();
                s += w * T::of(ln2pi + special::log_i0(k) - k * d.cos());
            }
        }
        let ng = self.needs(loc) || self.needs(conc);
        self.push(
            Tensor::scalar(s),
            Op::VonMisesNll {
                loc,
                conc,
                target,
                weight,
            },
            ng,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.shape();
        let mut out = Tensor::zeros(m, n);
        let mut probs = vec![T::zero(); m * n];
        for r in 0..m {
            let row = av.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for c in 0..n {
                out.data[r * n + c] = row[c] - lse;
                probs[r * n + c] = (row[c] - lse).exp();
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmaxRows(a, probs), ng)
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.shape();
        let mut out = Tensor::zeros(m, 1);
        let mut soft = vec![T::zero(); m * n];
        for r in 0..m {
            let row = av.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.data[r] = lse;
            for c in 0..n {
                soft[r * n + c] = (row[c] - lse).exp();
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSumExpRows(a, soft), ng)
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from the scalar `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> NodeGrads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backward_node(i, &gout, &mut g, grads);
            g[i] = Some(gout);
        }
        NodeGrads { grads: g }
    }

    fn acc<'a>(&self, g: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(g[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backward_node(
        &self,
        i: usize,
        go: &Tensor<T>,
        g: &mut [Option<Tensor<T>>],
        pg: &mut Gradients<T>,
    ) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => pg.accumulate(*id, go),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.needs(*a) {
                    let bv = &self.value(*b).data;
                    let ga = self.acc(g, *a).unwrap();
                    matmul_bt_acc(&go.data, bv, &mut ga.data, m, n, k);
                }
                if self.needs(*b) {
                    let av = &self.value(*a).data;
                    let gb = self.acc(g, *b).unwrap();
                    matmul_at_acc(av, &go.data, &mut gb.data, m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(g, *x) {
                    gx.add_assign(go);
                }
                if let Some(gb) = self.acc(g, *b) {
                    for r in 0..go.rows {
                        for (o, &v) in gb.data.iter_mut().zip(go.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.add_assign(go);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gb.add_assign(go);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.add_assign(go);
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (o, &v) in gb.data.iter_mut().zip(&go.data) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data.clone();
                    let ga = self.acc(g, *a).unwrap();
                    for ((o, &d), &y) in ga.data.iter_mut().zip(&go.data).zip(&bv) {
                        *o += d * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data.clone();
                    let gb = self.acc(g, *b).unwrap();
                    for ((o, &d), &x) in gb.data.iter_mut().zip(&go.data).zip(&av) {
                        *o += d * x;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.add_assign(go);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &d) in ga.data.iter_mut().zip(&go.data) {
                        *o += d * *c;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &d), &m) in ga.data.iter_mut().zip(&go.data).zip(&mask.data) {
                        *o += d * m;
                    }
                }
            }
            Op::RowScale(a, s) => {
                let n = go.cols;
                if let Some(ga) = self.acc(g, *a) {
                    for (r, &sv) in s.iter().enumerate() {
                        for c in 0..n {
                            ga.data[r * n + c] += go.data[r * n + c] * sv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data.clone();
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &d), &x) in ga.data.iter_mut().zip(&go.data).zip(&av) {
                        *o += d * gelu_grad(x);
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data.clone();
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &d), &x) in ga.data.iter_mut().zip(&go.data).zip(&av) {
                        *o += d * sigmoid(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = go.shape();
                let gv = self.value(*gamma).data.clone();
                if let Some(gg) = self.acc(g, *gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            gg.data[c] += go.data[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(g, *beta) {
                    for r in 0..m {
                        for c in 0..n {
                            gb.data[c] += go.data[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    let nf = T::of(n as f64);
                    for r in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = go.data[r * n + c] * gv[c];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = go.data[r * n + c] * gv[c];
                            gx.data[r * n + c] +=
                                rstd[r] * (dh - s1 / nf - xhat[r * n + c] * s2 / nf);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.acc(g, *a) {
                    let n = go.cols;
                    for (i, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga.data[r * n + c] += go.data[i * n + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let n = go.cols;
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if let Some(gp) = self.acc(g, p) {
                        for (o, &d) in gp.data.iter_mut().zip(&go.data[off * n..(off + rows) * n]) {
                            *o += d;
                        }
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = go.shape();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(gp) = self.acc(g, p) {
                        for r in 0..m {
                            for c in 0..w {
                                gp.data[r * w + c] += go.data[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = go.shape();
                let n = self.shape(*a).1;
                if let Some(ga) = self.acc(g, *a) {
                    for r in 0..m {
                        for c in 0..len {
                            ga.data[r * n + start + c] += go.data[r * len + c];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &d) in ga.data.iter_mut().zip(&go.data) {
                        *o += d;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                qidx,
                heads,
                scale,
                weights,
            } => self.attention_backward(go, g, *q, *k, *v, qidx, *heads, *scale, weights),
            Op::Sum(a) => {
                let d = go.data[0];
                if let Some(ga) = self.acc(g, *a) {
                    for o in &mut ga.data {
                        *o += d;
                    }
                }
            }
            Op::LaplaceNll {
                loc,
                scale,
                target,
                weight,
            } => {
                let d = go.data[0];
                let lv = self.value(*loc).data.clone();
                let sv = self.value(*scale).data.clone();
                if let Some(gl) = self.acc(g, *loc) {
                    for i in 0..lv.len() {
                        let w = weight.data[i];
                        if w != T::zero() {
                            let r = target.data[i] - lv[i];
                            let sign = if r > T::zero() {
                                -T::one()
                            } else if r < T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            };
                            gl.data[i] += d * w * sign / sv[i];
                        }
                    }
                }
                if let Some(gs) = self.acc(g, *scale) {
                    for i in 0..lv.len() {
                        let w = weight.data[i];
                        if w != T::zero() {
                            let b = sv[i];
                            let r = (target.data[i] - lv[i]).abs();
                            gs.data[i] += d * w * (T::one() / b - r / (b * b));
                        }
                    }
                }
            }
            Op::VonMisesNll {
                loc,
                conc,
                target,
                weight,
            } => {
                let d = go.data[0];
                let lv = self.value(*loc).data.clone();
                let cv = self.value(*conc).data.clone();
                if let Some(gl) = self.acc(g, *loc) {
                    for i in 0..lv.len() {
                        let w = weight.data[i];
                        if w != T::zero() {
                            gl.data[i] += d * w * (-cv[i] * (target.data[i] - lv[i]).sin());
                        }
                    }
                }
                if let Some(gc) = self.acc(g, *conc) {
                    for i in 0..lv.len() {
                        let w = weight.data[i];
                        if w != T::zero() {
                            let r = T::of(special::i1_over_i0(cv[i].f64()));
                            gc.data[i] += d * w * (r - (target.data[i] - lv[i]).cos());
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a, probs) => {
                let (m, n) = go.shape();
                if let Some(ga) = self.acc(g, *a) {
                    for r in 0..m {
                        let s: T = go.row(r).iter().copied().sum();
                        for c in 0..n {
                            ga.data[r * n + c] += go.data[r * n + c] - probs[r * n + c] * s;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a, soft) => {
                let n = self.shape(*a).1;
                if let Some(ga) = self.acc(g, *a) {
                    for r in 0..go.rows {
                        for c in 0..n {
                            ga.data[r * n + c] += go.data[r] * soft[r * n + c];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        go: &Tensor<T>,
        g: &mut [Option<Tensor<T>>],
        q: Var,
        k: Var,
        v: Var,
        qidx: &[usize],
        heads: usize,
        scale: T,
        w: &[T],
    ) {
        let (nq, d) = self.shape(q);
        let np = qidx.len();
        let hd = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        // dw[p,h] = dO[q,h-slice] . V[p,h-slice]
        let mut dw = vec![T::zero(); np * heads];
        for p in 0..np {
            let orow = go.row(qidx[p]);
            let vr = vv.row(p);
            for h in 0..heads {
                let mut s = T::zero();
                for j in h * hd..(h + 1) * hd {
                    s += orow[j] * vr[j];
                }
                dw[p * heads + h] = s;
            }
        }
        let mut wdw = vec![T::zero(); nq * heads];
        for p in 0..np {
            for h in 0..heads {
                wdw[qidx[p] * heads + h] += w[p * heads + h] * dw[p * heads + h];
            }
        }
        let mut ds = vec![T::zero(); np * heads];
        for p in 0..np {
            for h in 0..heads {
                ds[p * heads + h] =
                    w[p * heads + h] * (dw[p * heads + h] - wdw[qidx[p] * heads + h]) * scale;
            }
        }
        if self.needs(v) {
            let mut gv = Tensor::zeros(np, d);
            for p in 0..np {
                let orow = go.row(qidx[p]);
                for h in 0..heads {
                    let wp = w[p * heads + h];
                    for j in h * hd..(h + 1) * hd {
                        gv.data[p * d + j] = wp * orow[j];
                    }
                }
            }
            self.acc(g, v).unwrap().add_assign(&gv);
        }
        if self.needs(q) {
            let mut gq = Tensor::zeros(nq, d);
            for p in 0..np {
                let kr = kv.row(p);
                let qi = qidx[p];
                for h in 0..heads {
                    let s = ds[p * heads + h];
                    for j in h * hd..(h + 1) * hd {
                        gq.data[qi * d + j] += s * kr[j];
                    }
                }
            }
            self.acc(g, q).unwrap().add_assign(&gq);
        }
        if self.needs(k) {
            let mut gk = Tensor::zeros(np, d);
            for p in 0..np {
                let qr = qv.row(qidx[p]);
                for h in 0..heads {
                    let s = ds[p * heads + h];
                    for j in h * hd..(h + 1) * hd {
                        gk.data[p * d + j] = s * qr[j];
                    }
                }
            }
            self.acc(g, k).unwrap().add_assign(&gk);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
