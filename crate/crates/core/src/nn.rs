//! Layers built on the tape: affine maps, MLPs, layer norm, embeddings and
//! attention blocks with additive relative encodings, plus a finite
//! difference gradient checker.

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, Trace, Var};
use crate::geometry::FourierBands;
use crate::params::{Gradients, Init, ParamError, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("width mismatch in `{layer}`: expected {expected}, found {found}")]
    Width {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding index {index} out of range for `{table}` with {rows} rows")]
    IndexOutOfRange {
        table: String,
        index: usize,
        rows: usize,
    },
    #[error("embedding dim {dim} not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    Dropout(f64),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    Step(f64),
}

/// Registration context: a store, an RNG and a name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
    ) -> Result<ParamId, NnError> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Ok(self.store.register(full, rows, cols, init, decay, self.rng)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self, NnError> {
        Self::with_init(bld, name, fan_in, fan_out, bias, Init::TruncNormal(INIT_STD))
    }

    pub fn zeroed<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, NnError> {
        Self::with_init(bld, name, fan_in, fan_out, true, Init::Zeros)
    }

    fn with_init<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self, NnError> {
        let mut s = bld.scope(name);
        let w = s.param("w", fan_in, fan_out, init, true)?;
        let b = if bias {
            Some(s.param("b", 1, fan_out, Init::Zeros, false)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        assert_eq!(g.shape(x).1, self.fan_in, "linear input width");
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Affine layers with GELU between them; the last layer is affine only.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        widths: &[usize],
    ) -> Result<Self, NnError> {
        assert!(widths.len() >= 2, "an MLP needs at least two widths");
        let mut s = bld.scope(name);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut s, &format!("l{i}"), w[0], w[1], true))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn try_forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, NnError> {
        let found = g.shape(x).1;
        if found != self.in_dim() {
            return Err(NnError::Width {
                layer: "mlp".into(),
                expected: self.in_dim(),
                found,
            });
        }
        Ok(self.forward(g, x))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(bld: &mut Builder<T, R>, name: &str, dim: usize) -> Result<Self, NnError> {
        let mut s = bld.scope(name);
        Ok(Self {
            gamma: s.param("gamma", 1, dim, Init::Ones, false)?,
            beta: s.param("beta", 1, dim, Init::Zeros, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
    name: String,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        rows: usize,
        dim: usize,
        init: Init,
    ) -> Result<Self, NnError> {
        let table = bld.param(name, rows, dim, init, false)?;
        Ok(Self {
            table,
            rows,
            dim,
            name: name.to_string(),
        })
    }

    /// One row per index, `[idx.len(), dim]`.
    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, idx: &[usize]) -> Result<Var, NnError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(NnError::IndexOutOfRange {
                table: self.name.clone(),
                index: bad,
                rows: self.rows,
            });
        }
        let t = g.param(self.table);
        Ok(g.gather_rows(t, idx.to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Gating radius in meters; pairs farther apart are never built.
    pub radius: Option<f64>,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(NnError::Heads {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Dropout(self.dropout));
        }
        Ok(())
    }
}

/// Sparse interaction list for one attention call.
#[derive(Debug, Clone, Default)]
pub struct Pairs<T> {
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    /// One row of raw relative descriptor components per pair.
    pub rel: Vec<T>,
    pub rel_dim: usize,
}

impl<T: Scalar> Pairs<T> {
    pub fn new(rel_dim: usize) -> Self {
        Self {
            query: Vec::new(),
            key: Vec::new(),
            rel: Vec::new(),
            rel_dim,
        }
    }

    pub fn push(&mut self, q: usize, k: usize, rel: &[T]) {
        debug_assert_eq!(rel.len(), self.rel_dim);
        self.query.push(q);
        self.key.push(k);
        self.rel.extend_from_slice(rel);
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

/// Pre-norm attention block with relative encodings added to keys and
/// values, followed by a feed-forward block.
#[derive(Debug, Clone)]
pub struct RelAttention<T> {
    pub spec: AttentionSpec,
    pub bands: FourierBands<T>,
    pub rel_dim: usize,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    rel_mlp: Mlp,
    wkr: Linear,
    wvr: Linear,
    norm_ff: LayerNorm,
    ffn: Mlp,
}

impl<T: Scalar> RelAttention<T> {
    pub fn new<R: Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        spec: AttentionSpec,
        rel_dim: usize,
        bands: FourierBands<T>,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let d = spec.dim;
        let mut s = bld.scope(name);
        let fdim = bands.output_dim(rel_dim);
        Ok(Self {
            norm_q: LayerNorm::new(&mut s, "norm_q", d)?,
            norm_kv: LayerNorm::new(&mut s, "norm_kv", d)?,
            wq: Linear::new(&mut s, "q", d, d, true)?,
            wk: Linear::new(&mut s, "k", d, d, true)?,
            wv: Linear::new(&mut s, "v", d, d, true)?,
            wo: Linear::new(&mut s, "o", d, d, true)?,
            rel_mlp: Mlp::new(&mut s, "rel", &[fdim, d, d])?,
            wkr: Linear::new(&mut s, "kr", d, d, false)?,
            wvr: Linear::new(&mut s, "vr", d, d, false)?,
            norm_ff: LayerNorm::new(&mut s, "norm_ff", d)?,
            ffn: Mlp::new(&mut s, "ffn", &[d, 4 * d, d])?,
            spec,
            bands,
            rel_dim,
        })
    }

    /// Relative embedding `r` for every pair, `[pairs, D]`.
    pub fn rel_embedding(&self, g: &mut Graph<T>, pairs: &Pairs<T>) -> Var {
        let fdim = self.bands.output_dim(self.rel_dim);
        let mut feats = Vec::with_capacity(pairs.len() * fdim);
        for row in pairs.rel.chunks(self.rel_dim) {
            crate::geometry::fourier_features_into(row, &self.bands, &mut feats);
        }
        let f = g.constant(Tensor::from_vec(pairs.len(), fdim, feats));
        self.rel_mlp.forward(g, f)
    }

    /// `queries: [nq, D]`, `keys: [nk, D]`. `extra_rel`, when given, is added
    /// to the relative embedding before the key/value projections. Queries with
    /// `valid[q] == false` or without any pair pass through unchanged.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        keys: Var,
        pairs: &Pairs<T>,
        extra_rel: Option<Var>,
        valid: &[bool],
    ) -> Var {
        let (nq, d) = g.shape(queries);
        assert_eq!(d, self.spec.dim);
        assert_eq!(valid.len(), nq);
        let mut live = vec![T::zero(); nq];
        for &q in &pairs.query {
            if valid[q] {
                live[q] = T::one();
            }
        }
        if live.iter().all(|&m| m == T::zero()) {
            return queries;
        }
        let qn = self.norm_q.forward(g, queries);
        let kn = self.norm_kv.forward(g, keys);
        let attn = if pairs.is_empty() {
            g.constant(Tensor::zeros(nq, d))
        } else {
            let q = self.wq.forward(g, qn);
            let k = self.wk.forward(g, kn);
            let v = self.wv.forward(g, kn);
            let mut r = self.rel_embedding(g, pairs);
            if let Some(e) = extra_rel {
                r = g.add(r, e);
            }
            let kr = self.wkr.forward(g, r);
            let vr = self.wvr.forward(g, r);
            let kp = g.gather_rows(k, pairs.key.clone());
            let vp = g.gather_rows(v, pairs.key.clone());
            let kp = g.add(kp, kr);
            let vp = g.add(vp, vr);
            g.pair_attention(q, kp, vp, pairs.query.clone(), self.spec.heads)
        };
        let o = self.wo.forward(g, attn);
        let o = g.dropout(o);
        let x1 = g.add(queries, o);
        let h = self.norm_ff.forward(g, x1);
        let h = self.ffn.forward(g, h);
        let h = g.dropout(h);
        let x2 = g.add(x1, h);
        let delta = g.sub(x2, queries);
        let delta = g.row_scale(delta, live);
        g.add(queries, delta)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub loss: f64,
}

/// Samples `n` coordinates uniformly over all scalars in the store.
pub fn sample_coords<R: Rng>(store: &ParamStore<f64>, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let total = store.num_scalars();
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for (id, p) in store.iter() {
        offsets.push((acc, id));
        acc += p.value.len();
    }
    let mut picks: Vec<usize> = sample(rng, total, n.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|flat| {
            let pos = offsets.partition_point(|&(o, _)| o <= flat) - 1;
            let (o, id) = offsets[pos];
            (id, flat - o)
        })
        .collect()
}

/// Compares the tape's gradient against central differences on `coords`.
///
/// `loss` builds the scalar loss on a fresh graph. Detached values recorded
/// during the analytic pass are replayed for every perturbed evaluation.
/// `fault` adds 1 to the analytic gradient of one coordinate.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    eps: f64,
    coords: &[(ParamId, usize)],
    fault: Option<(ParamId, usize)>,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Graph<f64>) -> Var,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(NnError::Step(eps));
    }
    let (grads, trace, l0) = {
        let mut g = Graph::new(store).with_trace(Trace::record());
        let out = loss(&mut g);
        let l0 = g.value(out).data[0];
        if !l0.is_finite() {
            return Err(NnError::NonFiniteLoss(l0));
        }
        let mut grads = Gradients::zeros_like(store);
        g.backward(out, &mut grads);
        (grads, g.take_trace().into_replay(), l0)
    };
    let mut eval = |s: &ParamStore<f64>| -> Result<f64, NnError> {
        let mut g = Graph::new(s).with_trace(trace.rewound());
        let out = loss(&mut g);
        let v = g.value(out).data[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NnError::NonFiniteLoss(v))
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        loss: l0,
    };
    for &(id, i) in coords {
        let orig = store.scalar(id, i);
        store.set_scalar(id, i, orig + eps);
        let fp = eval(store);
        store.set_scalar(id, i, orig - eps);
        let fm = eval(store);
        store.set_scalar(id, i, orig);
        let num = (fp? - fm?) / (2.0 * eps);
        let mut ana = grads.get(id).data[i];
        if fault == Some((id, i)) {
            ana += 1.0;
        }
        let err = (ana - num).abs() / num.abs().max(1.0);
        if err >= report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_param = store.get(id).name.clone();
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
