use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::DecoderConfig;
use crate::geometry::{closest_point_on_polyline, relative_descriptor, ReferenceFrame};
use crate::nn::{AttentionSpec, Builder, NnError, Pairs, RelAttention};
use crate::scalar::Scalar;
use crate::scene::MapGraph;

/// Token history of one module: the round inputs of every processed step.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    /// `tokens[round][step]`, each `[rows, D]`.
    pub tokens: Vec<Vec<Var>>,
    /// `frames[step][row]`
    pub frames: Vec<Vec<ReferenceFrame<f64>>>,
    pub valid: Vec<Vec<bool>>,
}

impl Cache {
    pub fn new(rounds: usize) -> Self {
        Self {
            tokens: vec![Vec::new(); rounds],
            frames: Vec::new(),
            valid: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    /// Repeats every row `k` times (agent-major), making each copy a mode.
    pub fn duplicate<T: Scalar>(&mut self, g: &mut Graph<T>, k: usize) {
        for round in &mut self.tokens {
            for v in round.iter_mut() {
                let rows = g.shape(*v).0;
                let idx = (0..rows).flat_map(|r| std::iter::repeat_n(r, k)).collect();
                *v = g.gather_rows(*v, idx);
            }
        }
        for f in &mut self.frames {
            *f = f.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
        }
        for v in &mut self.valid {
            *v = v.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
        }
    }
}

/// Cached round inputs of `round` across `caches`, in the key order used by
/// [`build_pairs`].
pub fn history_keys<T: Scalar>(g: &mut Graph<T>, caches: &[&Cache], round: usize) -> Option<Var> {
    let parts: Vec<Var> = caches.iter().flat_map(|c| c.tokens[round].iter().copied()).collect();
    if parts.is_empty() {
        None
    } else {
        Some(g.concat_rows(&parts))
    }
}

/// Row layout and reference frames of the tokens at one decoder step.
#[derive(Debug, Clone)]
pub struct StepGeometry {
    pub modes: usize,
    pub frames: Vec<ReferenceFrame<f64>>,
    pub valid: Vec<bool>,
}

impl StepGeometry {
    pub fn rows(&self) -> usize {
        self.frames.len()
    }

    pub fn agent(&self, row: usize) -> usize {
        row / self.modes
    }
}

/// Interaction lists for the four attentions of one step.
#[derive(Debug, Clone)]
pub struct StepPairs<T> {
    pub temporal: Pairs<T>,
    pub map: Pairs<T>,
    pub social: Pairs<T>,
    pub mode: Pairs<T>,
}

pub fn map_rel_dim(cfg: &DecoderConfig) -> usize {
    if cfg.line_attention {
        6
    } else {
        3
    }
}

pub fn build_pairs<T: Scalar>(
    geom: &StepGeometry,
    caches: &[&Cache],
    map: &MapGraph,
    map_frames: &[ReferenceFrame<f64>],
    cfg: &DecoderConfig,
) -> StepPairs<T> {
    let rows = geom.rows();
    let r = cfg.radius;
    let mut temporal = Pairs::new(4);
    let mut mp = Pairs::new(map_rel_dim(cfg));
    let mut social = Pairs::new(3);
    let mut mode = Pairs::new(3);
    for q in 0..rows {
        if !geom.valid[q] {
            continue;
        }
        let fq = &geom.frames[q];
        let entries = caches.iter().flat_map(|c| c.frames.iter().zip(&c.valid));
        for (e, (frames, valid)) in entries.enumerate() {
            assert_eq!(frames.len(), rows, "cache rows out of sync with step");
            if valid[q] {
                let d = relative_descriptor(fq, &frames[q]).with_time();
                temporal.push(q, e * rows + q, &d.map(T::of));
            }
        }
        for (m, (poly, fm)) in map.polylines.iter().zip(map_frames).enumerate() {
            let d = relative_descriptor(fq, fm);
            if cfg.line_attention {
                let cp = closest_point_on_polyline(fq.x, fq.y, &poly.points);
                if cp.distance > r {
                    continue;
                }
                let target = ReferenceFrame::new(cp.x, cp.y, cp.tangent, fq.t);
                let c = relative_descriptor(fq, &target).spatial();
                let s = d.spatial();
                mp.push(q, m, &[s[0], s[1], s[2], c[0], c[1], c[2]].map(T::of));
            } else if d.distance <= r {
                mp.push(q, m, &d.spatial().map(T::of));
            }
        }
        let (n, k) = (geom.agent(q), q % geom.modes);
        for other in 0..rows / geom.modes {
            let key = other * geom.modes + k;
            if other == n || !geom.valid[key] {
                continue;
            }
            let d = relative_descriptor(fq, &geom.frames[key]);
            if d.distance <= r {
                social.push(q, key, &d.spatial().map(T::of));
            }
        }
        for kk in 0..geom.modes {
            let key = n * geom.modes + kk;
            if geom.valid[key] {
                let d = relative_descriptor(fq, &geom.frames[key]);
                mode.push(q, key, &d.spatial().map(T::of));
            }
        }
    }
    StepPairs {
        temporal,
        map: mp,
        social,
        mode,
    }
}

/// Temporal, map, social and mode attention, in that order.
#[derive(Debug, Clone)]
pub struct FactoredRound<T> {
    pub temporal: RelAttention<T>,
    pub map: RelAttention<T>,
    pub social: RelAttention<T>,
    pub mode: RelAttention<T>,
}

impl<T: Scalar> FactoredRound<T> {
    pub fn new<R: Rng>(bld: &mut Builder<T, R>, name: &str, cfg: &DecoderConfig, dropout: f64) -> Result<Self, NnError> {
        let spec = AttentionSpec {
            dim: cfg.dim,
            heads: cfg.heads,
            dropout,
            radius: Some(cfg.radius),
        };
        let bands = cfg.bands::<T>();
        let mut s = bld.scope(name);
        Ok(Self {
            temporal: RelAttention::new(&mut s, "temporal", AttentionSpec { radius: None, ..spec }, 4, bands.clone())?,
            map: RelAttention::new(&mut s, "map", spec, map_rel_dim(cfg), bands.clone())?,
            social: RelAttention::new(&mut s, "social", spec, 3, bands.clone())?,
            mode: RelAttention::new(&mut s, "mode", AttentionSpec { radius: None, ..spec }, 3, bands)?,
        })
    }

    /// `history`: concatenated cached tokens of this round, if any.
    /// `mode_extra`: mode and time embeddings added inside mode attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        history: Option<Var>,
        map_tokens: Var,
        pairs: &StepPairs<T>,
        mode_extra: Option<Var>,
        valid: &[bool],
    ) -> Var {
        let mut x = x;
        if let Some(h) = history {
            x = self.temporal.forward(g, x, h, &pairs.temporal, None, valid);
        }
        if !pairs.map.is_empty() {
            x = self.map.forward(g, x, map_tokens, &pairs.map, None, valid);
        }
        x = self.social.forward(g, x, x, &pairs.social, None, valid);
        match mode_extra {
            Some(e) => {
                let xm = g.add(x, e);
                let y = self.mode.forward(g, xm, xm, &pairs.mode, None, valid);
                g.sub(y, e)
            }
            None => self.mode.forward(g, x, x, &pairs.mode, None, valid),
        }
    }
}
