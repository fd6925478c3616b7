use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{Builder, Mlp, NnError};
use crate::scalar::Scalar;

pub const MIN_SCALE: f64 = 1e-3;

/// Distribution parameters for one window of `T_sub` steps, one row per
/// (agent, mode).
#[derive(Debug, Clone, Copy)]
pub struct Window {
    /// `[rows, 2 T]`, interleaved `x, y`.
    pub pos_loc: Var,
    /// `[rows, 2 T]`, strictly positive.
    pub pos_scale: Var,
    /// `[rows, T]`
    pub hd_loc: Var,
    /// `[rows, T]`, strictly positive.
    pub hd_conc: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SubTrajectoryPrediction {
    pub main: Window,
    pub over: Window,
}

/// Raw head output split into its parts, before positivity maps.
#[derive(Debug, Clone, Copy)]
pub struct RawWindow {
    pub pos_loc: Var,
    pub pos_scale: Var,
    pub hd_loc: Var,
    pub hd_conc: Var,
}

pub fn positive<T: Scalar>(g: &mut Graph<T>, raw: Var) -> Var {
    let s = g.softplus(raw);
    g.add_scalar(s, T::of(MIN_SCALE))
}

#[derive(Debug, Clone)]
pub struct Detokenizer {
    pub t_sub: usize,
    pub head: Mlp,
    pub logit: Option<Mlp>,
}

impl Detokenizer {
    pub fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<T, R>,
        dim: usize,
        t_sub: usize,
        with_logit: bool,
    ) -> Result<Self, NnError> {
        let mut s = bld.scope("detokenizer");
        Ok(Self {
            head: Mlp::new(&mut s, "head", &[dim, dim, 12 * t_sub])?,
            logit: if with_logit {
                Some(Mlp::new(&mut s, "logit", &[dim, dim, 1])?)
            } else {
                None
            },
            t_sub,
        })
    }

    /// Unconstrained head outputs for both windows.
    pub fn raw<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> [RawWindow; 2] {
        let t = self.t_sub;
        let out = self.head.forward(g, tokens);
        let mut w = |base: usize| RawWindow {
            pos_loc: g.slice_cols(out, base, 2 * t),
            pos_scale: g.slice_cols(out, base + 2 * t, 2 * t),
            hd_loc: g.slice_cols(out, base + 4 * t, t),
            hd_conc: g.slice_cols(out, base + 5 * t, t),
        };
        [w(0), w(6 * t)]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> SubTrajectoryPrediction {
        let [m, o] = self.raw(g, tokens);
        let mut fin = |r: RawWindow| Window {
            pos_loc: r.pos_loc,
            pos_scale: positive(g, r.pos_scale),
            hd_loc: r.hd_loc,
            hd_conc: positive(g, r.hd_conc),
        };
        SubTrajectoryPrediction {
            main: fin(m),
            over: fin(o),
        }
    }

    /// `[rows, 1]` mode logits.
    pub fn mode_logits<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> Option<Var> {
        self.logit.as_ref().map(|m| m.forward(g, tokens))
    }
}
