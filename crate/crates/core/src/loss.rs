//! Winner-take-all Laplace and von Mises regression plus mode classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::config::WinnerSelection;
use crate::decoder::{StepOutput, Unroll, Window};
use crate::geometry::{Pose, ReferenceFrame};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::special::log_i0;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("concentration must be positive, got {0}")]
    NonPositiveConcentration(f64),
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("expected {expected} values, got {found}")]
    Shape { expected: usize, found: usize },
}

/// Negative log density of a 1-D Laplace.
pub fn laplace_nll(loc: f64, scale: f64, target: f64) -> Result<f64, LossError> {
    if !(scale > 0.0) {
        return Err(LossError::NonPositiveScale(scale));
    }
    Ok((2.0 * scale).ln() + (target - loc).abs() / scale)
}

/// Negative log density of a von Mises on the circle.
pub fn von_mises_nll(loc: f64, conc: f64, target: f64) -> Result<f64, LossError> {
    if !(conc > 0.0) {
        return Err(LossError::NonPositiveConcentration(conc));
    }
    Ok((2.0 * std::f64::consts::PI).ln() + log_i0(conc) - conc * (target - loc).cos())
}

/// Index of the endpoint closest to `gt`; ties go to the lowest index.
pub fn select_winner(endpoints: &[[f64; 2]], gt: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in endpoints.iter().enumerate() {
        let d = (e[0] - gt[0]).hypot(e[1] - gt[1]);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// `-log sum_k p_k exp(ll_k)` evaluated stably.
pub fn classification_loss(probs: &[f64], ll: &[f64]) -> Result<f64, LossError> {
    if probs.len() != ll.len() {
        return Err(LossError::Shape {
            expected: probs.len(),
            found: ll.len(),
        });
    }
    if ll.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("log-likelihood"));
    }
    let terms: Vec<f64> = probs.iter().zip(ll).map(|(p, l)| p.ln() + l).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(-(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proposal_pos: f64,
    pub proposal_hd: f64,
    pub refine_pos: f64,
    pub refine_hd: f64,
    pub over_proposal_pos: f64,
    pub over_proposal_hd: f64,
    pub over_refine_pos: f64,
    pub over_refine_hd: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 10] = [
        "proposal_pos",
        "proposal_hd",
        "refine_pos",
        "refine_hd",
        "over_proposal_pos",
        "over_proposal_hd",
        "over_refine_pos",
        "over_refine_hd",
        "classification",
        "total",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.proposal_pos,
            self.proposal_hd,
            self.refine_pos,
            self.refine_hd,
            self.over_proposal_pos,
            self.over_proposal_hd,
            self.over_refine_pos,
            self.over_refine_hd,
            self.classification,
            self.total,
        ]
    }

    fn from_parts(p: [f64; 9]) -> Self {
        Self {
            proposal_pos: p[0],
            proposal_hd: p[1],
            refine_pos: p[2],
            refine_hd: p[3],
            over_proposal_pos: p[4],
            over_proposal_hd: p[5],
            over_refine_pos: p[6],
            over_refine_hd: p[7],
            classification: p[8],
            total: p.iter().sum(),
        }
    }

    pub fn sum_of_parts(&self) -> f64 {
        self.values()[..9].iter().sum()
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    pub fn add(&mut self, o: &Self) {
        let mut a = self.values();
        for (x, y) in a.iter_mut().zip(o.values()) {
            *x += y;
        }
        *self = Self::from_parts(a[..9].try_into().unwrap());
    }

    pub fn scaled(&self, s: f64) -> Self {
        let v = self.values();
        let mut p = [0.0; 9];
        for (x, y) in p.iter_mut().zip(v) {
            *x = y * s;
        }
        Self::from_parts(p)
    }
}

#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub total: Var,
    pub parts: LossBreakdown,
    /// `[future step][agent]`, `None` when the ground truth endpoint is missing.
    pub winners: Vec<Vec<Option<usize>>>,
}

/// Targets and weights of one window family, one row per (agent, mode).
struct Targets<T> {
    pos: Tensor<T>,
    pos_w: Tensor<T>,
    hd: Tensor<T>,
    hd_w: Tensor<T>,
    count: usize,
}

/// Ground truth of agent rows over `times`, expressed in `frames`; only the
/// rows flagged in `active` get nonzero weight.
fn targets<T: Scalar>(
    scene: &Scene,
    agents: &[usize],
    modes: usize,
    frames: &[ReferenceFrame<f64>],
    times: std::ops::Range<usize>,
    t_sub: usize,
    active: &[bool],
) -> Targets<T> {
    let rows = frames.len();
    let mut t = Targets {
        pos: Tensor::zeros(rows, 2 * t_sub),
        pos_w: Tensor::zeros(rows, 2 * t_sub),
        hd: Tensor::zeros(rows, t_sub),
        hd_w: Tensor::zeros(rows, t_sub),
        count: 0,
    };
    let end = scene.t_hist + scene.t_fut;
    for r in 0..rows {
        if !active[r] {
            continue;
        }
        let states = &scene.agents[agents[r / modes]].states;
        for (i, time) in times.clone().enumerate() {
            if time >= end || !states[time].valid {
                continue;
            }
            let s = &states[time];
            let l = frames[r].to_local(Pose::new(s.x, s.y, s.heading));
            let pr = t.pos.row_mut(r);
            pr[2 * i] = T::of(l.x);
            pr[2 * i + 1] = T::of(l.y);
            let wr = t.pos_w.row_mut(r);
            wr[2 * i] = T::one();
            wr[2 * i + 1] = T::one();
            t.hd.row_mut(r)[i] = T::of(l.heading);
            t.hd_w.row_mut(r)[i] = T::one();
            t.count += 1;
        }
    }
    t
}

/// Per-row joint log-likelihood of a main window under ground truth with all
/// modes active, held constant; missing ground truth steps are skipped.
fn window_log_likelihood<T: Scalar>(g: &mut Graph<T>, w: &Window, tg: &Targets<T>) -> Result<Vec<f64>, LossError> {
    let (pl, ps) = (g.detached_value(w.pos_loc), g.detached_value(w.pos_scale));
    let (hl, hc) = (g.detached_value(w.hd_loc), g.detached_value(w.hd_conc));
    let mut out = vec![0.0; pl.rows];
    for (r, o) in out.iter_mut().enumerate() {
        for c in 0..pl.cols {
            if tg.pos_w.at(r, c) != T::zero() {
                *o -= laplace_nll(pl.at(r, c).f64(), ps.at(r, c).f64(), tg.pos.at(r, c).f64())?;
            }
        }
        for c in 0..hl.cols {
            if tg.hd_w.at(r, c) != T::zero() {
                *o -= von_mises_nll(hl.at(r, c).f64(), hc.at(r, c).f64(), tg.hd.at(r, c).f64())?;
            }
        }
    }
    Ok(out)
}

/// Accumulated weighted NLL of one component and its count of supervised steps.
#[derive(Default)]
struct Acc {
    terms: Vec<Var>,
    count: usize,
}

impl Acc {
    fn finish<T: Scalar>(self, g: &mut Graph<T>) -> Var {
        if self.terms.is_empty() || self.count == 0 {
            return g.constant(Tensor::scalar(T::zero()));
        }
        let all = g.concat_rows(&self.terms);
        let s = g.sum(all);
        g.scale(s, T::of(1.0 / self.count as f64))
    }
}

fn supervise<T: Scalar>(g: &mut Graph<T>, w: &Window, tg: &Targets<T>, pos: &mut Acc, hd: &mut Acc) {
    if tg.count == 0 {
        return;
    }
    let lp = g.laplace_nll(w.pos_loc, w.pos_scale, tg.pos.clone(), tg.pos_w.clone());
    let lh = g.von_mises_nll(w.hd_loc, w.hd_conc, tg.hd.clone(), tg.hd_w.clone());
    pos.terms.push(lp);
    hd.terms.push(lh);
    pos.count += tg.count;
    hd.count += tg.count;
}

fn winners_for(
    scene: &Scene,
    unroll: &Unroll,
    steps: &[StepOutput],
    t_sub: usize,
    mode: WinnerSelection,
) -> Vec<Vec<Option<usize>>> {
    let k = unroll.modes;
    let pick = |f: usize| -> Vec<Option<usize>> {
        let time = scene.t_hist + (f + 1) * t_sub - 1;
        unroll
            .agents
            .iter()
            .enumerate()
            .map(|(a, &idx)| {
                let s = &scene.agents[idx].states[time];
                if !s.valid {
                    return None;
                }
                let ends: Vec<[f64; 2]> = (0..k)
                    .map(|m| {
                        let e = steps[f].proposal_global[a * k + m].last().unwrap();
                        [e[0], e[1]]
                    })
                    .collect();
                Some(select_winner(&ends, [s.x, s.y]))
            })
            .collect()
    };
    match mode {
        WinnerSelection::PerStep => (0..steps.len()).map(pick).collect(),
        WinnerSelection::FullHorizon => {
            let last = pick(steps.len() - 1);
            vec![last; steps.len()]
        }
    }
}

/// All nine loss components of one unrolled scene. `overprediction` toggles
/// supervision of the over windows.
pub fn scene_loss<T: Scalar>(
    g: &mut Graph<T>,
    unroll: &Unroll,
    scene: &Scene,
    winner: WinnerSelection,
    overprediction: bool,
) -> Result<SceneLoss, LossError> {
    let steps = &unroll.steps;
    let k = unroll.modes;
    let n = unroll.agents.len();
    if steps.is_empty() {
        return Err(LossError::Shape { expected: 1, found: 0 });
    }
    let t_sub = g.shape(steps[0].proposal.main.hd_loc).1;
    let winners = winners_for(scene, unroll, steps, t_sub, winner);
    let mut acc: [Acc; 8] = Default::default();
    let mut ll = vec![0.0; n * k];
    for (f, st) in steps.iter().enumerate() {
        let active: Vec<bool> = (0..n * k).map(|r| winners[f][r / k] == Some(r % k)).collect();
        let everyone = vec![true; n * k];
        let base = scene.t_hist + f * t_sub;
        let main = base..base + t_sub;
        let over = base + t_sub..base + 2 * t_sub;
        let tg = |frames: &[ReferenceFrame<f64>], times: std::ops::Range<usize>, act: &[bool]| {
            targets::<T>(scene, &unroll.agents, k, frames, times, t_sub, act)
        };
        let [pp, ph, rp, rh, opp, oph, orp, orh] = &mut acc;
        supervise(g, &st.proposal.main, &tg(&st.input_frames, main.clone(), &active), pp, ph);
        if overprediction {
            supervise(g, &st.proposal.over, &tg(&st.input_frames, over.clone(), &active), opp, oph);
        }
        let (final_w, final_frames) = match &st.refined {
            Some(r) => {
                supervise(g, &r.main, &tg(&st.proposal_frames, main.clone(), &active), rp, rh);
                if overprediction {
                    supervise(g, &r.over, &tg(&st.proposal_frames, over, &active), orp, orh);
                }
                (r.main, &st.proposal_frames)
            }
            None => (st.proposal.main, &st.input_frames),
        };
        let full = tg(final_frames, main, &everyone);
        for (l, v) in ll.iter_mut().zip(window_log_likelihood(g, &final_w, &full)?) {
            *l += v;
        }
    }
    if ll.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("classification"));
    }
    let mut parts: Vec<Var> = acc.into_iter().map(|a| a.finish(g)).collect();
    let logp = g.log_softmax_rows(unroll.logits);
    let llv = g.constant(Tensor::from_vec(n, k, ll.iter().map(|&v| T::of(v)).collect()));
    let mix = g.add(logp, llv);
    let lse = g.logsumexp_rows(mix);
    let s = g.sum(lse);
    parts.push(g.scale(s, T::of(-1.0 / n as f64)));

    let mut vals = [0.0; 9];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = g.value(*p).data[0].f64();
    }
    let breakdown = LossBreakdown::from_parts(vals);
    if let Some(name) = breakdown.non_finite() {
        return Err(LossError::NonFinite(name));
    }
    let all = g.concat_rows(&parts);
    let total = g.sum(all);
    Ok(SceneLoss {
        total,
        parts: breakdown,
        winners,
    })
}
