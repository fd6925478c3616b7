//! Displacement metrics over multimodal forecasts.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::Forecast;
use crate::geometry::wrap;
use crate::scene::Scene;

pub const MISS_THRESHOLD: f64 = 2.0;
pub const HORIZONS: [usize; 6] = [10, 20, 30, 40, 50, 60];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("forecast has no modes")]
    NoModes,
    #[error("trajectory has {found} steps, ground truth {expected}")]
    Length { expected: usize, found: usize },
    #[error("probabilities have {found} entries for {expected} modes")]
    Probabilities { expected: usize, found: usize },
}

/// Which mode minADE is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdeSelection {
    /// The mode with the smallest endpoint error.
    #[default]
    BestEndpoint,
    /// The mode with the smallest average error.
    BestAverage,
}

fn check(traj: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<(), MetricError> {
    if traj.is_empty() {
        return Err(MetricError::NoModes);
    }
    for t in traj {
        if t.len() != gt.len() || gt.is_empty() {
            return Err(MetricError::Length {
                expected: gt.len(),
                found: t.len(),
            });
        }
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn argmin(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (k, d) in v.enumerate() {
        if d < best.0 {
            best = (d, k);
        }
    }
    best
}

fn endpoint_error(t: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    dist(t[t.len() - 1], gt[gt.len() - 1])
}

fn average_error(t: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    t.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64
}

/// Smallest endpoint error over modes and the mode attaining it.
pub fn min_fde(traj: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<(f64, usize), MetricError> {
    check(traj, gt)?;
    Ok(argmin(traj.iter().map(|t| endpoint_error(t, gt))))
}

/// Average error of the best-endpoint mode.
pub fn min_ade(traj: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64, MetricError> {
    min_ade_with(traj, gt, AdeSelection::BestEndpoint)
}

pub fn min_ade_with(traj: &[Vec<[f64; 2]>], gt: &[[f64; 2]], sel: AdeSelection) -> Result<f64, MetricError> {
    check(traj, gt)?;
    Ok(match sel {
        AdeSelection::BestEndpoint => average_error(&traj[min_fde(traj, gt)?.1], gt),
        AdeSelection::BestAverage => argmin(traj.iter().map(|t| average_error(t, gt))).0,
    })
}

/// True when every mode ends farther than the threshold from the ground truth.
pub fn is_miss(traj: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<bool, MetricError> {
    Ok(min_fde(traj, gt)?.0 > MISS_THRESHOLD)
}

/// Fraction of cases that are misses; 0 for no cases.
pub fn miss_rate(cases: &[(Vec<Vec<[f64; 2]>>, Vec<[f64; 2]>)]) -> Result<f64, MetricError> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut misses = 0;
    for (t, g) in cases {
        misses += is_miss(t, g)? as usize;
    }
    Ok(misses as f64 / cases.len() as f64)
}

fn check_probs(traj: &[Vec<[f64; 2]>], probs: &[f64]) -> Result<(), MetricError> {
    if probs.len() != traj.len() {
        return Err(MetricError::Probabilities {
            expected: traj.len(),
            found: probs.len(),
        });
    }
    Ok(())
}

/// `(1 - p)^2 + minFDE` with `p` the probability of the best-endpoint mode.
pub fn brier_min_fde(traj: &[Vec<[f64; 2]>], probs: &[f64], gt: &[[f64; 2]]) -> Result<f64, MetricError> {
    check_probs(traj, probs)?;
    let (fde, k) = min_fde(traj, gt)?;
    Ok((1.0 - probs[k]).powi(2) + fde)
}

/// Metrics of the single most probable mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopMode {
    pub mode: usize,
    pub fde: f64,
    pub ade: f64,
    pub miss: bool,
}

pub fn k1_metrics(traj: &[Vec<[f64; 2]>], probs: &[f64], gt: &[[f64; 2]]) -> Result<TopMode, MetricError> {
    check(traj, gt)?;
    check_probs(traj, probs)?;
    let mut mode = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[mode] {
            mode = k;
        }
    }
    let fde = endpoint_error(&traj[mode], gt);
    Ok(TopMode {
        mode,
        fde,
        ade: average_error(&traj[mode], gt),
        miss: fde > MISS_THRESHOLD,
    })
}

/// minFDE over cases with step `h` (1-based) taken as the endpoint.
pub fn horizon_curve(
    cases: &[(Vec<Vec<[f64; 2]>>, Vec<[f64; 2]>)],
    horizons: &[usize],
) -> Result<Vec<(usize, f64)>, MetricError> {
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut sum = 0.0;
        for (t, g) in cases {
            if h == 0 || h > g.len() {
                return Err(MetricError::Length {
                    expected: g.len(),
                    found: h,
                });
            }
            let cut: Vec<Vec<[f64; 2]>> = t.iter().map(|m| m[..h].to_vec()).collect();
            sum += min_fde(&cut, &g[..h])?.0;
        }
        out.push((h, if cases.is_empty() { 0.0 } else { sum / cases.len() as f64 }));
    }
    Ok(out)
}

/// Unwrapped heading change from the last observed state to the end of the
/// future, over consecutive valid states.
pub fn future_heading_change(scene: &Scene, agent: usize) -> f64 {
    let states = &scene.agents[agent].states[scene.t_hist - 1..];
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    for s in states {
        if !s.valid {
            continue;
        }
        if let Some(p) = prev {
            total += wrap(s.heading - p);
        }
        prev = Some(s.heading);
    }
    total
}

/// Focal agents `(scene index, agent index)` whose future turns by at least
/// `threshold_deg`.
pub fn filter_turns(scenes: &[Scene], threshold_deg: f64) -> Vec<(usize, usize)> {
    let thr = threshold_deg.to_radians();
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for a in s.focal_indices() {
            if future_heading_change(s, a).abs() >= thr - 1e-12 {
                out.push((si, a));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b_minfde_k: f64,
    pub minfde_k: f64,
    pub minade_k: f64,
    pub mr_k: f64,
    pub minfde_1: f64,
    pub minade_1: f64,
    pub mr_1: f64,
    pub n_scenes: usize,
    pub n_agents: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "b_minfde_k,minfde_k,minade_k,mr_k,minfde_1,minade_1,mr_1,n_scenes,n_agents";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.b_minfde_k,
            self.minfde_k,
            self.minade_k,
            self.mr_k,
            self.minfde_1,
            self.minade_1,
            self.mr_1,
            self.n_scenes,
            self.n_agents
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("b-minFDE_K", self.b_minfde_k),
            ("minFDE_K", self.minfde_k),
            ("minADE_K", self.minade_k),
            ("MR_K", self.mr_k),
            ("minFDE_1", self.minfde_1),
            ("minADE_1", self.minade_1),
            ("MR_1", self.mr_1),
        ];
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        for (n, v) in rows {
            writeln!(f, "{n:<12} {v:>10.4}")?;
        }
        write!(f, "{} agents in {} scenes", self.n_agents, self.n_scenes)
    }
}

/// One scored agent: K predicted paths, their probabilities and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub scene: usize,
    pub agent: String,
    pub traj: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
    pub gt: Vec<[f64; 2]>,
}

/// Collects focal agents with complete ground truth. `keep` restricts the
/// cases to `(scene index, agent index)` pairs.
pub fn collect_cases(forecasts: &[Forecast], scenes: &[Scene], keep: Option<&[(usize, usize)]>) -> Vec<Case> {
    let mut out = Vec::new();
    for (si, (f, s)) in forecasts.iter().zip(scenes).enumerate() {
        for a in s.focal_indices() {
            if keep.is_some_and(|k| !k.contains(&(si, a))) {
                continue;
            }
            let agent = &s.agents[a];
            let fut = &agent.states[s.t_hist..];
            if fut.iter().any(|st| !st.valid) {
                continue;
            }
            let Some(fi) = f.agent(&agent.id) else { continue };
            out.push(Case {
                scene: si,
                agent: agent.id.clone(),
                traj: f.trajectories[fi].iter().map(|m| m.iter().map(|p| [p[0], p[1]]).collect()).collect(),
                probs: f.probabilities[fi].clone(),
                gt: fut.iter().map(|st| [st.x, st.y]).collect(),
            });
        }
    }
    out
}

pub fn report(cases: &[Case]) -> Result<MetricReport, MetricError> {
    let mut r = MetricReport::default();
    let mut scenes: Vec<usize> = cases.iter().map(|c| c.scene).collect();
    scenes.dedup();
    r.n_scenes = scenes.len();
    r.n_agents = cases.len();
    if cases.is_empty() {
        return Ok(r);
    }
    for c in cases {
        let (fde, _) = min_fde(&c.traj, &c.gt)?;
        r.minfde_k += fde;
        r.minade_k += min_ade(&c.traj, &c.gt)?;
        r.b_minfde_k += brier_min_fde(&c.traj, &c.probs, &c.gt)?;
        r.mr_k += (fde > MISS_THRESHOLD) as u8 as f64;
        let top = k1_metrics(&c.traj, &c.probs, &c.gt)?;
        r.minfde_1 += top.fde;
        r.minade_1 += top.ade;
        r.mr_1 += top.miss as u8 as f64;
    }
    let n = cases.len() as f64;
    for v in [
        &mut r.b_minfde_k,
        &mut r.minfde_k,
        &mut r.minade_k,
        &mut r.mr_k,
        &mut r.minfde_1,
        &mut r.minade_1,
        &mut r.mr_1,
    ] {
        *v /= n;
    }
    Ok(r)
}

/// Splits cases into the `(traj, gt)` pairs used by the aggregate helpers.
pub fn pairs(cases: &[Case]) -> Vec<(Vec<Vec<[f64; 2]>>, Vec<[f64; 2]>)> {
    cases.iter().map(|c| (c.traj.clone(), c.gt.clone())).collect()
}

#[cfg(test)]
mod tests;
