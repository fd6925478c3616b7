use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{GeneratorConfig, Topology};
use crate::generator::generate_synthetic_scene;
use crate::geometry::Se2;
use crate::scene::{Agent, AgentState, AgentType, MapGraph};

fn line(x0: f64, y0: f64, dx: f64, dy: f64, n: usize) -> Vec<[f64; 2]> {
    (1..=n).map(|i| [x0 + dx * i as f64, y0 + dy * i as f64]).collect()
}

fn random_case(rng: &mut ChaCha8Rng, k: usize, t: usize) -> (Vec<Vec<[f64; 2]>>, Vec<f64>, Vec<[f64; 2]>) {
    let gt = line(0.0, 0.0, rng.random_range(0.5..1.5), rng.random_range(-0.3..0.3), t);
    let traj = (0..k)
        .map(|_| {
            let (ox, oy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            gt.iter().enumerate().map(|(i, p)| [p[0] + ox * i as f64 / t as f64, p[1] + oy]).collect()
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    (traj, raw.iter().map(|v| v / z).collect(), gt)
}

/// Exhaustive reference computations.
mod oracle {
    pub fn d(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
    pub fn fde(t: &[Vec<[f64; 2]>], g: &[[f64; 2]]) -> (f64, usize) {
        let mut best = 0;
        for k in 1..t.len() {
            if d(*t[k].last().unwrap(), *g.last().unwrap()) < d(*t[best].last().unwrap(), *g.last().unwrap()) {
                best = k;
            }
        }
        (d(*t[best].last().unwrap(), *g.last().unwrap()), best)
    }
    pub fn ade_of(t: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
        let mut s = 0.0;
        for i in 0..g.len() {
            s += d(t[i], g[i]);
        }
        s / g.len() as f64
    }
    pub fn top(p: &[f64]) -> usize {
        let mut best = 0;
        for k in 0..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }
}

#[test]
fn min_fde_examples() {
    let gt = vec![[0.0, 0.0]];
    assert_eq!(min_fde(&[gt.clone()], &gt).unwrap(), (0.0, 0));
    let (v, k) = min_fde(&[vec![[0.0, 0.0]], vec![[3.0, 4.0]]], &gt).unwrap();
    assert_eq!((v, k), (0.0, 0));
    assert_eq!(min_fde(&[], &gt), Err(MetricError::NoModes));
}

#[test]
fn min_ade_examples() {
    let gt = line(0.0, 0.0, 1.0, 0.0, 5);
    assert_eq!(min_ade(&[gt.clone()], &gt).unwrap(), 0.0);
    let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    assert!((min_ade(&[off], &gt).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn miss_boundary() {
    let gt = vec![[0.0, 0.0]];
    assert_eq!(miss_rate(&[(vec![gt.clone()], gt.clone())]).unwrap(), 0.0);
    assert_eq!(miss_rate(&[(vec![vec![[2.1, 0.0]]], gt.clone())]).unwrap(), 1.0);
    assert_eq!(miss_rate(&[(vec![vec![[2.0, 0.0]]], gt.clone())]).unwrap(), 0.0);
    assert!(!is_miss(&[vec![[0.0, 2.0]], vec![[9.0, 0.0]]], &gt).unwrap());
}

#[test]
fn brier_examples() {
    let gt = vec![[0.0, 0.0]];
    let t = vec![vec![[1.0, 0.0]], vec![[5.0, 0.0]]];
    assert_eq!(brier_min_fde(&t, &[1.0, 0.0], &gt).unwrap(), 1.0);
    assert!((brier_min_fde(&t, &[0.5, 0.5], &gt).unwrap() - 1.25).abs() < 1e-12);
    let six: Vec<Vec<[f64; 2]>> = (0..6).map(|k| vec![[1.0 + k as f64, 0.0]]).collect();
    let v = brier_min_fde(&six, &[1.0 / 6.0; 6], &gt).unwrap();
    assert!((v - (1.0 + 25.0 / 36.0)).abs() < 1e-12);
}

#[test]
fn top_mode_examples() {
    let gt = line(0.0, 0.0, 1.0, 0.0, 4);
    let good = gt.clone();
    let bad: Vec<[f64; 2]> = gt.iter().map(|p| [p[0], p[1] + 3.0]).collect();
    let single = k1_metrics(std::slice::from_ref(&bad), &[1.0], &gt).unwrap();
    assert_eq!(single.fde, min_fde(std::slice::from_ref(&bad), &gt).unwrap().0);
    let aligned = k1_metrics(&[good.clone(), bad.clone()], &[0.7, 0.3], &gt).unwrap();
    assert_eq!(aligned.fde, 0.0);
    let adversarial = k1_metrics(&[good.clone(), bad.clone()], &[0.3, 0.7], &gt).unwrap();
    assert_eq!(adversarial.mode, 1);
    assert!(adversarial.fde > min_fde(&[good, bad], &gt).unwrap().0);
    let tie = k1_metrics(&[vec![[0.0, 0.0]; 4], vec![[1.0, 0.0]; 4]], &[0.5, 0.5], &gt).unwrap();
    assert_eq!(tie.mode, 0);
}

#[test]
fn horizon_examples() {
    let gt = line(0.0, 0.0, 1.0, 0.0, 60);
    let cases = vec![(vec![gt.clone()], gt.clone())];
    assert!(horizon_curve(&cases, &HORIZONS).unwrap().iter().all(|&(_, v)| v == 0.0));
    let drift: Vec<[f64; 2]> = gt.iter().enumerate().map(|(i, p)| [p[0], p[1] + 0.1 * i as f64]).collect();
    let curve = horizon_curve(&[(vec![drift.clone()], gt.clone())], &HORIZONS).unwrap();
    for (h, v) in curve {
        assert!((v - oracle::d(drift[h - 1], gt[h - 1])).abs() < 1e-12);
    }
    assert!(horizon_curve(&cases, &[61]).is_err());
}

#[test]
fn brute_force_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = Vec::new();
    for _ in 0..100 {
        let (t, p, g) = random_case(&mut rng, 6, 30);
        let (fde, k) = min_fde(&t, &g).unwrap();
        let (of, ok) = oracle::fde(&t, &g);
        assert!((fde - of).abs() < 1e-9 && k == ok);
        assert!((min_ade(&t, &g).unwrap() - oracle::ade_of(&t[ok], &g)).abs() < 1e-9);
        let best_avg = t.iter().map(|m| oracle::ade_of(m, &g)).fold(f64::INFINITY, f64::min);
        assert!((min_ade_with(&t, &g, AdeSelection::BestAverage).unwrap() - best_avg).abs() < 1e-9);
        assert!((brier_min_fde(&t, &p, &g).unwrap() - ((1.0 - p[ok]).powi(2) + of)).abs() < 1e-9);
        let top = k1_metrics(&t, &p, &g).unwrap();
        let tk = oracle::top(&p);
        assert!((top.fde - oracle::d(*t[tk].last().unwrap(), *g.last().unwrap())).abs() < 1e-9);
        assert!((top.ade - oracle::ade_of(&t[tk], &g)).abs() < 1e-9);
        cases.push((t, g));
    }
    let misses = cases.iter().filter(|(t, g)| oracle::fde(t, g).0 > 2.0).count();
    assert!((miss_rate(&cases).unwrap() - misses as f64 / 100.0).abs() < 1e-12);
    let curve = horizon_curve(&cases, &[10, 20, 30]).unwrap();
    for (h, v) in curve {
        let o: f64 = cases
            .iter()
            .map(|(t, g)| t.iter().map(|m| oracle::d(m[h - 1], g[h - 1])).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 100.0;
        assert!((v - o).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn invariants_hold(seed in 0u64..10_000, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p, g) = random_case(&mut rng, k, 12);
        let (fde, best) = min_fde(&t, &g).unwrap();
        for m in &t {
            prop_assert!(fde <= oracle::d(*m.last().unwrap(), *g.last().unwrap()) + 1e-12);
        }
        prop_assert!((fde - oracle::d(*t[best].last().unwrap(), *g.last().unwrap())).abs() < 1e-12);
        let b = brier_min_fde(&t, &p, &g).unwrap();
        prop_assert!(b >= fde);
        prop_assert_eq!(b == fde, p[best] == 1.0);
        let top = k1_metrics(&t, &p, &g).unwrap();
        prop_assert!(fde <= top.fde);
        prop_assert!(min_ade_with(&t, &g, AdeSelection::BestAverage).unwrap() <= top.ade);
        prop_assert!(is_miss(&t, &g).unwrap() <= top.miss);
    }

    #[test]
    fn se2_invariant(seed in 0u64..10_000, ang in -3.1..3.1f64, tx in -100.0..100.0f64, ty in -100.0..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p, g) = random_case(&mut rng, 4, 10);
        let tf = Se2::new(ang, tx, ty);
        let mv = |v: &[[f64; 2]]| -> Vec<[f64; 2]> { v.iter().map(|q| { let (x, y) = tf.apply_xy(q[0], q[1]); [x, y] }).collect() };
        let t2: Vec<Vec<[f64; 2]>> = t.iter().map(|m| mv(m)).collect();
        let g2 = mv(&g);
        prop_assert!((min_fde(&t, &g).unwrap().0 - min_fde(&t2, &g2).unwrap().0).abs() < 1e-9);
        prop_assert!((min_ade(&t, &g).unwrap() - min_ade(&t2, &g2).unwrap()).abs() < 1e-9);
        prop_assert!((brier_min_fde(&t, &p, &g).unwrap() - brier_min_fde(&t2, &p, &g2).unwrap()).abs() < 1e-9);
    }
}

fn turning_scene(total_deg: f64) -> Scene {
    let (t_hist, t_fut) = (5, 10);
    let states = (0..t_hist + t_fut)
        .map(|t| {
            let frac = (t as f64 - (t_hist - 1) as f64).max(0.0) / t_fut as f64;
            AgentState {
                t: t as i64,
                x: t as f64,
                y: 0.0,
                heading: crate::geometry::wrap(3.0 + (total_deg * frac).to_radians()),
                valid: true,
            }
        })
        .collect();
    Scene {
        id: "turn".into(),
        t_hist,
        t_fut,
        map: MapGraph::default(),
        agents: vec![Agent {
            id: "a0".into(),
            agent_type: AgentType::Vehicle,
            states,
        }],
        focal: vec!["a0".into()],
    }
}

#[test]
fn turn_filter_thresholds() {
    let scenes = vec![turning_scene(0.0), turning_scene(90.0), turning_scene(44.0), turning_scene(-45.0), turning_scene(200.0)];
    assert_eq!(filter_turns(&scenes, 45.0), vec![(1, 0), (3, 0), (4, 0)]);
    assert!((future_heading_change(&scenes[4], 0) - 200f64.to_radians()).abs() < 1e-9);
}

#[test]
fn generated_turns_are_detected() {
    let cfg = GeneratorConfig {
        topology: Topology::TIntersection,
        ..GeneratorConfig::default()
    };
    let turns: Vec<Scene> = (0..5).map(|s| generate_synthetic_scene(&cfg, s).unwrap()).collect();
    assert_eq!(filter_turns(&turns, 45.0).len(), 5);
    let cfg = GeneratorConfig {
        topology: Topology::Straight,
        ..GeneratorConfig::default()
    };
    let straight: Vec<Scene> = (0..5).map(|s| generate_synthetic_scene(&cfg, s).unwrap()).collect();
    assert!(filter_turns(&straight, 45.0).is_empty());
}

#[test]
fn report_on_exact_forecast() {
    let scene = turning_scene(30.0);
    let fut: Vec<[f64; 3]> = scene.agents[0].states[5..].iter().map(|s| [s.x, s.y, s.heading]).collect();
    let f = Forecast {
        agent_ids: vec!["a0".into()],
        trajectories: vec![vec![fut.clone(), fut]],
        probabilities: vec![vec![0.5, 0.5]],
    };
    let cases = collect_cases(&[f], &[scene], None);
    let r = report(&cases).unwrap();
    assert_eq!((r.minfde_k, r.minade_k, r.mr_k, r.minfde_1, r.mr_1), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!((r.b_minfde_k - 0.25).abs() < 1e-12);
    assert_eq!((r.n_scenes, r.n_agents), (1, 1));
    assert!(report(&[]).unwrap().n_agents == 0);
}
