use super::*;
use crate::config::GeneratorConfig;
use crate::generator::generate_synthetic_scene;
use crate::geometry::Se2;

fn small() -> DecoderConfig {
    DecoderConfig {
        fourier_bands: 8,
        ..DecoderConfig::tiny()
    }
}

fn scene_for(cfg: &DecoderConfig, seed: u64) -> Scene {
    let gen = GeneratorConfig {
        min_agents: 3,
        max_agents: 3,
        ..GeneratorConfig::matching(cfg)
    };
    generate_synthetic_scene(&gen, seed).unwrap()
}

fn model(cfg: &DecoderConfig) -> Model<f64> {
    Model::new(cfg, 0.0, 11).unwrap()
}

fn max_diff(a: &Forecast, b: &Forecast) -> f64 {
    let mut m = 0.0f64;
    for (x, y) in a.trajectories.iter().flatten().flatten().zip(b.trajectories.iter().flatten().flatten()) {
        m = m.max((x[0] - y[0]).abs()).max((x[1] - y[1]).abs());
    }
    m
}

/// Zeroes the last layer of a detokenizer head and sets its bias.
fn set_head(m: &mut Model<f64>, refiner: bool, bias: impl Fn(usize) -> f64) {
    let stage = if refiner { m.net.refiner.as_ref().unwrap() } else { &m.net.proposer };
    let last = stage.detokenizer.head.layers.last().unwrap().clone();
    m.params.value_mut(last.w).data.iter_mut().for_each(|v| *v = 0.0);
    let b = m.params.value_mut(last.b.unwrap());
    for (i, v) in b.data.iter_mut().enumerate() {
        *v = bias(i);
    }
}

#[test]
fn forecast_shape_and_probabilities() {
    let cfg = small();
    let m = model(&cfg);
    let scene = scene_for(&cfg, 1);
    let f = m.forecast(&scene).unwrap();
    assert_eq!(f.trajectories.len(), f.agent_ids.len());
    for (traj, p) in f.trajectories.iter().zip(&f.probabilities) {
        assert_eq!(traj.len(), cfg.modes);
        assert!(traj.iter().all(|t| t.len() == cfg.t_fut));
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn paper_horizon_has_six_steps_and_full_caches() {
    let cfg = DecoderConfig {
        dim: 16,
        heads: 2,
        fourier_bands: 4,
        modes: 2,
        t_hist: 50,
        t_fut: 60,
        t_sub: 10,
        ..DecoderConfig::paper()
    };
    let m = model(&cfg);
    let scene = scene_for(&cfg, 2);
    let mut g = Graph::new(&m.params);
    let u = m.net.unroll(&mut g, &scene, RunMode::Training).unwrap();
    assert_eq!(u.steps.len(), 6);
    assert_eq!(u.proposer_cache.steps(), 11);
    assert_eq!(u.refiner_cache.steps(), 11);
    for round in &u.proposer_cache.tokens {
        assert_eq!(round.len(), 11);
    }
    let f = &u.forecast;
    assert!(f.trajectories.iter().flatten().all(|t| t.len() == 60));
}

#[test]
fn bootstrap_cache_length_and_duplicates() {
    let cfg = DecoderConfig {
        t_hist: 20,
        ..small()
    };
    let m = model(&cfg);
    let scene = scene_for(&cfg, 3);
    let mut g = Graph::new(&m.params);
    let prep = m.net.prepare(&mut g, &scene).unwrap();
    let (pc, rc) = m.net.bootstrap_history(&mut g, &prep).unwrap();
    assert_eq!(pc.steps(), 4);
    assert_eq!(rc.steps(), 4);
    for v in pc.tokens.iter().flatten().chain(rc.tokens.iter().flatten()) {
        let t = g.value(*v);
        assert_eq!(t.rows, prep.agents() * cfg.modes);
        for a in 0..prep.agents() {
            for k in 1..cfg.modes {
                assert_eq!(t.row(a * cfg.modes), t.row(a * cfg.modes + k));
            }
        }
    }
}

#[test]
fn bootstrap_is_causal() {
    let cfg = DecoderConfig {
        t_hist: 20,
        ..small()
    };
    let m = model(&cfg);
    let scene = scene_for(&cfg, 4);
    let mut other = scene.clone();
    for a in &mut other.agents {
        for s in &mut a.states[15..19] {
            s.x += 3.0;
            s.y -= 1.0;
        }
    }
    let run = |sc: &Scene| {
        let mut g = Graph::new(&m.params);
        let prep = m.net.prepare(&mut g, sc).unwrap();
        let (pc, rc) = m.net.bootstrap_history(&mut g, &prep).unwrap();
        let pick = |c: &Cache, s: usize| -> Vec<Vec<f64>> { c.tokens.iter().map(|r| g.value(r[s]).data.clone()).collect() };
        (pick(&pc, 2), pick(&rc, 2), pick(&pc, 3))
    };
    let (p2, r2, p3) = run(&scene);
    let (q2, s2, q3) = run(&other);
    assert_eq!(p2, q2);
    assert_eq!(r2, s2);
    assert_ne!(p3, q3);
}

#[test]
fn future_ground_truth_is_never_read() {
    let cfg = small();
    let m = model(&cfg);
    let scene = scene_for(&cfg, 5);
    let mut noisy = scene.clone();
    for (i, a) in noisy.agents.iter_mut().enumerate() {
        for (t, s) in a.states.iter_mut().enumerate().skip(cfg.t_hist) {
            s.x = (i * 31 + t * 7) as f64 % 13.0 - 40.0;
            s.y = (t * 17) as f64 % 5.0;
            s.heading = 0.3 * t as f64 % 3.0;
        }
    }
    assert_eq!(m.forecast(&scene).unwrap(), m.forecast(&noisy).unwrap());
}

#[test]
fn modes_identical_at_init() {
    let cfg = DecoderConfig { modes: 3, ..small() };
    let m = model(&cfg);
    let f = m.forecast(&scene_for(&cfg, 6)).unwrap();
    for (traj, p) in f.trajectories.iter().zip(&f.probabilities) {
        for k in 1..cfg.modes {
            for (a, b) in traj[0].iter().zip(&traj[k]) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-6);
                }
            }
            assert!((p[0] - p[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_refiner_head_keeps_proposal() {
    let cfg = small();
    let mut m = model(&cfg);
    set_head(&mut m, true, |_| 0.0);
    let mut g = Graph::new(&m.params);
    let u = m.net.unroll(&mut g, &scene_for(&cfg, 7), RunMode::Training).unwrap();
    for st in &u.steps {
        for (p, r) in st.proposal_global.iter().flatten().zip(st.output_global.iter().flatten()) {
            for c in 0..3 {
                assert!((p[c] - r[c]).abs() < 1e-9, "{p:?} vs {r:?}");
            }
        }
    }
}

#[test]
fn bias_only_refiner_head_adds_constant_offset() {
    let cfg = small();
    let t = cfg.t_sub;
    let mut m = model(&cfg);
    let beta = |i: usize| if i < 2 * t { 0.25 + 0.01 * i as f64 } else if (4 * t..5 * t).contains(&i) { -0.1 } else { 0.0 };
    set_head(&mut m, true, beta);
    let mut g = Graph::new(&m.params);
    let u = m.net.unroll(&mut g, &scene_for(&cfg, 8), RunMode::Training).unwrap();
    for st in &u.steps {
        let refined = st.refined.unwrap();
        let pos = g.value(refined.main.pos_loc).clone();
        let hd = g.value(refined.main.hd_loc).clone();
        for (r, (w, fr)) in st.proposal_global.iter().zip(&st.proposal_frames).enumerate() {
            for (i, s) in w.iter().enumerate() {
                let local = fr.to_local(Pose::new(s[0], s[1], s[2]));
                assert!((pos.at(r, 2 * i) - local.x - beta(2 * i)).abs() < 1e-9);
                assert!((pos.at(r, 2 * i + 1) - local.y - beta(2 * i + 1)).abs() < 1e-9);
                assert!((hd.at(r, i) - local.heading - beta(4 * t + i)).abs() < 1e-9);
            }
        }
        let sc = g.value(refined.main.pos_scale);
        let expect = crate::autograd::softplus(0.0) + MIN_SCALE;
        assert!(sc.data.iter().all(|v| (v - expect).abs() < 1e-12));
    }
}

#[test]
fn zero_heads_emit_min_scales() {
    let cfg = small();
    let mut m = model(&cfg);
    set_head(&mut m, false, |_| 0.0);
    let mut g = Graph::new(&m.params);
    let u = m.net.unroll(&mut g, &scene_for(&cfg, 9), RunMode::Training).unwrap();
    let p = u.steps[0].proposal;
    assert!(g.value(p.main.pos_loc).data.iter().all(|&v| v == 0.0));
    let expect = crate::autograd::softplus(0.0) + MIN_SCALE;
    for w in [p.main, p.over] {
        assert_eq!(g.shape(w.pos_loc), (3 * cfg.modes, 2 * cfg.t_sub));
        assert_eq!(g.shape(w.hd_conc).1, cfg.t_sub);
        assert!(g.value(w.pos_scale).data.iter().all(|v| (v - expect).abs() < 1e-12));
    }
}

#[test]
fn scales_positive_with_random_heads() {
    let cfg = small();
    let mut m = model(&cfg);
    let stage = m.net.proposer.clone();
    for l in &stage.detokenizer.head.layers {
        for (i, v) in m.params.value_mut(l.w).data.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 5.0 - 10.0;
        }
    }
    let mut g = Graph::new(&m.params);
    let u = m.net.unroll(&mut g, &scene_for(&cfg, 10), RunMode::Training).unwrap();
    for st in &u.steps {
        for w in [st.proposal.main, st.proposal.over] {
            assert!(g.value(w.pos_scale).data.iter().all(|&v| v >= MIN_SCALE));
            assert!(g.value(w.hd_conc).data.iter().all(|&v| v >= MIN_SCALE));
        }
    }
}

#[test]
fn refiner_sees_neighbour_proposals() {
    let cfg = small();
    let m = model(&cfg);
    let scene = scene_for(&cfg, 12);
    let k = cfg.modes;
    let run = |shift: f64| {
        let mut g = Graph::new(&m.params);
        let prep = m.net.prepare(&mut g, &scene).unwrap();
        let (mut pc, mut rc) = m.net.bootstrap_history(&mut g, &prep).unwrap();
        let input = m.net.first_input(&prep);
        let mut p = m.net.propose_step(&mut g, &prep, &input, &mut pc, &mut rc, 0).unwrap();
        let own = p.global[0].clone();
        for r in k..2 * k {
            for s in &mut p.global[r] {
                s[0] += shift;
            }
            p.frames[r].x += shift;
        }
        let rf = m.net.refine_step(&mut g, &prep, &p, &mut rc, &mut pc, 0).unwrap();
        (own, rf.global[0].clone())
    };
    let (p0, r0) = run(0.0);
    let (p1, r1) = run(1.5);
    assert_eq!(p0, p1);
    assert_ne!(r0, r1);
}

#[test]
fn distant_agents_are_isolated() {
    let cfg = DecoderConfig { radius: 5.0, ..small() };
    let m = model(&cfg);
    let scene = scene_for(&cfg, 13);
    let mut moved = scene.clone();
    moved.agents[1].states.iter_mut().for_each(|s| {
        s.x += 1000.0;
        s.y += 1000.0;
    });
    let mut other = moved.clone();
    other.agents[1].states.iter_mut().for_each(|s| s.heading = crate::geometry::wrap(s.heading + 1.0));
    let a = m.forecast(&moved).unwrap();
    let b = m.forecast(&other).unwrap();
    assert_eq!(a.agent_ids[0], "a0");
    assert_eq!(a.trajectories[0], b.trajectories[0]);
    assert!(max_diff(&a, &b) > 0.0);
}

#[test]
fn deterministic_inference() {
    let cfg = small();
    let scene = scene_for(&cfg, 14);
    let a = model(&cfg).forecast(&scene).unwrap();
    let b = model(&cfg).forecast(&scene).unwrap();
    assert_eq!(a, b);
}

#[test]
fn se2_equivariance() {
    let cfg = small();
    let m = model(&cfg);
    let scene = scene_for(&cfg, 15);
    let tf = Se2::new(1.1, -37.0, 52.0);
    let mut moved = scene.clone();
    for a in &mut moved.agents {
        for s in &mut a.states {
            let p = tf.apply_pose(Pose::new(s.x, s.y, s.heading));
            (s.x, s.y, s.heading) = (p.x, p.y, p.heading);
        }
    }
    for p in &mut moved.map.polylines {
        for q in &mut p.points {
            let (x, y) = tf.apply_xy(q[0], q[1]);
            *q = [x, y];
        }
    }
    let a = m.forecast(&scene).unwrap();
    let b = m.forecast(&moved).unwrap();
    let mut worst = 0.0f64;
    for (ta, tb) in a.trajectories.iter().flatten().flatten().zip(b.trajectories.iter().flatten().flatten()) {
        let p = tf.apply_pose(Pose::new(ta[0], ta[1], ta[2]));
        worst = worst.max((p.x - tb[0]).abs()).max((p.y - tb[1]).abs());
    }
    assert!(worst < 1e-4, "{worst}");
    for (pa, pb) in a.probabilities.iter().flatten().zip(b.probabilities.iter().flatten()) {
        assert!((pa - pb).abs() < 1e-6);
    }
}

#[test]
fn rejects_wrong_horizon() {
    let cfg = small();
    let m = model(&cfg);
    let mut scene = scene_for(&cfg, 16);
    scene.t_hist += 1;
    assert!(matches!(m.forecast(&scene), Err(DecoderError::Horizon { .. })));
}

#[test]
fn without_refinement_uses_proposer_logits() {
    let cfg = DecoderConfig {
        refinement: false,
        ..small()
    };
    let m = model(&cfg);
    assert!(m.net.refiner.is_none());
    assert!(m.net.proposer.detokenizer.logit.is_some());
    let f = m.forecast(&scene_for(&cfg, 17)).unwrap();
    assert_eq!(f.modes(), cfg.modes);
}
