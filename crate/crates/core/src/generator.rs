//! Synthetic lane scenes: agents drive along lane centerlines at constant
//! speed, and the whole scene is placed under a random rigid motion.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, GeneratorConfig, Topology};
use crate::geometry::{wrap, Se2};
use crate::scene::{
    Agent, AgentState, AgentType, MapGraph, PointCategory, Polyline, PolylineCategory, RelationType, Scene,
};

pub const DT: f64 = 0.1;
const POINT_SPACING: f64 = 5.0;
const MARGIN: f64 = 10.0;

/// Mixes a base seed with a scene index.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A dense path parameterized by arc length.
#[derive(Debug, Clone)]
struct Route {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Route {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn concat(parts: &[&[[f64; 2]]]) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for p in parts {
            for &q in *p {
                if pts.last() != Some(&q) {
                    pts.push(q);
                }
            }
        }
        Self::new(pts)
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = self.cum.partition_point(|&c| c <= s).clamp(1, self.pts.len() - 1);
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        let seg = self.cum[i] - self.cum[i - 1];
        let u = if seg > 0.0 { (s - self.cum[i - 1]) / seg } else { 0.0 };
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }
}

/// How one generated agent moves.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    pub speed: f64,
    pub route: usize,
    pub start: f64,
    pub first_valid: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub scene: Scene,
    pub plans: Vec<AgentPlan>,
    pub topology: Topology,
    pub transform: Se2<f64>,
}

struct MapBuild {
    polylines: Vec<Polyline>,
    relations: Vec<(usize, usize, RelationType)>,
    routes: Vec<Route>,
    /// Route for the focal agent and the arc length where its turn starts.
    focal_route: Option<(usize, f64)>,
}

impl MapBuild {
    fn new() -> Self {
        Self {
            polylines: Vec::new(),
            relations: Vec::new(),
            routes: Vec::new(),
            focal_route: None,
        }
    }

    fn add(&mut self, points: Vec<[f64; 2]>, category: PolylineCategory) -> usize {
        let pc = if category == PolylineCategory::Crosswalk {
            PointCategory::Crosswalk
        } else {
            PointCategory::Center
        };
        self.polylines.push(Polyline {
            point_categories: vec![pc; points.len()],
            points,
            category,
        });
        self.polylines.len() - 1
    }

    fn link(&mut self, a: usize, b: usize) {
        self.relations.push((a, b, RelationType::Successor));
        self.relations.push((b, a, RelationType::Predecessor));
    }

    fn adjacent(&mut self, a: usize, b: usize) {
        self.relations.push((a, b, RelationType::Adjacent));
        self.relations.push((b, a, RelationType::Adjacent));
    }

    /// Cuts a dense centerline into `pieces` successive polylines.
    fn add_lane(&mut self, pts: &[[f64; 2]], pieces: usize, category: PolylineCategory) -> Vec<usize> {
        let n = pts.len() - 1;
        let pieces = pieces.min(n).max(1);
        let mut ids = Vec::new();
        for p in 0..pieces {
            let (a, b) = (p * n / pieces, (p + 1) * n / pieces);
            ids.push(self.add(pts[a..=b].to_vec(), category));
        }
        for w in ids.windows(2) {
            self.link(w[0], w[1]);
        }
        self.routes.push(Route::new(pts.to_vec()));
        ids
    }
}

fn line(from: [f64; 2], to: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let len = (to[0] - from[0]).hypot(to[1] - from[1]);
    let n = ((len / spacing).ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            [from[0] + u * (to[0] - from[0]), from[1] + u * (to[1] - from[1])]
        })
        .collect()
}

/// Arc of signed curvature `1/radius`, starting at `from` with heading `h0`.
fn arc(from: [f64; 2], h0: f64, radius: f64, left: bool, length: f64, step: f64) -> Vec<[f64; 2]> {
    let sgn = if left { 1.0 } else { -1.0 };
    let (cx, cy) = (from[0] - sgn * radius * h0.sin(), from[1] + sgn * radius * h0.cos());
    let n = ((length / step).ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let h = h0 + sgn * (length * i as f64 / n as f64) / radius;
            [cx + sgn * radius * h.sin(), cy - sgn * radius * h.cos()]
        })
        .collect()
}

fn lane_category<R: Rng>(rng: &mut R, i: usize) -> PolylineCategory {
    if i > 0 && rng.random_bool(0.2) {
        PolylineCategory::BusLane
    } else {
        PolylineCategory::Lane
    }
}

fn build_straight<R: Rng>(cfg: &GeneratorConfig, len: f64, rng: &mut R) -> MapBuild {
    let mut mb = MapBuild::new();
    let mut prev: Option<Vec<usize>> = None;
    for i in 0..cfg.lanes {
        let y = i as f64 * cfg.lane_width;
        let cat = lane_category(rng, i);
        let ids = mb.add_lane(&line([0.0, y], [len, y], POINT_SPACING), cfg.pieces, cat);
        if let Some(p) = prev {
            for (&a, &b) in p.iter().zip(&ids) {
                mb.adjacent(a, b);
            }
        }
        prev = Some(ids);
    }
    if cfg.crosswalk {
        let x = rng.random_range(0.3..0.7) * len;
        let w = cfg.lanes as f64 * cfg.lane_width;
        mb.add(vec![[x, -cfg.lane_width], [x, w]], PolylineCategory::Crosswalk);
    }
    mb
}

fn build_curved<R: Rng>(cfg: &GeneratorConfig, len: f64, rng: &mut R) -> MapBuild {
    let mut mb = MapBuild::new();
    let radius = rng.random_range(40.0..120.0);
    let left = rng.random_bool(0.5);
    let mut prev: Option<Vec<usize>> = None;
    for i in 0..cfg.lanes {
        let off = i as f64 * cfg.lane_width;
        // lanes share the arc center; inner lanes get the shorter radius
        let r = if left { radius - off } else { radius + off };
        let start = [0.0, off];
        let cat = lane_category(rng, i);
        let pts = arc(start, 0.0, r, left, len * r / radius, POINT_SPACING);
        let ids = mb.add_lane(&pts, cfg.pieces, cat);
        if let Some(p) = prev {
            for (&a, &b) in p.iter().zip(&ids) {
                mb.adjacent(a, b);
            }
        }
        prev = Some(ids);
    }
    mb
}

fn build_t<R: Rng>(cfg: &GeneratorConfig, len: f64, turn_radius: f64, rng: &mut R) -> MapBuild {
    let mut mb = MapBuild::new();
    let left = rng.random_bool(0.5);
    let sgn = if left { 1.0 } else { -1.0 };
    let approach = line([-len, 0.0], [0.0, 0.0], POINT_SPACING);
    let through = line([0.0, 0.0], [len, 0.0], POINT_SPACING);
    let turn = arc([0.0, 0.0], 0.0, turn_radius, left, FRAC_PI_2 * turn_radius, 1.0);
    let end = *turn.last().unwrap();
    let branch = line(end, [end[0], end[1] + sgn * len], POINT_SPACING);

    let a = mb.add(approach.clone(), PolylineCategory::Lane);
    let t = mb.add(through.clone(), PolylineCategory::Lane);
    let c = mb.add(turn.clone(), PolylineCategory::IntersectionLane);
    let b = mb.add(branch.clone(), PolylineCategory::Lane);
    mb.link(a, t);
    mb.link(a, c);
    mb.link(c, b);
    mb.routes.push(Route::concat(&[&approach, &turn, &branch]));
    mb.routes.push(Route::concat(&[&approach, &through]));
    mb.focal_route = Some((0, len));
    if cfg.lanes > 1 {
        let y = -sgn * cfg.lane_width;
        let back_in = line([len, y], [0.0, y], POINT_SPACING);
        let back_out = line([0.0, y], [-len, y], POINT_SPACING);
        let bi = mb.add(back_in.clone(), PolylineCategory::Lane);
        let bo = mb.add(back_out.clone(), PolylineCategory::Lane);
        mb.link(bi, bo);
        mb.adjacent(a, bo);
        mb.adjacent(t, bi);
        mb.routes.push(Route::concat(&[&back_in, &back_out]));
    }
    if cfg.crosswalk {
        let x = -rng.random_range(8.0..20.0);
        mb.add(vec![[x, -2.0 * cfg.lane_width], [x, 2.0 * cfg.lane_width]], PolylineCategory::Crosswalk);
    }
    mb
}

fn pick_type<R: Rng>(rng: &mut R) -> AgentType {
    match rng.random_range(0..10) {
        0 => AgentType::Bus,
        1 => AgentType::Cyclist,
        2 => AgentType::Other,
        _ => AgentType::Vehicle,
    }
}

/// Headings from backward differences of consecutive positions (forward at
/// `t = 0`); stationary steps carry the last moving heading.
pub fn motion_headings(pos: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pos.len());
    let mut last = None;
    for t in 0..pos.len() {
        let (a, b) = if t == 0 {
            (pos[0], *pos.get(1).unwrap_or(&pos[0]))
        } else {
            (pos[t - 1], pos[t])
        };
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        if dx != 0.0 || dy != 0.0 {
            last = Some(dy.atan2(dx));
        }
        out.push(last.unwrap_or(0.0));
    }
    out
}

pub fn generate_synthetic_scene(cfg: &GeneratorConfig, seed: u64) -> Result<Scene, ConfigError> {
    generate_detailed(cfg, seed).map(|g| g.scene)
}

pub fn generate_detailed(cfg: &GeneratorConfig, seed: u64) -> Result<Generated, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_total = cfg.t_hist + cfg.t_fut;
    let travel = cfg.max_speed * DT * (t_total - 1) as f64;
    let len = travel + 2.0 * MARGIN;
    let topology = match cfg.topology {
        Topology::Mixed => [Topology::Straight, Topology::Curved, Topology::TIntersection][rng.random_range(0..3)],
        t => t,
    };
    let n_agents = rng.random_range(cfg.min_agents..=cfg.max_agents);
    let focal_speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let mb = match topology {
        Topology::Straight => build_straight(cfg, len, &mut rng),
        Topology::Curved => build_curved(cfg, len, &mut rng),
        Topology::TIntersection => {
            let fut_travel = focal_speed * DT * cfg.t_fut as f64;
            build_t(cfg, len, (0.6 * fut_travel).clamp(4.0, 15.0), &mut rng)
        }
        Topology::Mixed => unreachable!(),
    };

    let mut plans = Vec::with_capacity(n_agents);
    let mut agents = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let focal = i == 0;
        let speed = if focal {
            focal_speed
        } else if rng.random_bool(cfg.stationary_prob) {
            0.0
        } else {
            rng.random_range(cfg.min_speed..=cfg.max_speed)
        };
        let (route, start) = match (focal, mb.focal_route) {
            (true, Some((r, turn_at))) => {
                let lead = rng.random_range(0.0..=2.0) * speed * DT;
                (r, turn_at - lead - speed * DT * (cfg.t_hist - 1) as f64)
            }
            _ => {
                let r = rng.random_range(0..mb.routes.len());
                let span = mb.routes[r].length() - speed * DT * (t_total - 1) as f64;
                (r, rng.random_range(0.0..span.max(1e-9)))
            }
        };
        let first_valid = if !focal && rng.random_bool(cfg.partial_prob) {
            rng.random_range(1..=cfg.t_hist.saturating_sub(2).max(1))
        } else {
            0
        };
        let pos: Vec<[f64; 2]> = (0..t_total)
            .map(|t| mb.routes[route].at(start + speed * DT * t as f64))
            .collect();
        let heading = motion_headings(&pos);
        let states = (0..t_total)
            .map(|t| {
                if t < first_valid {
                    AgentState {
                        t: t as i64,
                        x: 0.0,
                        y: 0.0,
                        heading: 0.0,
                        valid: false,
                    }
                } else {
                    AgentState {
                        t: t as i64,
                        x: pos[t][0],
                        y: pos[t][1],
                        heading: heading[t],
                        valid: true,
                    }
                }
            })
            .collect();
        agents.push(Agent {
            id: format!("a{i}"),
            agent_type: if focal { AgentType::Vehicle } else { pick_type(&mut rng) },
            states,
        });
        plans.push(AgentPlan {
            speed,
            route,
            start,
            first_valid,
        });
    }

    let transform = Se2::new(
        rng.random_range(-PI..PI),
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
    );
    let mut map = MapGraph {
        polylines: mb.polylines,
        relations: mb.relations,
    };
    for p in &mut map.polylines {
        for q in &mut p.points {
            let (x, y) = transform.apply_xy(q[0], q[1]);
            *q = [x, y];
        }
    }
    for a in &mut agents {
        for s in a.states.iter_mut().filter(|s| s.valid) {
            let (x, y) = transform.apply_xy(s.x, s.y);
            s.x = x;
            s.y = y;
            s.heading = wrap(s.heading + transform.angle);
        }
    }
    let scene = Scene {
        id: format!("synthetic-{seed:016x}"),
        t_hist: cfg.t_hist,
        t_fut: cfg.t_fut,
        map,
        agents,
        focal: vec!["a0".into()],
    };
    Ok(Generated {
        scene,
        plans,
        topology,
        transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::validate_scene;

    #[test]
    fn deterministic_per_seed() {
        let cfg = GeneratorConfig {
            topology: Topology::Straight,
            ..GeneratorConfig::default()
        };
        let a = generate_synthetic_scene(&cfg, 7).unwrap().to_json();
        let b = generate_synthetic_scene(&cfg, 7).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_scene(&cfg, 8).unwrap().to_json());
    }

    #[test]
    fn straight_road_constant_step() {
        let cfg = GeneratorConfig {
            topology: Topology::Straight,
            stationary_prob: 0.0,
            partial_prob: 0.0,
            ..GeneratorConfig::default()
        };
        for seed in 0..5 {
            let g = generate_detailed(&cfg, seed).unwrap();
            for (a, p) in g.scene.agents.iter().zip(&g.plans) {
                for w in a.states.windows(2) {
                    let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                    assert!((d - p.speed * DT).abs() < 1e-9, "{d} vs {}", p.speed * DT);
                }
            }
        }
    }

    #[test]
    fn headings_follow_motion() {
        let cfg = GeneratorConfig::default();
        for seed in 0..20 {
            let s = generate_synthetic_scene(&cfg, seed).unwrap();
            for a in &s.agents {
                for t in 1..a.states.len() {
                    let (p, q) = (a.states[t - 1], a.states[t]);
                    if !p.valid || !q.valid {
                        continue;
                    }
                    let (dx, dy) = (q.x - p.x, q.y - p.y);
                    if dx.hypot(dy) > 1e-9 {
                        assert!(wrap(dy.atan2(dx) - q.heading).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn generated_scenes_validate() {
        for topology in [Topology::Straight, Topology::Curved, Topology::TIntersection, Topology::Mixed] {
            let cfg = GeneratorConfig {
                topology,
                ..GeneratorConfig::default()
            };
            for seed in 0..10 {
                let s = generate_synthetic_scene(&cfg, seed).unwrap();
                assert_eq!(validate_scene(&s), vec![], "{topology:?} seed {seed}");
                assert!(!s.focal.is_empty());
            }
        }
        assert!(generate_synthetic_scene(&GeneratorConfig::tiny(), 0).unwrap().map.polylines.len() == 3);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = GeneratorConfig {
            min_agents: 5,
            max_agents: 2,
            ..GeneratorConfig::default()
        };
        assert!(generate_synthetic_scene(&cfg, 0).is_err());
    }

    #[test]
    fn scene_seeds_are_spread() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| scene_seed(3, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
