//! Scenes: agent tracks on a vectorized lane map, their file format and
//! validation.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::wrap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
    Bus,
    Other,
}

impl AgentType {
    pub const ALL: [AgentType; 5] = [
        AgentType::Vehicle,
        AgentType::Pedestrian,
        AgentType::Cyclist,
        AgentType::Bus,
        AgentType::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineCategory {
    Lane,
    BusLane,
    IntersectionLane,
    Crosswalk,
}

impl PolylineCategory {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointCategory {
    Center,
    LeftBoundary,
    RightBoundary,
    Crosswalk,
}

impl PointCategory {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    Successor,
    Predecessor,
    Adjacent,
    Nearby,
}

impl RelationType {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One observation, serialized as `[t, x, y, heading, valid]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(i64, f64, f64, f64, bool)", into = "(i64, f64, f64, f64, bool)")]
pub struct AgentState {
    pub t: i64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub valid: bool,
}

impl From<(i64, f64, f64, f64, bool)> for AgentState {
    fn from((t, x, y, heading, valid): (i64, f64, f64, f64, bool)) -> Self {
        Self {
            t,
            x,
            y,
            heading,
            valid,
        }
    }
}

impl From<AgentState> for (i64, f64, f64, f64, bool) {
    fn from(s: AgentState) -> Self {
        (s.t, s.x, s.y, s.heading, s.valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub states: Vec<AgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub category: PolylineCategory,
    pub point_categories: Vec<PointCategory>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapGraph {
    pub polylines: Vec<Polyline>,
    #[serde(default)]
    pub relations: Vec<(usize, usize, RelationType)>,
}

impl MapGraph {
    /// Explicit relation from `src` to `dst`, if any.
    pub fn relation(&self, src: usize, dst: usize) -> Option<RelationType> {
        self.relations
            .iter()
            .find(|&&(s, d, _)| s == src && d == dst)
            .map(|&(_, _, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub t_hist: usize,
    pub t_fut: usize,
    pub map: MapGraph,
    pub agents: Vec<Agent>,
    pub focal: Vec<String>,
}

/// A single broken invariant, with a path to the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid scene {path}: {}", join(.violations))]
    Invalid {
        path: PathBuf,
        violations: Vec<Violation>,
    },
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Scene {
    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn focal_indices(&self) -> Vec<usize> {
        self.focal.iter().filter_map(|id| self.agent_index(id)).collect()
    }

    pub fn from_json(text: &str) -> Result<Scene, serde_json::Error> {
        let mut scene: Scene = serde_json::from_str(text)?;
        scene.wrap_headings();
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    fn wrap_headings(&mut self) {
        for a in &mut self.agents {
            for s in &mut a.states {
                s.heading = wrap(s.heading);
            }
        }
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let scene = Scene::from_json(&text).map_err(|source| SceneError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let violations = validate_scene(&scene);
    if !violations.is_empty() {
        return Err(SceneError::Invalid {
            path: path.to_path_buf(),
            violations,
        });
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    std::fs::write(path, scene.to_json()).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |path: String, message: String| out.push(Violation { path, message });
    let m = scene.map.polylines.len();
    for (i, p) in scene.map.polylines.iter().enumerate() {
        let path = format!("map.polylines[{i}]");
        if p.points.len() < 2 {
            bad(format!("{path}.points"), format!("{} points, need at least 2", p.points.len()));
        }
        if p.point_categories.len() != p.points.len() {
            bad(
                format!("{path}.point_categories"),
                format!("{} categories for {} points", p.point_categories.len(), p.points.len()),
            );
        }
        for (j, w) in p.points.windows(2).enumerate() {
            if w[0] == w[1] {
                bad(format!("{path}.points[{}]", j + 1), "repeats the previous point".into());
            }
        }
        if p.points.iter().flatten().any(|v| !v.is_finite()) {
            bad(format!("{path}.points"), "non-finite coordinate".into());
        }
    }
    for (i, &(s, d, _)) in scene.map.relations.iter().enumerate() {
        let path = format!("map.relations[{i}]");
        if s >= m || d >= m {
            bad(path, format!("endpoint ({s}, {d}) out of range for {m} polylines"));
        } else if s == d {
            bad(path, format!("self-relation on polyline {s}"));
        }
    }
    let expect = scene.t_hist + scene.t_fut;
    let mut ids = HashSet::new();
    for (i, a) in scene.agents.iter().enumerate() {
        let path = format!("agents[{i}]");
        if !ids.insert(a.id.as_str()) {
            bad(format!("{path}.id"), format!("duplicate agent id `{}`", a.id));
        }
        if a.states.len() != expect {
            bad(
                format!("{path}.states"),
                format!("{} states, expected {expect}", a.states.len()),
            );
        }
        for (j, s) in a.states.iter().enumerate() {
            if s.t != j as i64 {
                bad(format!("{path}.states[{j}].t"), format!("time index {} expected {j}", s.t));
            }
            if ![s.x, s.y, s.heading].iter().all(|v| v.is_finite()) {
                bad(format!("{path}.states[{j}]"), "non-finite state".into());
            } else if !(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI) {
                bad(format!("{path}.states[{j}].heading"), format!("{} not wrapped", s.heading));
            }
        }
    }
    for (i, f) in scene.focal.iter().enumerate() {
        if !ids.contains(f.as_str()) {
            bad(format!("focal[{i}]"), format!("unknown agent id `{f}`"));
        }
    }
    out
}

/// Per-agent history and future slices over the shared time axis.
#[derive(Debug, Clone)]
pub struct SplitView<'a> {
    pub history: Vec<&'a [AgentState]>,
    pub future: Vec<&'a [AgentState]>,
}

pub fn split_history_future(scene: &Scene) -> SplitView<'_> {
    let (history, future) = scene
        .agents
        .iter()
        .map(|a| a.states.split_at(scene.t_hist))
        .unzip();
    SplitView { history, future }
}
