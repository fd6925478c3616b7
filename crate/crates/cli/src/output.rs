//! Prediction files and SVG sketches.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use donut_core::decoder::Forecast;
use donut_core::scene::Scene;

/// One focal agent: K rows of `(x, y)` pairs plus the probability row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub id: String,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub headings: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene: String,
    pub agents: Vec<AgentPrediction>,
}

impl ScenePrediction {
    /// Focal agents of `scene` that the forecast covers.
    pub fn focal(scene: &Scene, f: &Forecast) -> Self {
        let agents = scene
            .focal
            .iter()
            .filter_map(|id| f.agent(id).map(|i| (id, i)))
            .map(|(id, i)| AgentPrediction {
                id: id.clone(),
                trajectories: f.trajectories[i].iter().map(|m| m.iter().map(|p| [p[0], p[1]]).collect()).collect(),
                headings: f.trajectories[i].iter().map(|m| m.iter().map(|p| p[2]).collect()).collect(),
                probabilities: f.probabilities[i].clone(),
            })
            .collect();
        Self {
            scene: scene.id.clone(),
            agents,
        }
    }
}

const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

/// Static sketch: map polylines and ground truth as `<polyline>`, one
/// `<path>` per predicted mode of each focal agent.
pub fn svg(scene: &Scene, pred: &ScenePrediction) -> String {
    let mut pts: Vec<[f64; 2]> = scene.map.polylines.iter().flat_map(|p| p.points.iter().copied()).collect();
    for a in &scene.agents {
        pts.extend(a.states.iter().filter(|s| s.valid).map(|s| [s.x, s.y]));
    }
    for a in &pred.agents {
        pts.extend(a.trajectories.iter().flatten().copied());
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if pts.is_empty() {
        (lo, hi) = ([0.0; 2], [1.0; 2]);
    }
    let margin = 5.0;
    let (w, h) = (hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin);
    // Flip y so north is up.
    let tx = |p: [f64; 2]| format!("{:.3},{:.3}", p[0] - lo[0] + margin, hi[1] - p[1] + margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.3} {h:.3}" width="{:.0}" height="{:.0}">"#,
        w * 8.0,
        h * 8.0
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for p in &scene.map.polylines {
        let line: Vec<String> = p.points.iter().map(|&q| tx(q)).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="map" points="{}" fill="none" stroke="#bbbbbb" stroke-width="0.4"/>"##,
            line.join(" ")
        );
    }
    for a in &scene.agents {
        let line: Vec<String> = a.states.iter().filter(|st| st.valid).map(|st| tx([st.x, st.y])).collect();
        if line.len() < 2 {
            continue;
        }
        let _ = writeln!(
            s,
            r##"<polyline class="gt" id="gt-{}" points="{}" fill="none" stroke="#2ca02c" stroke-width="0.3"/>"##,
            a.id,
            line.join(" ")
        );
    }
    for a in &pred.agents {
        for (k, m) in a.trajectories.iter().enumerate() {
            let mut d = String::new();
            for (i, &p) in m.iter().enumerate() {
                let _ = write!(d, "{}{} ", if i == 0 { "M" } else { "L" }, tx(p));
            }
            let _ = writeln!(
                s,
                r#"<path class="pred" id="pred-{}-{k}" d="{}" fill="none" stroke="{}" stroke-width="0.3" stroke-opacity="{:.3}"/>"#,
                a.id,
                d.trim_end(),
                COLORS[k % COLORS.len()],
                0.3 + 0.7 * a.probabilities[k]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
