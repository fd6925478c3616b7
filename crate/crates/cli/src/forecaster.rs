use donut_core::decoder::{DecoderError, Forecast, Model};
use donut_core::scalar::Scalar;
use donut_core::scene::Scene;

/// Anything that turns a scene into a multimodal forecast.
pub trait Forecaster: Sync {
    fn forecast(&self, scene: &Scene) -> Result<Forecast, DecoderError>;
}

impl<T: Scalar> Forecaster for Model<T> {
    fn forecast(&self, scene: &Scene) -> Result<Forecast, DecoderError> {
        Model::forecast(self, scene)
    }
}

/// Replays the ground truth in every mode with uniform probabilities.
/// Missing future states repeat the last known one.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthOracle {
    pub modes: usize,
}

impl Forecaster for GroundTruthOracle {
    fn forecast(&self, scene: &Scene) -> Result<Forecast, DecoderError> {
        let mut f = Forecast {
            agent_ids: Vec::new(),
            trajectories: Vec::new(),
            probabilities: Vec::new(),
        };
        for a in &scene.agents {
            let mut last = None;
            let mut path = Vec::with_capacity(scene.t_fut);
            for (i, s) in a.states.iter().enumerate() {
                if s.valid {
                    last = Some([s.x, s.y, s.heading]);
                }
                if i >= scene.t_hist {
                    path.push(last);
                }
            }
            if path.iter().any(Option::is_none) {
                continue;
            }
            let path: Vec<[f64; 3]> = path.into_iter().flatten().collect();
            f.agent_ids.push(a.id.clone());
            f.trajectories.push(vec![path; self.modes]);
            f.probabilities.push(vec![1.0 / self.modes as f64; self.modes]);
        }
        Ok(f)
    }
}
