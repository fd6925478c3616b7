//! Model, training and generator configuration with named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::FourierBands;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub t_hist: usize,
    pub t_fut: usize,
    pub t_sub: usize,
    pub modes: usize,
    pub radius: f64,
    pub rounds: usize,
    pub fourier_bands: usize,
    pub fourier_lo: f64,
    pub fourier_hi: f64,
    pub line_attention: bool,
    pub overprediction: bool,
    pub refinement: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            dim: 128,
            heads: 8,
            t_hist: 50,
            t_fut: 60,
            t_sub: 10,
            modes: 6,
            radius: 50.0,
            rounds: 2,
            fourier_bands: 64,
            fourier_lo: 1.0 / 64.0,
            fourier_hi: 8.0,
            line_attention: true,
            overprediction: true,
            refinement: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            ..Self::paper()
        }
    }

    pub fn tiny() -> Self {
        Self {
            dim: 32,
            heads: 4,
            t_hist: 10,
            t_fut: 20,
            t_sub: 5,
            modes: 2,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.t_sub == 0 || self.t_fut % self.t_sub != 0 {
            return invalid(format!("t_fut {} not divisible by t_sub {}", self.t_fut, self.t_sub));
        }
        if self.t_hist % self.t_sub != 0 {
            return invalid(format!("t_hist {} not divisible by t_sub {}", self.t_hist, self.t_sub));
        }
        if self.t_sub < 2 {
            return invalid("t_sub must be at least 2");
        }
        if self.modes == 0 {
            return invalid("modes must be at least 1");
        }
        if self.rounds == 0 {
            return invalid("rounds must be at least 1");
        }
        if !(self.radius > 0.0) {
            return invalid("radius must be positive");
        }
        if self.fourier_bands == 0 || !(self.fourier_lo > 0.0 && self.fourier_hi >= self.fourier_lo) {
            return invalid("bad Fourier band range");
        }
        Ok(())
    }

    pub fn hist_steps(&self) -> usize {
        self.t_hist / self.t_sub
    }

    pub fn fut_steps(&self) -> usize {
        self.t_fut / self.t_sub
    }

    pub fn bands<T: Scalar>(&self) -> FourierBands<T> {
        FourierBands::log_spaced(self.fourier_bands, self.fourier_lo, self.fourier_hi, true)
    }

    /// Identifies the parameter layout: the first eight bytes of the SHA-256
    /// of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// How the regression winner is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WinnerSelection {
    /// Per decoder step, from that step's proposal endpoint.
    #[default]
    PerStep,
    /// Once per agent, from the final proposal endpoint.
    FullHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub dropout: f64,
    pub seed: u64,
    pub winner: WinnerSelection,
    /// Caps the total number of optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            ..Self::paper()
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 60,
            batch: 64,
            dropout: 0.1,
            seed: 0,
            winner: WinnerSelection::PerStep,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0) {
            return invalid("lr must be positive");
        }
        if self.batch == 0 {
            return invalid("batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return invalid("weight decay must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Straight,
    Curved,
    TIntersection,
    /// One of the other three per scene.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub topology: Topology,
    pub t_hist: usize,
    pub t_fut: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    /// Meters per second.
    pub min_speed: f64,
    pub max_speed: f64,
    pub lanes: usize,
    /// Polylines each lane is cut into.
    pub pieces: usize,
    pub lane_width: f64,
    /// Probability that a non-focal agent is parked.
    pub stationary_prob: f64,
    /// Probability that a non-focal agent's track starts late.
    pub partial_prob: f64,
    pub crosswalk: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Mixed,
            t_hist: 50,
            t_fut: 60,
            min_agents: 2,
            max_agents: 4,
            min_speed: 2.0,
            max_speed: 10.0,
            lanes: 2,
            pieces: 2,
            lane_width: 3.5,
            stationary_prob: 0.1,
            partial_prob: 0.1,
            crosswalk: true,
        }
    }
}

impl GeneratorConfig {
    /// Two agents on a single lane cut into three polylines.
    pub fn tiny() -> Self {
        Self {
            topology: Topology::Straight,
            t_hist: 10,
            t_fut: 20,
            min_agents: 2,
            max_agents: 2,
            min_speed: 2.5,
            max_speed: 7.5,
            lanes: 1,
            pieces: 3,
            stationary_prob: 0.0,
            partial_prob: 0.0,
            crosswalk: false,
            ..Self::default()
        }
    }

    pub fn matching(decoder: &DecoderConfig) -> Self {
        Self {
            t_hist: decoder.t_hist,
            t_fut: decoder.t_fut,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return invalid(format!("agent range {}..={} is empty", self.min_agents, self.max_agents));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed && self.max_speed.is_finite()) {
            return invalid(format!("speed range {}..={} is invalid", self.min_speed, self.max_speed));
        }
        if self.lanes == 0 || self.pieces == 0 {
            return invalid("lanes and pieces must be at least 1");
        }
        if !(self.lane_width > 0.0) {
            return invalid("lane width must be positive");
        }
        for (name, p) in [("stationary_prob", self.stationary_prob), ("partial_prob", self.partial_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.t_hist < 2 || self.t_fut < 1 {
            return invalid("need t_hist >= 2 and t_fut >= 1");
        }
        Ok(())
    }
}
