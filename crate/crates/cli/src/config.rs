//! Run configuration: a preset, overlaid with an optional JSON file, then
//! with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use donut_core::config::{DecoderConfig, GeneratorConfig, TrainConfig};

use crate::error::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Desk,
    Paper,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub turns_only: bool,
    pub turn_threshold_deg: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            turns_only: false,
            turn_threshold_deg: 45.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds scene generation, parameter init, batching and dropout.
    pub seed: u64,
    pub jobs: usize,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub turns_only: bool,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub modes: Option<usize>,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (decoder, train, generator) = match p {
            Preset::Tiny => (DecoderConfig::tiny(), TrainConfig::default(), GeneratorConfig::tiny()),
            Preset::Desk => {
                let d = DecoderConfig::desk();
                let g = GeneratorConfig::matching(&d);
                (d, TrainConfig::default(), g)
            }
            Preset::Paper => {
                let d = DecoderConfig::paper();
                let g = GeneratorConfig::matching(&d);
                (d, TrainConfig::paper(), g)
            }
        };
        Self {
            preset: p,
            seed: 0,
            jobs: 1,
            decoder,
            train,
            generator,
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }

    /// Preset, then `file`, then `flags`. The preset comes from the flag, the
    /// file's `preset` key, or defaults to tiny.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let overlay = match file {
            Some(p) => Some(read_json(p)?),
            None => None,
        };
        let file_preset = overlay
            .as_ref()
            .and_then(|v| v.get("preset"))
            .map(|v| serde_json::from_value::<Preset>(v.clone()))
            .transpose()
            .map_err(|e| CliError::Parse {
                path: file.unwrap().to_path_buf(),
                message: e.to_string(),
            })?;
        let preset = flags.preset.or(file_preset).unwrap_or(Preset::Tiny);
        let mut base = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        if let Some(o) = overlay {
            merge(&mut base, o);
        }
        base["preset"] = serde_json::to_value(preset).unwrap();
        let mut cfg: Self = serde_json::from_value(base).map_err(|e| CliError::Parse {
            path: file.map(Path::to_path_buf).unwrap_or_default(),
            message: e.to_string(),
        })?;
        cfg.apply(flags);
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, f: &Overrides) {
        if let Some(s) = f.seed {
            self.seed = s;
        }
        if let Some(j) = f.jobs {
            self.jobs = j;
        }
        if f.data.is_some() {
            self.paths.data = f.data.clone();
        }
        if f.out.is_some() {
            self.paths.out = f.out.clone();
        }
        if f.checkpoint.is_some() {
            self.paths.checkpoint = f.checkpoint.clone();
        }
        if f.turns_only {
            self.eval.turns_only = true;
        }
        if let Some(e) = f.epochs {
            self.train.epochs = e;
        }
        if f.max_steps.is_some() {
            self.train.max_steps = f.max_steps;
        }
        if let Some(b) = f.batch {
            self.train.batch = b;
        }
        if let Some(lr) = f.lr {
            self.train.lr = lr;
        }
        if let Some(k) = f.modes {
            self.decoder.modes = k;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.decoder.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        if self.generator.t_hist != self.decoder.t_hist || self.generator.t_fut != self.decoder.t_fut {
            return Err(CliError::Validation(format!(
                "generator horizon {}+{} does not match decoder horizon {}+{}",
                self.generator.t_hist, self.generator.t_fut, self.decoder.t_hist, self.decoder.t_fut
            )));
        }
        if self.jobs == 0 {
            return Err(CliError::Validation("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the snapshot into `dir`, creating it if needed.
    pub fn snapshot(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let p = dir.join(RUN_CONFIG_FILE);
        fs::write(&p, self.to_json() + "\n").map_err(CliError::io(p))
    }
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Recursive object merge; non-object values in `top` replace `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 4, "decoder": {"modes": 3}, "train": {"lr": 0.01}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(c.preset, Preset::Tiny);
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.decoder.modes, 3);
        assert_eq!(c.decoder.dim, DecoderConfig::tiny().dim);
        assert_eq!(c.train.lr, 0.01);
        let flags = Overrides {
            seed: Some(9),
            modes: Some(6),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!((c.seed, c.decoder.modes), (9, 6));
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::resolve(None, &Overrides::default()).unwrap();
        c.snapshot(dir.path()).unwrap();
        let back = RunConfig::resolve(Some(&dir.path().join(RUN_CONFIG_FILE)), &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"decoder": {"mdoes": 3}}"#).unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&p), &Overrides::default()),
            Err(CliError::Parse { .. })
        ));
        fs::write(&p, r#"{"decoder": {"t_sub": 7}}"#).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn paper_preset_matches_generator_horizon() {
        let c = RunConfig::resolve(
            None,
            &Overrides {
                preset: Some(Preset::Paper),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((c.generator.t_hist, c.generator.t_fut), (50, 60));
        assert_eq!(c.decoder.modes, 6);
    }
}
