//! Mini-batch training with AdamW and a cosine schedule.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::Graph;
use crate::checkpoint::{entries_of, restore_prefixed, Checkpoint, CheckpointError, MOMENT1, MOMENT2};
use crate::config::{ConfigError, TrainConfig};
use crate::decoder::{DecoderError, Model, RunMode, Unroll, MIN_SCALE};
use crate::generator::scene_seed;
use crate::loss::{scene_loss, LossBreakdown, LossError};
use crate::metrics::{collect_cases, report, MetricError};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training scenes")]
    NoScenes,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scene {scene}: {source}")]
    Decoder { scene: String, source: DecoderError },
    #[error("scene {scene}: {source}")]
    Loss { scene: String, source: LossError },
    #[error("non-finite {component} at step {step} (scene {scene})")]
    NonFinite {
        component: &'static str,
        step: usize,
        scene: String,
    },
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGradient { param: String, step: usize },
    #[error("scale {value} below the floor at step {step} (scene {scene})")]
    ScaleFloor { value: f64, step: usize, scene: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint step {found} is beyond the schedule of {total} steps")]
    ResumeStep { found: usize, total: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl TrainError {
    /// True for failures caused by non-finite or degenerate numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. }
                | Self::NonFiniteGradient { .. }
                | Self::ScaleFloor { .. }
                | Self::Decoder {
                    source: DecoderError::NonFinite(_),
                    ..
                }
                | Self::Loss {
                    source: LossError::NonFinite(_)
                        | LossError::NonPositiveScale(_)
                        | LossError::NonPositiveConcentration(_),
                    ..
                }
        )
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, reaching zero at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols))
                .collect::<Vec<_>>()
        };
        Self {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.decay)).collect();
        for (i, (id, decay)) in ids.into_iter().enumerate() {
            let g = &grads.grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            for j in 0..p.data.len() {
                let gj = g.data[j].f64();
                let mj = BETA1 * m.data[j].f64() + (1.0 - BETA1) * gj;
                let vj = BETA2 * v.data[j].f64() + (1.0 - BETA2) * gj * gj;
                m.data[j] = T::of(mj);
                v.data[j] = T::of(vj);
                let mut pj = p.data[j].f64();
                if decay {
                    pj -= lr * self.weight_decay * pj;
                }
                pj -= lr * (mj / c1) / ((vj / c2).sqrt() + EPS);
                p.data[j] = T::of(pj);
            }
        }
    }

    fn moments(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (prefix, ts) in [(MOMENT1, &self.m), (MOMENT2, &self.v)] {
            for ((_, p), t) in store.iter().zip(ts.iter()) {
                out.push((format!("{prefix}{}", p.name), t.cast()));
            }
        }
        out
    }

    fn restore(&mut self, ck: &Checkpoint, store: &ParamStore<T>) -> Result<(), CheckpointError> {
        for (prefix, slot) in [(MOMENT1, 0), (MOMENT2, 1)] {
            let mut tmp = store.clone();
            restore_prefixed(ck, &mut tmp, prefix)?;
            let ts: Vec<Tensor<T>> = tmp.iter().map(|(_, p)| p.value.clone()).collect();
            if slot == 0 {
                self.m = ts;
            } else {
                self.v = ts;
            }
        }
        self.step = ck.step as usize;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives the CSV log and per-epoch checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Worker threads for per-scene gradients; 0 or 1 runs inline.
    pub jobs: usize,
    /// Measures minFDE / minADE on the training scenes after every epoch.
    pub eval_each_epoch: bool,
    pub verbose: bool,
    /// Poisons the loss at this optimizer step, for exercising the
    /// non-finite guard.
    pub poison_step: Option<usize>,
    /// Stops after this many optimizer steps without changing the schedule.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub train_minfde: Option<f64>,
    pub train_minade: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub total_steps: usize,
    pub epochs: Vec<EpochSummary>,
    /// Batch-mean breakdown of the last optimizer step.
    pub last: LossBreakdown,
}

/// Number of optimizer steps the schedule spans.
pub fn total_steps(n_scenes: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n_scenes.div_ceil(cfg.batch.max(1));
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, epoch as u64 ^ 0x5eed_0000_0000));
    order.shuffle(&mut rng);
    order
}

fn check_scales<T: Scalar>(g: &Graph<T>, unroll: &Unroll) -> Option<f64> {
    let floor = MIN_SCALE * (1.0 - 1e-6);
    let mut lowest = f64::INFINITY;
    for s in &unroll.steps {
        for p in std::iter::once(&s.proposal).chain(s.refined.as_ref()) {
            for w in [&p.main, &p.over] {
                for v in [w.pos_scale, w.hd_conc] {
                    for x in &g.value(v).data {
                        lowest = lowest.min(x.f64());
                    }
                }
            }
        }
    }
    (lowest < floor).then_some(lowest)
}

/// Loss and parameter gradients of one scene under dropout.
pub fn scene_gradients<T: Scalar>(
    model: &Model<T>,
    scene: &Scene,
    cfg: &TrainConfig,
    dropout_seed: u64,
    step: usize,
    poison: bool,
) -> Result<(Gradients<T>, LossBreakdown), TrainError> {
    let mut g = Graph::new(&model.params).with_dropout(cfg.dropout, ChaCha8Rng::seed_from_u64(dropout_seed));
    let unroll = model
        .net
        .unroll(&mut g, scene, RunMode::Training)
        .map_err(|source| TrainError::Decoder {
            scene: scene.id.clone(),
            source,
        })?;
    if let Some(value) = check_scales(&g, &unroll) {
        return Err(TrainError::ScaleFloor {
            value,
            step,
            scene: scene.id.clone(),
        });
    }
    let mut sl = scene_loss(&mut g, &unroll, scene, cfg.winner, model.config().overprediction).map_err(|source| {
        TrainError::Loss {
            scene: scene.id.clone(),
            source,
        }
    })?;
    if poison {
        sl.parts.classification = f64::NAN;
        sl.total = g.add_scalar(sl.total, T::nan());
    }
    if let Some(component) = sl.parts.non_finite() {
        return Err(TrainError::NonFinite {
            component,
            step,
            scene: scene.id.clone(),
        });
    }
    let mut grads = Gradients::zeros_like(&model.params);
    g.backward(sl.total, &mut grads);
    Ok((grads, sl.parts))
}

struct Log {
    out: Option<BufWriter<fs::File>>,
}

impl Log {
    fn header() -> String {
        format!("step,lr,{}", LossBreakdown::FIELDS.join(","))
    }

    /// Opens the log, keeping rows up to `keep_steps` when resuming.
    fn open(dir: Option<&Path>, keep_steps: Option<usize>) -> Result<Self, TrainError> {
        let Some(dir) = dir else { return Ok(Self { out: None }) };
        let path = dir.join(LOG_FILE);
        let mut kept = vec![Self::header()];
        if let Some(limit) = keep_steps {
            if let Ok(old) = fs::read_to_string(&path) {
                for line in old.lines().skip(1) {
                    let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s <= limit) {
                        kept.push(line.to_string());
                    }
                }
            }
        }
        let mut f = BufWriter::new(fs::File::create(path)?);
        for l in kept {
            writeln!(f, "{l}")?;
        }
        Ok(Self { out: Some(f) })
    }

    fn row(&mut self, step: usize, lr: f64, b: &LossBreakdown) -> Result<(), TrainError> {
        if let Some(f) = &mut self.out {
            let vals: Vec<String> = b.values().iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(f, "{step},{lr:.8e},{}", vals.join(","))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(f) = &mut self.out {
            f.flush()?;
        }
        Ok(())
    }
}

fn save<T: Scalar>(model: &Model<T>, opt: &AdamW<T>, dir: &Path) -> Result<(), TrainError> {
    let mut entries = entries_of(&model.params, "");
    entries.extend(opt.moments(&model.params));
    let ck = Checkpoint {
        config_hash: model.config().hash(),
        step: opt.step as u64,
        entries,
    };
    ck.save::<T>(&dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// minFDE and minADE of the current model on `scenes`.
pub fn training_metrics<T: Scalar>(model: &Model<T>, scenes: &[Scene]) -> Result<(f64, f64), TrainError> {
    let mut forecasts = Vec::with_capacity(scenes.len());
    for s in scenes {
        forecasts.push(model.forecast(s).map_err(|source| TrainError::Decoder {
            scene: s.id.clone(),
            source,
        })?);
    }
    let r = report(&collect_cases(&forecasts, scenes, None))?;
    Ok((r.minfde_k, r.minade_k))
}

pub fn train<T: Scalar>(
    model: &mut Model<T>,
    scenes: &[Scene],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let batch = cfg.batch.max(1);
    let per_epoch = scenes.len().div_ceil(batch);
    let total = total_steps(scenes.len(), cfg);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        ck.check_hash(model.config().hash())?;
        ck.restore(&mut model.params)?;
        opt.restore(&ck, &model.params)?;
        if opt.step > total {
            return Err(TrainError::ResumeStep {
                found: opt.step,
                total,
            });
        }
    }
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d)?;
    }
    let mut log = Log::open(opts.out_dir.as_deref(), opts.resume.as_ref().map(|_| opt.step))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;

    let mut report_out = TrainReport {
        steps: opt.step,
        total_steps: total,
        epochs: Vec::new(),
        last: LossBreakdown::default(),
    };
    let limit = opts.stop_after.map_or(total, |s| s.min(total));
    let first_epoch = opt.step / per_epoch;
    for epoch in first_epoch..cfg.epochs {
        if opt.step >= limit {
            break;
        }
        let order = epoch_order(scenes.len(), cfg.seed, epoch);
        let skip = opt.step - epoch * per_epoch;
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch).skip(skip) {
            if opt.step >= limit {
                break;
            }
            let step = opt.step;
            let poison = opts.poison_step == Some(step);
            let model_ref: &Model<T> = model;
            let work = |&i: &usize| {
                let seed = scene_seed(scene_seed(cfg.seed, step as u64), i as u64);
                scene_gradients(model_ref, &scenes[i], cfg, seed, step, poison)
            };
            let results: Vec<_> = if opts.jobs > 1 {
                pool.install(|| chunk.par_iter().map(work).collect())
            } else {
                chunk.iter().map(work).collect()
            };
            let mut grads = Gradients::zeros_like(&model.params);
            let mut parts = LossBreakdown::default();
            for r in results {
                let (gr, p) = r?;
                grads.add(&gr);
                parts.add(&p);
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(T::of(inv));
            parts = parts.scaled(inv);
            if !grads.all_finite() {
                let param = model
                    .params
                    .iter()
                    .zip(&grads.grads)
                    .find(|(_, g)| !g.all_finite())
                    .map(|((_, p), _)| p.name.clone())
                    .unwrap_or_default();
                return Err(TrainError::NonFiniteGradient { param, step });
            }
            let lr = cosine_lr(cfg.lr, step, total);
            opt.update(&mut model.params, &grads, lr);
            log.row(opt.step, lr, &parts)?;
            epoch_sum.add(&parts);
            epoch_batches += 1;
            report_out.last = parts;
        }
        log.flush()?;
        if let Some(d) = &opts.out_dir {
            save(model, &opt, d)?;
        }
        let (fde, ade) = if opts.eval_each_epoch {
            let (f, a) = training_metrics(model, scenes)?;
            (Some(f), Some(a))
        } else {
            (None, None)
        };
        let summary = EpochSummary {
            epoch,
            steps: opt.step,
            loss: epoch_sum.scaled(1.0 / epoch_batches.max(1) as f64),
            train_minfde: fde,
            train_minade: ade,
        };
        if opts.verbose {
            eprint!("epoch {epoch} step {} loss {:.4}", opt.step, summary.loss.total);
            if let (Some(f), Some(a)) = (fde, ade) {
                eprint!(" minFDE {f:.3} minADE {a:.3}");
            }
            eprintln!();
        }
        report_out.epochs.push(summary);
    }
    report_out.steps = opt.step;
    Ok(report_out)
}
