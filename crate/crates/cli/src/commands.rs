use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use donut_core::autograd::Graph;
use donut_core::checkpoint::Checkpoint;
use donut_core::decoder::{Forecast, Model, RunMode};
use donut_core::generator::{generate_synthetic_scene, scene_seed};
use donut_core::loss::scene_loss;
use donut_core::metrics::{
    collect_cases, filter_turns, horizon_curve, min_ade_with, pairs, report, AdeSelection, MetricReport, HORIZONS,
};
use donut_core::nn::{grad_check, sample_coords, GradCheckReport};
use donut_core::params::Gradients;
use donut_core::scene::{load_scene, save_scene, Scene};
use donut_core::train::{self, TrainOptions, TrainReport, CHECKPOINT_FILE};
use donut_core::Model32;

use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::error::CliError;
use crate::forecaster::Forecaster;
use crate::output::{svg, ScenePrediction};

pub const METRICS_FILE: &str = "metrics.csv";
pub const HORIZON_FILE: &str = "horizon.csv";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.json")
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(CliError::io(d))?;
    }
    fs::write(path, text).map_err(CliError::io(path))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

/// Writes `count` generated scenes into the output directory.
pub fn gen(cfg: &RunConfig, count: usize) -> Result<Vec<PathBuf>, CliError> {
    let out = require(&cfg.paths.out, "--out")?;
    cfg.snapshot(out)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_synthetic_scene(&cfg.generator, scene_seed(cfg.seed, i as u64))?;
        let p = out.join(scene_file_name(i));
        save_scene(&scene, &p).map_err(|e| CliError::Validation(e.to_string()))?;
        written.push(p);
    }
    Ok(written)
}

/// Loads every `*.json` scene in `dir` in file-name order, skipping and
/// reporting files that fail to parse or validate.
pub fn load_scenes(dir: &Path, cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    let entries = fs::read_dir(dir).map_err(CliError::io(dir))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != RUN_CONFIG_FILE))
        .collect();
    files.sort();
    let mut scenes = Vec::with_capacity(files.len());
    for p in &files {
        match load_scene(p) {
            Ok(s) if s.t_hist != cfg.decoder.t_hist || s.t_fut != cfg.decoder.t_fut => eprintln!(
                "warning: skipping {}: horizon {}+{} does not match the model's {}+{}",
                p.display(),
                s.t_hist,
                s.t_fut,
                cfg.decoder.t_hist,
                cfg.decoder.t_fut
            ),
            Ok(s) => scenes.push(s),
            Err(e) => eprintln!("warning: skipping {e}"),
        }
    }
    if scenes.is_empty() {
        return Err(CliError::Validation(format!("no valid scenes in {}", dir.display())));
    }
    Ok(scenes)
}

#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    pub resume: bool,
    pub poison_step: Option<usize>,
    pub eval_each_epoch: bool,
    pub verbose: bool,
}

pub fn train(cfg: &RunConfig, flags: &TrainFlags) -> Result<TrainReport, CliError> {
    let data = require(&cfg.paths.data, "--data")?;
    let out = require(&cfg.paths.out, "--out")?;
    let scenes = load_scenes(data, cfg)?;
    cfg.snapshot(out)?;
    let resume = if flags.resume {
        let p = cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
        if !p.exists() {
            return Err(CliError::Validation(format!("no checkpoint to resume at {}", p.display())));
        }
        Some(p)
    } else {
        None
    };
    let mut model = Model32::new(&cfg.decoder, cfg.train.dropout, cfg.seed)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        jobs: cfg.jobs,
        eval_each_epoch: flags.eval_each_epoch,
        verbose: flags.verbose,
        poison_step: flags.poison_step,
        stop_after: None,
    };
    let report = train::train(&mut model, &scenes, &cfg.train, &opts)?;
    write(&out.join(TRAIN_REPORT_FILE), &json(&report))?;
    Ok(report)
}

/// Builds the model described by `cfg` and fills it from its checkpoint.
pub fn load_model(cfg: &RunConfig) -> Result<Model32, CliError> {
    let path = require(&cfg.paths.checkpoint, "--checkpoint")?;
    let ck = Checkpoint::load(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let mut model = Model32::new(&cfg.decoder, 0.0, cfg.seed)?;
    ck.check_hash(cfg.decoder.hash())
        .and_then(|_| ck.restore(&mut model.params))
        .map_err(|source| CliError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(model)
}

/// Forecasts every scene, in parallel when `jobs > 1`, in scene order.
pub fn forecast_all(f: &dyn Forecaster, scenes: &[Scene], jobs: usize) -> Result<Vec<Forecast>, CliError> {
    let run = || scenes.par_iter().map(|s| f.forecast(s)).collect::<Result<Vec<_>, _>>();
    let out = if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Validation(e.to_string()))?
            .install(run)
    } else {
        scenes.iter().map(|s| f.forecast(s)).collect()
    };
    let out = out?;
    for (fc, s) in out.iter().zip(scenes) {
        for (id, p) in fc.agent_ids.iter().zip(&fc.probabilities) {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CliError::Numeric(format!(
                    "probabilities of agent {id} in scene {} sum to {sum}",
                    s.id
                )));
            }
        }
    }
    Ok(out)
}

pub fn horizons(t_fut: usize) -> Vec<usize> {
    let mut h: Vec<usize> = HORIZONS.iter().copied().filter(|&h| h <= t_fut).collect();
    if h.last() != Some(&t_fut) {
        h.push(t_fut);
    }
    h
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    /// `None` when no agent survives the filters.
    pub report: Option<MetricReport>,
    pub minade_best_average: Option<f64>,
    pub horizons: Vec<(usize, f64)>,
    pub predictions: Vec<ScenePrediction>,
}

pub fn evaluate(f: &dyn Forecaster, scenes: &[Scene], cfg: &RunConfig) -> Result<EvalOutput, CliError> {
    let forecasts = forecast_all(f, scenes, cfg.jobs)?;
    let keep = cfg
        .eval
        .turns_only
        .then(|| filter_turns(scenes, cfg.eval.turn_threshold_deg));
    let cases = collect_cases(&forecasts, scenes, keep.as_deref());
    let predictions = forecasts.iter().zip(scenes).map(|(f, s)| ScenePrediction::focal(s, f)).collect();
    if cases.is_empty() {
        return Ok(EvalOutput {
            report: None,
            minade_best_average: None,
            horizons: Vec::new(),
            predictions,
        });
    }
    let mut ba = 0.0;
    for c in &cases {
        ba += min_ade_with(&c.traj, &c.gt, AdeSelection::BestAverage)?;
    }
    Ok(EvalOutput {
        report: Some(report(&cases)?),
        minade_best_average: Some(ba / cases.len() as f64),
        horizons: horizon_curve(&pairs(&cases), &horizons(cfg.decoder.t_fut))?,
        predictions,
    })
}

/// Writes the metric and horizon CSVs plus predictions into `out`.
pub fn write_eval(out: &Path, e: &EvalOutput) -> Result<(), CliError> {
    let mut metrics = format!("{}\n", MetricReport::CSV_HEADER);
    if let Some(r) = &e.report {
        metrics += &r.csv_row();
        metrics.push('\n');
    }
    write(&out.join(METRICS_FILE), &metrics)?;
    let mut h = String::from("horizon,minfde6\n");
    for (step, v) in &e.horizons {
        h += &format!("{step},{v:.6}\n");
    }
    write(&out.join(HORIZON_FILE), &h)?;
    write(&out.join(PREDICTIONS_FILE), &json(&e.predictions))
}

pub fn eval(f: &dyn Forecaster, cfg: &RunConfig, verbose: bool) -> Result<EvalOutput, CliError> {
    let data = require(&cfg.paths.data, "--data")?;
    let scenes = load_scenes(data, cfg)?;
    let e = evaluate(f, &scenes, cfg)?;
    if let Some(out) = &cfg.paths.out {
        cfg.snapshot(out)?;
        write_eval(out, &e)?;
    }
    match &e.report {
        Some(r) => {
            println!("{r}");
            if verbose {
                println!("minADE_K (best average) {:.4}", e.minade_best_average.unwrap_or(0.0));
                for (h, v) in &e.horizons {
                    println!("minFDE_K @ {h:>3} {v:.4}");
                }
            }
        }
        None => eprintln!(
            "warning: no agents left to score{}",
            if cfg.eval.turns_only { " after the turn filter" } else { "" }
        ),
    }
    Ok(e)
}

pub fn rollout(f: &dyn Forecaster, cfg: &RunConfig, scene_path: &Path, svg_out: bool) -> Result<ScenePrediction, CliError> {
    let out = require(&cfg.paths.out, "--out")?;
    let scene = load_scene(scene_path).map_err(|e| CliError::Validation(e.to_string()))?;
    let fc = forecast_all(f, std::slice::from_ref(&scene), 1)?.remove(0);
    let pred = ScenePrediction::focal(&scene, &fc);
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.snapshot(d)?;
    } else {
        cfg.snapshot(Path::new("."))?;
    }
    write(out, &json(&pred))?;
    if svg_out {
        write(&out.with_extension("svg"), &svg(&scene, &pred))?;
    }
    Ok(pred)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Central-difference check of the full loss on one generated scene, in `f64`.
pub fn gradcheck(cfg: &RunConfig, coords: usize, eps: f64, fault: bool) -> Result<GradCheckReport, CliError> {
    let model = Model::<f64>::new(&cfg.decoder, 0.0, cfg.seed)?;
    let scene = generate_synthetic_scene(&cfg.generator, scene_seed(cfg.seed, 0))?;
    let mut store = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = sample_coords(&store, coords, &mut rng);
    let fault = fault.then(|| picks[0]);
    let net = &model.net;
    let overprediction = cfg.decoder.overprediction;
    let winner = cfg.train.winner;
    let mut failure = None;
    let report = grad_check(
        &mut store,
        |g| {
            let u = match net.unroll(g, &scene, RunMode::Training) {
                Ok(u) => u,
                Err(e) => {
                    failure.get_or_insert(e.to_string());
                    return g.constant(donut_core::tensor::Tensor::scalar(f64::NAN));
                }
            };
            match scene_loss(g, &u, &scene, winner, overprediction) {
                Ok(l) => l.total,
                Err(e) => {
                    failure.get_or_insert(e.to_string());
                    g.constant(donut_core::tensor::Tensor::scalar(f64::NAN))
                }
            }
        },
        eps,
        &picks,
        fault,
    );
    if let Some(msg) = failure {
        return Err(CliError::Numeric(msg));
    }
    report.map_err(|e| CliError::Numeric(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub scenes: usize,
    pub parameters: usize,
    pub inference_ms: f64,
    pub train_step_ms: f64,
}

/// Times inference unrolls and forward+backward passes on generated scenes.
pub fn bench(cfg: &RunConfig, count: usize) -> Result<BenchReport, CliError> {
    let model = Model32::new(&cfg.decoder, 0.0, cfg.seed)?;
    let scenes: Vec<Scene> = (0..count.max(1))
        .map(|i| generate_synthetic_scene(&cfg.generator, scene_seed(cfg.seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let t0 = Instant::now();
    for s in &scenes {
        model.forecast(s)?;
    }
    let inference_ms = t0.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64;
    let t1 = Instant::now();
    for s in &scenes {
        let mut g = Graph::new(&model.params);
        let u = model.net.unroll(&mut g, s, RunMode::Training)?;
        let l = scene_loss(&mut g, &u, s, cfg.train.winner, cfg.decoder.overprediction)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut grads = Gradients::zeros_like(&model.params);
        g.backward(l.total, &mut grads);
    }
    let train_step_ms = t1.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64;
    let r = BenchReport {
        scenes: scenes.len(),
        parameters: model.params.num_scalars(),
        inference_ms,
        train_step_ms,
    };
    if let Some(out) = &cfg.paths.out {
        cfg.snapshot(out)?;
        write(&out.join("bench.json"), &json(&r))?;
    }
    Ok(r)
}
