//! Decoder-only forecaster: a proposer and a refiner that share one token
//! history for past and predicted segments.

pub mod block;
pub mod detokenizer;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::config::{ConfigError, DecoderConfig};
use crate::geometry::{Pose, ReferenceFrame};
use crate::map_encoder::{MapEncoder, MapTokens};
use crate::nn::{Builder, Embedding, Linear, NnError};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::scene::{AgentType, MapGraph, Scene};
use crate::tensor::Tensor;

pub use block::{build_pairs, Cache, FactoredRound, StepGeometry, StepPairs};
pub use detokenizer::{Detokenizer, SubTrajectoryPrediction, Window, MIN_SCALE};
pub use tokenizer::{segment_features, Segment, Tokenizer, STEP_FEATURES};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("segment has {found} states, expected {expected}")]
    SegmentLength { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scene has {found} steps of {what}, config expects {expected}")]
    Horizon {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("no agent is observed at the last history step")]
    NoAgents,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("cache holds {found} steps, expected {expected}")]
    Cache { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Keeps every per-step distribution for the loss.
    Training,
    /// Keeps only the assembled forecast.
    Inference,
}

/// K trajectories per agent in scene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub agent_ids: Vec<String>,
    /// `[agent][mode][step] = [x, y, heading]`
    pub trajectories: Vec<Vec<Vec<[f64; 3]>>>,
    /// `[agent][mode]`
    pub probabilities: Vec<Vec<f64>>,
}

impl Forecast {
    pub fn agent(&self, id: &str) -> Option<usize> {
        self.agent_ids.iter().position(|a| a == id)
    }

    pub fn modes(&self) -> usize {
        self.probabilities.first().map_or(0, Vec::len)
    }
}

/// Everything one future step produced, rows ordered `agent * K + mode`.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Expressed in `input_frames`.
    pub proposal: SubTrajectoryPrediction,
    /// Expressed in `proposal_frames`.
    pub refined: Option<SubTrajectoryPrediction>,
    /// Endpoint frames of the input segment.
    pub input_frames: Vec<ReferenceFrame<f64>>,
    /// Endpoint frames of the proposed segment.
    pub proposal_frames: Vec<ReferenceFrame<f64>>,
    /// Proposed main window in scene coordinates, `[row][step]`.
    pub proposal_global: Vec<Vec<[f64; 3]>>,
    /// Final main window in scene coordinates, `[row][step]`.
    pub output_global: Vec<Vec<[f64; 3]>>,
    /// `[rows, 1]`
    pub logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Unroll {
    /// Scene indices of the decoded agents.
    pub agents: Vec<usize>,
    pub modes: usize,
    pub steps: Vec<StepOutput>,
    /// `[N, K]` mode logits of the last step.
    pub logits: Var,
    pub forecast: Forecast,
    pub proposer_cache: Cache,
    pub refiner_cache: Cache,
}

/// Observed part of one agent track.
#[derive(Debug, Clone)]
struct Track {
    index: usize,
    id: String,
    agent_type: AgentType,
    states: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

/// Agents observed at the last history step, with states before `t_hist` only.
fn observed_tracks(scene: &Scene, t_hist: usize) -> Vec<Track> {
    scene
        .agents
        .iter()
        .enumerate()
        .filter(|(_, a)| a.states.get(t_hist - 1).is_some_and(|s| s.valid))
        .map(|(i, a)| Track {
            index: i,
            id: a.id.clone(),
            agent_type: a.agent_type,
            states: a.states[..t_hist].iter().map(|s| [s.x, s.y, s.heading]).collect(),
            valid: a.states[..t_hist].iter().map(|s| s.valid).collect(),
        })
        .collect()
}

fn history_segment(track: &Track, s: usize, t_sub: usize) -> Segment {
    let range = s * t_sub..(s + 1) * t_sub;
    let end = range.end - 1;
    let [x, y, h] = track.states[end];
    Segment {
        states: track.states[range.clone()].to_vec(),
        valid: track.valid[range].to_vec(),
        frame: ReferenceFrame::new(x, y, h, end as i64),
        agent_type: track.agent_type,
    }
}

/// Per-row poses of a main window `[rows, 2T]` / `[rows, T]`, local to `frames`,
/// mapped to scene coordinates.
fn window_to_global<T: Scalar>(
    pos: &Tensor<T>,
    hd: &Tensor<T>,
    frames: &[ReferenceFrame<f64>],
) -> Vec<Vec<[f64; 3]>> {
    frames
        .iter()
        .enumerate()
        .map(|(r, f)| {
            (0..hd.cols)
                .map(|i| {
                    let p = Pose::new(pos.at(r, 2 * i).f64(), pos.at(r, 2 * i + 1).f64(), hd.at(r, i).f64());
                    let g = f.to_global(p);
                    [g.x, g.y, g.heading]
                })
                .collect()
        })
        .collect()
}

/// Re-expresses local window locations from `src` frames in `dst` frames.
fn reframe<T: Scalar>(
    pos: &Tensor<T>,
    hd: &Tensor<T>,
    src: &[ReferenceFrame<f64>],
    dst: &[ReferenceFrame<f64>],
) -> (Tensor<T>, Tensor<T>) {
    let mut p = Tensor::zeros(pos.rows, pos.cols);
    let mut h = Tensor::zeros(hd.rows, hd.cols);
    for r in 0..src.len() {
        for i in 0..hd.cols {
            let local = Pose::new(pos.at(r, 2 * i).f64(), pos.at(r, 2 * i + 1).f64(), hd.at(r, i).f64());
            let q = dst[r].to_local(src[r].to_global(local));
            p.row_mut(r)[2 * i] = T::of(q.x);
            p.row_mut(r)[2 * i + 1] = T::of(q.y);
            h.row_mut(r)[i] = T::of(q.heading);
        }
    }
    (p, h)
}

fn endpoint_frames(states: &[Vec<[f64; 3]>], t: i64) -> Vec<ReferenceFrame<f64>> {
    states
        .iter()
        .map(|s| {
            let [x, y, h] = *s.last().expect("empty window");
            ReferenceFrame::new(x, y, h, t)
        })
        .collect()
}

/// Tokenizer, attention rounds and output head of the proposer or refiner.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub tokenizer: Tokenizer<T>,
    pub rounds: Vec<FactoredRound<T>>,
    pub mode_emb: Embedding,
    pub time_emb: Embedding,
    pub detokenizer: Detokenizer,
    /// Projection of proposer tokens into the refiner input.
    pub link: Option<Linear>,
}

/// Scene inputs shared by every step of one unroll.
#[derive(Debug, Clone)]
pub struct Prepared<'s> {
    pub map: &'s MapGraph,
    pub map_tokens: MapTokens,
    tracks: Vec<Track>,
}

impl Prepared<'_> {
    pub fn agents(&self) -> usize {
        self.tracks.len()
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.tracks.iter().map(|t| t.id.clone()).collect()
    }
}

/// Output of the proposer at one future step.
#[derive(Debug, Clone)]
pub struct Proposal {
    /// Local to `input_frames`.
    pub pred: SubTrajectoryPrediction,
    pub tokens: Var,
    pub input_frames: Vec<ReferenceFrame<f64>>,
    /// Endpoint frames of the proposed main window.
    pub frames: Vec<ReferenceFrame<f64>>,
    /// `[row][step]` in scene coordinates.
    pub global: Vec<Vec<[f64; 3]>>,
}

/// Output of the refiner at one future step.
#[derive(Debug, Clone)]
pub struct Refinement {
    /// Local to the proposal frames.
    pub pred: SubTrajectoryPrediction,
    pub tokens: Var,
    pub global: Vec<Vec<[f64; 3]>>,
    pub logits: Option<Var>,
}

impl<T: Scalar> Stage<T> {
    fn new<R: rand::Rng>(
        bld: &mut Builder<T, R>,
        name: &str,
        cfg: &DecoderConfig,
        dropout: f64,
        is_refiner: bool,
    ) -> Result<Self, NnError> {
        let mut s = bld.scope(name);
        let tokenizer = Tokenizer::new(&mut s, cfg.t_sub, cfg.dim, cfg.bands())?;
        let rounds = (0..cfg.rounds)
            .map(|i| FactoredRound::new(&mut s, &format!("round{i}"), cfg, dropout))
            .collect::<Result<_, _>>()?;
        let mode_emb = Embedding::new(&mut s, "mode_embedding", cfg.modes, cfg.dim, Init::Zeros)?;
        let time_emb = Embedding::new(&mut s, "time_embedding", cfg.fut_steps(), cfg.dim, Init::TruncNormal(0.02))?;
        let with_logit = is_refiner || !cfg.refinement;
        let detokenizer = Detokenizer::new(&mut s, cfg.dim, cfg.t_sub, with_logit)?;
        let link = if is_refiner {
            Some(Linear::new(&mut s, "link", cfg.dim, cfg.dim, true)?)
        } else {
            None
        };
        Ok(Self {
            tokenizer,
            rounds,
            mode_emb,
            time_emb,
            detokenizer,
            link,
        })
    }

    /// Runs the attention rounds on `x` and appends the round inputs to `own`.
    /// `future` is the index of the future step, `None` during bootstrap.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        cfg: &DecoderConfig,
        ctx: &Prepared,
        x: Var,
        geom: &StepGeometry,
        own: &mut Cache,
        other: &Cache,
        future: Option<usize>,
    ) -> Result<Var, DecoderError> {
        let rows = geom.rows();
        let pairs: StepPairs<T> = build_pairs(geom, &[own, other], ctx.map, &ctx.map_tokens.frames, cfg);
        let extra = match future {
            Some(f) => {
                let k: Vec<usize> = (0..rows).map(|r| r % geom.modes).collect();
                let m = self.mode_emb.lookup(g, &k)?;
                let t = self.time_emb.lookup(g, &vec![f; rows])?;
                Some(g.add(m, t))
            }
            None => None,
        };
        let mut x = x;
        let mut inputs = Vec::with_capacity(self.rounds.len());
        for (i, round) in self.rounds.iter().enumerate() {
            inputs.push(x);
            let hist = block::history_keys(g, &[own, other], i);
            x = round.forward(g, x, hist, ctx.map_tokens.tokens, &pairs, extra, &geom.valid);
        }
        for (slot, v) in own.tokens.iter_mut().zip(inputs) {
            slot.push(v);
        }
        own.frames.push(geom.frames.clone());
        own.valid.push(geom.valid.clone());
        Ok(x)
    }
}

/// Network layout; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Donut<T> {
    pub cfg: DecoderConfig,
    pub map: MapEncoder<T>,
    pub proposer: Stage<T>,
    pub refiner: Option<Stage<T>>,
}

impl<T: Scalar> Donut<T> {
    pub fn build(cfg: &DecoderConfig, dropout: f64, seed: u64) -> Result<(Self, ParamStore<T>), DecoderError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let map = MapEncoder::new(&mut b, cfg, dropout)?;
        let proposer = Stage::new(&mut b, "proposer", cfg, dropout, false)?;
        let refiner = if cfg.refinement {
            Some(Stage::new(&mut b, "refiner", cfg, dropout, true)?)
        } else {
            None
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                map,
                proposer,
                refiner,
            },
            store,
        ))
    }

    /// Checks the horizons, keeps agents observed at the last history step
    /// and encodes the map. Only states before `t_hist` are retained.
    pub fn prepare<'s>(&self, g: &mut Graph<T>, scene: &'s Scene) -> Result<Prepared<'s>, DecoderError> {
        let cfg = &self.cfg;
        if scene.t_hist != cfg.t_hist {
            return Err(DecoderError::Horizon {
                what: "history",
                expected: cfg.t_hist,
                found: scene.t_hist,
            });
        }
        if scene.t_fut != cfg.t_fut {
            return Err(DecoderError::Horizon {
                what: "future",
                expected: cfg.t_fut,
                found: scene.t_fut,
            });
        }
        let tracks = observed_tracks(scene, cfg.t_hist);
        if tracks.is_empty() {
            return Err(DecoderError::NoAgents);
        }
        Ok(Prepared {
            map: &scene.map,
            map_tokens: self.map.encode_map(g, &scene.map)?,
            tracks,
        })
    }

    /// Encodes the map, bootstraps the caches from the observed history and
    /// decodes the future autoregressively.
    pub fn unroll(&self, g: &mut Graph<T>, scene: &Scene, mode: RunMode) -> Result<Unroll, DecoderError> {
        let cfg = &self.cfg;
        let prep = self.prepare(g, scene)?;
        let (mut pc, mut rc) = self.bootstrap_history(g, &prep)?;
        let k = cfg.modes;
        let n = prep.agents();
        let mut input = self.first_input(&prep);
        let mut steps = Vec::with_capacity(cfg.fut_steps());
        for f in 0..cfg.fut_steps() {
            let p = self.propose_step(g, &prep, &input, &mut pc, &mut rc, f)?;
            let (refined, output_global, logits) = if self.refiner.is_some() {
                let r = self.refine_step(g, &prep, &p, &mut rc, &mut pc, f)?;
                (Some(r.pred), r.global, r.logits)
            } else {
                let logits = self.proposer.detokenizer.mode_logits(g, p.tokens);
                (None, p.global.clone(), logits)
            };
            input = self.next_input(&prep, &output_global, f);
            steps.push(StepOutput {
                proposal: p.pred,
                refined,
                input_frames: p.input_frames,
                proposal_frames: p.frames,
                proposal_global: p.global,
                output_global,
                logits,
            });
        }

        let expected = cfg.hist_steps() + cfg.fut_steps();
        for c in [&pc, &rc] {
            if c.steps() != expected && !(c.steps() == 0 && self.refiner.is_none()) {
                return Err(DecoderError::Cache {
                    expected,
                    found: c.steps(),
                });
            }
        }

        let last = steps.last().and_then(|s| s.logits).expect("logit head present");
        let logits = g.reshape(last, n, k);
        let lv = g.value(logits);
        if !lv.all_finite() {
            return Err(DecoderError::NonFinite("mode logits"));
        }
        let probabilities: Vec<Vec<f64>> = (0..n)
            .map(|a| {
                let row: Vec<f64> = lv.row(a).iter().map(|v| v.f64()).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let mut trajectories = vec![vec![Vec::with_capacity(cfg.t_fut); k]; n];
        for st in &steps {
            for (r, w) in st.output_global.iter().enumerate() {
                trajectories[r / k][r % k].extend_from_slice(w);
            }
        }
        if trajectories.iter().flatten().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(DecoderError::NonFinite("trajectories"));
        }
        let forecast = Forecast {
            agent_ids: prep.agent_ids(),
            trajectories,
            probabilities,
        };
        Ok(Unroll {
            agents: prep.tracks.iter().map(|t| t.index).collect(),
            modes: k,
            steps: if mode == RunMode::Training { steps } else { Vec::new() },
            logits,
            forecast,
            proposer_cache: pc,
            refiner_cache: rc,
        })
    }

    /// Unimodal pass over the ground-truth history segments in time order,
    /// then every cached row is repeated once per mode.
    pub fn bootstrap_history(&self, g: &mut Graph<T>, ctx: &Prepared) -> Result<(Cache, Cache), DecoderError> {
        let cfg = &self.cfg;
        let mut pc = Cache::new(cfg.rounds);
        let mut rc = Cache::new(cfg.rounds);
        for s in 0..cfg.hist_steps() {
            let segs: Vec<Segment> = ctx.tracks.iter().map(|t| history_segment(t, s, cfg.t_sub)).collect();
            let geom = StepGeometry {
                modes: 1,
                frames: segs.iter().map(|s| s.frame).collect(),
                valid: segs.iter().map(|s| *s.valid.last().unwrap()).collect(),
            };
            let x = self.proposer.tokenizer.forward(g, &segs)?;
            let hp = self.proposer.attend(g, cfg, ctx, x, &geom, &mut pc, &rc, None)?;
            if let Some(refiner) = &self.refiner {
                let x = refiner.tokenizer.forward(g, &segs)?;
                let l = refiner.link.as_ref().expect("refiner link").forward(g, hp);
                let x = g.add(x, l);
                refiner.attend(g, cfg, ctx, x, &geom, &mut rc, &pc, None)?;
            }
        }
        pc.duplicate(g, cfg.modes);
        rc.duplicate(g, cfg.modes);
        Ok((pc, rc))
    }

    /// The last observed segment of every agent, once per mode.
    pub fn first_input(&self, ctx: &Prepared) -> Vec<Segment> {
        let last = self.cfg.hist_steps() - 1;
        ctx.tracks
            .iter()
            .flat_map(|t| std::iter::repeat_n(history_segment(t, last, self.cfg.t_sub), self.cfg.modes))
            .collect()
    }

    fn segments_from(&self, ctx: &Prepared, windows: &[Vec<[f64; 3]>], frames: &[ReferenceFrame<f64>]) -> Vec<Segment> {
        let k = self.cfg.modes;
        windows
            .iter()
            .zip(frames)
            .enumerate()
            .map(|(r, (w, fr))| Segment {
                states: w.clone(),
                valid: vec![true; w.len()],
                frame: *fr,
                agent_type: ctx.tracks[r / k].agent_type,
            })
            .collect()
    }

    fn step_end(&self, f: usize) -> i64 {
        (self.cfg.t_hist + (f + 1) * self.cfg.t_sub - 1) as i64
    }

    /// Predicted segments of step `f` as the input of step `f + 1`.
    pub fn next_input(&self, ctx: &Prepared, windows: &[Vec<[f64; 3]>], f: usize) -> Vec<Segment> {
        let frames = endpoint_frames(windows, self.step_end(f));
        self.segments_from(ctx, windows, &frames)
    }

    /// Proposer pass for future step `f`; locations are local to the input
    /// segment endpoints.
    pub fn propose_step(
        &self,
        g: &mut Graph<T>,
        ctx: &Prepared,
        input: &[Segment],
        pc: &mut Cache,
        rc: &mut Cache,
        f: usize,
    ) -> Result<Proposal, DecoderError> {
        let cfg = &self.cfg;
        let input_frames: Vec<ReferenceFrame<f64>> = input.iter().map(|s| s.frame).collect();
        let geom = StepGeometry {
            modes: cfg.modes,
            frames: input_frames.clone(),
            valid: vec![true; input.len()],
        };
        let x = self.proposer.tokenizer.forward(g, input)?;
        let tokens = self.proposer.attend(g, cfg, ctx, x, &geom, pc, rc, Some(f))?;
        let pred = self.proposer.detokenizer.forward(g, tokens);
        let pos = g.detached_value(pred.main.pos_loc);
        let hd = g.detached_value(pred.main.hd_loc);
        let global = window_to_global(&pos, &hd, &input_frames);
        Ok(Proposal {
            pred,
            tokens,
            frames: endpoint_frames(&global, self.step_end(f)),
            input_frames,
            global,
        })
    }

    /// Refiner pass for future step `f`: the proposed segments are tokenized
    /// in their own endpoint frames and the outputs are offsets on the
    /// proposal.
    pub fn refine_step(
        &self,
        g: &mut Graph<T>,
        ctx: &Prepared,
        proposal: &Proposal,
        rc: &mut Cache,
        pc: &mut Cache,
        f: usize,
    ) -> Result<Refinement, DecoderError> {
        let refiner = self.refiner.as_ref().expect("refinement enabled");
        let cfg = &self.cfg;
        let segs = self.segments_from(ctx, &proposal.global, &proposal.frames);
        let geom = StepGeometry {
            modes: cfg.modes,
            frames: proposal.frames.clone(),
            valid: vec![true; segs.len()],
        };
        let x = refiner.tokenizer.forward(g, &segs)?;
        let l = refiner.link.as_ref().expect("refiner link").forward(g, proposal.tokens);
        let x = g.add(x, l);
        let tokens = refiner.attend(g, cfg, ctx, x, &geom, rc, pc, Some(f))?;
        let pred = self.offset(g, refiner, tokens, &proposal.pred, &proposal.input_frames, &proposal.frames);
        let pos = g.detached_value(pred.main.pos_loc);
        let hd = g.detached_value(pred.main.hd_loc);
        let global = window_to_global(&pos, &hd, &proposal.frames);
        let logits = refiner.detokenizer.mode_logits(g, tokens);
        Ok(Refinement {
            pred,
            tokens,
            global,
            logits,
        })
    }

    /// Refined windows: detached proposal locations in the proposal frames
    /// plus the refiner's offsets; scales come straight from the refiner.
    fn offset(
        &self,
        g: &mut Graph<T>,
        refiner: &Stage<T>,
        tokens: Var,
        proposal: &SubTrajectoryPrediction,
        input_frames: &[ReferenceFrame<f64>],
        proposal_frames: &[ReferenceFrame<f64>],
    ) -> SubTrajectoryPrediction {
        let raw = refiner.detokenizer.raw(g, tokens);
        let mut build = |base: &Window, r: detokenizer::RawWindow| {
            let pos = g.detached_value(base.pos_loc);
            let hd = g.detached_value(base.hd_loc);
            let (pos, hd) = reframe(&pos, &hd, input_frames, proposal_frames);
            let pos = g.constant(pos);
            let hd = g.constant(hd);
            Window {
                pos_loc: g.add(pos, r.pos_loc),
                pos_scale: detokenizer::positive(g, r.pos_scale),
                hd_loc: g.add(hd, r.hd_loc),
                hd_conc: detokenizer::positive(g, r.hd_conc),
            }
        };
        let [rm, ro] = raw;
        SubTrajectoryPrediction {
            main: build(&proposal.main, rm),
            over: build(&proposal.over, ro),
        }
    }
}

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Donut<T>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &DecoderConfig, dropout: f64, seed: u64) -> Result<Self, DecoderError> {
        let (net, params) = Donut::build(cfg, dropout, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.net.cfg
    }

    /// Deterministic inference without dropout.
    pub fn forecast(&self, scene: &Scene) -> Result<Forecast, DecoderError> {
        let mut g = Graph::new(&self.params);
        Ok(self.net.unroll(&mut g, scene, RunMode::Inference)?.forecast)
    }
}

#[cfg(test)]
mod tests;
