//! Pretraining loop: two augmented views per scene, student/teacher
//! encoding, the combined objective, AdamW, EMA and queue updates.
//!
//! Randomness for step `s` and batch item `k` comes from a ChaCha stream
//! keyed on `(seed, s, k)`, so the RNG needs no state of its own: a
//! restored [`TrainState`] continues exactly where the original left off.
//! Per-item work may run in parallel; gradients are summed in item order,
//! so results do not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::materialize;
use crate::dataset::DataConfig;
use crate::encoder::{BoundEncoder, EncoderConfig, EncoderParams, FeatureQueue, TeacherState};
use crate::error::{Error, Result};
use crate::geometry::{ground_truth_correspondence, CorrespondenceMatrix, PatchGrid};
use crate::losses::{total_loss_var, LossBreakdown, LossInputs, LossTerms, LossToggles, LossWeights, P2sOptions};
use crate::matching::MatcherConfig;
use crate::optim::{AdamW, OptimizerConfig};
use crate::synth::{augment, AugmentSpec};
use crate::tensor::Tensor;
use crate::volume::Volume;

const MAX_BATCH: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub losses: LossToggles,
    pub loss_weights: LossWeights,
    pub matcher: MatcherConfig,
    pub p2s: P2sOptions,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Teacher EMA coefficient.
    pub momentum: f64,
    pub queue_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentSpec,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint every this many steps (0: final step only).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            losses: LossToggles::default(),
            loss_weights: LossWeights::default(),
            matcher: MatcherConfig::default(),
            p2s: P2sOptions::default(),
            tau: 0.2,
            momentum: 0.99,
            queue_size: 256,
            optimizer: OptimizerConfig::default(),
            augment: AugmentSpec::default(),
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    /// Long schedule matching the published pretraining length. Everything
    /// else keeps the desk-scale defaults.
    pub fn long_preset() -> Self {
        Self {
            steps: 100_000,
            checkpoint_interval: 10_000,
            ..Self::default()
        }
    }

    /// Fill every field missing from `user` with its default. A top-level
    /// `"preset": "long"` selects [`TrainConfig::long_preset`] as the base.
    pub fn from_json(user: serde_json::Value) -> Result<Self> {
        let mut user = user;
        let base = match user.as_object_mut().and_then(|o| o.remove("preset")) {
            None => Self::default(),
            Some(serde_json::Value::String(s)) if s == "long" => Self::long_preset(),
            Some(other) => return Err(Error::Config(format!("unknown preset {other}"))),
        };
        let cfg = materialize(&base, user)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(crate::config::read_json(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        self.encoder.validate()?;
        self.matcher.validate()?;
        self.optimizer.validate()?;
        self.augment.validate(self.encoder.patch_dims)?;
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.batch_size >= MAX_BATCH {
            return Err(Error::Config(format!("batch_size must lie in [1, {MAX_BATCH})")));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        let w = self.loss_weights;
        if [w.g, w.p2p, w.p2s].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub student: EncoderParams,
    pub teacher: TeacherState,
    pub queue: FeatureQueue,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = EncoderParams::init(cfg.encoder, cfg.seed)?;
        Ok(Self {
            step: 0,
            teacher: TeacherState::new(&student, cfg.momentum)?,
            queue: FeatureQueue::new(cfg.queue_size, cfg.encoder.d_g),
            optimizer: AdamW::new(cfg.optimizer, student.tensors()),
            student,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let header = serde_json::json!({
            "format": "sckpt/1",
            "step": self.step,
            "optimizer_t": self.optimizer.t,
            "momentum": self.teacher.momentum,
            "queue_len": self.queue.len(),
            "config": cfg,
        });
        let names = self.student.names();
        let mut blobs = Vec::new();
        for (prefix, tensors) in [
            ("student/", self.student.tensors()),
            ("teacher/", self.teacher.params.tensors()),
            ("adam_m/", &self.optimizer.m[..]),
            ("adam_v/", &self.optimizer.v[..]),
        ] {
            for (n, t) in names.iter().zip(tensors) {
                blobs.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        if let Some(q) = self.queue.to_tensor() {
            blobs.push(("queue".into(), q));
        }
        Checkpoint { header, blobs }
    }

    /// Restore a state and the config it was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let bad = |what: &str| Error::format("sckpt/1", format!("header field {what} missing or invalid"));
        let h = &ckpt.header;
        let cfg: TrainConfig =
            serde_json::from_value(h.get("config").cloned().ok_or_else(|| bad("config"))?).map_err(|_| bad("config"))?;
        cfg.validate()?;
        let step = h.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))?;
        let t = h.get("optimizer_t").and_then(|v| v.as_u64()).ok_or_else(|| bad("optimizer_t"))?;
        let momentum = h.get("momentum").and_then(|v| v.as_f64()).ok_or_else(|| bad("momentum"))?;
        let student = EncoderParams::from_tensors(cfg.encoder, ckpt.group("student/"))?;
        let teacher = EncoderParams::from_tensors(cfg.encoder, ckpt.group("teacher/"))?;
        let m = EncoderParams::from_tensors(cfg.encoder, ckpt.group("adam_m/"))?;
        let v = EncoderParams::from_tensors(cfg.encoder, ckpt.group("adam_v/"))?;
        let queue = FeatureQueue::from_tensor(cfg.queue_size, cfg.encoder.d_g, ckpt.blob("queue"))?;
        let state = Self {
            step,
            teacher: TeacherState {
                params: teacher,
                momentum,
            },
            queue,
            optimizer: AdamW {
                config: cfg.optimizer,
                t,
                m: m.tensors().to_vec(),
                v: v.tensors().to_vec(),
            },
            student,
        };
        Ok((state, cfg))
    }
}

/// RNG of one `(seed, step)` pair: the batch draw when `item` is `None`,
/// otherwise the augmentation stream of batch item `item`.
pub fn stream_rng(seed: u64, step: u64, item: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = item.map_or(0, |k| k as u64 + 1);
    rng.set_stream(step.wrapping_mul(MAX_BATCH as u64).wrapping_add(lane));
    rng
}

/// One view pair ready for the loss: patch matrices of both views and
/// their ground-truth correspondence.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub patches_a: Tensor,
    pub patches_b: Tensor,
    pub m_gt: CorrespondenceMatrix,
}

impl ViewPair {
    /// Two independent augmentations of `v`; `H = H_b ∘ H_a⁻¹` relates them.
    pub fn sample(v: &Volume, grid: &PatchGrid, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Self> {
        let (va, ha) = augment(v, spec, rng)?;
        let (vb, hb) = augment(v, spec, rng)?;
        let h = hb.compose(&ha.inverse()?);
        Ok(Self {
            patches_a: grid.extract(&va)?,
            patches_b: grid.extract(&vb)?,
            m_gt: ground_truth_correspondence(grid, grid, &h)?,
        })
    }
}

/// Loss of one view pair on `tape`: student encodes view A (anchors),
/// teacher encodes view B. Returns the loss terms and the teacher's global
/// feature of view B.
pub fn pair_loss<'t>(
    tape: &'t Tape,
    student: &BoundEncoder<'t>,
    teacher: &BoundEncoder<'t>,
    pair: &ViewPair,
    queue: Option<&Tensor>,
    cfg: &TrainConfig,
) -> Result<(LossTerms<'t>, Var<'t>)> {
    let s_tokens = student.tokens(tape.constant(pair.patches_a.clone()))?;
    let t_tokens = teacher.tokens(tape.constant(pair.patches_b.clone()))?;
    let query = student.global(s_tokens)?;
    let positive = teacher.global(t_tokens)?;
    let inputs = LossInputs {
        query,
        positive,
        queue: queue.map(|q| tape.constant(q.clone())),
        tau: cfg.tau,
        student_tokens: s_tokens,
        teacher_tokens: t_tokens,
        m_gt: &pair.m_gt,
        matcher: cfg.matcher,
        p2s: cfg.p2s,
    };
    Ok((total_loss_var(cfg.losses, cfg.loss_weights, &inputs)?, positive))
}

struct ItemResult {
    grads: Vec<Tensor>,
    breakdown: LossBreakdown,
    teacher_global: Vec<f64>,
}

/// One optimizer step over a batch sampled from `scenes`.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, scenes: &[Volume]) -> Result<LossBreakdown> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let grid = PatchGrid::new(scenes[0].dims(), cfg.encoder.patch_dims)?;
    let step = state.step;
    let mut pick = stream_rng(cfg.seed, step, None);
    let batch: Vec<usize> = (0..cfg.batch_size).map(|_| pick.random_range(0..scenes.len())).collect();
    let queue = state.queue.to_tensor();
    let student = &state.student;
    let teacher = &state.teacher.params;

    let results = crate::parallel::map(&batch, |k, &scene| -> Result<ItemResult> {
        let mut rng = stream_rng(cfg.seed, step, Some(k));
        let pair = ViewPair::sample(&scenes[scene], &grid, &cfg.augment, &mut rng)?;
        let tape = Tape::new();
        let s = student.bind(&tape, true);
        let t = teacher.bind(&tape, false);
        let (terms, positive) = pair_loss(&tape, &s, &t, &pair, queue.as_ref(), cfg)?;
        if let Some(term) = terms.breakdown.non_finite_term() {
            return Err(Error::NonFiniteLoss { term, item: k, step });
        }
        let grads = tape.backward(terms.total)?;
        Ok(ItemResult {
            grads: s.vars().iter().map(|&v| grads.get(v)).collect(),
            breakdown: terms.breakdown,
            teacher_global: positive.value().into_data(),
        })
    });
    let results: Vec<ItemResult> = results.into_iter().collect::<Result<_>>()?;

    let inv = 1.0 / results.len() as f64;
    let mut grads: Vec<Tensor> = student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b * inv;
            }
        }
    }
    let lr = cfg.optimizer.lr_at(step, cfg.steps);
    state.optimizer.step(state.student.tensors_mut(), &grads, lr)?;
    state.teacher.ema_update(&state.student)?;
    let globals: Vec<Vec<f64>> = results.iter().map(|r| r.teacher_global.clone()).collect();
    state.queue.push(&globals)?;
    state.step += 1;
    let breakdowns: Vec<LossBreakdown> = results.iter().map(|r| r.breakdown).collect();
    Ok(LossBreakdown::mean(&breakdowns))
}

pub const LOSSES_HEADER: &str = "step,l_g,l_p2p,l_p2s,total";

pub fn loss_row(step: u64, b: &LossBreakdown) -> String {
    format!("{step},{},{},{},{}", b.l_g, b.l_p2p, b.l_p2s, b.total)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.sckpt")
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub state: TrainState,
    /// `(step, breakdown)` for every step run by this call.
    pub log: Vec<(u64, LossBreakdown)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run until `cfg.steps`, starting from `resume` or a fresh state. With an
/// output directory, writes `losses.csv`, checkpoints and
/// `config_echo.json`; on resume, rows after the resumed step are replaced.
pub fn fit(cfg: &TrainConfig, scenes: &[Volume], out: Option<&Path>, resume: Option<TrainState>) -> Result<FitOutput> {
    cfg.validate()?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    let start = state.step;
    let mut csv = String::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_config_echo(dir, cfg)?;
        csv = previous_rows(&dir.join("losses.csv"), start)?;
    }
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < cfg.steps {
        let b = train_step(&mut state, cfg, scenes)?;
        log.push((state.step, b));
        if let Some(dir) = out {
            writeln!(csv, "{}", loss_row(state.step, &b)).expect("string write");
            let due = cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0;
            if due || state.step == cfg.steps {
                let path = dir.join(checkpoint_name(state.step));
                state.to_checkpoint(cfg).save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out {
        let path = dir.join("losses.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(FitOutput {
        state,
        log,
        checkpoints,
    })
}

/// Header plus rows `1..=upto` of an existing loss log, or just the header.
fn previous_rows(path: &Path, upto: u64) -> Result<String> {
    let mut out = format!("{LOSSES_HEADER}\n");
    if upto == 0 || !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("losses.csv", format!("bad row {line:?}")))?;
        if step <= upto {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_config_echo(dir: &Path, cfg: &impl Serialize) -> Result<()> {
    let path = dir.join("config_echo.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
