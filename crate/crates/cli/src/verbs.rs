use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use s2dc::ablation::{ablation_suite, score_model, AblationConfig, EvalConfig, UNTRAINED};
use s2dc::checkpoint::Checkpoint;
use s2dc::config::{materialize, read_json};
use s2dc::dataset::write_benchmark_dataset;
use s2dc::encoder::{EncoderConfig, EncoderParams};
use s2dc::eval::{matching_accuracy, similarity_heatmap, write_report_csv, HeatmapRequest};
use s2dc::geometry::{ground_truth_correspondence, resample, AffineTransform, PatchGrid};
use s2dc::matching::{dual_softmax, extract_matches, similarity_map, sinkhorn, write_matches_csv, MatcherConfig};
use s2dc::synth::{benchmark_scene, generate, ORGAN};
use s2dc::train::{fit, write_config_echo, TrainConfig, TrainState};
use s2dc::volume::Volume;
use s2dc::{Error, Result};

pub struct Invocation {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Invocation {
    fn user_json(&self) -> Result<serde_json::Value> {
        match &self.config {
            Some(p) => read_json(p),
            None => Ok(serde_json::json!({})),
        }
    }

    fn resolve<T: Default + Serialize + DeserializeOwned>(&self) -> Result<T> {
        materialize(&T::default(), self.user_json()?)
    }

    fn prepare_out(&self, cfg: &impl Serialize) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_config_echo(&self.out, cfg)
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub num_scenes: usize,
    /// First scene seed; scenes use `seed .. seed + num_scenes`.
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { num_scenes: 16, seed: 0 }
    }
}

pub fn gen_data(inv: &Invocation) -> Result<()> {
    let mut cfg: GenDataConfig = inv.resolve()?;
    if let Some(s) = inv.seed {
        cfg.seed = s;
    }
    if cfg.num_scenes == 0 {
        return Err(Error::Config("num_scenes must be ≥ 1".into()));
    }
    inv.prepare_out(&cfg)?;
    let seeds: Vec<u64> = (0..cfg.num_scenes as u64).map(|k| cfg.seed + k).collect();
    let (path, _) = write_benchmark_dataset(&inv.out, &seeds)?;
    println!("wrote {} scenes, manifest {}", seeds.len(), path.display());
    Ok(())
}

pub fn train(inv: &Invocation, resume: Option<&Path>) -> Result<()> {
    let restored = match resume {
        Some(p) => Some(TrainState::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let mut cfg = match (&inv.config, &restored) {
        (None, Some((_, saved))) => saved.clone(),
        _ => TrainConfig::from_json(inv.user_json()?)?,
    };
    if let Some(s) = inv.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let scenes = cfg.data.load()?;
    let run = fit(&cfg, &scenes, Some(&inv.out), restored.map(|(s, _)| s))?;
    if let Some((step, b)) = run.log.last() {
        println!("step {step}: total {:.6} (l_g {:.6}, l_p2p {:.6}, l_p2s {:.6})", b.total, b.l_g, b.l_p2p, b.l_p2s);
    }
    Ok(())
}

/// Where model weights come from: a checkpoint, or a fresh initialization
/// of `encoder` with `seed`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSource {
    pub checkpoint: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl ModelSource {
    fn load(&self) -> Result<(EncoderParams, Option<TrainConfig>)> {
        match &self.checkpoint {
            Some(p) => {
                let (state, cfg) = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
                Ok((state.student, Some(cfg)))
            }
            None => Ok((EncoderParams::init(self.encoder, self.seed)?, None)),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalVerbConfig {
    pub model: ModelSource,
    pub eval: EvalConfig,
}

pub fn eval(inv: &Invocation) -> Result<()> {
    let mut cfg: EvalVerbConfig = inv.resolve()?;
    if let Some(s) = inv.seed {
        cfg.model.seed = s;
    }
    inv.prepare_out(&cfg)?;
    let (params, train_cfg) = cfg.model.load()?;
    let train_cfg = train_cfg.unwrap_or_else(|| TrainConfig {
        encoder: *params.config(),
        seed: cfg.model.seed,
        ..TrainConfig::default()
    });
    let scenes = cfg.eval.scenes()?;
    let baseline = EncoderParams::init(*params.config(), train_cfg.seed)?;
    let mut scores = vec![score_model(UNTRAINED, &baseline, &train_cfg, &cfg.eval, &scenes)?];
    if cfg.model.checkpoint.is_some() {
        scores.push(score_model("model", &params, &train_cfg, &cfg.eval, &scenes)?);
    }
    let mut report = Vec::new();
    let reports: Vec<_> = scores.iter().map(|s| s.consistency.clone()).collect();
    write_report_csv(&mut report, &reports).expect("in-memory write");
    inv.write_file("report.csv", &report)?;
    let mut matching = String::from("model,precision,recall\n");
    for s in &scores {
        matching.push_str(&format!("{},{},{}\n", s.name, s.matching.precision, s.matching.recall));
    }
    inv.write_file("matching.csv", matching.as_bytes())?;
    for s in &scores {
        let m = s.consistency.mean;
        println!("{}: silhouette {:.4}, gap {:.4}", s.name, m.silhouette, m.gap);
    }
    Ok(())
}

/// A view: a saved volume, or a benchmark scene generated from its seed.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSource {
    pub volume: Option<PathBuf>,
    pub scene_seed: u64,
}

impl Default for SceneSource {
    fn default() -> Self {
        Self {
            volume: None,
            scene_seed: 1000,
        }
    }
}

impl SceneSource {
    fn load(&self) -> Result<Volume> {
        match &self.volume {
            Some(p) => Volume::read_svol(p),
            None => generate(&benchmark_scene(self.scene_seed)),
        }
    }
}

fn flipped(v: &Volume, axis: Option<usize>) -> Result<(Volume, AffineTransform)> {
    match axis {
        None => Ok((v.clone(), AffineTransform::identity())),
        Some(a) if a < 3 => {
            let t = AffineTransform::flip(a, v.center());
            Ok((resample(v, &t, Default::default())?, t))
        }
        Some(a) => Err(Error::Config(format!("flip axis must be 0, 1 or 2, got {a}"))),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapVerbConfig {
    pub model: ModelSource,
    pub scene: SceneSource,
    /// Anchor patch; defaults to the first organ patch (or patch 0).
    pub anchor: Option<usize>,
    /// Slicing axis, 0 = x.
    pub axis: usize,
    /// Flip the target view along this axis; `null` compares the view with
    /// itself.
    pub target_flip: Option<usize>,
}

pub fn heatmap(inv: &Invocation) -> Result<()> {
    let mut cfg: HeatmapVerbConfig = inv.resolve()?;
    if let Some(s) = inv.seed {
        cfg.model.seed = s;
    }
    let (params, _) = cfg.model.load()?;
    let source = cfg.scene.load()?;
    let grid = PatchGrid::new(source.dims(), params.config().patch_dims)?;
    if cfg.anchor.is_none() {
        let labels = source.labels().map(|_| grid.majority_labels(&source)).transpose()?;
        cfg.anchor = Some(labels.and_then(|l| l.iter().position(|&x| x == ORGAN)).unwrap_or(0));
    }
    inv.prepare_out(&cfg)?;
    let (target, _) = flipped(&source, cfg.target_flip)?;
    let req = HeatmapRequest {
        anchor: cfg.anchor.expect("resolved above"),
        axis: cfg.axis,
    };
    let hm = similarity_heatmap(req, &params.encode_tokens(&source, &grid)?, &params.encode_tokens(&target, &grid)?, &grid)?;
    let files = hm.write(&inv.out)?;
    println!("anchor {}: wrote {} files", req.anchor, files.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchVerbConfig {
    pub model: ModelSource,
    pub scene: SceneSource,
    /// The second view is the scene flipped along this axis (`null`: same view).
    pub flip_axis: Option<usize>,
    pub matcher: MatcherConfig,
    pub threshold: f64,
}

impl Default for MatchVerbConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            scene: SceneSource::default(),
            flip_axis: Some(0),
            matcher: MatcherConfig::default(),
            threshold: 0.0,
        }
    }
}

pub fn match_views(inv: &Invocation) -> Result<()> {
    let mut cfg: MatchVerbConfig = inv.resolve()?;
    if let Some(s) = inv.seed {
        cfg.model.seed = s;
    }
    cfg.matcher.validate()?;
    inv.prepare_out(&cfg)?;
    let (params, _) = cfg.model.load()?;
    let source = cfg.scene.load()?;
    let (target, t) = flipped(&source, cfg.flip_axis)?;
    let grid = PatchGrid::new(source.dims(), params.config().patch_dims)?;
    let sim = similarity_map(&params.encode_tokens(&source, &grid)?, &params.encode_tokens(&target, &grid)?)?;
    let assignment = match cfg.matcher {
        MatcherConfig::DualSoftmax { temperature } => dual_softmax(&sim, temperature)?,
        MatcherConfig::Sinkhorn { epsilon, max_iters, tol } => sinkhorn(&sim, epsilon, max_iters, tol)?,
    };
    let matches = extract_matches(&assignment.entries, cfg.threshold);
    let mut csv = Vec::new();
    write_matches_csv(&mut csv, &matches).expect("in-memory write");
    inv.write_file("matches.csv", &csv)?;
    let acc = matching_accuracy(&assignment.entries, &ground_truth_correspondence(&grid, &grid, &t)?, cfg.threshold)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} matches, precision {:.4}, recall {:.4}",
        matches.len(),
        acc.precision,
        acc.recall
    );
    Ok(())
}

pub fn ablate(inv: &Invocation) -> Result<()> {
    let mut cfg: AblationConfig = inv.resolve()?;
    if let Some(s) = inv.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    inv.prepare_out(&cfg)?;
    let report = ablation_suite(&cfg, Some(&inv.out))?;
    let u = report.untrained.consistency.mean;
    println!("{UNTRAINED}: silhouette {:.4}, gap {:.4}", u.silhouette, u.gap);
    for a in &report.arms {
        let m = a.score.consistency.mean;
        println!("{}: silhouette {:.4}, gap {:.4}", a.name, m.silhouette, m.gap);
    }
    Ok(())
}
