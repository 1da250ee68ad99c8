//! Loss-constraint ablation: the same training run under four loss toggles,
//! scored on held-out benchmark scenes against an untrained encoder.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{structure_consistency_report, transform_matching_accuracy, write_report_csv, ConsistencyReport, MatchingAccuracy};
use crate::geometry::AffineTransform;
use crate::losses::{LossBreakdown, LossToggles};
use crate::synth::{benchmark_scene, generate};
use crate::train::{fit, TrainConfig, TrainState};
use crate::volume::Volume;

pub const ARMS: [(&str, LossToggles); 4] = [
    ("baseline_lg", LossToggles { g: true, p2p: false, p2s: false }),
    ("lg_p2p", LossToggles { g: true, p2p: true, p2s: false }),
    ("lg_p2s", LossToggles { g: true, p2p: false, p2s: true }),
    ("lg_p2p_p2s", LossToggles { g: true, p2p: true, p2s: true }),
];

pub const UNTRAINED: &str = "untrained";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out benchmark scene seeds.
    pub scene_seeds: Vec<u64>,
    pub include_background: bool,
    /// Axis of the held-out flip used for matching accuracy.
    pub flip_axis: usize,
    /// Minimum assignment score for a predicted match.
    pub match_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scene_seeds: (1000..1008).collect(),
            include_background: false,
            flip_axis: 0,
            match_threshold: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn scenes(&self) -> Result<Vec<(String, Volume)>> {
        if self.flip_axis > 2 {
            return Err(Error::Config(format!("flip_axis must be 0, 1 or 2, got {}", self.flip_axis)));
        }
        let out = crate::parallel::map(&self.scene_seeds, |_, &s| generate(&benchmark_scene(s)).map(|v| (format!("scene_{s}"), v)));
        out.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                checkpoint_interval: 0,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Scores of one model on the evaluation scenes.
#[derive(Clone, Debug)]
pub struct ModelScore {
    pub name: String,
    pub consistency: ConsistencyReport,
    /// Mean over evaluation scenes of flip-matching precision and recall.
    pub matching: MatchingAccuracy,
}

pub fn score_model(name: &str, params: &EncoderParams, cfg: &TrainConfig, eval: &EvalConfig, scenes: &[(String, Volume)]) -> Result<ModelScore> {
    let consistency = structure_consistency_report(name, params, scenes, eval.include_background)?;
    let flip = AffineTransform::flip(eval.flip_axis, scenes[0].1.center());
    let per_scene = crate::parallel::map(scenes, |_, (_, v)| {
        transform_matching_accuracy(params, v, &flip, &cfg.matcher, eval.match_threshold)
    });
    let per_scene: Vec<MatchingAccuracy> = per_scene.into_iter().collect::<Result<_>>()?;
    let n = per_scene.len() as f64;
    let matching = MatchingAccuracy {
        precision: per_scene.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: per_scene.iter().map(|m| m.recall).sum::<f64>() / n,
        predicted: per_scene.iter().map(|m| m.predicted).sum(),
        correct: per_scene.iter().map(|m| m.correct).sum(),
    };
    Ok(ModelScore {
        name: name.into(),
        consistency,
        matching,
    })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    pub config: TrainConfig,
    pub final_losses: LossBreakdown,
    pub state: TrainState,
    pub score: ModelScore,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    pub untrained: ModelScore,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "arm,g,p2p,p2s,silhouette,intra,inter,gap,precision,recall,l_g,l_p2p,l_p2s,total"
        )?;
        for a in &self.arms {
            let t = a.config.losses;
            let m = a.score.consistency.mean;
            let f = a.final_losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                a.name,
                t.g as u8,
                t.p2p as u8,
                t.p2s as u8,
                m.silhouette,
                m.intra,
                m.inter,
                m.gap,
                a.score.matching.precision,
                a.score.matching.recall,
                f.l_g,
                f.l_p2p,
                f.l_p2s,
                f.total
            )?;
        }
        Ok(())
    }

    /// Per-scene consistency of every arm and of the untrained encoder.
    pub fn write_report_csv(&self, w: impl Write) -> std::io::Result<()> {
        let mut reports = vec![self.untrained.consistency.clone()];
        reports.extend(self.arms.iter().map(|a| a.score.consistency.clone()));
        write_report_csv(w, &reports)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, f) in [("ablation.csv", 0), ("report.csv", 1)] {
            let path = dir.join(name);
            let mut buf = Vec::new();
            if f == 0 {
                self.write_csv(&mut buf)
            } else {
                self.write_report_csv(&mut buf)
            }
            .expect("in-memory write");
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Configs of the four arms: `base` with only the loss toggles replaced.
pub fn arm_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    ARMS.iter()
        .map(|(name, toggles)| {
            (
                name.to_string(),
                TrainConfig {
                    losses: *toggles,
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// Train every arm with the shared seed and budget, then score all arms and
/// the untrained initialization on the evaluation scenes.
pub fn ablation_suite(cfg: &AblationConfig, out: Option<&Path>) -> Result<AblationReport> {
    let train_scenes = cfg.train.data.load()?;
    let eval_scenes = cfg.eval.scenes()?;
    let configs = arm_configs(&cfg.train);
    let arms = crate::parallel::map(&configs, |_, (name, arm_cfg)| -> Result<ArmResult> {
        let arm_out = out.map(|d| d.join(name));
        let run = fit(arm_cfg, &train_scenes, arm_out.as_deref(), None)?;
        let final_losses = run.log.last().map(|(_, b)| *b).unwrap_or_default();
        let score = score_model(name, &run.state.student, arm_cfg, &cfg.eval, &eval_scenes)?;
        Ok(ArmResult {
            name: name.clone(),
            config: arm_cfg.clone(),
            final_losses,
            state: run.state,
            score,
        })
    });
    let arms: Vec<ArmResult> = arms.into_iter().collect::<Result<_>>()?;
    let init = TrainState::new(&cfg.train)?;
    let untrained = score_model(UNTRAINED, &init.student, &cfg.train, &cfg.eval, &eval_scenes)?;
    let report = AblationReport { arms, untrained };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
