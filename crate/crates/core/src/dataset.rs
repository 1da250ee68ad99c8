//! Scene collections: the JSON manifest written by `gen-data`, and the
//! procedural fallback used when no manifest is given.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{benchmark_scene, generate, SceneSpec};
use crate::volume::Volume;

pub const MANIFEST_FORMAT: &str = "s2dc-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format("manifest", format!("unsupported format tag {:?}", m.format)));
        }
        if m.scenes.is_empty() {
            return Err(Error::format("manifest", "no scenes listed"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_volumes(&self, manifest_path: &Path) -> Result<Vec<Volume>> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        self.scenes.iter().map(|e| Volume::read_svol(&dir.join(&e.file))).collect()
    }
}

/// Generate benchmark scenes for `seeds`, write them to `dir` as
/// `scene_<seed>.svol` (+ `.lbl`), and write `manifest.json`.
pub fn write_benchmark_dataset(dir: &Path, seeds: &[u64]) -> Result<(PathBuf, Manifest)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let specs: Vec<SceneSpec> = seeds.iter().map(|&s| benchmark_scene(s)).collect();
    let volumes = crate::parallel::map(&specs, |_, s| generate(s));
    let mut scenes = Vec::new();
    for (spec, v) in specs.into_iter().zip(volumes) {
        let file = PathBuf::from(format!("scene_{}.svol", spec.seed));
        v?.write_svol(&dir.join(&file))?;
        scenes.push(ManifestEntry {
            seed: spec.seed,
            file,
            spec,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        scenes,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok((path, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Scenes come from this manifest when set.
    pub manifest: Option<PathBuf>,
    /// Otherwise benchmark scenes with seeds `seed_base .. seed_base + num_scenes`.
    pub num_scenes: usize,
    pub seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            num_scenes: 16,
            seed_base: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<Volume>> {
        let volumes = match &self.manifest {
            Some(p) => Manifest::load(p)?.load_volumes(p)?,
            None => {
                if self.num_scenes == 0 {
                    return Err(Error::Config("num_scenes must be ≥ 1".into()));
                }
                let seeds: Vec<u64> = (0..self.num_scenes as u64).map(|k| self.seed_base + k).collect();
                crate::parallel::map(&seeds, |_, &s| generate(&benchmark_scene(s)))
                    .into_iter()
                    .collect::<Result<_>>()?
            }
        };
        let dims = volumes[0].dims();
        if volumes.iter().any(|v| v.dims() != dims) {
            return Err(Error::Config("all scenes must share the same dims".into()));
        }
        Ok(volumes)
    }
}
