//! Procedural labeled volumes and view augmentation.
//!
//! Scenes are rasterized from analytic shapes at voxel centers, so label
//! volumes are exact and reproducible from the seed alone.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample, AffineTransform, Interpolation};
use crate::volume::{Point, Volume, BACKGROUND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid { center: Point, radii: [f64; 3] },
    /// Solid cylinder of `radius` around the segment `start → end`.
    Tube { start: Point, end: Point, radius: f64 },
    /// Half-open box `[min, max)`.
    Box { min: Point, max: Point },
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|k| ((p[k] - center[k]) / radii[k]).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::Tube { start, end, radius } => {
                let d: [f64; 3] = std::array::from_fn(|k| end[k] - start[k]);
                let len2: f64 = d.iter().map(|v| v * v).sum();
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    ((0..3).map(|k| (p[k] - start[k]) * d[k]).sum::<f64>() / len2).clamp(0.0, 1.0)
                };
                let dist2: f64 = (0..3).map(|k| (p[k] - start[k] - t * d[k]).powi(2)).sum();
                dist2 <= radius * radius
            }
            Shape::Box { min, max } => (0..3).all(|k| min[k] <= p[k] && p[k] < max[k]),
        }
    }

    /// Axis-aligned bounds `(lo, hi)`.
    pub fn bounds(&self) -> (Point, Point) {
        match self {
            Shape::Ellipsoid { center, radii } => (
                std::array::from_fn(|k| center[k] - radii[k]),
                std::array::from_fn(|k| center[k] + radii[k]),
            ),
            Shape::Tube { start, end, radius } => (
                std::array::from_fn(|k| start[k].min(end[k]) - radius),
                std::array::from_fn(|k| start[k].max(end[k]) + radius),
            ),
            Shape::Box { min, max } => (*min, *max),
        }
    }

    /// Analytic volume in voxel units.
    pub fn analytic_volume(&self) -> f64 {
        match self {
            Shape::Ellipsoid { radii, .. } => 4.0 / 3.0 * std::f64::consts::PI * radii.iter().product::<f64>(),
            Shape::Tube { start, end, radius } => {
                let len = (0..3).map(|k| (end[k] - start[k]).powi(2)).sum::<f64>().sqrt();
                std::f64::consts::PI * radius * radius * len + 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
            }
            Shape::Box { min, max } => (0..3).map(|k| max[k] - min[k]).product(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub shape: Shape,
    pub label: u16,
    pub intensity: f64,
    pub texture_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub structures: Vec<Structure>,
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Scene("dims must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Scene(format!("background intensity {} outside [0, 1]", self.background)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Scene("noise sigma must be ≥ 0".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, s) in self.structures.iter().enumerate() {
            if s.label == BACKGROUND || !seen.insert(s.label) {
                return Err(Error::Scene(format!("structure {k}: label ids must be unique and ≥ 1")));
            }
            if !(0.0..=1.0).contains(&s.intensity) || !(s.texture_sigma >= 0.0) {
                return Err(Error::Scene(format!("structure {k}: intensity outside [0, 1] or negative texture")));
            }
            let (lo, hi) = s.shape.bounds();
            if (0..3).any(|a| lo[a] < 0.0 || hi[a] > self.dims[a] as f64) {
                return Err(Error::Scene(format!(
                    "structure {k} (label {}) extends outside the volume",
                    s.label
                )));
            }
        }
        Ok(())
    }
}

/// Rasterize a scene. Later structures overwrite earlier ones.
pub fn generate(spec: &SceneSpec) -> Result<Volume> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![BACKGROUND; n];
    let mut intensities = vec![spec.background; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for idx in 0..n {
        let (x, y, z) = (idx / (ny * nz), (idx / nz) % ny, idx % nz);
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        for (k, s) in spec.structures.iter().enumerate() {
            if s.shape.contains(p) {
                owner[idx] = Some(k);
            }
        }
    }
    for idx in 0..n {
        if let Some(k) = owner[idx] {
            let s = &spec.structures[k];
            labels[idx] = s.label;
            intensities[idx] = s.intensity + gaussian(&mut rng, s.texture_sigma);
        }
    }
    for v in intensities.iter_mut() {
        *v = (*v + gaussian(&mut rng, spec.noise_sigma)).clamp(0.0, 1.0);
    }
    Volume::new(spec.dims, intensities, Some(labels))
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// Structure ids used by [`benchmark_scene`].
pub const ORGAN: u16 = 1;
pub const VESSEL: u16 = 2;
pub const BLOCK: u16 = 3;

/// A 24³ scene with a large ellipsoid "organ", a thin "vessel" tube and a
/// small box, placed at seed-dependent positions.
pub fn benchmark_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce0e);
    let dims = [24usize; 3];
    // The box sits in one corner and the organ is pushed toward the opposite one.
    let corner: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
    let side: [f64; 3] = std::array::from_fn(|_| rng.random_range(11.0..13.0));
    let bmin: Point = std::array::from_fn(|k| if corner[k] { 0.0 } else { 24.0 - side[k] });
    let bmax: Point = std::array::from_fn(|k| bmin[k] + side[k]);

    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(8.5..10.5));
    let center: Point = std::array::from_fn(|k| {
        let c = if corner[k] { 24.0 - radii[k] } else { radii[k] };
        c + if corner[k] { -rng.random_range(0.0..1.5) } else { rng.random_range(0.0..1.5) }
    });

    let axis = rng.random_range(0..3);
    let radius = rng.random_range(1.5..2.5);
    let mut start: Point = std::array::from_fn(|_| rng.random_range(radius + 1.0..24.0 - radius - 1.0));
    let mut end = start;
    start[axis] = radius;
    end[axis] = 24.0 - radius;

    SceneSpec {
        dims,
        structures: vec![
            Structure {
                shape: Shape::Ellipsoid { center, radii },
                label: ORGAN,
                intensity: 0.55,
                texture_sigma: 0.05,
            },
            Structure {
                shape: Shape::Box { min: bmin, max: bmax },
                label: BLOCK,
                intensity: 0.3,
                texture_sigma: 0.03,
            },
            Structure {
                shape: Shape::Tube { start, end, radius },
                label: VESSEL,
                intensity: 0.9,
                texture_sigma: 0.03,
            },
        ],
        background: 0.1,
        noise_sigma: 0.03,
        seed,
    }
}

/// Optional small continuous rotation/scale on top of the grid-exact group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAffine {
    pub max_angle_deg: f64,
    pub max_scale_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    /// Proper 90° rotations of the cube.
    pub rotations: bool,
    /// Axis reflections.
    pub flips: bool,
    /// Largest integer translation per axis, in voxels.
    pub max_translation: [usize; 3],
    pub continuous: Option<ContinuousAffine>,
    pub noise_sigma: f64,
    /// Gamma exponent range `[lo, hi]`.
    pub gamma: [f64; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotations: true,
            flips: true,
            max_translation: [4; 3],
            continuous: None,
            noise_sigma: 0.02,
            gamma: [0.8, 1.25],
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotations: false,
            flips: false,
            max_translation: [0; 3],
            continuous: None,
            noise_sigma: 0.0,
            gamma: [1.0, 1.0],
        }
    }

    pub fn intensity_only(noise_sigma: f64, gamma: [f64; 2]) -> Self {
        Self {
            noise_sigma,
            gamma,
            ..Self::none()
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flips: true,
            ..Self::none()
        }
    }

    pub fn validate(&self, patch_dims: [usize; 3]) -> Result<()> {
        for k in 0..3 {
            if self.max_translation[k] > patch_dims[k] {
                return Err(Error::Config(format!(
                    "max translation {} exceeds the patch extent {} on axis {k}",
                    self.max_translation[k], patch_dims[k]
                )));
            }
        }
        if !(self.gamma[0] > 0.0 && self.gamma[0] <= self.gamma[1]) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("gamma range must be positive and ordered; noise ≥ 0".into()));
        }
        Ok(())
    }
}

/// All signed permutation matrices allowed by the spec.
fn linear_group(rotations: bool, flips: bool) -> Vec<[[f64; 3]; 3]> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for perm in PERMS {
        for signs in 0..8u8 {
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                m[r][perm[r]] = if signs >> r & 1 == 1 { -1.0 } else { 1.0 };
            }
            let t = AffineTransform::new(m, [0.0; 3]).unwrap();
            let det = t.determinant();
            let identity_perm = perm == [0, 1, 2];
            let keep = match (rotations, flips) {
                (false, false) => identity_perm && signs == 0,
                (true, false) => det > 0.0,
                (false, true) => identity_perm && (signs == 0 || signs.count_ones() == 1),
                (true, true) => true,
            };
            if keep {
                out.push(m);
            }
        }
    }
    out
}

/// Sample a geometric transform about the volume center.
pub fn sample_transform(dims: [usize; 3], spec: &AugmentSpec, rng: &mut impl Rng) -> AffineTransform {
    let center: Point = dims.map(|d| d as f64 / 2.0);
    let group = linear_group(spec.rotations, spec.flips);
    let mut linear = *group.choose(rng).expect("group contains the identity");
    if let Some(c) = spec.continuous {
        let angle = rng.random_range(-c.max_angle_deg..=c.max_angle_deg).to_radians();
        let axis = rng.random_range(0..3usize);
        let scale = 1.0 + rng.random_range(-c.max_scale_delta..=c.max_scale_delta);
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut r = [[0.0; 3]; 3];
        r[axis][axis] = scale;
        r[a][a] = scale * angle.cos();
        r[a][b] = -scale * angle.sin();
        r[b][a] = scale * angle.sin();
        r[b][b] = scale * angle.cos();
        linear = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| r[i][k] * linear[k][j]).sum()));
    }
    let rot = AffineTransform::about_center(linear, center).expect("invertible by construction");
    let shift: [f64; 3] = std::array::from_fn(|k| {
        let m = spec.max_translation[k] as i64;
        if m == 0 {
            0.0
        } else {
            rng.random_range(-m..=m) as f64
        }
    });
    AffineTransform::translation_by(shift).compose(&rot)
}

/// Produce the augmented view of `v` and the transform `H` mapping source
/// positions to view positions. Intensity jitter never touches labels.
pub fn augment(v: &Volume, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<(Volume, AffineTransform)> {
    let h = sample_transform(v.dims(), spec, rng);
    let interp = if h.is_grid_exact() {
        Interpolation::Nearest
    } else {
        Interpolation::Trilinear
    };
    let mut out = if h == AffineTransform::identity() {
        v.clone()
    } else {
        resample(v, &h, interp)?
    };
    let gamma = if spec.gamma[0] < spec.gamma[1] {
        rng.random_range(spec.gamma[0]..=spec.gamma[1])
    } else {
        spec.gamma[0]
    };
    if gamma != 1.0 {
        for x in out.intensities_mut() {
            *x = x.clamp(0.0, 1.0).powf(gamma);
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for x in out.intensities_mut() {
            *x += normal.sample(rng);
        }
    }
    Ok((out, h))
}
