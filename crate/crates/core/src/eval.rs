//! Structure-aware feature quality: silhouette over patch tokens grouped by
//! structure label, intra/inter-label cosine similarity, matching accuracy
//! against ground-truth correspondence, and anchor similarity heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::geometry::{ground_truth_correspondence, resample, AffineTransform, CorrespondenceMatrix, PatchGrid};
use crate::matching::{dual_softmax, extract_matches, similarity_map, sinkhorn, FeatureSet, MatcherConfig};
use crate::tensor::Tensor;
use crate::volume::{Volume, BACKGROUND};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatureSet {
    pub features: FeatureSet,
    pub labels: Vec<u16>,
    pub source: String,
}

impl LabeledFeatureSet {
    pub fn new(features: FeatureSet, labels: Vec<u16>, source: impl Into<String>) -> Result<Self> {
        if labels.len() != features.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_feature_set",
                left: vec![features.len()],
                right: vec![labels.len()],
            });
        }
        Ok(Self {
            features,
            labels,
            source: source.into(),
        })
    }

    /// Student tokens of `v` labeled by patch majority.
    pub fn from_volume(params: &EncoderParams, v: &Volume, grid: &PatchGrid, source: impl Into<String>) -> Result<Self> {
        let features = params.encode_tokens(v, grid)?;
        let labels = grid.majority_labels(v)?;
        Self::new(features, labels, source)
    }

    /// Unit-normalized tokens and labels, background dropped unless asked.
    fn selected(&self, include_background: bool) -> (Vec<Vec<f64>>, Vec<u16>) {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == BACKGROUND && !include_background {
                continue;
            }
            let t = self.features.token(i);
            let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            pts.push(if n > 0.0 { t.iter().map(|x| x / n).collect() } else { t.to_vec() });
            labels.push(l);
        }
        (pts, labels)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette of `points` under `labels`. Singletons contribute 0;
/// `a == b` gives 0.
pub fn silhouette_points(points: &[Vec<f64>], labels: &[u16]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "silhouette",
            left: vec![points.len()],
            right: vec![labels.len()],
        });
    }
    let mut clusters: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::TooFewLabels(clusters.len()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| euclid(p, &points[j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, m)| m.iter().map(|&j| euclid(p, &points[j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Silhouette of unit-normalized tokens grouped by structure label.
pub fn silhouette(lfs: &LabeledFeatureSet, include_background: bool) -> Result<f64> {
    let (pts, labels) = lfs.selected(include_background);
    silhouette_points(&pts, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineGap {
    pub intra: f64,
    pub inter: f64,
    pub gap: f64,
}

/// Mean cosine similarity over same-label and different-label token pairs.
pub fn cosine_gap(lfs: &LabeledFeatureSet, include_background: bool) -> Result<CosineGap> {
    let (pts, labels) = lfs.selected(include_background);
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let c: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::TooFewElements {
            what: "same-label and cross-label token pairs",
            min: 1,
            got: ni.min(nx),
        });
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    Ok(CosineGap {
        intra,
        inter,
        gap: intra - inter,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingAccuracy {
    pub precision: f64,
    pub recall: f64,
    pub predicted: usize,
    pub correct: usize,
}

/// Mutual-argmax matches of `m_hat` at or above `threshold`, scored
/// against the support of `m_gt`. No predictions gives precision 1.
pub fn matching_accuracy(m_hat: &Tensor, m_gt: &CorrespondenceMatrix, threshold: f64) -> Result<MatchingAccuracy> {
    if m_hat.shape() != m_gt.entries().shape() {
        return Err(Error::ShapeMismatch {
            op: "matching_accuracy",
            left: m_hat.shape().to_vec(),
            right: m_gt.entries().shape().to_vec(),
        });
    }
    let matches = extract_matches(m_hat, threshold);
    let correct = matches.iter().filter(|m| m_gt.get(m.i, m.j)).count();
    let support = m_gt.support_count();
    Ok(MatchingAccuracy {
        precision: if matches.is_empty() { 1.0 } else { correct as f64 / matches.len() as f64 },
        recall: if support == 0 { 1.0 } else { correct as f64 / support as f64 },
        predicted: matches.len(),
        correct,
    })
}

/// Encode `v` and its image under `t`, match the token sets, and score the
/// result against the exact correspondence of `t`.
pub fn transform_matching_accuracy(
    params: &EncoderParams,
    v: &Volume,
    t: &AffineTransform,
    matcher: &MatcherConfig,
    threshold: f64,
) -> Result<MatchingAccuracy> {
    let grid = PatchGrid::new(v.dims(), params.config().patch_dims)?;
    let moved = resample(v, t, Default::default())?;
    let sim = similarity_map(&params.encode_tokens(v, &grid)?, &params.encode_tokens(&moved, &grid)?)?;
    let assignment = match *matcher {
        MatcherConfig::DualSoftmax { temperature } => dual_softmax(&sim, temperature)?,
        MatcherConfig::Sinkhorn { epsilon, max_iters, tol } => sinkhorn(&sim, epsilon, max_iters, tol)?,
    };
    let m_gt = ground_truth_correspondence(&grid, &grid, t)?;
    matching_accuracy(&assignment.entries, &m_gt, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub silhouette: f64,
    pub intra: f64,
    pub inter: f64,
    pub gap: f64,
}

impl SceneMetrics {
    pub fn of(lfs: &LabeledFeatureSet, include_background: bool) -> Result<Self> {
        let g = cosine_gap(lfs, include_background)?;
        Ok(Self {
            silhouette: silhouette(lfs, include_background)?,
            intra: g.intra,
            inter: g.inter,
            gap: g.gap,
        })
    }

    fn fields(&self) -> [f64; 4] {
        [self.silhouette, self.intra, self.inter, self.gap]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            silhouette: f[0],
            intra: f[1],
            inter: f[2],
            gap: f[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub model: String,
    pub scenes: Vec<(String, SceneMetrics)>,
    pub mean: SceneMetrics,
    /// Population standard deviation across scenes.
    pub std: SceneMetrics,
}

/// Per-scene silhouette and cosine gap of `params`, plus their mean and
/// standard deviation.
pub fn structure_consistency_report(
    model: &str,
    params: &EncoderParams,
    scenes: &[(String, Volume)],
    include_background: bool,
) -> Result<ConsistencyReport> {
    if scenes.is_empty() {
        return Err(Error::TooFewElements {
            what: "evaluation scenes",
            min: 1,
            got: 0,
        });
    }
    let rows = crate::parallel::map(scenes, |_, (name, v)| -> Result<(String, SceneMetrics)> {
        let grid = PatchGrid::new(v.dims(), params.config().patch_dims)?;
        let lfs = LabeledFeatureSet::from_volume(params, v, &grid, name.clone())?;
        Ok((name.clone(), SceneMetrics::of(&lfs, include_background)?))
    });
    let rows: Vec<(String, SceneMetrics)> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mut mean = [0.0; 4];
    for (_, m) in &rows {
        for (acc, x) in mean.iter_mut().zip(m.fields()) {
            *acc += x / n;
        }
    }
    let mut var = [0.0; 4];
    for (_, m) in &rows {
        for ((acc, x), mu) in var.iter_mut().zip(m.fields()).zip(mean) {
            *acc += (x - mu) * (x - mu) / n;
        }
    }
    Ok(ConsistencyReport {
        model: model.into(),
        scenes: rows,
        mean: SceneMetrics::from_fields(mean),
        std: SceneMetrics::from_fields(var.map(f64::sqrt)),
    })
}

pub const REPORT_HEADER: &str = "model,scene,silhouette,intra,inter,gap";

/// One CSV with per-scene rows followed by `mean` and `std` rows per model.
pub fn write_report_csv(mut w: impl Write, reports: &[ConsistencyReport]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        let rows = r.scenes.iter().map(|(s, m)| (s.as_str(), m));
        for (scene, m) in rows.chain([("mean", &r.mean), ("std", &r.std)]) {
            writeln!(w, "{},{scene},{},{},{},{}", r.model, m.silhouette, m.intra, m.inter, m.gap)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapRequest {
    pub anchor: usize,
    /// Slicing axis, 0 = x.
    pub axis: usize,
}

/// Cosine similarity of one anchor token against every target token,
/// expanded to the voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub request: HeatmapRequest,
    pub grid: PatchGrid,
    pub similarities: Vec<f64>,
}

const FLAT_RANGE: f64 = 1e-12;

pub fn similarity_heatmap(req: HeatmapRequest, source: &FeatureSet, target: &FeatureSet, grid: &PatchGrid) -> Result<Heatmap> {
    if req.anchor >= source.len() {
        return Err(Error::IndexOutOfRange {
            index: req.anchor,
            len: source.len(),
        });
    }
    if req.axis > 2 {
        return Err(Error::IndexOutOfRange { index: req.axis, len: 3 });
    }
    if target.len() != grid.len() || source.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            op: "similarity_heatmap",
            left: vec![target.len(), target.dim()],
            right: vec![grid.len(), source.dim()],
        });
    }
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
    };
    let a = unit(source.token(req.anchor));
    let similarities = (0..target.len())
        .map(|j| unit(target.token(j)).iter().zip(&a).map(|(x, y)| x * y).sum())
        .collect();
    Ok(Heatmap {
        request: req,
        grid: grid.clone(),
        similarities,
    })
}

impl Heatmap {
    /// 8-bit intensity per patch after min-max normalization.
    pub fn patch_gray(&self) -> Vec<u8> {
        let lo = self.similarities.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < FLAT_RANGE {
            return vec![128; self.similarities.len()];
        }
        self.similarities
            .iter()
            .map(|&s| (255.0 * (s - lo) / (hi - lo)).round() as u8)
            .collect()
    }

    pub fn num_slices(&self) -> usize {
        self.grid.volume_dims()[self.request.axis]
    }

    /// Slice `index` along the request axis as `(width, height, pixels)`.
    /// Rows follow the lower remaining axis, columns the higher one.
    pub fn slice(&self, index: usize) -> Result<(usize, usize, Vec<u8>)> {
        let dims = self.grid.volume_dims();
        let axis = self.request.axis;
        if index >= dims[axis] {
            return Err(Error::IndexOutOfRange {
                index,
                len: dims[axis],
            });
        }
        let (ra, ca) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let gray = self.patch_gray();
        let mut px = Vec::with_capacity(dims[ra] * dims[ca]);
        for r in 0..dims[ra] {
            for c in 0..dims[ca] {
                let mut p = [0.0; 3];
                p[axis] = index as f64 + 0.5;
                p[ra] = r as f64 + 0.5;
                p[ca] = c as f64 + 0.5;
                px.push(gray[self.grid.locate(p).expect("voxel center lies in grid")]);
            }
        }
        Ok((dims[ca], dims[ra], px))
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("patch,ix,iy,iz,similarity\n");
        for (j, v) in self.similarities.iter().enumerate() {
            let [x, y, z] = self.grid.cell(j);
            writeln!(s, "{j},{x},{y},{z},{v}").expect("string write");
        }
        s
    }

    /// Write `hm.csv` and one `hm_<axis>_<slice>.pgm` per slice.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let axis = ['x', 'y', 'z'][self.request.axis];
        let mut out = Vec::new();
        for k in 0..self.num_slices() {
            let (w, h, px) = self.slice(k)?;
            let path = dir.join(format!("hm_{axis}_{k}.pgm"));
            write_pgm(&path, w, h, &px)?;
            out.push(path);
        }
        let path = dir.join("hm.csv");
        std::fs::write(&path, self.csv()).map_err(|e| Error::io(&path, e))?;
        out.push(path);
        Ok(out)
    }
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::format("pgm", format!("{} is not an 8-bit P5 image", path.display()));
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Mean similarity of the anchor to other patches sharing its label and to
/// patches with a different label (background included).
pub fn anchor_label_contrast(heatmap: &Heatmap, labels: &[u16]) -> Result<(f64, f64)> {
    let anchor = heatmap.request.anchor;
    if labels.len() != heatmap.similarities.len() {
        return Err(Error::ShapeMismatch {
            op: "anchor_label_contrast",
            left: vec![labels.len()],
            right: vec![heatmap.similarities.len()],
        });
    }
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (j, (&s, &l)) in heatmap.similarities.iter().zip(labels).enumerate() {
        if j == anchor {
            continue;
        }
        if l == labels[anchor] {
            same += s;
            ns += 1;
        } else {
            diff += s;
            nd += 1;
        }
    }
    if ns == 0 || nd == 0 {
        return Err(Error::TooFewElements {
            what: "same-label and different-label patches",
            min: 1,
            got: ns.min(nd),
        });
    }
    Ok((same / ns as f64, diff / nd as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lfs(rows: &[Vec<f64>], labels: &[u16]) -> LabeledFeatureSet {
        LabeledFeatureSet::new(FeatureSet::new(Tensor::from_rows(rows).unwrap()).unwrap(), labels.to_vec(), "t").unwrap()
    }

    #[test]
    fn silhouette_hand_oracle() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette_points(&pts, &[0, 0, 1, 1]).unwrap();
        let expect = (2.0 * (1.0 - 0.1 / 10.05) + 2.0 * (1.0 - 0.1 / 9.95)) / 4.0;
        assert_abs_diff_eq!(s, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.9900, epsilon = 1e-4);
    }

    #[test]
    fn silhouette_limits_and_conventions() {
        let tight = lfs(
            &[vec![1.0, 0.0], vec![1.0, 1e-9], vec![0.0, 1.0], vec![1e-9, 1.0]],
            &[1, 1, 2, 2],
        );
        assert!(silhouette(&tight, false).unwrap() > 0.999_999);
        let same = lfs(&vec![vec![1.0, 0.0]; 4], &[1, 1, 2, 2]);
        assert_eq!(silhouette(&same, false).unwrap(), 0.0);
        let singles = silhouette_points(&[vec![0.0], vec![1.0], vec![1.1]], &[0, 1, 1]).unwrap();
        let s1 = 1.0 - 0.1 / 1.0;
        let s2 = 1.0 - 0.1 / 1.1;
        assert_abs_diff_eq!(singles, (s1 + s2) / 3.0, epsilon = 1e-12);
        assert!(matches!(silhouette(&lfs(&vec![vec![1.0]; 2], &[1, 1]), false), Err(Error::TooFewLabels(1))));
    }

    #[test]
    fn background_excluded_by_default() {
        let f = lfs(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0], vec![0.1, 1.0], vec![0.7, 0.7]], &[1, 1, 2, 2, 0]);
        let without = silhouette(&f, false).unwrap();
        let only = lfs(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0], vec![0.1, 1.0]], &[1, 1, 2, 2]);
        assert_eq!(without, silhouette(&only, false).unwrap());
        assert_ne!(without, silhouette(&f, true).unwrap());
    }

    #[test]
    fn cosine_gap_is_difference() {
        let f = lfs(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0], vec![-1.0, 0.0]], &[1, 1, 2, 2]);
        let g = cosine_gap(&f, false).unwrap();
        assert_abs_diff_eq!(g.intra, (0.8 + -0.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.inter, (0.0 - 1.0 + 0.6 - 0.8) / 4.0, epsilon = 1e-12);
        assert_eq!(g.gap, g.intra - g.inter);
    }

    #[test]
    fn matching_accuracy_examples() {
        let gt = CorrespondenceMatrix::identity(3);
        let exact = matching_accuracy(gt.entries(), &gt, 0.0).unwrap();
        assert_eq!((exact.precision, exact.recall), (1.0, 1.0));

        let uniform = Tensor::full(&[3, 3], 1.0 / 9.0);
        let u = matching_accuracy(&uniform, &gt, 0.0).unwrap();
        assert_eq!((u.precision, u.recall, u.predicted), (1.0, 0.0, 0));

        // Row 2 has no true partner but still produces a confident match.
        let m = Tensor::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.05, 0.8, 0.15], vec![0.1, 0.2, 0.7]]).unwrap();
        let partial = CorrespondenceMatrix::from_pairs(3, 3, &[(0, 0), (1, 1)]).unwrap();
        let r = matching_accuracy(&m, &partial, 0.0).unwrap();
        assert_eq!((r.predicted, r.correct), (3, 2));
        assert_abs_diff_eq!(r.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.recall, 1.0);
        let strict = matching_accuracy(&m, &partial, 0.85).unwrap();
        assert_eq!((strict.predicted, strict.precision, strict.recall), (1, 1.0, 0.5));
    }

    #[test]
    fn heatmap_degenerate_and_round_trip() {
        let grid = PatchGrid::new([4, 4, 4], [2, 2, 2]).unwrap();
        let constant = FeatureSet::new(Tensor::full(&[8, 3], 0.5)).unwrap();
        let hm = similarity_heatmap(HeatmapRequest { anchor: 0, axis: 2 }, &constant, &constant, &grid).unwrap();
        assert!(hm.patch_gray().iter().all(|&g| g == 128));

        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64, (i * i) as f64 * 0.1]).collect();
        let f = FeatureSet::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let hm = similarity_heatmap(HeatmapRequest { anchor: 5, axis: 1 }, &f, &f, &grid).unwrap();
        assert_abs_diff_eq!(hm.similarities[5], 1.0, epsilon = 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let files = hm.write(dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let (w, h, px) = read_pgm(&dir.path().join("hm_y_3.pgm")).unwrap();
        assert_eq!((w, h), (4, 4));
        assert_eq!(px, hm.slice(3).unwrap().2);
        let csv = std::fs::read_to_string(dir.path().join("hm.csv")).unwrap();
        let parsed: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(parsed, hm.similarities);

        let err = similarity_heatmap(HeatmapRequest { anchor: 8, axis: 0 }, &f, &f, &grid).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 8, len: 8 }));
    }

    #[test]
    fn report_rows_and_aggregates() {
        let params = EncoderParams::init(Default::default(), 0).unwrap();
        let scenes: Vec<(String, Volume)> = (0..3)
            .map(|s| (format!("s{s}"), crate::synth::generate(&crate::synth::benchmark_scene(s)).unwrap()))
            .collect();
        let r = structure_consistency_report("untrained", &params, &scenes, false).unwrap();
        assert_eq!(r.scenes.len(), 3);
        let mean_sil = r.scenes.iter().map(|(_, m)| m.silhouette).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(r.mean.silhouette, mean_sil, epsilon = 1e-12);
        for (_, m) in &r.scenes {
            assert_eq!(m.gap, m.intra - m.inter);
        }
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().any(|l| l.starts_with("untrained,mean,")));
    }

    fn random_points(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<u16>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..n).map(|i| (i % 3) as u16 + 1).collect();
        (pts, labels)
    }

    proptest! {
        #[test]
        fn silhouette_invariant_under_orthogonal_maps(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let (pts, labels) = random_points(seed, 12, 4);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 99);
            // Gram-Schmidt on a random matrix.
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < 4 {
                let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                for u in &q {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    q.push(v.iter().map(|x| x / n).collect());
                }
            }
            let rotated: Vec<Vec<f64>> = pts
                .iter()
                .map(|p| q.iter().map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
                .collect();
            let a = silhouette(&lfs(&pts, &labels), false).unwrap();
            let b = silhouette(&lfs(&rotated, &labels), false).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn silhouette_invariant_under_relabeling(seed in 0u64..1000) {
            let (pts, labels) = random_points(seed, 10, 3);
            let relabeled: Vec<u16> = labels.iter().map(|&l| [0, 7, 2, 5][l as usize]).collect();
            let a = silhouette_points(&pts, &labels).unwrap();
            let b = silhouette_points(&pts, &relabeled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
