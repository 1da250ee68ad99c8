//! Affine view transforms, patch partitions and ground-truth patch
//! correspondence between two views of a volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Point, Volume, BACKGROUND};

/// Homogeneous 4×4 transform with bottom row `(0, 0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: [[f64; 4]; 4],
}

const DET_EPS: f64 = 1e-9;

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl AffineTransform {
    /// Build from a linear block and translation; fails when the linear part
    /// is (numerically) singular.
    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let det = det3(&linear);
        if !(det.abs() > DET_EPS) {
            return Err(Error::NonInvertible(det.abs()));
        }
        let mut matrix = [[0.0; 4]; 4];
        for r in 0..3 {
            matrix[r][..3].copy_from_slice(&linear[r]);
            matrix[r][3] = translation[r];
        }
        matrix[3][3] = 1.0;
        Ok(Self { matrix })
    }

    pub fn from_matrix(matrix: [[f64; 4]; 4]) -> Result<Self> {
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config("affine bottom row must be (0, 0, 0, 1)".into()));
        }
        let t = Self { matrix };
        t.new_checked()
    }

    fn new_checked(self) -> Result<Self> {
        Self::new(self.linear(), self.translation())
    }

    pub fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).unwrap()
    }

    pub fn translation_by(t: [f64; 3]) -> Self {
        Self::new(Self::identity().linear(), t).unwrap()
    }

    /// Linear map `p ↦ A (p − c) + c`.
    pub fn about_center(linear: [[f64; 3]; 3], center: Point) -> Result<Self> {
        let mut t = [0.0; 3];
        for r in 0..3 {
            t[r] = center[r] - (0..3).map(|k| linear[r][k] * center[k]).sum::<f64>();
        }
        Self::new(linear, t)
    }

    /// Counter-clockwise quarter turns about `axis` (0 = x, 1 = y, 2 = z),
    /// around `center`.
    pub fn quarter_turns(axis: usize, turns: i32, center: Point) -> Self {
        let (c, s) = match turns.rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        Self::about_center(m, center).unwrap()
    }

    /// Mirror along `axis` through `center`.
    pub fn flip(axis: usize, center: Point) -> Self {
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        m[axis][axis] = -1.0;
        Self::about_center(m, center).unwrap()
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.matrix
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.linear())
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.matrix;
        let h: [f64; 4] = std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3]);
        [h[0] / h[3], h[1] / h[3], h[2] / h[3]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let a = self.linear();
        let det = det3(&a);
        if !(det.abs() > DET_EPS) {
            return Err(Error::NonInvertible(det.abs()));
        }
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                // adjugate: cofactor of (c, r)
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                inv[r][c] = (a[r1][c1] * a[r2][c2] - a[r1][c2] * a[r2][c1]) / det;
            }
        }
        let t = self.translation();
        let mut ti = [0.0; 3];
        for r in 0..3 {
            ti[r] = -(0..3).map(|k| inv[r][k] * t[k]).sum::<f64>();
        }
        Self::new(inv, ti)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.matrix, &first.matrix);
        let matrix = std::array::from_fn(|r| std::array::from_fn(|c| (0..4).map(|k| a[r][k] * b[k][c]).sum()));
        AffineTransform { matrix }
    }

    /// True when the linear block is a signed permutation matrix and the
    /// translation is integral, i.e. the map permutes voxel centers.
    pub fn is_grid_exact(&self) -> bool {
        let a = self.linear();
        let rows_ok = a.iter().all(|row| {
            row.iter().filter(|v| **v != 0.0).count() == 1 && row.iter().all(|v| *v == 0.0 || v.abs() == 1.0)
        });
        rows_ok && self.translation().iter().all(|t| t.fract() == 0.0)
    }
}

/// Whether two centers fall within one patch extent of each other, using the
/// half-open box `[-W/2, W/2) × [-H/2, H/2) × [-D/2, D/2)` for `a − b`.
pub fn center_match(a: Point, b: Point, patch_dims: [usize; 3]) -> bool {
    (0..3).all(|k| {
        let half = patch_dims[k] as f64 / 2.0;
        let d = a[k] - b[k];
        -half <= d && d < half
    })
}

/// Non-overlapping partition of a volume into equal patches, indexed
/// row-major: patch `(ix, iy, iz)` has index `(ix * n_y + iy) * n_z + iz`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    volume_dims: [usize; 3],
    patch_dims: [usize; 3],
    grid_dims: [usize; 3],
    centers: Vec<Point>,
}

impl PatchGrid {
    pub fn new(volume_dims: [usize; 3], patch_dims: [usize; 3]) -> Result<Self> {
        const AXES: [char; 3] = ['x', 'y', 'z'];
        for k in 0..3 {
            if patch_dims[k] == 0 || volume_dims[k] % patch_dims[k] != 0 {
                return Err(Error::NonDivisible {
                    axis: AXES[k],
                    dim: volume_dims[k],
                    patch: patch_dims[k],
                });
            }
        }
        let grid_dims: [usize; 3] = std::array::from_fn(|k| volume_dims[k] / patch_dims[k]);
        let mut centers = Vec::with_capacity(grid_dims.iter().product());
        for ix in 0..grid_dims[0] {
            for iy in 0..grid_dims[1] {
                for iz in 0..grid_dims[2] {
                    let cell = [ix, iy, iz];
                    centers.push(std::array::from_fn(|k| {
                        (cell[k] * patch_dims[k]) as f64 + patch_dims[k] as f64 / 2.0
                    }));
                }
            }
        }
        Ok(Self {
            volume_dims,
            patch_dims,
            grid_dims,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        self.patch_dims
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_dims.iter().product()
    }

    pub fn cell(&self, index: usize) -> [usize; 3] {
        let g = self.grid_dims;
        [index / (g[1] * g[2]), (index / g[2]) % g[1], index % g[2]]
    }

    pub fn index_of(&self, cell: [usize; 3]) -> usize {
        (cell[0] * self.grid_dims[1] + cell[1]) * self.grid_dims[2] + cell[2]
    }

    /// The unique patch whose center matches `p`, if `p` lies inside the grid.
    pub fn locate(&self, p: Point) -> Option<usize> {
        let mut cell = [0usize; 3];
        for k in 0..3 {
            let c = (p[k] / self.patch_dims[k] as f64).floor();
            if c < 0.0 || c >= self.grid_dims[k] as f64 {
                return None;
            }
            cell[k] = c as usize;
        }
        let idx = self.index_of(cell);
        center_match(p, self.centers[idx], self.patch_dims).then_some(idx)
    }

    fn check_volume(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.volume_dims {
            return Err(Error::ShapeMismatch {
                op: "patch grid",
                left: self.volume_dims.to_vec(),
                right: v.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Voxel indices of patch `index`, in local row-major order.
    pub fn voxel_indices(&self, v: &Volume, index: usize) -> Vec<usize> {
        let [cx, cy, cz] = self.cell(index);
        let [w, h, d] = self.patch_dims;
        let mut out = Vec::with_capacity(w * h * d);
        for x in cx * w..(cx + 1) * w {
            for y in cy * h..(cy + 1) * h {
                for z in cz * d..(cz + 1) * d {
                    out.push(v.index(x, y, z));
                }
            }
        }
        out
    }

    /// `[N × W·H·D]` matrix of patch intensities.
    pub fn extract(&self, v: &Volume) -> Result<Tensor> {
        self.check_volume(v)?;
        let p = self.patch_voxels();
        let mut data = Vec::with_capacity(self.len() * p);
        for i in 0..self.len() {
            data.extend(self.voxel_indices(v, i).into_iter().map(|k| v.intensities()[k]));
        }
        Tensor::matrix(self.len(), p, data)
    }

    /// Most frequent voxel label in patch `index`; ties go to the smaller id.
    pub fn majority_label(&self, v: &Volume, index: usize) -> Result<u16> {
        self.check_volume(v)?;
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let labels = v.labels().ok_or(Error::MissingLabels)?;
        let mut counts = std::collections::BTreeMap::<u16, usize>::new();
        for k in self.voxel_indices(v, index) {
            *counts.entry(labels[k]).or_default() += 1;
        }
        let mut best = (BACKGROUND, 0usize);
        for (label, count) in counts {
            if count > best.1 {
                best = (label, count);
            }
        }
        Ok(best.0)
    }

    pub fn majority_labels(&self, v: &Volume) -> Result<Vec<u16>> {
        (0..self.len()).map(|i| self.majority_label(v, i)).collect()
    }
}

pub fn partition(v: &Volume, patch_dims: [usize; 3]) -> Result<PatchGrid> {
    PatchGrid::new(v.dims(), patch_dims)
}

/// Binary patch correspondence between two views. Rows index the source
/// grid, columns the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMatrix {
    entries: Tensor,
    support: usize,
}

impl CorrespondenceMatrix {
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut entries = Tensor::zeros(&[rows, cols]);
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(i, j) in pairs {
            if i >= rows || j >= cols {
                return Err(Error::IndexOutOfRange {
                    index: i.max(j),
                    len: rows.min(cols),
                });
            }
            if row_used[i] || col_used[j] {
                return Err(Error::Config(format!("pair ({i}, {j}) assigns a patch twice")));
            }
            row_used[i] = true;
            col_used[j] = true;
            entries.set(i, j, 1.0);
        }
        Ok(Self {
            entries,
            support: pairs.len(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Tensor::eye(n),
            support: n,
        }
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    /// `|M_gt|`, the number of matched pairs.
    pub fn support_count(&self) -> usize {
        self.support
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries.get(i, j) != 0.0
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let (m, n) = (self.entries.rows(), self.entries.cols());
        (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j))
            .collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            entries: self.entries.transpose().expect("2-D"),
            support: self.support,
        }
    }
}

/// `M(i, j) = 1` iff `H(c_i)` matches `c_j` and `H⁻¹(c_j)` matches `c_i`.
pub fn ground_truth_correspondence(
    grid_a: &PatchGrid,
    grid_b: &PatchGrid,
    t: &AffineTransform,
) -> Result<CorrespondenceMatrix> {
    if grid_a.patch_dims != grid_b.patch_dims {
        return Err(Error::ShapeMismatch {
            op: "ground_truth_correspondence",
            left: grid_a.patch_dims.to_vec(),
            right: grid_b.patch_dims.to_vec(),
        });
    }
    let inv = t.inverse()?;
    let pairs: Vec<(usize, usize)> = grid_a
        .centers
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let j = grid_b.locate(t.apply(c))?;
            center_match(inv.apply(grid_b.centers[j]), c, grid_a.patch_dims).then_some((i, j))
        })
        .collect();
    CorrespondenceMatrix::from_pairs(grid_a.len(), grid_b.len(), &pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Trilinear,
}

/// Resample `v` so that content at `p` moves to `t(p)`. Labels always use
/// nearest neighbour; samples falling outside the input read background.
pub fn resample(v: &Volume, t: &AffineTransform, interp: Interpolation) -> Result<Volume> {
    let inv = t.inverse()?;
    let dims = v.dims();
    let n = v.len();
    let mut intensities = vec![0.0; n];
    let mut labels = v.labels().map(|_| vec![BACKGROUND; n]);
    let nearest = |q: Point| -> Option<usize> {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let f = q[k].floor();
            if f < 0.0 || f >= dims[k] as f64 {
                return None;
            }
            c[k] = f as usize;
        }
        Some(v.index(c[0], c[1], c[2]))
    };
    for idx in 0..n {
        let [x, y, z] = v.coords(idx);
        let q = inv.apply([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
        let src = nearest(q);
        if let (Some(out), Some(s)) = (labels.as_mut(), src) {
            out[idx] = v.labels().unwrap()[s];
        }
        intensities[idx] = match interp {
            Interpolation::Nearest => src.map_or(0.0, |s| v.intensities()[s]),
            Interpolation::Trilinear => trilinear(v, q),
        };
    }
    Volume::new(dims, intensities, labels)
}

fn trilinear(v: &Volume, q: Point) -> f64 {
    let dims = v.dims();
    let u: [f64; 3] = std::array::from_fn(|k| q[k] - 0.5);
    let base: [f64; 3] = u.map(f64::floor);
    let frac: [f64; 3] = std::array::from_fn(|k| u[k] - base[k]);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut c = [0i64; 3];
        for k in 0..3 {
            let hi = (corner >> k) & 1 == 1;
            c[k] = base[k] as i64 + hi as i64;
            w *= if hi { frac[k] } else { 1.0 - frac[k] };
        }
        if w == 0.0 || (0..3).any(|k| c[k] < 0 || c[k] >= dims[k] as i64) {
            continue;
        }
        acc += w * v.intensity(c[0] as usize, c[1] as usize, c[2] as usize);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid24() -> PatchGrid {
        PatchGrid::new([24; 3], [8; 3]).unwrap()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(AffineTransform::identity().apply([5.0; 3]), [5.0; 3]);
        let t = AffineTransform::translation_by([8.0, 0.0, 0.0]);
        assert_eq!(t.apply([4.0; 3]), [12.0, 4.0, 4.0]);
        let r = AffineTransform::quarter_turns(2, 1, [0.0; 3]);
        let p = r.apply([1.0, 0.0, 0.0]);
        assert!((p[0] - 0.0).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn singular_transform_rejected() {
        let err = AffineTransform::new([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]);
        assert!(matches!(err, Err(Error::NonInvertible(_))));
    }

    #[test]
    fn center_match_half_open_boundary() {
        let p = [8, 8, 8];
        assert!(center_match([4.0; 3], [4.0; 3], p));
        assert!(!center_match([8.0, 4.0, 4.0], [4.0; 3], p));
        assert!(center_match([7.0, 4.0, 4.0], [4.0; 3], p));
        assert!(center_match([0.0, 4.0, 4.0], [4.0; 3], p));
        // Oracle: exactly one integer offset window of width W matches.
        for dx in -12i32..=12 {
            let m = center_match([4.0 + dx as f64, 4.0, 4.0], [4.0; 3], p);
            assert_eq!(m, (-4..4).contains(&dx), "dx={dx}");
        }
    }

    #[test]
    fn partition_examples() {
        let g = grid24();
        assert_eq!(g.len(), 27);
        let xs: Vec<f64> = g.centers().iter().map(|c| c[0]).collect();
        assert_eq!(xs[0], 4.0);
        assert_eq!(xs[9], 12.0);
        assert_eq!(xs[18], 20.0);
        assert_eq!(g.centers()[13], [12.0; 3]);
        let one = PatchGrid::new([6, 4, 2], [6, 4, 2]).unwrap();
        assert_eq!(one.centers(), &[[3.0, 2.0, 1.0]]);
        let err = PatchGrid::new([24, 24, 24], [7, 7, 7]).unwrap_err();
        assert!(err.to_string().contains("axis x"), "{err}");
        let err = PatchGrid::new([24, 24, 20], [8, 8, 8]).unwrap_err();
        assert!(err.to_string().contains("axis z"), "{err}");
    }

    #[test]
    fn cell_index_bijection() {
        let g = PatchGrid::new([16, 24, 8], [8, 8, 4]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index_of(g.cell(i)), i);
        }
    }

    #[test]
    fn identity_correspondence_is_eye() {
        let g = grid24();
        let m = ground_truth_correspondence(&g, &g, &AffineTransform::identity()).unwrap();
        assert_eq!(m, CorrespondenceMatrix::identity(27));
    }

    #[test]
    fn translation_by_one_patch_shifts_diagonal() {
        let g = grid24();
        let m = ground_truth_correspondence(&g, &g, &AffineTransform::translation_by([8.0, 0.0, 0.0])).unwrap();
        assert_eq!(m.support_count(), 18);
        for i in 0..27 {
            let [cx, cy, cz] = g.cell(i);
            for j in 0..27 {
                let expected = cx < 2 && j == g.index_of([cx + 1, cy, cz]);
                assert_eq!(m.get(i, j), expected);
            }
        }
    }

    #[test]
    fn reflection_reverses_x() {
        let g = grid24();
        let m = ground_truth_correspondence(&g, &g, &AffineTransform::flip(0, [12.0; 3])).unwrap();
        assert_eq!(m.support_count(), 27);
        for i in 0..27 {
            let [cx, cy, cz] = g.cell(i);
            assert!(m.get(i, g.index_of([2 - cx, cy, cz])));
        }
    }

    fn labelled_cube(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        Volume::new(dims, (0..n).map(|i| i as f64).collect(), Some((0..n).map(|i| (i % 7) as u16).collect())).unwrap()
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = labelled_cube([4, 5, 6]);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            assert_eq!(resample(&v, &AffineTransform::identity(), interp).unwrap(), v);
        }
    }

    #[test]
    fn resample_translation_of_constant_volume() {
        let dims = [24; 3];
        let v = Volume::constant(dims, 3.0);
        let out = resample(&v, &AffineTransform::translation_by([8.0, 0.0, 0.0]), Interpolation::Nearest).unwrap();
        for idx in 0..out.len() {
            let [x, _, _] = out.coords(idx);
            assert_eq!(out.intensities()[idx], if x < 8 { 0.0 } else { 3.0 });
        }
    }

    #[test]
    fn rotation_moves_one_hot_voxel() {
        let dims = [6, 6, 6];
        let mut v = Volume::constant(dims, 0.0);
        let src = v.index(1, 2, 4);
        v.intensities_mut()[src] = 1.0;
        let t = AffineTransform::quarter_turns(2, 1, [3.0; 3]);
        let out = resample(&v, &t, Interpolation::Nearest).unwrap();
        // voxel center (1.5, 2.5, 4.5) → z-rotation about (3,3): (3.5, 1.5, 4.5)
        let dst = out.index(3, 1, 4);
        assert_eq!(out.intensities()[dst], 1.0);
        assert_eq!(out.intensities().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn majority_label_ties_pick_smaller_id() {
        let dims = [2, 2, 2];
        let v = Volume::new(dims, vec![0.0; 8], Some(vec![5, 2, 5, 2, 5, 2, 5, 2])).unwrap();
        let g = PatchGrid::new(dims, dims).unwrap();
        assert_eq!(g.majority_label(&v, 0).unwrap(), 2);
        let bg = Volume::new(dims, vec![0.0; 8], Some(vec![0; 8])).unwrap();
        assert_eq!(g.majority_label(&bg, 0).unwrap(), 0);
        let none = Volume::constant(dims, 0.0);
        assert!(matches!(g.majority_label(&none, 0), Err(Error::MissingLabels)));
    }

    fn grid_exact_transform() -> impl Strategy<Value = AffineTransform> {
        (0usize..3, 0i32..4, 0usize..4, -8i32..=8, -8i32..=8, -8i32..=8).prop_map(|(axis, turns, flip, tx, ty, tz)| {
            let c = [12.0; 3];
            let mut t = AffineTransform::quarter_turns(axis, turns, c);
            if flip < 3 {
                t = AffineTransform::flip(flip, c).compose(&t);
            }
            AffineTransform::translation_by([tx as f64, ty as f64, tz as f64]).compose(&t)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn correspondence_mutuality(t in grid_exact_transform()) {
            let g = grid24();
            let fwd = ground_truth_correspondence(&g, &g, &t).unwrap();
            let back = ground_truth_correspondence(&g, &g, &t.inverse().unwrap()).unwrap();
            prop_assert_eq!(fwd.transpose(), back);
            let e = fwd.entries();
            for i in 0..27 {
                prop_assert!(e.row(i).iter().sum::<f64>() <= 1.0);
                prop_assert!((0..27).map(|r| e.get(r, i)).sum::<f64>() <= 1.0);
            }
        }

        #[test]
        fn exact_resample_round_trip(t in grid_exact_transform()) {
            let v = labelled_cube([24; 3]);
            // Keep the translation inside the volume so no content is lost.
            let t = AffineTransform::new(t.linear(), [0.0; 3]).unwrap();
            let t = AffineTransform::about_center(t.linear(), [12.0; 3]).unwrap();
            let fwd = resample(&v, &t, Interpolation::Nearest).unwrap();
            let back = resample(&fwd, &t.inverse().unwrap(), Interpolation::Nearest).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn inverse_round_trip(t in grid_exact_transform(), p in prop::array::uniform3(-30.0f64..30.0)) {
            let q = t.inverse().unwrap().apply(t.apply(p));
            for k in 0..3 {
                prop_assert!((q[k] - p[k]).abs() < 1e-9);
            }
        }
    }
}
