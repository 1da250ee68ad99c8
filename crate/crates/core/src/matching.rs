//! Token similarity maps and their soft re-assignment.
//!
//! Every matcher has a tape form (`*_var`) used inside the training losses
//! and a plain form that evaluates on a throwaway tape.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N × d` matrix of per-patch token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet(Tensor);

impl FeatureSet {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2("FeatureSet")?;
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Cosine similarities `M_t(i, j)` between two feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub entries: Tensor,
    pub row_source: String,
    pub col_source: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MatcherConfig {
    DualSoftmax {
        temperature: f64,
    },
    Sinkhorn {
        epsilon: f64,
        max_iters: usize,
        tol: f64,
    },
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig::DualSoftmax { temperature: 0.1 }
    }
}

impl MatcherConfig {
    pub fn sinkhorn_default() -> Self {
        MatcherConfig::Sinkhorn {
            epsilon: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MatcherConfig::DualSoftmax { temperature } if !(temperature > 0.0) => {
                Err(Error::Config(format!("matching temperature must be > 0, got {temperature}")))
            }
            MatcherConfig::Sinkhorn { epsilon, .. } if !(epsilon > 0.0) => {
                Err(Error::Config(format!("sinkhorn epsilon must be > 0, got {epsilon}")))
            }
            MatcherConfig::Sinkhorn { max_iters: 0, .. } => Err(Error::Config("sinkhorn max_iters must be ≥ 1".into())),
            _ => Ok(()),
        }
    }

    pub fn method(&self) -> MatchMethod {
        match self {
            MatcherConfig::DualSoftmax { .. } => MatchMethod::DualSoftmax,
            MatcherConfig::Sinkhorn { .. } => MatchMethod::Sinkhorn,
        }
    }

    /// Per-row assignment probabilities on the tape, plus the convergence
    /// flag. Sinkhorn plans are rescaled by the row count so both methods put
    /// mass ≈ 1 on a confident match.
    pub fn assign_var<'t>(&self, m: Var<'t>) -> Result<(Var<'t>, bool)> {
        self.validate()?;
        match *self {
            MatcherConfig::DualSoftmax { temperature } => Ok((dual_softmax_var(m, temperature)?, true)),
            MatcherConfig::Sinkhorn { epsilon, max_iters, tol } => {
                let rows = m.shape()[0] as f64;
                let (plan, info) = sinkhorn_var(m, epsilon, max_iters, tol)?;
                Ok((plan.scale(rows), info.converged))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    DualSoftmax,
    Sinkhorn,
}

/// Soft assignment `M̂_t` produced by a matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap {
    pub entries: Tensor,
    pub method: MatchMethod,
    pub converged: bool,
}

/// Cosine similarity of unit-normalized rows, on the tape.
pub fn similarity_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch {
            op: "similarity_map",
            left: sa,
            right: sb,
        });
    }
    let an = a.normalize_rows()?;
    let bn = b.normalize_rows()?;
    an.matmul(bn.transpose()?)
}

pub fn similarity_map(fa: &FeatureSet, fb: &FeatureSet) -> Result<SimilarityMap> {
    if fa.len() != fb.len() || fa.dim() != fb.dim() {
        return Err(Error::ShapeMismatch {
            op: "similarity_map",
            left: fa.tensor().shape().to_vec(),
            right: fb.tensor().shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let entries = similarity_var(tape.constant(fa.tensor().clone()), tape.constant(fb.tensor().clone()))?.value();
    Ok(SimilarityMap {
        entries,
        row_source: "a".into(),
        col_source: "b".into(),
    })
}

/// `softmax(M/τ)` over each row times `softmax(M/τ)` over each column.
pub fn dual_softmax_var<'t>(m: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let scaled = m.scale(1.0 / temperature);
    scaled.softmax(1)?.mul(scaled.softmax(0)?)
}

/// Row-stochastic and column-stochastic factors of the dual softmax.
pub fn dual_softmax_factors(m: &Tensor, temperature: f64) -> (Tensor, Tensor) {
    let scaled = m.map(|v| v / temperature);
    (crate::autograd::softmax(&scaled, 1), crate::autograd::softmax(&scaled, 0))
}

pub fn dual_softmax(m: &SimilarityMap, temperature: f64) -> Result<AssignmentMap> {
    let tape = Tape::new();
    let entries = dual_softmax_var(tape.constant(m.entries.clone()), temperature)?.value();
    Ok(AssignmentMap {
        entries,
        method: MatchMethod::DualSoftmax,
        converged: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornInfo {
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

/// Entropic transport plan for kernel `exp(M/ε)` with uniform marginals
/// `1/rows` and `1/cols`, computed with log-domain scaling. The tape holds
/// every executed iteration so gradients flow through the unrolled solve.
pub fn sinkhorn_var<'t>(m: Var<'t>, epsilon: f64, max_iters: usize, tol: f64) -> Result<(Var<'t>, SinkhornInfo)> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("sinkhorn epsilon must be > 0, got {epsilon}")));
    }
    if max_iters == 0 {
        return Err(Error::Config("sinkhorn max_iters must be ≥ 1".into()));
    }
    let shape = m.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "sinkhorn expects a 2-D map".into(),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let tape = m.tape();
    let log_a = -(rows as f64).ln();
    let log_b = -(cols as f64).ln();
    let log_k = m.scale(1.0 / epsilon);
    let mut f = tape.constant(Tensor::zeros(&[rows]));
    let mut g = tape.constant(Tensor::zeros(&[cols]));
    let mut info = SinkhornInfo {
        iterations: 0,
        marginal_error: f64::INFINITY,
        converged: false,
    };
    let k_val = log_k.value();
    for it in 1..=max_iters {
        f = log_k.add_row(g)?.logsumexp(1)?.neg().add_scalar(log_a);
        g = log_k.add_col(f)?.logsumexp(0)?.neg().add_scalar(log_b);
        // Columns are exact after the g-update; rows carry the residual.
        let (fv, gv) = (f.value(), g.value());
        let err = (0..rows)
            .map(|i| {
                let s: f64 = (0..cols).map(|j| (k_val.get(i, j) + fv.data()[i] + gv.data()[j]).exp()).sum();
                (s - 1.0 / rows as f64).abs()
            })
            .fold(0.0, f64::max);
        info.iterations = it;
        info.marginal_error = err;
        if err < tol {
            info.converged = true;
            break;
        }
    }
    let plan = log_k.add_col(f)?.add_row(g)?.exp();
    Ok((plan, info))
}

pub fn sinkhorn(m: &SimilarityMap, epsilon: f64, max_iters: usize, tol: f64) -> Result<AssignmentMap> {
    let tape = Tape::new();
    let (plan, info) = sinkhorn_var(tape.constant(m.entries.clone()), epsilon, max_iters, tol)?;
    Ok(AssignmentMap {
        entries: plan.value(),
        method: MatchMethod::Sinkhorn,
        converged: info.converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Index of the strict maximum; `None` when the maximum is shared.
fn unique_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (k, v) in values.enumerate() {
        match best {
            Some((_, b)) if v == b => tied = true,
            Some((_, b)) if v < b => {}
            _ => {
                best = Some((k, v));
                tied = false;
            }
        }
    }
    best.filter(|_| !tied).map(|(k, _)| k)
}

/// Mutual-nearest pairs scoring at least `threshold`, sorted by descending
/// score (ties by `(i, j)`). Rows or columns whose maximum is shared match
/// nothing.
pub fn extract_matches(m: &Tensor, threshold: f64) -> Vec<Match> {
    let (rows, cols) = (m.rows(), m.cols());
    let col_best: Vec<Option<usize>> = (0..cols).map(|j| unique_argmax((0..rows).map(|i| m.get(i, j)))).collect();
    let mut out: Vec<Match> = (0..rows)
        .filter_map(|i| {
            let j = unique_argmax(m.row(i).iter().copied())?;
            let score = m.get(i, j);
            (col_best[j] == Some(i) && score >= threshold).then_some(Match { i, j, score })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    out
}

pub fn write_matches_csv(mut w: impl Write, matches: &[Match]) -> std::io::Result<()> {
    writeln!(w, "i,j,score")?;
    for m in matches {
        writeln!(w, "{},{},{}", m.i, m.j, m.score)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(entries: Tensor) -> SimilarityMap {
        SimilarityMap {
            entries,
            row_source: "a".into(),
            col_source: "b".into(),
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let f = FeatureSet::new(Tensor::eye(3)).unwrap();
        assert_eq!(similarity_map(&f, &f).unwrap().entries, Tensor::eye(3));
        let a = FeatureSet::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let b = FeatureSet::new(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_abs_diff_eq!(similarity_map(&a, &b).unwrap().entries.item(), 0.5f64.sqrt(), epsilon = 1e-12);
        let zero = FeatureSet::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
        let err = similarity_map(&zero, &zero).unwrap_err();
        assert!(matches!(err, Error::ZeroNormToken { index: 1 }));
    }

    #[test]
    fn self_similarity_diagonal_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureSet::new(random_map(&mut rng, 5)).unwrap();
        let m = similarity_map(&f, &f).unwrap().entries;
        for i in 0..5 {
            assert_abs_diff_eq!(m.get(i, i), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dual_softmax_examples() {
        let uniform = dual_softmax(&sim(Tensor::full(&[4, 4], 0.3)), 0.1).unwrap();
        assert!(uniform.entries.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let peaked = dual_softmax(&sim(Tensor::eye(2).map(|v| v * 10.0)), 1.0).unwrap();
        let p = (10f64.exp() / (10f64.exp() + 1.0)).powi(2);
        assert_abs_diff_eq!(peaked.entries.get(0, 0), p, epsilon = 1e-12);
        assert_abs_diff_eq!(peaked.entries.get(0, 0), 0.99991, epsilon = 1e-5);
        let flat = dual_softmax(&sim(Tensor::eye(3)), 1e9).unwrap();
        assert!(flat.entries.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-8));
    }

    #[test]
    fn dual_softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 6);
        let a = dual_softmax(&sim(m.clone()), 0.1).unwrap().entries;
        let b = dual_softmax(&sim(m.map(|v| v + 0.7)), 0.1).unwrap().entries;
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sinkhorn_examples() {
        let uniform = sinkhorn(&sim(Tensor::full(&[4, 4], 0.2)), 0.05, 100, 1e-6).unwrap();
        assert!(uniform.converged);
        assert!(uniform.entries.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-12));
        let one = sinkhorn(&sim(Tensor::full(&[1, 1], 0.4)), 0.05, 100, 1e-6).unwrap();
        assert_abs_diff_eq!(one.entries.item(), 1.0, epsilon = 1e-12);
        let sharp = sinkhorn(&sim(Tensor::eye(3).map(|v| v * 5.0)), 0.05, 100, 1e-6).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert_abs_diff_eq!(sharp.entries.get(i, j), want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_parameters() {
        let m = sim(Tensor::eye(2));
        assert!(sinkhorn(&m, 0.0, 10, 1e-6).is_err());
        assert!(sinkhorn(&m, 0.1, 0, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = sinkhorn(&sim(random_map(&mut rng, 8)), 0.01, 1, 1e-12).unwrap();
        assert!(!out.converged);
    }

    #[test]
    fn extract_matches_examples() {
        let eye = extract_matches(&Tensor::eye(4), 0.5);
        assert_eq!(eye.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(extract_matches(&Tensor::full(&[4, 4], 1.0 / 16.0), 0.5).is_empty());
        let mut m = Tensor::full(&[4, 4], 0.01);
        m.set(0, 3, 0.9);
        let got = extract_matches(&m, 0.5);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].i, got[0].j), (0, 3));
    }

    #[test]
    fn matcher_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let m = random_map(&mut rng, 5);
            let w = random_map(&mut rng, 5);
            let ds = check_gradients(&[m.clone()], 1e-5, |t, v| {
                Ok(dual_softmax_var(v[0], 0.1)?.mul(t.constant(w.clone()))?.sum())
            })
            .unwrap();
            assert!(ds.max_rel_error < 1e-4, "dual softmax {ds:?}");
            let sk = check_gradients(&[m], 1e-5, |t, v| {
                let (p, _) = sinkhorn_var(v[0], 0.2, 50, 0.0)?;
                Ok(p.mul(t.constant(w.clone()))?.sum())
            })
            .unwrap();
            assert!(sk.max_rel_error < 1e-4, "sinkhorn {sk:?}");
        }
    }

    #[test]
    fn csv_output() {
        let mut buf = Vec::new();
        write_matches_csv(&mut buf, &[Match { i: 0, j: 3, score: 0.9 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,score\n0,3,0.9\n");
    }
}
