//! Training objectives: InfoNCE over a feature queue, the patch-to-patch
//! cross-entropy against ground-truth correspondence, Sharpe-ratio weights
//! over neighbourhood similarity distributions, the weighted
//! patch-to-structure loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::CorrespondenceMatrix;
use crate::matching::{similarity_var, FeatureSet, MatcherConfig};
use crate::tensor::Tensor;

/// Added to the spread in the Sharpe denominator.
pub const SHARPE_EPS: f64 = 1e-8;

const UNIT_NORM_TOL: f64 = 1e-6;

/// InfoNCE on the tape. `query` and `positive` are `[1 × d]`, `queue` is
/// `[K × d]`; the positive logit is the first entry of the softmax.
pub fn info_nce_var<'t>(query: Var<'t>, positive: Var<'t>, queue: Option<Var<'t>>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("InfoNCE temperature must be > 0, got {tau}")));
    }
    let keys = match queue {
        Some(q) => concat_rows(&[positive, q])?,
        None => positive,
    };
    let logits = query.matmul(keys.transpose()?)?.scale(1.0 / tau);
    logits.logsumexp(1)?.sum().sub(logits.element(0)?)
}

fn check_unit(v: &[f64], what: impl Fn() -> String) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotNormalized { what: what(), norm });
    }
    Ok(())
}

/// `−log( e^{q·q⁺/τ} / (e^{q·q⁺/τ} + Σₘ e^{q·qₘ/τ}) )` for unit vectors.
pub fn info_nce(query: &[f64], positive: &[f64], queue: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_unit(query, || "query".into())?;
    check_unit(positive, || "positive".into())?;
    let d = query.len();
    if positive.len() != d {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: vec![d],
            right: vec![positive.len()],
        });
    }
    for (m, k) in queue.iter().enumerate() {
        check_unit(k, || format!("queue entry {m}"))?;
        if k.len() != d {
            return Err(Error::ShapeMismatch {
                op: "info_nce",
                left: vec![d],
                right: vec![k.len()],
            });
        }
    }
    let tape = Tape::new();
    let q = tape.constant(Tensor::matrix(1, d, query.to_vec())?);
    let p = tape.constant(Tensor::matrix(1, d, positive.to_vec())?);
    let keys = if queue.is_empty() {
        None
    } else {
        Some(tape.constant(Tensor::matrix(queue.len(), d, queue.concat())?))
    };
    Ok(info_nce_var(q, p, keys, tau)?.item())
}

fn check_pair_shape(m_gt: &CorrespondenceMatrix, shape: &[usize]) -> Result<()> {
    if m_gt.entries().shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "correspondence loss",
            left: m_gt.entries().shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(())
}

/// `−M_gt(i, j) · log M̂(i, j)` with the log clamped at `1e-12`.
pub fn p2p_elementwise_var<'t>(m_gt: &CorrespondenceMatrix, m_hat: Var<'t>) -> Result<Var<'t>> {
    check_pair_shape(m_gt, &m_hat.shape())?;
    let gt = m_hat.tape().constant(m_gt.entries().clone());
    Ok(gt.mul(m_hat.ln())?.neg())
}

/// Mean cross-entropy over the matched pairs; zero when nothing matches.
pub fn p2p_loss_var<'t>(m_gt: &CorrespondenceMatrix, m_hat: Var<'t>) -> Result<Var<'t>> {
    let support = m_gt.support_count().max(1) as f64;
    Ok(p2p_elementwise_var(m_gt, m_hat)?.sum().scale(1.0 / support))
}

pub fn p2p_elementwise(m_gt: &CorrespondenceMatrix, m_hat: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(p2p_elementwise_var(m_gt, tape.constant(m_hat.clone()))?.value())
}

pub fn p2p_loss(m_gt: &CorrespondenceMatrix, m_hat: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(p2p_loss_var(m_gt, tape.constant(m_hat.clone()))?.item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpeDenominator {
    /// Population standard deviation.
    #[default]
    Std,
    /// Population variance.
    Var,
}

/// Similarities of one anchor token against every token of the other view.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodDistribution {
    pub values: Vec<f64>,
    pub anchor_index: usize,
}

impl NeighborhoodDistribution {
    pub fn sharpe_ratio(&self, denom: SharpeDenominator) -> Result<f64> {
        sharpe_ratio(&self.values, denom)
    }
}

/// `(max − mean) / (spread + ε)`; a constant distribution scores 0.
pub fn sharpe_ratio(d: &[f64], denom: SharpeDenominator) -> Result<f64> {
    if d.len() < 2 {
        return Err(Error::TooFewElements {
            what: "sharpe_ratio",
            min: 2,
            got: d.len(),
        });
    }
    let n = d.len() as f64;
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(0.0);
    }
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let spread = match denom {
        SharpeDenominator::Std => var.sqrt(),
        SharpeDenominator::Var => var,
    };
    Ok((max - mean) / (spread + SHARPE_EPS))
}

/// Sharpe ratio of every row of `m`, on the tape. Rows must have ≥ 2
/// entries.
pub fn sharpe_rows_var<'t>(m: Var<'t>, denom: SharpeDenominator) -> Result<Var<'t>> {
    let shape = m.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::TooFewElements {
            what: "sharpe_ratio",
            min: 2,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    let mean = m.mean_axis(1)?;
    let centered = m.add_col(mean.neg())?;
    let var = centered.square().mean_axis(1)?;
    let spread = match denom {
        SharpeDenominator::Std => var.sqrt(),
        SharpeDenominator::Var => var,
    };
    m.max_axis(1)?.sub(mean)?.div(spread.add_scalar(SHARPE_EPS))
}

/// Raw Sharpe ratios and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpeWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl SharpeWeights {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let normalized = crate::autograd::softmax(&Tensor::vector(raw.clone()), 0).into_data();
        Self { raw, normalized }
    }
}

/// Sharpe weights for the anchors of both views of a similarity map: rows
/// (view A anchors against view B) and columns (view B anchors against A).
pub fn sharpe_weights(sim: &Tensor, denom: SharpeDenominator) -> Result<(SharpeWeights, SharpeWeights)> {
    let rows = (0..sim.rows()).map(|i| sharpe_ratio(sim.row(i), denom)).collect::<Result<Vec<_>>>()?;
    let t = sim.transpose()?;
    let cols = (0..t.rows()).map(|j| sharpe_ratio(t.row(j), denom)).collect::<Result<Vec<_>>>()?;
    Ok((SharpeWeights::from_raw(rows), SharpeWeights::from_raw(cols)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct P2sOptions {
    pub denominator: SharpeDenominator,
    /// Let gradient flow through the Sharpe weights. Off by default: the
    /// weights act as soft labels.
    pub sharpe_gradient: bool,
}

/// Patch-to-structure loss from explicit anchor weights `w_a` (rows) and
/// `w_b` (columns): `Σₙₘ (w_a(n) + w_b(m))/2 · E(n, m) / (N·M)`.
pub fn p2s_weighted_var<'t>(
    m_gt: &CorrespondenceMatrix,
    m_hat: Var<'t>,
    w_a: Var<'t>,
    w_b: Var<'t>,
) -> Result<Var<'t>> {
    let elem = p2p_elementwise_var(m_gt, m_hat)?;
    let shape = m_hat.shape();
    let (n, m) = (shape[0], shape[1]);
    let pair_w = m_hat
        .tape()
        .constant(Tensor::zeros(&[n, m]))
        .add_col(w_a)?
        .add_row(w_b)?
        .scale(0.5);
    Ok(pair_w.mul(elem)?.sum().scale(1.0 / (n * m) as f64))
}

/// Patch-to-structure loss with Sharpe weights derived from the similarity
/// map `sim` (anchors of view A in rows, of view B in columns).
pub fn p2s_loss_var<'t>(
    m_gt: &CorrespondenceMatrix,
    m_hat: Var<'t>,
    sim: Var<'t>,
    opts: P2sOptions,
) -> Result<Var<'t>> {
    let source = if opts.sharpe_gradient { sim } else { sim.detach() };
    let w_a = sharpe_rows_var(source, opts.denominator)?.softmax(0)?;
    let w_b = sharpe_rows_var(source.transpose()?, opts.denominator)?.softmax(0)?;
    p2s_weighted_var(m_gt, m_hat, w_a, w_b)
}

pub fn p2s_from_weights(m_gt: &CorrespondenceMatrix, m_hat: &Tensor, w_a: &[f64], w_b: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let loss = p2s_weighted_var(
        m_gt,
        tape.constant(m_hat.clone()),
        tape.constant(Tensor::vector(w_a.to_vec())),
        tape.constant(Tensor::vector(w_b.to_vec())),
    )?;
    Ok(loss.item())
}

/// Patch-to-structure loss where the Sharpe distributions come from the
/// cosine similarities of `features_a` against `features_b`.
pub fn p2s_loss(
    m_gt: &CorrespondenceMatrix,
    m_hat: &Tensor,
    features_a: &FeatureSet,
    features_b: &FeatureSet,
    opts: P2sOptions,
) -> Result<f64> {
    let tape = Tape::new();
    let sim = similarity_var(
        tape.constant(features_a.tensor().clone()),
        tape.constant(features_b.tensor().clone()),
    )?;
    Ok(p2s_loss_var(m_gt, tape.constant(m_hat.clone()), sim, opts)?.item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub g: bool,
    pub p2p: bool,
    pub p2s: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            g: true,
            p2p: true,
            p2s: true,
        }
    }
}

impl LossToggles {
    pub fn any(&self) -> bool {
        self.g || self.p2p || self.p2s
    }

    pub fn validate(&self) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::Config("at least one loss term must be enabled".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub g: f64,
    pub p2p: f64,
    pub p2s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            g: 1.0,
            p2p: 1.0,
            p2s: 1.0,
        }
    }
}

/// Per-term loss values of one evaluation; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_p2p: f64,
    pub l_p2s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_g += b.l_g;
            acc.l_p2p += b.l_p2p;
            acc.l_p2s += b.l_p2s;
            acc.total += b.total;
        }
        LossBreakdown {
            l_g: acc.l_g / n,
            l_p2p: acc.l_p2p / n,
            l_p2s: acc.l_p2s / n,
            total: acc.total / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_p2p, self.l_p2s, self.total].iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("l_g", self.l_g), ("l_p2p", self.l_p2p), ("l_p2s", self.l_p2s), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Tape inputs of the combined objective for one view pair. Student tokens
/// are the anchors (rows); teacher tokens the other view (columns).
pub struct LossInputs<'a, 't> {
    pub query: Var<'t>,
    pub positive: Var<'t>,
    pub queue: Option<Var<'t>>,
    pub tau: f64,
    pub student_tokens: Var<'t>,
    pub teacher_tokens: Var<'t>,
    pub m_gt: &'a CorrespondenceMatrix,
    pub matcher: MatcherConfig,
    pub p2s: P2sOptions,
}

pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub matcher_converged: bool,
}

/// Weighted sum of the enabled terms. Disabled terms are never built, so
/// they contribute exactly 0 and no gradient.
pub fn total_loss_var<'t>(
    toggles: LossToggles,
    weights: LossWeights,
    inputs: &LossInputs<'_, 't>,
) -> Result<LossTerms<'t>> {
    toggles.validate()?;
    let mut parts: Vec<Var<'t>> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut converged = true;

    if toggles.g {
        let l = info_nce_var(inputs.query, inputs.positive, inputs.queue, inputs.tau)?;
        breakdown.l_g = l.item();
        parts.push(l.scale(weights.g));
    }
    if toggles.p2p || toggles.p2s {
        let sim = similarity_var(inputs.student_tokens, inputs.teacher_tokens)?;
        let (m_hat, ok) = inputs.matcher.assign_var(sim)?;
        converged = ok;
        if toggles.p2p {
            let l = p2p_loss_var(inputs.m_gt, m_hat)?;
            breakdown.l_p2p = l.item();
            parts.push(l.scale(weights.p2p));
        }
        if toggles.p2s {
            let l = p2s_loss_var(inputs.m_gt, m_hat, sim, inputs.p2s)?;
            breakdown.l_p2s = l.item();
            parts.push(l.scale(weights.p2s));
        }
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = total.add(*p)?;
    }
    breakdown.total = total.item();
    Ok(LossTerms {
        total,
        breakdown,
        matcher_converged: converged,
    })
}
