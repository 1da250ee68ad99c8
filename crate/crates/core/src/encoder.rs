//! Patch-token encoder, its momentum teacher, and the global-feature queue.
//!
//! Architecture: linear patch embedding, `blocks` residual tanh MLPs shared
//! across tokens, an optional single-head self-attention block, and a
//! projection head applied to the mean token for the global feature.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::matching::FeatureSet;
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_dims: [usize; 3],
    /// Token width.
    pub d: usize,
    /// Hidden width of each MLP block.
    pub h: usize,
    pub blocks: usize,
    /// Global feature width.
    pub d_g: usize,
    pub attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_dims: [8; 3],
            d: 32,
            h: 64,
            blocks: 2,
            d_g: 16,
            attention: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_dims.iter().any(|&p| p == 0) || self.d == 0 || self.h == 0 || self.d_g == 0 {
            return Err(Error::Config("encoder sizes must all be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_dims.iter().product()
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (p, d, h) = (self.patch_voxels(), self.d, self.h);
        let mut out = vec![("embed.w".to_string(), vec![p, d]), ("embed.b".to_string(), vec![d])];
        for b in 0..self.blocks {
            out.push((format!("block{b}.w1"), vec![d, h]));
            out.push((format!("block{b}.b1"), vec![h]));
            out.push((format!("block{b}.w2"), vec![h, d]));
            out.push((format!("block{b}.b2"), vec![d]));
        }
        if self.attention {
            for n in ["wq", "wk", "wv", "wo"] {
                out.push((format!("attn.{n}"), vec![d, d]));
            }
        }
        out.push(("head.w".to_string(), vec![d, self.d_g]));
        out.push(("head.b".to_string(), vec![self.d_g]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Uniform in `±1/√fan_in`; biases start at zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shape")
                };
                (name, t)
            })
            .unzip();
        Ok(Self { config, names, tensors })
    }

    pub fn from_tensors(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(Error::format(
                "sckpt/1",
                format!("expected {} encoder tensors, found {}", layout.len(), named.len()),
            ));
        }
        for ((ln, ls), (n, t)) in layout.iter().zip(&named) {
            if ln != n || ls.as_slice() != t.shape() {
                return Err(Error::format(
                    "sckpt/1",
                    format!("tensor {n} {:?} does not match expected {ln} {ls:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::format("sckpt/1", format!("tensor {n} has non-finite values")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Put every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEncoder<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundEncoder {
            config: self.config,
            vars,
        }
    }

    /// Token features (`[N × d]`) of every patch in `grid`, in grid order.
    pub fn encode_tokens(&self, v: &Volume, grid: &PatchGrid) -> Result<FeatureSet> {
        let tape = Tape::new();
        let enc = self.bind(&tape, false);
        FeatureSet::new(enc.tokens(tape.constant(self.patches(v, grid)?))?.value())
    }

    /// Unit-norm global feature (`d_g` values).
    pub fn encode_global(&self, v: &Volume, grid: &PatchGrid) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let enc = self.bind(&tape, false);
        let tokens = enc.tokens(tape.constant(self.patches(v, grid)?))?;
        Ok(enc.global(tokens)?.value().into_data())
    }

    /// Patch matrix of `v`, checked against the embedding width.
    pub fn patches(&self, v: &Volume, grid: &PatchGrid) -> Result<Tensor> {
        if grid.patch_dims() != self.config.patch_dims {
            return Err(Error::ShapeMismatch {
                op: "encode_tokens",
                left: grid.patch_dims().to_vec(),
                right: self.config.patch_dims.to_vec(),
            });
        }
        grid.extract(v)
    }

    fn check_same_layout(&self, other: &EncoderParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                left: vec![self.config.d, self.config.h, self.config.blocks, self.config.d_g],
                right: vec![other.config.d, other.config.h, other.config.blocks, other.config.d_g],
            });
        }
        Ok(())
    }
}

/// Encoder parameters living on a tape.
pub struct BoundEncoder<'t> {
    config: EncoderConfig,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundEncoder<'t> {
    /// Wrap tape variables laid out as [`EncoderConfig::layout`].
    pub fn from_vars(config: EncoderConfig, vars: Vec<Var<'t>>) -> Self {
        assert_eq!(vars.len(), config.layout().len(), "encoder variable count");
        Self { config, vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// `patches` is `[N × P]`; returns `[N × d]`.
    pub fn tokens(&self, patches: Var<'t>) -> Result<Var<'t>> {
        let v = &self.vars;
        let mut x = patches.matmul(v[0])?.add_row(v[1])?;
        let mut k = 2;
        for _ in 0..self.config.blocks {
            let hidden = x.matmul(v[k])?.add_row(v[k + 1])?.tanh();
            x = x.add(hidden.matmul(v[k + 2])?.add_row(v[k + 3])?)?;
            k += 4;
        }
        if self.config.attention {
            let (wq, wk, wv, wo) = (v[k], v[k + 1], v[k + 2], v[k + 3]);
            let scale = 1.0 / (self.config.d as f64).sqrt();
            let q = x.matmul(wq)?;
            let kk = x.matmul(wk)?;
            let attn = q.matmul(kk.transpose()?)?.scale(scale).softmax(1)?;
            x = x.add(attn.matmul(x.matmul(wv)?)?.matmul(wo)?)?;
        }
        Ok(x)
    }

    /// Mean token → projection head → L2 normalization, as `[1 × d_g]`.
    pub fn global(&self, tokens: Var<'t>) -> Result<Var<'t>> {
        let n = self.vars.len();
        let d = self.config.d;
        let pooled = tokens.mean_axis(0)?.reshape(&[1, d])?;
        pooled.matmul(self.vars[n - 2])?.add_row(self.vars[n - 1])?.normalize_rows()
    }
}

/// Momentum copy of the student.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: EncoderParams,
    pub momentum: f64,
}

impl TeacherState {
    pub fn new(student: &EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum must lie in [0, 1], got {momentum}")));
        }
        Ok(Self {
            params: student.clone(),
            momentum,
        })
    }

    /// `θ* ← μ·θ* + (1−μ)·θ`.
    pub fn ema_update(&mut self, student: &EncoderParams) -> Result<()> {
        self.params.check_same_layout(student)?;
        let mu = self.momentum;
        for (t, s) in self.params.tensors.iter_mut().zip(&student.tensors) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
        Ok(())
    }
}

/// FIFO dictionary of unit-norm global features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    items: VecDeque<Vec<f64>>,
}

const QUEUE_NORM_TOL: f64 = 1e-6;

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.items.iter()
    }

    /// Validates the whole batch before inserting any of it.
    pub fn push(&mut self, feats: &[Vec<f64>]) -> Result<()> {
        for (k, f) in feats.iter().enumerate() {
            if f.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "queue_push",
                    left: vec![f.len()],
                    right: vec![self.dim],
                });
            }
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUEUE_NORM_TOL {
                return Err(Error::NotNormalized {
                    what: format!("queue input {k}"),
                    norm,
                });
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for f in feats {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(f.clone());
        }
        Ok(())
    }

    /// `[len × dim]`, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.items.is_empty() {
            return None;
        }
        let data = self.items.iter().flatten().copied().collect();
        Some(Tensor::matrix(self.items.len(), self.dim, data).expect("queue rows share dim"))
    }

    pub fn from_tensor(capacity: usize, dim: usize, t: Option<&Tensor>) -> Result<Self> {
        let mut q = Self::new(capacity, dim);
        if let Some(t) = t {
            if t.shape().len() != 2 || t.cols() != dim || t.rows() > capacity {
                return Err(Error::format("sckpt/1", format!("queue blob has shape {:?}", t.shape())));
            }
            let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            q.push(&rows)?;
        }
        Ok(q)
    }
}
