//! Differentiable stand-ins for the three components of a VLA policy.
//!
//! - Visual encoder: per-block two-layer tanh MLP plus learned positional
//!   embeddings, `p_i = tanh(W2 tanh(W1 x_i + b1) + b2) + pos_i`.
//! - Language encoder: token table lookup plus positional offsets.
//! - Action head: pools patch and token embeddings and applies an affine
//!   readout.

mod pretrain;

pub use pretrain::{action_mse, pretrain, PretrainConfig, PretrainLog, PretrainRecord};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{EdpaError, Result};
use crate::patching::Image;
use crate::tensor::Tensor;

/// Fixed sizes shared by every model in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub max_tokens: usize,
    pub vocab: usize,
    pub action_dim: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            patch: 8,
            dim: 32,
            max_tokens: 8,
            vocab: 64,
            action_dim: 3,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(EdpaError::NotDivisible {
                height: self.height,
                width: self.width,
                patch: self.patch,
            });
        }
        if self.dim == 0 || self.action_dim == 0 || self.vocab == 0 || self.max_tokens == 0 || self.channels == 0 {
            return Err(EdpaError::Config(format!("degenerate geometry {self:?}")));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Visual encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoderParams {
    pub geometry: Geometry,
    /// `(p * p * C) x d`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d x d`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `N x d`
    pub pos: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoderParams {
    pub geometry: Geometry,
    /// `V x d`
    pub table: Tensor,
    /// `M_max x d`
    pub pos: Tensor,
}

/// How the action head summarises the patch embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Uniform average over patches.
    Mean,
    /// Softmax weights `softmax_i(p_i . Wq mean_j w_j)`, so the instruction
    /// decides which patches are read.
    #[default]
    Attention,
}

impl std::str::FromStr for Pooling {
    type Err = EdpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "attention" => Ok(Pooling::Attention),
            other => Err(EdpaError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionHeadParams {
    pub pooling: Pooling,
    /// `d x d` query projection (unused by mean pooling).
    pub wq: Tensor,
    /// `2d x A`
    pub w: Tensor,
    pub b: Tensor,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl VisualEncoderParams {
    pub fn init<R: Rng + ?Sized>(geometry: Geometry, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        let (k, d, n) = (geometry.patch_len(), geometry.dim, geometry.num_patches());
        Ok(Self {
            geometry,
            w1: normal_tensor(rng, &[k, d], (1.0 / k as f64).sqrt()),
            b1: Tensor::zeros(&[d]),
            w2: normal_tensor(rng, &[d, d], (1.0 / d as f64).sqrt()),
            b2: Tensor::zeros(&[d]),
            pos: normal_tensor(rng, &[n, d], 0.1),
        })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let (k, d, n) = (geometry.patch_len(), geometry.dim, geometry.num_patches());
        Self {
            geometry,
            w1: Tensor::zeros(&[k, d]),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::zeros(&[d, d]),
            b2: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[n, d]),
        }
    }

    pub const NAMES: [&'static str; 5] = ["w1", "b1", "w2", "b2", "pos"];

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.pos]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.pos]
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let g = &self.geometry;
        let (k, d, n) = (g.patch_len(), g.dim, g.num_patches());
        let want: [&[usize]; 5] = [&[k, d], &[d], &[d, d], &[d], &[n, d]];
        for ((t, w), name) in self.tensors().iter().zip(want).zip(Self::NAMES) {
            if t.shape() != w {
                return Err(EdpaError::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: format!("visual.{name} should be {w:?}"),
                });
            }
        }
        Ok(())
    }

    /// Places the weights in `g` as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> VisualVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        VisualVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            pos: leaf(&self.pos),
            patch: self.geometry.patch,
        }
    }
}

/// Visual encoder weights bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct VisualVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub pos: Var,
    patch: usize,
}

impl VisualVars {
    pub fn all(&self) -> [Var; 5] {
        [self.w1, self.b1, self.w2, self.b2, self.pos]
    }

    fn mlp(&self, g: &mut Graph, blocks: Var) -> Result<Var> {
        let z1 = g.matmul(blocks, self.w1)?;
        let z1 = g.add_row_vec(z1, self.b1)?;
        let h = g.tanh(z1);
        let z2 = g.matmul(h, self.w2)?;
        let z2 = g.add_row_vec(z2, self.b2)?;
        Ok(g.tanh(z2))
    }

    /// All `N` patch embeddings of an `H x W x C` image node.
    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let blocks = g.patchify(image, self.patch)?;
        let feats = self.mlp(g, blocks)?;
        if g.shape(feats) != g.shape(self.pos) {
            return Err(EdpaError::ShapeMismatch {
                op: "encode_visual",
                lhs: g.shape(feats).to_vec(),
                rhs: g.shape(self.pos).to_vec(),
            });
        }
        g.add(feats, self.pos)
    }

    /// Embeddings of the listed blocks only, stacked in `rows` order.
    pub fn encode_rows(&self, g: &mut Graph, image: Var, rows: &[usize]) -> Result<Var> {
        let blocks = g.patchify(image, self.patch)?;
        let picked = g.select_rows(blocks, rows)?;
        let feats = self.mlp(g, picked)?;
        let pos = g.select_rows(self.pos, rows)?;
        g.add(feats, pos)
    }
}

impl LanguageEncoderParams {
    pub fn init<R: Rng + ?Sized>(geometry: Geometry, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            geometry,
            table: normal_tensor(rng, &[geometry.vocab, geometry.dim], 0.5),
            pos: normal_tensor(rng, &[geometry.max_tokens, geometry.dim], 0.1),
        })
    }

    pub const NAMES: [&'static str; 2] = ["table", "pos"];

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.table, &self.pos]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.table, &mut self.pos]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LanguageVars {
        LanguageVars {
            table: g.leaf(self.table.clone(), trainable),
            pos: g.leaf(self.pos.clone(), trainable),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(EdpaError::Empty("instruction"));
        }
        let (vocab, _) = self.table.dims2()?;
        let (max, _) = self.pos.dims2()?;
        if tokens.len() > max {
            return Err(EdpaError::InstructionTooLong { len: tokens.len(), max });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(EdpaError::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LanguageVars {
    pub table: Var,
    pub pos: Var,
}

impl LanguageVars {
    pub fn all(&self) -> [Var; 2] {
        [self.table, self.pos]
    }

    /// `w_j = table[t_j] + pos_j`, one row per token.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let (vocab, _) = g.value(self.table).dims2()?;
        let (max, _) = g.value(self.pos).dims2()?;
        if tokens.is_empty() {
            return Err(EdpaError::Empty("instruction"));
        }
        if tokens.len() > max {
            return Err(EdpaError::InstructionTooLong { len: tokens.len(), max });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(EdpaError::TokenOutOfRange { id, vocab });
        }
        let rows = g.select_rows(self.table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.select_rows(self.pos, &positions)?;
        g.add(rows, pos)
    }
}

impl ActionHeadParams {
    pub fn init<R: Rng + ?Sized>(geometry: Geometry, pooling: Pooling, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        let d2 = 2 * geometry.dim;
        let d = geometry.dim;
        Ok(Self {
            pooling,
            wq: normal_tensor(rng, &[d, d], (1.0 / d as f64).sqrt()),
            w: normal_tensor(rng, &[d2, geometry.action_dim], (1.0 / d2 as f64).sqrt()),
            b: Tensor::zeros(&[geometry.action_dim]),
        })
    }

    pub const NAMES: [&'static str; 3] = ["wq", "w", "b"];

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.wq, &self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.wq, &mut self.w, &mut self.b]
    }

    pub fn action_dim(&self) -> usize {
        self.b.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        HeadVars {
            wq: g.leaf(self.wq.clone(), trainable),
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub w: Var,
    pub b: Var,
    pub pooling: Pooling,
}

/// Pooled summaries fed to the readout.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub patches: Var,
    pub tokens: Var,
}

impl HeadVars {
    pub fn all(&self) -> [Var; 3] {
        [self.wq, self.w, self.b]
    }

    pub fn pool(&self, g: &mut Graph, patches: Var, tokens: Var) -> Result<Pooled> {
        let (n, d) = g.value(patches).dims2()?;
        let (m, d2) = g.value(tokens).dims2()?;
        if d != d2 {
            return Err(EdpaError::ShapeMismatch {
                op: "action_head",
                lhs: vec![n, d],
                rhs: vec![m, d2],
            });
        }
        let tt = g.transpose(tokens)?;
        let tok_sum = g.sum_last(tt)?;
        let tok_mean = g.scale(tok_sum, 1.0 / m as f64);
        let pt = g.transpose(patches)?;
        let pooled = match self.pooling {
            Pooling::Mean => {
                let s = g.sum_last(pt)?;
                g.scale(s, 1.0 / n as f64)
            }
            Pooling::Attention => {
                let q = g.reshape(tok_mean, vec![d, 1])?;
                let q = g.matmul(self.wq, q)?;
                let logits = g.matmul(patches, q)?;
                let logits = g.reshape(logits, vec![n])?;
                let attn = g.softmax_last(logits);
                let attn = g.reshape(attn, vec![n, 1])?;
                let mixed = g.matmul(pt, attn)?;
                g.reshape(mixed, vec![d])?
            }
        };
        Ok(Pooled {
            patches: pooled,
            tokens: tok_mean,
        })
    }

    /// Affine readout of `[pooled patches ; pooled tokens]`.
    pub fn readout(&self, g: &mut Graph, pooled: Pooled) -> Result<Var> {
        let z = g.concat(&[pooled.patches, pooled.tokens])?;
        let len = g.shape(z)[0];
        let (rows, a) = g.value(self.w).dims2()?;
        if rows != len {
            return Err(EdpaError::ShapeMismatch {
                op: "action_head",
                lhs: vec![len],
                rhs: vec![rows, a],
            });
        }
        let z = g.reshape(z, vec![1, len])?;
        let out = g.matmul(z, self.w)?;
        let out = g.reshape(out, vec![a])?;
        g.add(out, self.b)
    }

    pub fn forward(&self, g: &mut Graph, patches: Var, tokens: Var) -> Result<Var> {
        let pooled = self.pool(g, patches, tokens)?;
        self.readout(g, pooled)
    }
}

/// One observation with its instruction and ground-truth action.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub tokens: Vec<usize>,
    pub action: Vec<f64>,
}

/// The three components of a policy, as one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub visual: VisualEncoderParams,
    pub language: LanguageEncoderParams,
    pub head: ActionHeadParams,
}

impl Encoders {
    pub fn init(geometry: Geometry, pooling: Pooling, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::seeded(seed);
        Ok(Self {
            visual: VisualEncoderParams::init(geometry, &mut rng)?,
            language: LanguageEncoderParams::init(geometry, &mut rng)?,
            head: ActionHeadParams::init(geometry, pooling, &mut rng)?,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.visual.geometry
    }
}

/// `E_v(image)` as a plain tensor (`N x d`).
pub fn encode_visual(params: &VisualEncoderParams, image: &Image) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let img = g.constant(image.tensor().clone());
    let out = vars.encode(&mut g, img)?;
    Ok(g.value(out).clone())
}

/// `E_t(tokens)` as a plain tensor (`M x d`).
pub fn encode_language(params: &LanguageEncoderParams, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let out = vars.encode(&mut g, tokens)?;
    Ok(g.value(out).clone())
}

/// Action vector from precomputed embeddings.
pub fn action_head(params: &ActionHeadParams, patches: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let p = g.constant(patches.clone());
    let t = g.constant(tokens.clone());
    let out = vars.forward(&mut g, p, t)?;
    Ok(g.value(out).clone())
}

/// Full policy on one observation.
pub fn predict_action(enc: &Encoders, image: &Image, tokens: &[usize]) -> Result<Tensor> {
    let p = encode_visual(&enc.visual, image)?;
    let w = encode_language(&enc.language, tokens)?;
    action_head(&enc.head, &p, &w)
}

/// `(N, d)` checks shared by callers that feed external embeddings.
pub fn check_embeddings(p: &Tensor, geometry: &Geometry) -> Result<()> {
    if p.shape() != [geometry.num_patches(), geometry.dim] {
        return Err(EdpaError::InvalidShape {
            shape: p.shape().to_vec(),
            reason: format!("expected {} x {}", geometry.num_patches(), geometry.dim),
        });
    }
    Ok(())
}
