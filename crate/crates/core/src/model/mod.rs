//! Dual encoders, the shared attribute head and the fusion heads.
//!
//! Text: mean of token embeddings, then `tanh(W·mean + b)`. Image:
//! `tanh(W2·tanh(W1·x + b1) + b2)`. Both outputs are L2-normalized here, so
//! every embedding a loss sees has unit norm. Backward passes are written by
//! hand and include the normalization Jacobian `(I - u uᵀ) / ‖h‖`.

mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, norm, Matrix, Rng};

use layers::{tanh_backward, tanh_vec, uniform_fill};
pub use layers::{Linear, NamedTensor, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub fusion_hidden: usize,
    /// Parameters start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            image_hidden: 64,
            fusion_hidden: 32,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.image_hidden == 0 || self.fusion_hidden == 0 {
            return Err(Error::ConfigInvalid("model dimensions must be positive".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::ConfigInvalid("init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset-dependent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Width of the attribute head; 0 for the vehicle model.
    pub num_attributes: usize,
}

/// Unit vector plus the norm it was divided by.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub unit: Vec<f64>,
    pub norm: f64,
}

pub fn normalize(v: &[f64]) -> Result<Normalized> {
    let unit = l2_normalize(v)?;
    Ok(Normalized { unit, norm: norm(v) })
}

/// Pulls `∂L/∂u` back through `u = h / ‖h‖`.
pub fn normalize_backward(n: &Normalized, grad_unit: &[f64]) -> Vec<f64> {
    let mut proj = 0.0;
    for (u, g) in n.unit.iter().zip(grad_unit) {
        proj += u * g;
    }
    n.unit
        .iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * proj) / n.norm)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub dim: usize,
    /// `vocab_size × dim`, row per token.
    pub embed: Vec<f64>,
    pub hidden: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextCache {
    tokens: Vec<usize>,
    mean: Vec<f64>,
    out: Vec<f64>,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, dim: usize, scale: f64, rng: &Rng) -> Self {
        TextEncoder {
            vocab_size,
            dim,
            embed: uniform_fill(&mut rng.child("embed"), vocab_size * dim, scale),
            hidden: Linear::uniform(dim, dim, scale, &rng.child("hidden")),
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        TextEncoder {
            vocab_size,
            dim,
            embed: vec![0.0; vocab_size * dim],
            hidden: Linear::zeros(dim, dim),
        }
    }

    /// Pre-normalization embedding and the cache needed by [`TextEncoder::backward`].
    pub fn forward(&self, tokens: &[usize]) -> Result<(Vec<f64>, TextCache)> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let mut mean = vec![0.0; self.dim];
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::UnknownToken(format!("id {t}")));
            }
            for (m, e) in mean.iter_mut().zip(&self.embed[t * self.dim..(t + 1) * self.dim]) {
                *m += e;
            }
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let out = tanh_vec(self.hidden.forward(&mean)?);
        Ok((
            out.clone(),
            TextCache {
                tokens: tokens.to_vec(),
                mean,
                out,
            },
        ))
    }

    pub fn backward(&self, cache: &TextCache, grad_out: &[f64], grads: &mut TextEncoder) {
        let gz = tanh_backward(&cache.out, grad_out);
        let gmean = self.hidden.backward(&cache.mean, &gz, &mut grads.hidden);
        let n = cache.tokens.len() as f64;
        for &t in &cache.tokens {
            let row = &mut grads.embed[t * self.dim..(t + 1) * self.dim];
            for (r, g) in row.iter_mut().zip(&gmean) {
                *r += g / n;
            }
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push((format!("{prefix}.embed"), vec![self.vocab_size, self.dim], &self.embed));
        self.hidden.push_tensors(&format!("{prefix}.hidden"), out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.embed);
        self.hidden.push_tensors_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    out: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, scale: f64, rng: &Rng) -> Self {
        ImageEncoder {
            l1: Linear::uniform(in_dim, hidden, scale, &rng.child("l1")),
            l2: Linear::uniform(hidden, out_dim, scale, &rng.child("l2")),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        ImageEncoder {
            l1: Linear::zeros(in_dim, hidden),
            l2: Linear::zeros(hidden, out_dim),
        }
    }

    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, ImageCache)> {
        if features.len() != self.l1.in_dim {
            return Err(Error::dims(self.l1.in_dim, features.len()));
        }
        let h1 = tanh_vec(self.l1.forward(features)?);
        let out = tanh_vec(self.l2.forward(&h1)?);
        Ok((
            out.clone(),
            ImageCache {
                input: features.to_vec(),
                h1,
                out,
            },
        ))
    }

    pub fn backward(&self, cache: &ImageCache, grad_out: &[f64], grads: &mut ImageEncoder) -> Vec<f64> {
        let gz2 = tanh_backward(&cache.out, grad_out);
        let gh1 = self.l2.backward(&cache.h1, &gz2, &mut grads.l2);
        let gz1 = tanh_backward(&cache.h1, &gh1);
        self.l1.backward(&cache.input, &gz1, &mut grads.l1)
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.l1.push_tensors(&format!("{prefix}.l1"), out);
        self.l2.push_tensors(&format!("{prefix}.l2"), out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.l1.push_tensors_mut(out);
        self.l2.push_tensors_mut(out);
    }
}

/// `concat(a, b) → tanh(hidden) → out` perceptron scoring a text/image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    split: usize,
}

impl FusionHead {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, scale: f64, rng: &Rng) -> Self {
        FusionHead {
            hidden: Linear::uniform(in_dim, hidden, scale, &rng.child("hidden")),
            out: Linear::uniform(hidden, out_dim, scale, &rng.child("out")),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        FusionHead {
            hidden: Linear::zeros(in_dim, hidden),
            out: Linear::zeros(hidden, out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden.in_dim, self.hidden.out_dim, self.out.out_dim)
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, FusionCache)> {
        let mut input = Vec::with_capacity(a.len() + b.len());
        input.extend_from_slice(a);
        input.extend_from_slice(b);
        let hidden = tanh_vec(self.hidden.forward(&input)?);
        let logits = self.out.forward(&hidden)?;
        Ok((
            logits,
            FusionCache {
                input,
                hidden,
                split: a.len(),
            },
        ))
    }

    /// Accumulates head gradients and returns `(∂L/∂a, ∂L/∂b)`.
    pub fn backward(&self, cache: &FusionCache, grad_logits: &[f64], grads: &mut FusionHead) -> (Vec<f64>, Vec<f64>) {
        let gh = self.out.backward(&cache.hidden, grad_logits, &mut grads.out);
        let gz = tanh_backward(&cache.hidden, &gh);
        let mut gin = self.hidden.backward(&cache.input, &gz, &mut grads.hidden);
        let gb = gin.split_off(cache.split);
        (gin, gb)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.hidden.push_tensors(&format!("{prefix}.hidden"), out);
        self.out.push_tensors(&format!("{prefix}.out"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.hidden.push_tensors_mut(out);
        self.out.push_tensors_mut(out);
    }
}

impl Parameters for FusionHead {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut v = Vec::new();
        self.push_tensors("head", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.push_tensors_mut(&mut v);
        v
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut v = Vec::new();
        self.push_tensors("head", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.push_tensors_mut(&mut v);
        v
    }
}

/// `W·e + b` through the attribute head shared by both modalities.
pub fn attribute_logits(embedding: &[f64], head: &Linear) -> Result<Vec<f64>> {
    head.forward(embedding)
}

/// Unit-norm text and image embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub f_txt: Matrix,
    pub f_img: Matrix,
}

/// Encoded texts with everything backward needs.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub embeddings: Matrix,
    caches: Vec<TextCache>,
    norms: Vec<Normalized>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub embeddings: Matrix,
    caches: Vec<ImageCache>,
    norms: Vec<Normalized>,
    generation: u64,
}

fn stack(rows: &[Normalized], dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), dim);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&r.unit);
    }
    m
}

fn check_generation(cache: u64, model: u64) -> Result<()> {
    if cache != model {
        return Err(Error::StaleCache { cache, model });
    }
    Ok(())
}

/// Text and image towers plus a parameter generation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    generation: u64,
}

impl DualEncoder {
    pub fn new(cfg: &ModelConfig, shape: &ModelShape, rng: &Rng) -> Self {
        DualEncoder {
            text: TextEncoder::new(shape.vocab_size, cfg.embed_dim, cfg.init_scale, &rng.child("text")),
            image: ImageEncoder::new(
                shape.feature_dim,
                cfg.image_hidden,
                cfg.embed_dim,
                cfg.init_scale,
                &rng.child("image"),
            ),
            generation: 0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        DualEncoder {
            text: TextEncoder::zeros(self.text.vocab_size, self.text.dim),
            image: ImageEncoder::zeros(self.image.l1.in_dim, self.image.l1.out_dim, self.image.l2.out_dim),
            generation: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.dim
    }

    /// Bumped after every parameter update; caches from older generations are refused.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn encode_texts(&self, captions: &[Vec<usize>]) -> Result<TextBatch> {
        let mut caches = Vec::with_capacity(captions.len());
        let mut norms = Vec::with_capacity(captions.len());
        for c in captions {
            let (h, cache) = self.text.forward(c)?;
            norms.push(normalize(&h)?);
            caches.push(cache);
        }
        Ok(TextBatch {
            embeddings: stack(&norms, self.text.dim),
            caches,
            norms,
            generation: self.generation,
        })
    }

    pub fn encode_images(&self, features: &[&[f64]]) -> Result<ImageBatch> {
        let mut caches = Vec::with_capacity(features.len());
        let mut norms = Vec::with_capacity(features.len());
        for f in features {
            let (h, cache) = self.image.forward(f)?;
            norms.push(normalize(&h)?);
            caches.push(cache);
        }
        Ok(ImageBatch {
            embeddings: stack(&norms, self.image.l2.out_dim),
            caches,
            norms,
            generation: self.generation,
        })
    }

    /// Backpropagates `∂L/∂(unit text embeddings)` into `grads`.
    pub fn backward_texts(&self, batch: &TextBatch, grad: &Matrix, grads: &mut DualEncoder) -> Result<()> {
        check_generation(batch.generation, self.generation)?;
        if grad.shape() != batch.embeddings.shape() {
            return Err(Error::ShapeMismatch("text gradient".into()));
        }
        for (i, (cache, n)) in batch.caches.iter().zip(&batch.norms).enumerate() {
            let gh = normalize_backward(n, grad.row(i));
            self.text.backward(cache, &gh, &mut grads.text);
        }
        Ok(())
    }

    pub fn backward_images(&self, batch: &ImageBatch, grad: &Matrix, grads: &mut DualEncoder) -> Result<()> {
        check_generation(batch.generation, self.generation)?;
        if grad.shape() != batch.embeddings.shape() {
            return Err(Error::ShapeMismatch("image gradient".into()));
        }
        for (i, (cache, n)) in batch.caches.iter().zip(&batch.norms).enumerate() {
            let gh = normalize_backward(n, grad.row(i));
            self.image.backward(cache, &gh, &mut grads.image);
        }
        Ok(())
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<NamedTensor<'a>>) {
        self.text.push_tensors("text", out);
        self.image.push_tensors("image", out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.text.push_tensors_mut(out);
        self.image.push_tensors_mut(out);
    }
}

/// Pedestrian branch: towers, shared attribute head, masked-attribute head.
#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianModel {
    pub encoder: DualEncoder,
    pub attr_head: Linear,
    pub irr_head: FusionHead,
}

impl PedestrianModel {
    pub fn new(cfg: &ModelConfig, shape: &ModelShape, seed: u64) -> Self {
        let rng = Rng::new(seed).child("model/pedestrian");
        let d = cfg.embed_dim;
        PedestrianModel {
            encoder: DualEncoder::new(cfg, shape, &rng),
            attr_head: Linear::uniform(d, shape.num_attributes, cfg.init_scale, &rng.child("attr_head")),
            irr_head: FusionHead::new(
                2 * d,
                cfg.fusion_hidden,
                shape.vocab_size,
                cfg.init_scale,
                &rng.child("irr_head"),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PedestrianModel {
            encoder: self.encoder.zeros_like(),
            attr_head: Linear::zeros(self.attr_head.in_dim, self.attr_head.out_dim),
            irr_head: self.irr_head.zeros_like(),
        }
    }
}

impl Parameters for PedestrianModel {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut v = Vec::new();
        self.encoder.push_tensors(&mut v);
        self.attr_head.push_tensors("attr_head", &mut v);
        self.irr_head.push_tensors("irr_head", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.encoder.push_tensors_mut(&mut v);
        self.attr_head.push_tensors_mut(&mut v);
        self.irr_head.push_tensors_mut(&mut v);
        v
    }
}

/// Vehicle branch: towers, matching head and the learnable contrastive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleModel {
    pub encoder: DualEncoder,
    pub itm_head: FusionHead,
    pub tau: f64,
}

impl VehicleModel {
    pub fn new(cfg: &ModelConfig, shape: &ModelShape, tau: f64, seed: u64) -> Self {
        let rng = Rng::new(seed).child("model/vehicle");
        let d = cfg.embed_dim;
        VehicleModel {
            encoder: DualEncoder::new(cfg, shape, &rng),
            itm_head: FusionHead::new(2 * d, cfg.fusion_hidden, 2, cfg.init_scale, &rng.child("itm_head")),
            tau,
        }
    }

    pub fn zeros_like(&self) -> Self {
        VehicleModel {
            encoder: self.encoder.zeros_like(),
            itm_head: self.itm_head.zeros_like(),
            tau: 0.0,
        }
    }
}

impl Parameters for VehicleModel {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut v = Vec::new();
        self.encoder.push_tensors(&mut v);
        self.itm_head.push_tensors("itm_head", &mut v);
        v.push(("tau".to_string(), vec![1], std::slice::from_ref(&self.tau)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.encoder.push_tensors_mut(&mut v);
        self.itm_head.push_tensors_mut(&mut v);
        v.push(std::slice::from_mut(&mut self.tau));
        v
    }
}

#[cfg(test)]
mod tests;
