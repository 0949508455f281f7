//! Query-based keypoint detector.
//!
//! The image is cut into square patches, each embedded linearly and summed
//! with a fixed 2D sinusoidal position code. `Q` learned keypoint queries and
//! one context query pass through blocks of self-attention, cross-attention
//! to the patch grid and a ReLU feed-forward layer (residual, no norm).
//! Keypoint queries emit a location in `[0,1]²` and type logits; the context
//! query emits the context vector `ρ` and category logits.

use kplift_tensor::Tensor;
use nalgebra::Matrix2xX;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::lifter::LifterConfig;
use crate::nn::{init_linear, linear, ParamStore};
use crate::shape_model::{CategoryId, CategoryRegistry};
use crate::{Error, Result};

pub const EMBED: &str = "detector.embed";
pub const KEYPOINT_QUERIES: &str = "detector.query.keypoint";
pub const CONTEXT_QUERY: &str = "detector.query.context";
pub const LOC_HIDDEN: &str = "detector.head.loc1";
pub const LOC_OUT: &str = "detector.head.loc2";
pub const TYPE_HEAD: &str = "detector.head.type";
pub const CONTEXT_HEAD: &str = "detector.head.context";
pub const CATEGORY_HEAD: &str = "detector.head.category";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Keypoint queries beyond `K`.
    pub spare_queries: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            dim: 64,
            heads: 4,
            blocks: 2,
            ffn_dim: 128,
            patch: 8,
            image_size: 64,
            spare_queries: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Invalid(format!(
                "detector dim {} must be a positive multiple of 4",
                self.dim
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "detector dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Invalid(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn query_count(&self, registry: &CategoryRegistry) -> usize {
        registry.max_keypoints() + self.spare_queries
    }
}

/// Grayscale image, row-major, stored as 8-bit levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRaster {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Quantize `[0,1]` values (clamped) to 8 bits.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Invalid(format!("{} values for a {width}x{height} image", values.len())));
        }
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(ImageRaster { width, height, pixels })
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64 / 255.0
    }

    /// Row-major patches, each flattened row-major: `[n_patches · p²]`.
    pub fn patches(&self, p: usize) -> Result<Vec<f64>> {
        if p == 0 || !self.width.is_multiple_of(p) || !self.height.is_multiple_of(p) {
            return Err(Error::Invalid(format!(
                "{}x{} image is not divisible into {p}px patches",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height / p {
            for px in 0..self.width / p {
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        out.push(self.value(x, y));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fixed position code for an `n×n` grid, `[n², dim]`. The first half of
/// the channels encodes the row, the second half the column.
pub fn positional_encoding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; n * n * dim];
    for r in 0..n {
        for c in 0..n {
            let row = &mut out[(r * n + c) * dim..(r * n + c + 1) * dim];
            for i in 0..pairs {
                let w = 1.0 / 100f64.powf(i as f64 / pairs as f64);
                row[2 * i] = (r as f64 * w).sin();
                row[2 * i + 1] = (r as f64 * w).cos();
                row[half + 2 * i] = (c as f64 * w).sin();
                row[half + 2 * i + 1] = (c as f64 * w).cos();
            }
        }
    }
    out
}

fn block_name(i: usize, part: &str) -> String {
    format!("detector.block{i}.{part}")
}

fn normal_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub(crate) fn init_params(
    params: &mut ParamStore,
    cfg: &DetectorConfig,
    lifter: &LifterConfig,
    registry: &CategoryRegistry,
    rng: &mut impl Rng,
) {
    let d = cfg.dim;
    let q = cfg.query_count(registry);
    let s3 = 3f64.sqrt();
    init_linear(params, EMBED, cfg.patch * cfg.patch, d, s3, rng);
    params.insert_param(KEYPOINT_QUERIES, normal_vec(q * d, 1.0, rng), &[q, d]);
    params.insert_param(CONTEXT_QUERY, normal_vec(d, 1.0, rng), &[1, d]);
    for i in 0..cfg.blocks {
        for attn in ["self", "cross"] {
            for p in ["q", "k", "v"] {
                init_linear(params, &block_name(i, &format!("{attn}.{p}")), d, d, s3, rng);
            }
            init_linear(params, &block_name(i, &format!("{attn}.o")), d, d, 1.0, rng);
        }
        init_linear(params, &block_name(i, "ffn1"), d, cfg.ffn_dim, 6f64.sqrt(), rng);
        init_linear(params, &block_name(i, "ffn2"), cfg.ffn_dim, d, 1.0, rng);
    }
    init_linear(params, LOC_HIDDEN, d, d, 6f64.sqrt(), rng);
    init_linear(params, LOC_OUT, d, 2, 1.0, rng);
    init_linear(params, TYPE_HEAD, d, registry.max_keypoints(), 1.0, rng);
    init_linear(params, CONTEXT_HEAD, d, lifter.context_dim, 1.0, rng);
    init_linear(params, CATEGORY_HEAD, d, registry.len(), 1.0, rng);
}

/// Patch features plus position codes for a batch: `[b, n_patches, dim]`.
pub fn embed_batch(images: &[ImageRaster], cfg: &DetectorConfig, params: &ParamStore) -> Result<Tensor> {
    let n = cfg.grid();
    let p2 = cfg.patch * cfg.patch;
    let mut data = Vec::with_capacity(images.len() * n * n * p2);
    for img in images {
        if img.width != cfg.image_size || img.height != cfg.image_size {
            return Err(Error::Invalid(format!(
                "image is {}x{}, detector expects {}x{}",
                img.width, img.height, cfg.image_size, cfg.image_size
            )));
        }
        data.extend(img.patches(cfg.patch)?);
    }
    let patches = Tensor::new(data, &[images.len(), n * n, p2])?;
    let pe = Tensor::new(positional_encoding(n, cfg.dim), &[n * n, cfg.dim])?;
    Ok(linear(params, EMBED, &patches)?.add(&pe)?)
}

/// Grid features of one image, `[n_patches, dim]`.
pub fn embed_grid(image: &ImageRaster, cfg: &DetectorConfig, params: &ParamStore) -> Result<Tensor> {
    cfg.validate()?;
    image.patches(cfg.patch)?;
    let e = embed_batch(std::slice::from_ref(image), cfg, params)?;
    let shape = e.shape()[1..].to_vec();
    Ok(e.reshape(&shape)?)
}

fn attend(params: &ParamStore, prefix: &str, x: &Tensor, mem: &Tensor, heads: usize) -> Result<Tensor> {
    let q = linear(params, &format!("{prefix}.q"), x)?;
    let k = linear(params, &format!("{prefix}.k"), mem)?;
    let v = linear(params, &format!("{prefix}.v"), mem)?;
    let a = Tensor::attention(&q, &k, &v, heads)?;
    linear(params, &format!("{prefix}.o"), &a)
}

/// Batched detector outputs.
#[derive(Debug, Clone)]
pub struct DetectorForward {
    /// `[b, Q, 2]`, in `[0,1]`
    pub locations: Tensor,
    /// `[b, Q, K]`
    pub type_logits: Tensor,
    /// `[b, N_ρ]`
    pub context: Tensor,
    /// `[b, |Z|]`
    pub category_logits: Tensor,
}

pub fn forward(cfg: &DetectorConfig, params: &ParamStore, images: &[ImageRaster]) -> Result<DetectorForward> {
    let b = images.len();
    let mem = embed_batch(images, cfg, params)?;
    let kq = params.get(KEYPOINT_QUERIES)?;
    let q = kq.shape()[0];
    let queries = Tensor::concat(&[kq.clone(), params.get(CONTEXT_QUERY)?.clone()], 0)?;
    let mut x = queries.broadcast_to(&[b, q + 1, cfg.dim])?;
    for i in 0..cfg.blocks {
        x = x.add(&attend(params, &block_name(i, "self"), &x, &x, cfg.heads)?)?;
        x = x.add(&attend(params, &block_name(i, "cross"), &x, &mem, cfg.heads)?)?;
        let h = linear(params, &block_name(i, "ffn1"), &x)?.relu();
        x = x.add(&linear(params, &block_name(i, "ffn2"), &h)?)?;
    }
    let kp = x.slice(1, 0, q)?;
    let ctx = x.slice(1, q, q + 1)?.reshape(&[b, cfg.dim])?;
    let hidden = linear(params, LOC_HIDDEN, &kp)?.relu();
    Ok(DetectorForward {
        locations: linear(params, LOC_OUT, &hidden)?.sigmoid(),
        type_logits: linear(params, TYPE_HEAD, &kp)?,
        context: linear(params, CONTEXT_HEAD, &ctx)?,
        category_logits: linear(params, CATEGORY_HEAD, &ctx)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub locations: Vec<[f64; 2]>,
    pub type_logits: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    pub category_logits: Vec<f64>,
}

impl DetectorForward {
    /// Split sample `i` out of the batch.
    pub fn sample(&self, i: usize) -> DetectionOutput {
        let q = self.locations.shape()[1];
        let kt = self.type_logits.shape()[2];
        let nr = self.context.shape()[1];
        let nz = self.category_logits.shape()[1];
        let loc = &self.locations.data()[i * q * 2..(i + 1) * q * 2];
        let ty = &self.type_logits.data()[i * q * kt..(i + 1) * q * kt];
        DetectionOutput {
            locations: loc.chunks(2).map(|c| [c[0], c[1]]).collect(),
            type_logits: ty.chunks(kt).map(<[f64]>::to_vec).collect(),
            context: self.context.data()[i * nr..(i + 1) * nr].to_vec(),
            category_logits: self.category_logits.data()[i * nz..(i + 1) * nz].to_vec(),
        }
    }
}

/// Run the detector on one image.
pub fn detect(image: &ImageRaster, cfg: &DetectorConfig, params: &ParamStore) -> Result<DetectionOutput> {
    let out = forward(cfg, &params.frozen(), std::slice::from_ref(image))?;
    Ok(out.sample(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub category: CategoryId,
    /// Stacked `2 × k` layout in detector units (`[0,1]²`).
    pub keypoints: Matrix2xX<f64>,
    /// `softmax(ω_q)[t]` of the chosen query; 0 outside the block.
    pub confidence: Vec<f64>,
}

impl Selection {
    /// Every keypoint of the chosen category is reported as visible.
    pub fn visibility(&self, registry: &CategoryRegistry) -> Result<Vec<bool>> {
        Ok(registry.mask(self.category)?.0)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Most likely category, then for each of its keypoint types the query
/// with the highest type probability (lowest index on ties).
pub fn select_keypoints(det: &DetectionOutput, registry: &CategoryRegistry) -> Result<Selection> {
    select_in_category(det, registry, CategoryId(argmax(&det.category_logits)))
}

/// Keypoint selection with the category given instead of predicted.
pub fn select_in_category(det: &DetectionOutput, registry: &CategoryRegistry, category: CategoryId) -> Result<Selection> {
    let schema = registry.get(category)?;
    let probs: Vec<Vec<f64>> = det.type_logits.iter().map(|l| softmax(l)).collect();
    let k = registry.total_keypoints();
    let mut keypoints = Matrix2xX::zeros(k);
    let mut confidence = vec![0.0; k];
    for t in 0..schema.keypoint_count() {
        let mut best = 0;
        for q in 1..probs.len() {
            if probs[q][t] > probs[best][t] {
                best = q;
            }
        }
        let j = schema.block_offset + t;
        keypoints[(0, j)] = det.locations[best][0];
        keypoints[(1, j)] = det.locations[best][1];
        confidence[j] = probs[best][t];
    }
    Ok(Selection {
        category,
        keypoints,
        confidence,
    })
}
