//! 2D → 3D lifting network.
//!
//! Input: stacked 2D keypoints (zero outside the sample's category block and
//! at invisible points), the visibility mask and an optional context vector.
//! A ReLU trunk produces `F` features; an affine head gives the latent code
//! `β′ = W_g f + b_g`, a second affine head gives 6 rotation reals. The code
//! is decoded by the shape dictionary and reprojected orthographically.

use kplift_tensor::Tensor;
use nalgebra::{Matrix2xX, Matrix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{project_batch, reshape_structure, rotate_batch, rotation_transposed_batch, structure_points_batch, Structure3D};
use crate::model::Model;
use crate::nn::{init_linear, linear, ParamStore};
use crate::shape_model::{CategoryId, DecoderKind, ShapeDictionary};
use crate::{Error, Result};

pub const LATENT: &str = "lifter.latent";
pub const ROTATION: &str = "lifter.rotation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifterConfig {
    /// Latent dimensionality `D`.
    pub latent_dim: usize,
    /// Trunk output width `F`.
    pub feature_dim: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    /// Context vector length `N_ρ`.
    pub context_dim: usize,
    pub decoder: DecoderKind,
}

impl Default for LifterConfig {
    fn default() -> Self {
        LifterConfig {
            latent_dim: 16,
            feature_dim: 128,
            trunk_width: 256,
            trunk_layers: 3,
            context_dim: 64,
            decoder: DecoderKind::CutOff,
        }
    }
}

impl LifterConfig {
    pub fn input_dim(&self, total_keypoints: usize) -> usize {
        3 * total_keypoints + self.context_dim
    }
}

fn trunk_name(i: usize) -> String {
    format!("lifter.trunk.{i}")
}

pub(crate) fn init_params(params: &mut ParamStore, cfg: &LifterConfig, k: usize, rng: &mut impl Rng) {
    let mut fan_in = cfg.input_dim(k);
    for i in 0..cfg.trunk_layers {
        let fan_out = if i + 1 == cfg.trunk_layers {
            cfg.feature_dim
        } else {
            cfg.trunk_width
        };
        init_linear(params, &trunk_name(i), fan_in, fan_out, 6f64.sqrt(), rng);
        fan_in = fan_out;
    }
    // context rows start at zero: a zero context and a fresh context head
    // then give the same output, so switching context on does not disturb
    // a pretrained lifter
    let first = format!("{}.weight", trunk_name(0));
    let w = params.get(&first).expect("just inserted");
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut data = w.data().to_vec();
    data[3 * k * cols..].fill(0.0);
    params.insert_param(&first, data, &[rows, cols]);
    init_linear(params, LATENT, fan_in, cfg.latent_dim, 3f64.sqrt(), rng);
    init_linear(params, ROTATION, fan_in, 6, 0.1, rng);
    // start every prediction near the identity rotation
    params.insert_param(&format!("{ROTATION}.bias"), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[6]);
}

/// Result of mean-centering and RMS-scaling the visible keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub points: Matrix2xX<f64>,
    pub center: [f64; 2],
    pub scale: f64,
}

impl Normalized {
    /// Map normalized coordinates back to the input frame.
    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.center[0], p[1] * self.scale + self.center[1]]
    }
}

/// Center the visible keypoints at zero mean and scale them to unit RMS
/// radius. Invisible entries become 0.
pub fn normalize_keypoints(raw: &Matrix2xX<f64>, visibility: &[bool]) -> Result<Normalized> {
    let vis: Vec<usize> = (0..raw.ncols()).filter(|&j| visibility.get(j).copied().unwrap_or(false)).collect();
    let distinct = vis
        .iter()
        .enumerate()
        .filter(|(i, &j)| vis[..*i].iter().all(|&p| raw.column(p) != raw.column(j)))
        .count();
    if distinct < 2 {
        return Err(Error::TooFewVisible(distinct));
    }
    let n = vis.len() as f64;
    let mut center = [0.0; 2];
    for &j in &vis {
        center[0] += raw[(0, j)];
        center[1] += raw[(1, j)];
    }
    center = [center[0] / n, center[1] / n];
    let mut ss = 0.0;
    for &j in &vis {
        let (dx, dy) = (raw[(0, j)] - center[0], raw[(1, j)] - center[1]);
        ss += dx * dx + dy * dy;
    }
    let scale = (ss / n).sqrt();
    let mut points = Matrix2xX::zeros(raw.ncols());
    for &j in &vis {
        points[(0, j)] = (raw[(0, j)] - center[0]) / scale;
        points[(1, j)] = (raw[(1, j)] - center[1]) / scale;
    }
    Ok(Normalized { points, center, scale })
}

/// Weighted mean of `points [b, k, c]` under `weights [b, k]`, shape `[b, 1, c]`.
pub fn weighted_center(points: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, k) = (points.shape()[0], points.shape()[1]);
    let w = weights.reshape(&[b, k, 1])?;
    let count = weights.sum_axis(1, true)?.reshape(&[b, 1, 1])?;
    Ok(points.mul(&w)?.sum_axis(1, true)?.div(&count)?)
}

/// Output of [`normalize_batch`].
#[derive(Debug, Clone)]
pub struct BatchNormalized {
    /// `[b, k, 2]`, zero where the weight is 0
    pub points: Tensor,
    /// `[b, 1, 2]`
    pub center: Tensor,
    /// `[b, 1, 1]`
    pub scale: Tensor,
}

/// Differentiable batch version of [`normalize_keypoints`] with 0/1
/// `weights [b, k]` marking the points that take part.
pub fn normalize_batch(points: &Tensor, weights: &Tensor) -> Result<BatchNormalized> {
    let (b, k) = (points.shape()[0], points.shape()[1]);
    let w = weights.reshape(&[b, k, 1])?;
    let count = weights.sum_axis(1, true)?.reshape(&[b, 1, 1])?;
    let center = weighted_center(points, weights)?;
    let centered = points.sub(&center)?.mul(&w)?;
    let var = centered.square().sum_axis(2, true)?.sum_axis(1, true)?.div(&count)?;
    let scale = var.sqrt();
    Ok(BatchNormalized {
        points: centered.div(&scale)?,
        center,
        scale,
    })
}

/// Batched lifter input. `keypoints` and `visibility` use the stacked layout.
#[derive(Debug, Clone)]
pub struct LifterBatch {
    /// `[b, k, 2]`
    pub keypoints: Tensor,
    /// `[b, k]`, 0/1
    pub visibility: Tensor,
    /// `[b, N_ρ]`; `None` is encoded as zeros
    pub context: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LifterForward {
    /// `[b, D]`
    pub beta_raw: Tensor,
    /// `[b, 6]`
    pub rotation_raw: Tensor,
    /// `[b, 3, 3]`, rows are the rotation's columns
    pub rotation_t: Tensor,
    /// `[b, 3k]`
    pub structure: Tensor,
    /// Camera-frame points `R·X`, `[b, k, 3]`
    pub camera_points: Tensor,
    /// `[b, k, 2]`
    pub reprojection: Tensor,
}

/// Run the lifter on a batch.
pub fn forward(cfg: &LifterConfig, params: &ParamStore, dict: &ShapeDictionary, batch: &LifterBatch) -> Result<LifterForward> {
    let (b, k) = (batch.keypoints.shape()[0], batch.keypoints.shape()[1]);
    let vis3 = batch.visibility.reshape(&[b, k, 1])?;
    // masking happens here so invisible coordinates can never leak in
    let kp = batch.keypoints.mul(&vis3)?.reshape(&[b, 2 * k])?;
    let ctx = match &batch.context {
        Some(c) => c.clone(),
        None => Tensor::zeros(&[b, cfg.context_dim]),
    };
    if ctx.shape() != [b, cfg.context_dim] {
        return Err(Error::Invalid(format!(
            "context shape {:?}, expected [{b}, {}]",
            ctx.shape(),
            cfg.context_dim
        )));
    }
    let mut h = Tensor::concat(&[kp, batch.visibility.clone(), ctx], 1)?;
    for i in 0..cfg.trunk_layers {
        h = linear(params, &trunk_name(i), &h)?.relu();
    }
    let beta_raw = linear(params, LATENT, &h)?;
    let rotation_raw = linear(params, ROTATION, &h)?;
    let rotation_t = rotation_transposed_batch(&rotation_raw)?;
    let structure = dict.decode_batch(&beta_raw, cfg.decoder)?;
    let points = structure_points_batch(&structure)?;
    let camera_points = rotate_batch(&points, &rotation_t)?;
    let reprojection = project_batch(&points, &rotation_t)?;
    Ok(LifterForward {
        beta_raw,
        rotation_raw,
        rotation_t,
        structure,
        camera_points,
        reprojection,
    })
}

/// One sample's lifter input in the stacked layout.
#[derive(Debug, Clone)]
pub struct LifterInput {
    /// 2 × k
    pub keypoints2d: Matrix2xX<f64>,
    pub visibility: Vec<bool>,
    pub context: Option<Vec<f64>>,
    pub category: CategoryId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifterOutput {
    pub beta_raw: Vec<f64>,
    pub rotation: [f64; 6],
    pub structure: Structure3D,
    pub reprojection: Matrix2xX<f64>,
}

impl LifterOutput {
    /// Decoded rotation matrix.
    pub fn rotation_matrix(&self) -> Result<Matrix3<f64>> {
        crate::geometry::rotation_from_6d(&self.rotation)
    }
}

/// Lift a single sample.
pub fn lift(input: &LifterInput, model: &Model) -> Result<LifterOutput> {
    let mask = model.registry.mask(input.category)?;
    let k = model.registry.total_keypoints();
    if input.keypoints2d.ncols() != k || input.visibility.len() != k {
        return Err(Error::Invalid(format!(
            "lifter input has {} keypoints / {} flags, model expects {k}",
            input.keypoints2d.ncols(),
            input.visibility.len()
        )));
    }
    let vis: Vec<f64> = input
        .visibility
        .iter()
        .zip(&mask.0)
        .map(|(&v, &z)| if v && z { 1.0 } else { 0.0 })
        .collect();
    let batch = LifterBatch {
        keypoints: Tensor::new(input.keypoints2d.as_slice().to_vec(), &[1, k, 2])?,
        visibility: Tensor::new(vis, &[1, k])?,
        context: input.context.as_ref().map(|c| Tensor::new(c.clone(), &[1, c.len()])).transpose()?,
    };
    let frozen = model.params.frozen();
    let dict = ShapeDictionary::from_params(&frozen)?;
    let out = forward(&model.config.lifter, &frozen, &dict, &batch)?;
    let r = out.rotation_raw.data();
    Ok(LifterOutput {
        beta_raw: out.beta_raw.data().to_vec(),
        rotation: [r[0], r[1], r[2], r[3], r[4], r[5]],
        structure: reshape_structure(out.structure.data())?,
        reprojection: Matrix2xX::from_column_slice(out.reprojection.data()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{orthographic_project, rotation_from_6d};
    use crate::model::ModelConfig;
    use crate::shape_model::CategoryRegistry;

    fn small_model(seed: u64) -> Model {
        let mut reg = CategoryRegistry::new();
        reg.register("a", (0..4).map(|i| format!("a{i}")).collect()).unwrap();
        reg.register("b", (0..5).map(|i| format!("b{i}")).collect()).unwrap();
        let mut cfg = ModelConfig {
            lifter: LifterConfig {
                latent_dim: 4,
                feature_dim: 8,
                trunk_width: 12,
                trunk_layers: 2,
                context_dim: 3,
                decoder: DecoderKind::CutOff,
            },
            ..ModelConfig::default()
        };
        cfg.detector.dim = 8;
        cfg.detector.heads = 2;
        cfg.detector.ffn_dim = 8;
        Model::new(cfg, reg, seed).unwrap()
    }

    fn input(model: &Model, seed: f64) -> LifterInput {
        let k = model.registry.total_keypoints();
        let mut kp = Matrix2xX::zeros(k);
        let mut vis = vec![false; k];
        for j in 4..9 {
            kp[(0, j)] = (seed * (j as f64 + 1.0)).sin();
            kp[(1, j)] = (seed * (j as f64 + 2.0)).cos();
            vis[j] = j != 6;
        }
        LifterInput {
            keypoints2d: kp,
            visibility: vis,
            context: None,
            category: crate::shape_model::CategoryId(1),
        }
    }

    #[test]
    fn normalize_examples() {
        let raw = Matrix2xX::from_column_slice(&[0.0, 0.0, 2.0, 0.0]);
        let n = normalize_keypoints(&raw, &[true, true]).unwrap();
        assert_eq!(n.points.as_slice(), &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(n.center, [1.0, 0.0]);
        assert_eq!(n.scale, 1.0);

        let again = normalize_keypoints(&n.points, &[true, true]).unwrap();
        assert_eq!(again.points, n.points);
        assert_eq!(again.center, [0.0, 0.0]);
        assert_eq!(again.scale, 1.0);

        let raw = Matrix2xX::from_column_slice(&[0.3, -1.0, 2.0, 0.5, -0.7, 0.1]);
        let shifted = raw.map(|v| v + 5.0);
        let a = normalize_keypoints(&raw, &[true; 3]).unwrap();
        let b = normalize_keypoints(&shifted, &[true; 3]).unwrap();
        assert!((a.points - b.points).amax() < 1e-12);
        assert!((b.center[0] - a.center[0] - 5.0).abs() < 1e-12);
        assert!((b.center[1] - a.center[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_degenerate_input() {
        let raw = Matrix2xX::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 3.0, 3.0]);
        assert!(matches!(
            normalize_keypoints(&raw, &[true, true, false]),
            Err(Error::TooFewVisible(1))
        ));
        assert!(normalize_keypoints(&raw, &[true, false, false]).is_err());
    }

    #[test]
    fn normalize_batch_matches_scalar_path() {
        let raw = Matrix2xX::from_column_slice(&[0.3, -1.0, 2.0, 0.5, -0.7, 0.1, 4.0, 4.0]);
        let vis = [true, true, true, false];
        let n = normalize_keypoints(&raw, &vis).unwrap();
        let nb = normalize_batch(
            &Tensor::new(raw.as_slice().to_vec(), &[1, 4, 2]).unwrap(),
            &Tensor::new(vec![1.0, 1.0, 1.0, 0.0], &[1, 4]).unwrap(),
        )
        .unwrap();
        for (a, b) in nb.points.data().iter().zip(n.points.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((nb.scale.item() - n.scale).abs() < 1e-12);
        assert!((nb.center.data()[0] - n.center[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_network_gives_zero_structure() {
        let mut model = small_model(1);
        let zeroed: Vec<(String, Vec<usize>)> = model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for (name, shape) in zeroed {
            if name == format!("{ROTATION}.bias") {
                continue;
            }
            model.params.insert_param(&name, vec![0.0; shape.iter().product()], &shape);
        }
        let out = lift(&input(&model, 0.4), &model).unwrap();
        assert!(out.structure.0.iter().all(|&v| v == 0.0));
        assert!(out.reprojection.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_context_equals_zero_context() {
        let model = small_model(2);
        let mut a = input(&model, 0.7);
        let b = lift(&a, &model).unwrap();
        a.context = Some(vec![0.0; 3]);
        assert_eq!(lift(&a, &model).unwrap(), b);
    }

    #[test]
    fn reprojection_equals_scalar_projection_exactly() {
        let model = small_model(3);
        let out = lift(&input(&model, 1.3), &model).unwrap();
        let r = rotation_from_6d(&out.rotation).unwrap();
        assert_eq!(orthographic_project(&r, &out.structure), out.reprojection);
    }

    #[test]
    fn invisible_values_do_not_matter() {
        let model = small_model(4);
        let a = input(&model, 0.9);
        let mut b = a.clone();
        b.keypoints2d[(0, 6)] = 123.0;
        b.keypoints2d[(1, 6)] = -7.0;
        b.keypoints2d[(0, 0)] = 55.0;
        assert_eq!(lift(&a, &model).unwrap(), lift(&b, &model).unwrap());
    }

    #[test]
    fn deterministic_output() {
        let model = small_model(5);
        let a = input(&model, 0.2);
        let x = lift(&a, &model).unwrap();
        let y = lift(&a, &model).unwrap();
        assert_eq!(
            x.structure.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.structure.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unknown_category_is_rejected() {
        let model = small_model(6);
        let mut a = input(&model, 0.2);
        a.category = CategoryId(7);
        assert!(matches!(lift(&a, &model), Err(Error::UnknownCategory(_))));
    }
}
