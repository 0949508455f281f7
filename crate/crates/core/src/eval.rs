//! Evaluation runs: lifting from ground-truth keypoints or from images,
//! the template baseline, latent morphing and coherence of `W_g`.

use nalgebra::{DMatrix, Matrix2xX};
use serde::{Deserialize, Serialize};

use crate::detector::{self, select_in_category, select_keypoints};
use crate::geometry::Structure3D;
use crate::lifter::{self, normalize_batch, normalize_keypoints, LifterBatch, LATENT};
use crate::metrics::{mpjpe_with_flip, mutual_coherence, stress, EvalReport, MetricSums};
use crate::model::Model;
use crate::shape_model::{cross_category_decode, CategoryId, ShapeDictionary};
use crate::synthetic::{has_ground_truth, Dataset, SyntheticSample};
use crate::tensor::Tensor;
use crate::{Error, Result};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    GtKeypoints,
    FromImages,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-keypoints" => Ok(EvalMode::GtKeypoints),
            "from-images" => Ok(EvalMode::FromImages),
            _ => Err(Error::Invalid(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

/// Extra counters of a from-images run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub samples: usize,
    /// Predicted category differed from the true one; the sample was then
    /// scored with keypoints selected under the true category.
    pub wrong_category: usize,
}

/// Camera-frame predictions in shape units, one per sample.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub points: Vec<Structure3D>,
    pub stats: DetectionStats,
}

fn check_truth(data: &Dataset) -> Result<()> {
    if !has_ground_truth(data) {
        return Err(Error::Invalid("dataset has no 3D ground truth".into()));
    }
    Ok(())
}

fn stacked(s: &SyntheticSample, model: &Model) -> Result<(Matrix2xX<f64>, Vec<bool>)> {
    let k = model.registry.total_keypoints();
    let block = model.registry.get(s.category)?.block();
    if block.len() != s.keypoints2d.ncols() {
        return Err(Error::Invalid(format!("sample {} does not match its category", s.id)));
    }
    let mut kp = Matrix2xX::zeros(k);
    let mut vis = vec![false; k];
    for (t, j) in block.enumerate() {
        kp.set_column(j, &s.keypoints2d.column(t));
        vis[j] = s.visibility[t];
    }
    Ok((kp, vis))
}

/// Lift already-normalized points and return the category block of the
/// camera-frame prediction, rescaled by `scales`.
fn lift_batch(
    model: &Model,
    keypoints: Tensor,
    visibility: Tensor,
    context: Option<Tensor>,
    categories: &[CategoryId],
    scales: &[f64],
) -> Result<Vec<Structure3D>> {
    let params = model.params.frozen();
    let dict = ShapeDictionary::from_params(&params)?;
    let out = lifter::forward(
        &model.config.lifter,
        &params,
        &dict,
        &LifterBatch {
            keypoints,
            visibility,
            context,
        },
    )?;
    let k = model.registry.total_keypoints();
    let cam = out.camera_points.data();
    categories
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let block = model.registry.get(c)?.block();
            let mut pts = Structure3D::zeros(block.len());
            for (t, j) in block.enumerate() {
                for a in 0..3 {
                    pts.0[(a, t)] = scales[i] * cam[(i * k + j) * 3 + a];
                }
            }
            Ok(pts)
        })
        .collect()
}

/// Lifter predictions from the ground-truth 2D keypoints.
pub fn predict_from_keypoints(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<Structure3D>> {
    let k = model.registry.total_keypoints();
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut kp = Vec::with_capacity(chunk.len() * 2 * k);
        let mut vis = Vec::with_capacity(chunk.len() * k);
        let mut scales = Vec::with_capacity(chunk.len());
        let mut cats = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (p, v) = stacked(s, model)?;
            let n = normalize_keypoints(&p, &v)?;
            kp.extend_from_slice(n.points.as_slice());
            vis.extend(v.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            scales.push(n.scale);
            cats.push(s.category);
        }
        let b = chunk.len();
        all.extend(lift_batch(
            model,
            Tensor::new(kp, &[b, k, 2])?,
            Tensor::new(vis, &[b, k])?,
            None,
            &cats,
            &scales,
        )?);
    }
    Ok(all)
}

/// Detector, keypoint selection, lifter. Every selected keypoint counts as
/// visible.
pub fn predict_from_images(model: &Model, data: &Dataset) -> Result<Predictions> {
    let reg = &model.registry;
    let k = reg.total_keypoints();
    let params = model.params.frozen();
    let mut stats = DetectionStats::default();
    let mut points = Vec::with_capacity(data.samples.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk
            .iter()
            .map(|s| {
                s.image
                    .clone()
                    .ok_or_else(|| Error::Invalid(format!("sample {} has no image", s.id)))
            })
            .collect::<Result<_>>()?;
        let det = detector::forward(&model.config.detector, &params, &images)?;
        let b = chunk.len();
        let mut kp = Vec::with_capacity(b * k * 2);
        let mut weights = Vec::with_capacity(b * k);
        for (i, s) in chunk.iter().enumerate() {
            let out = det.sample(i);
            let mut sel = select_keypoints(&out, reg)?;
            stats.samples += 1;
            if sel.category != s.category {
                stats.wrong_category += 1;
                sel = select_in_category(&out, reg, s.category)?;
            }
            let mask = reg.mask(s.category)?;
            for j in 0..k {
                let p = data.frame.from_delta([sel.keypoints[(0, j)], sel.keypoints[(1, j)]]);
                let on = mask.0[j];
                kp.extend_from_slice(&if on { p } else { [0.0, 0.0] });
                weights.push(if on { 1.0 } else { 0.0 });
            }
        }
        let zeta = Tensor::new(weights, &[b, k])?;
        let norm = normalize_batch(&Tensor::new(kp, &[b, k, 2])?, &zeta)?;
        let context = model.config.use_context.then(|| det.context.detach());
        let cats: Vec<CategoryId> = chunk.iter().map(|s| s.category).collect();
        points.extend(lift_batch(model, norm.points, zeta, context, &cats, norm.scale.data())?);
    }
    Ok(Predictions { points, stats })
}

/// Score camera-frame predictions against the dataset's ground truth.
pub fn score(data: &Dataset, predictions: &[Structure3D]) -> Result<EvalReport> {
    check_truth(data)?;
    if predictions.len() != data.samples.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            data.samples.len()
        )));
    }
    let mut sums = vec![MetricSums::default(); data.categories.len()];
    for (s, x) in data.samples.iter().zip(predictions) {
        let y = s.camera_points();
        let (m, flipped) = mpjpe_with_flip(x, &y)?;
        let st = stress(x, &y)?;
        sums.get_mut(s.category.0)
            .ok_or_else(|| Error::UnknownCategory(s.category.to_string()))?
            .push(m, st, flipped);
    }
    let named: Vec<(String, MetricSums)> = data.categories.iter().zip(sums).map(|(c, s)| (c.schema.name.clone(), s)).collect();
    Ok(EvalReport::from_sums(&named))
}

pub fn evaluate(model: &Model, data: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    Ok(evaluate_detailed(model, data, mode)?.0)
}

/// [`evaluate`] plus detection counters (zero in ground-truth mode).
pub fn evaluate_detailed(model: &Model, data: &Dataset, mode: EvalMode) -> Result<(EvalReport, DetectionStats)> {
    check_truth(data)?;
    if data.registry()? != model.registry {
        return Err(Error::Invalid("model and dataset categories differ".into()));
    }
    match mode {
        EvalMode::GtKeypoints => Ok((
            score(data, &predict_from_keypoints(model, &data.samples)?)?,
            DetectionStats::default(),
        )),
        EvalMode::FromImages => {
            let p = predict_from_images(model, data)?;
            Ok((score(data, &p.points)?, p.stats))
        }
    }
}

/// Mean-shape baseline: every sample predicted as its category template,
/// unposed.
pub fn template_baseline(data: &Dataset) -> Result<EvalReport> {
    let preds: Vec<Structure3D> = data
        .samples
        .iter()
        .map(|s| Ok(data.category(s.category)?.template.clone()))
        .collect::<Result<_>>()?;
    score(data, &preds)
}

/// Decode the latent code the lifter assigns to a sample under another
/// category's mask. The result is in normalized shape units.
pub fn morph(model: &Model, sample: &SyntheticSample, target: &str) -> Result<Structure3D> {
    let target = model.registry.by_name(target)?.id;
    let (kp, vis) = stacked(sample, model)?;
    let n = normalize_keypoints(&kp, &vis)?;
    let out = lifter::lift(
        &lifter::LifterInput {
            keypoints2d: n.points,
            visibility: vis,
            context: None,
            category: sample.category,
        },
        model,
    )?;
    cross_category_decode(&out.beta_raw, target, &model.dictionary()?, &model.registry)
}

/// `W_g` as an `F × D` matrix.
pub fn latent_basis(model: &Model) -> Result<DMatrix<f64>> {
    let w = model.params.get(&format!("{LATENT}.weight"))?;
    let (f, d) = (w.shape()[0], w.shape()[1]);
    Ok(DMatrix::from_row_slice(f, d, w.data()))
}

/// Mutual coherence of the columns of `W_g`.
pub fn coherence(model: &Model) -> Result<f64> {
    mutual_coherence(&latent_basis(model)?)
}
