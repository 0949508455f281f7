//! Training: Adam, the loss assembly of each phase, the epoch loops.
//!
//! Phases:
//! * lifter-only: ground-truth 2D keypoints in, reprojection loss only;
//! * detector-pretrain: images in, Hungarian-matched location, type and
//!   category losses;
//! * end-to-end (with or without context): detector and lifter chained,
//!   all four losses.
//!
//! Training code only ever sees [`TrainSample`]s, which carry no 3D.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kplift_tensor::{gradients, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    hungarian_match, loss_category, loss_location, loss_reprojection, loss_type, matching_cost, one_hot, total_loss, LossBreakdown,
    LossComponents, LossWeights, MatchResult, HUBER_DELTA,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use crate::detector::{self, DetectorForward};
use crate::lifter::{self, normalize_batch, normalize_keypoints, weighted_center, LifterBatch};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::shape_model::{CategoryRegistry, ShapeDictionary};
use crate::synthetic::{read_dataset, read_manifest, TrainSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    LifterOnly,
    DetectorPretrain,
    EndToEnd,
    EndToEndNoContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub dataset: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate down to this fraction of the
    /// initial value over the run; 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Lifter phase: present every sample under a fresh random in-plane
    /// camera roll. Uses 2D keypoints only.
    pub roll_augmentation: bool,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    /// Where the final checkpoint goes.
    pub output: Option<PathBuf>,
    /// End-to-end only: starting points for the two networks.
    pub init_lifter: Option<PathBuf>,
    pub init_detector: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_phase(Phase::LifterOnly)
    }
}

impl TrainConfig {
    /// Default schedule of a phase.
    pub fn for_phase(phase: Phase) -> Self {
        let (epochs, lr) = match phase {
            Phase::LifterOnly => (20, 1e-3),
            Phase::DetectorPretrain => (20, 1e-3),
            Phase::EndToEnd | Phase::EndToEndNoContext => (30, 1e-4),
        };
        TrainConfig {
            phase,
            dataset: PathBuf::from("data"),
            seed: 0,
            epochs,
            batch_size: 32,
            learning_rate: lr,
            final_lr_fraction: 1.0,
            roll_augmentation: false,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
            output: None,
            init_lifter: None,
            init_detector: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            offset: 0,
            field: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })
    }

    /// Keys of the JSON file at `path` laid over the defaults of `phase`.
    /// The phase itself is always `phase`.
    pub fn for_phase_with_file(phase: Phase, path: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(TrainConfig::for_phase(phase)).map_err(|e| Error::Invalid(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                offset: 0,
                field: format!("line {} column {}", e.line(), e.column()),
                msg: e.to_string(),
            })?;
            overlay(&mut base, file);
        }
        let mut cfg: TrainConfig = serde_path_to_error::deserialize(base).map_err(|e| Error::Malformed {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            offset: 0,
            field: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })?;
        cfg.phase = phase;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Invalid(format!("final_lr_fraction {}", self.final_lr_fraction)));
        }
        let l = &self.model.lifter;
        if l.latent_dim == 0 || l.feature_dim == 0 || l.trunk_width == 0 || l.trunk_layers == 0 || l.context_dim == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        self.model.detector.validate()?;
        self.loss_weights.validate()
    }
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get(name)?;
            let n = p.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = p.data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            params.insert_param(name, data, &shape);
        }
        Ok(())
    }
}

/// Which losses a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Lifter,
    Detector,
    EndToEnd { context: bool },
}

impl StepKind {
    fn trainable(&self, params: &ParamStore) -> Vec<String> {
        match self {
            StepKind::Lifter => params.names_with_prefix(&["lifter.", "dict."]),
            StepKind::Detector => params.names_with_prefix(&["detector."]),
            StepKind::EndToEnd { .. } => params.names().cloned().collect(),
        }
    }
}

fn stack2(rows: impl Iterator<Item = [f64; 2]>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::new(rows.flatten().collect(), shape)?)
}

fn visibility_tensor(batch: &[&TrainSample], k: usize) -> Result<Tensor> {
    let v = batch
        .iter()
        .flat_map(|s| s.visibility.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::new(v, &[batch.len(), k])?)
}

/// Ground-truth 2D keypoints normalized on their visible points, `[b, k, 2]`,
/// and the visibility, `[b, k]`.
fn normalized_targets(batch: &[&TrainSample], k: usize) -> Result<(Tensor, Tensor)> {
    let mut kp = Vec::with_capacity(batch.len() * 2 * k);
    for s in batch {
        kp.extend_from_slice(normalize_keypoints(&s.keypoints2d, &s.visibility)?.points.as_slice());
    }
    Ok((Tensor::new(kp, &[batch.len(), k, 2])?, visibility_tensor(batch, k)?))
}

/// Reprojection loss of the lifter on ground-truth keypoints.
pub fn lifter_losses(cfg: &ModelConfig, params: &ParamStore, batch: &[&TrainSample]) -> Result<LossComponents> {
    let k = batch[0].keypoints2d.ncols();
    let (keypoints, visibility) = normalized_targets(batch, k)?;
    let dict = ShapeDictionary::from_params(params)?;
    let out = lifter::forward(
        &cfg.lifter,
        params,
        &dict,
        &LifterBatch {
            keypoints: keypoints.clone(),
            visibility: visibility.clone(),
            context: None,
        },
    )?;
    // the input was centred on its visible points, so the reprojection is too
    let reprojection = out.reprojection.sub(&weighted_center(&out.reprojection, &visibility)?)?;
    Ok(LossComponents {
        reprojection: Some(loss_reprojection(&keypoints, &reprojection, &visibility, HUBER_DELTA)?),
        ..LossComponents::default()
    })
}

/// Ground-truth detector targets of one sample: `δ` per keypoint of its
/// category in type order.
fn detector_targets(s: &TrainSample, registry: &CategoryRegistry) -> Result<Vec<[f64; 2]>> {
    let block = registry.get(s.category)?.block();
    Ok(block
        .map(|j| s.image_frame.to_delta([s.keypoints2d[(0, j)], s.keypoints2d[(1, j)]]))
        .collect())
}

/// Hungarian match of every sample, on current (detached) predictions.
pub fn match_batch(det: &DetectorForward, batch: &[&TrainSample], registry: &CategoryRegistry) -> Result<Vec<MatchResult>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let out = det.sample(i);
            let gt = detector_targets(s, registry)?;
            let types: Vec<usize> = (0..gt.len()).collect();
            hungarian_match(&matching_cost(&out.locations, &out.type_logits, &gt, &types))
        })
        .collect()
}

/// Detector losses under fixed matches; also returns the matched
/// locations `[G, 2]` (sample-major, type order) for the lifter.
pub fn detection_losses(
    det: &DetectorForward,
    matches: &[MatchResult],
    batch: &[&TrainSample],
    registry: &CategoryRegistry,
) -> Result<(LossComponents, Tensor)> {
    let (b, q) = (det.locations.shape()[0], det.locations.shape()[1]);
    let kt = det.type_logits.shape()[2];
    let mut rows = Vec::new();
    let mut gt = Vec::new();
    let mut types = Vec::new();
    for (i, (s, m)) in batch.iter().zip(matches).enumerate() {
        let targets = detector_targets(s, registry)?;
        for &(qi, g) in &m.pairs {
            rows.push(i * q + qi);
            gt.push(targets[g]);
            types.push(g);
        }
    }
    let g = rows.len();
    let loc = det.locations.reshape(&[b * q, 2])?.gather_rows(&rows)?;
    let logits = det.type_logits.reshape(&[b * q, kt])?.gather_rows(&rows)?;
    let cats: Vec<usize> = batch.iter().map(|s| s.category.0).collect();
    let comps = LossComponents {
        location: Some(loss_location(&stack2(gt.into_iter(), &[g, 2])?, &loc)?),
        keypoint_type: Some(loss_type(&one_hot(&types, kt)?, &logits)?),
        category: Some(loss_category(&cats, &det.category_logits)?),
        reprojection: None,
    };
    Ok((comps, loc))
}

/// All four losses of the chained model. The lifter input is built from
/// the matched query locations placed at the ground-truth category block;
/// the reprojection target is the ground truth normalized as in lifter
/// pretraining.
pub fn end_to_end_losses(
    cfg: &ModelConfig,
    params: &ParamStore,
    registry: &CategoryRegistry,
    batch: &[&TrainSample],
    context: bool,
    fixed_matches: Option<&[MatchResult]>,
) -> Result<(LossComponents, Vec<MatchResult>)> {
    let images: Vec<_> = batch
        .iter()
        .map(|s| s.image.clone().ok_or_else(|| Error::Invalid("sample has no image".into())))
        .collect::<Result<_>>()?;
    let det = detector::forward(&cfg.detector, params, &images)?;
    let matches = match fixed_matches {
        Some(m) => m.to_vec(),
        None => match_batch(&det, batch, registry)?,
    };
    let (mut comps, loc) = detection_losses(&det, &matches, batch, registry)?;

    let b = batch.len();
    let k = registry.total_keypoints();
    let frame = batch[0].image_frame;
    // δ → shape units
    let ratio = frame.size as f64 / frame.px_per_unit;
    let units = loc.scale(ratio).add_scalar(-0.5 * ratio);
    let g = units.shape()[0];
    let padded = Tensor::concat(&[units, Tensor::zeros(&[1, 2])], 0)?;
    let mut index = vec![g; b * k];
    let mut zeta = vec![0.0; b * k];
    let mut row = 0;
    for (i, s) in batch.iter().enumerate() {
        for j in registry.get(s.category)?.block() {
            index[i * k + j] = row;
            zeta[i * k + j] = 1.0;
            row += 1;
        }
    }
    let points = padded.gather_rows(&index)?.reshape(&[b, k, 2])?;
    let zeta = Tensor::new(zeta, &[b, k])?;
    let norm = normalize_batch(&points, &zeta)?;

    let (target, visibility) = normalized_targets(batch, k)?;
    let dict = ShapeDictionary::from_params(params)?;
    let out = lifter::forward(
        &cfg.lifter,
        params,
        &dict,
        &LifterBatch {
            keypoints: norm.points,
            visibility: zeta.clone(),
            context: context.then(|| det.context.clone()),
        },
    )?;
    let mask = zeta.mul(&visibility)?;
    let reprojection = out.reprojection.sub(&weighted_center(&out.reprojection, &mask)?)?;
    comps.reprojection = Some(loss_reprojection(&target, &reprojection, &mask, HUBER_DELTA)?);
    Ok((comps, matches))
}

/// Model plus optimizer state for one phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub kind: StepKind,
    pub weights: LossWeights,
    trainable: Vec<String>,
}

impl Trainer {
    pub fn new(model: Model, kind: StepKind, lr: f64, weights: LossWeights) -> Self {
        let trainable = kind.trainable(&model.params);
        Trainer {
            model,
            optimizer: Adam::new(lr),
            kind,
            weights,
            trainable,
        }
    }

    /// Losses of `batch` at the current parameters, as a graph over the
    /// trainable tensors of `params`.
    pub fn losses(&self, params: &ParamStore, batch: &[&TrainSample]) -> Result<LossComponents> {
        let cfg = &self.model.config;
        let reg = &self.model.registry;
        match self.kind {
            StepKind::Lifter => lifter_losses(cfg, params, batch),
            StepKind::Detector => {
                let images: Vec<_> = batch
                    .iter()
                    .map(|s| s.image.clone().ok_or_else(|| Error::Invalid("sample has no image".into())))
                    .collect::<Result<_>>()?;
                let det = detector::forward(&cfg.detector, params, &images)?;
                let matches = match_batch(&det, batch, reg)?;
                Ok(detection_losses(&det, &matches, batch, reg)?.0)
            }
            StepKind::EndToEnd { context } => Ok(end_to_end_losses(cfg, params, reg, batch, context, None)?.0),
        }
    }

    /// Weighted total loss at the current parameters, without updating.
    pub fn evaluate_loss(&self, batch: &[&TrainSample]) -> Result<LossBreakdown> {
        let params = self.model.params.frozen();
        let comps = self.losses(&params, batch)?;
        let total = total_loss(&comps, &self.weights)?;
        Ok(comps.breakdown(&total))
    }

    /// Forward, match, losses, gradients, Adam update.
    pub fn step(&mut self, batch: &[&TrainSample]) -> Result<LossBreakdown> {
        let params = self.model.params.trainable_subset(&self.trainable);
        let comps = self.losses(&params, batch)?;
        let total = total_loss(&comps, &self.weights)?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss("total"));
        }
        let leaves: Vec<Tensor> = self.trainable.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
        let grads = gradients(&total, &leaves)?;
        let named: Vec<(String, Tensor)> = self.trainable.iter().cloned().zip(grads).collect();
        self.optimizer.step(&mut self.model.params, &named)?;
        Ok(comps.breakdown(&total))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean loss breakdown per epoch.
    pub history: Vec<LossBreakdown>,
    /// Samples left out because they could not be normalized.
    pub skipped: usize,
}

fn usable(kind: StepKind, s: &TrainSample) -> bool {
    match kind {
        StepKind::Lifter => normalize_keypoints(&s.keypoints2d, &s.visibility).is_ok(),
        StepKind::Detector => s.image.is_some(),
        StepKind::EndToEnd { .. } => s.image.is_some() && normalize_keypoints(&s.keypoints2d, &s.visibility).is_ok(),
    }
}

/// The sample seen by a camera rolled by `angle` about its optical axis.
fn roll(s: &TrainSample, angle: f64) -> TrainSample {
    let r = nalgebra::Rotation2::new(angle);
    TrainSample {
        keypoints2d: r.matrix() * &s.keypoints2d,
        ..s.clone()
    }
}

fn scheduled_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if cfg.final_lr_fraction == 1.0 || total < 2 {
        return cfg.learning_rate;
    }
    let t = step as f64 / (total - 1) as f64;
    let f = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    cfg.learning_rate * f
}

/// Run `epochs` passes over `samples` in seeded random order.
pub fn fit(model: Model, kind: StepKind, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, kind, cfg.learning_rate, cfg.loss_weights);
    let pool: Vec<&TrainSample> = samples.iter().filter(|s| usable(kind, s)).collect();
    let skipped = samples.len() - pool.len();
    if pool.is_empty() {
        return Err(Error::Invalid("no usable training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x0074_7261_696e);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * pool.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut n = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rolled: Vec<TrainSample>;
            let batch: Vec<&TrainSample> = if cfg.roll_augmentation && kind == StepKind::Lifter {
                rolled = chunk
                    .iter()
                    .map(|&i| roll(pool[i], rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect();
                rolled.iter().collect()
            } else {
                chunk.iter().map(|&i| pool[i]).collect()
            };
            trainer.optimizer.lr = scheduled_lr(cfg, step, total_steps);
            step += 1;
            let l = trainer.step(&batch)?;
            let w = batch.len() as f64;
            sum.location += w * l.location;
            sum.keypoint_type += w * l.keypoint_type;
            sum.category += w * l.category;
            sum.reprojection += w * l.reprojection;
            sum.total += w * l.total;
            n += w;
        }
        let mean = LossBreakdown {
            location: sum.location / n,
            keypoint_type: sum.keypoint_type / n,
            category: sum.category / n,
            reprojection: sum.reprojection / n,
            total: sum.total / n,
        };
        info!(
            "epoch {epoch}: total {:.6} (l {:.5} k {:.5} b {:.5} r {:.5})",
            mean.total, mean.location, mean.keypoint_type, mean.category, mean.reprojection
        );
        history.push(mean);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
        skipped,
    })
}

fn metadata(cfg: &TrainConfig, outcome: &TrainOutcome) -> Metadata {
    let mut metrics = BTreeMap::new();
    if let Some(last) = outcome.history.last() {
        metrics.insert("loss.total".into(), last.total);
        metrics.insert("loss.location".into(), last.location);
        metrics.insert("loss.keypoint_type".into(), last.keypoint_type);
        metrics.insert("loss.category".into(), last.category);
        metrics.insert("loss.reprojection".into(), last.reprojection);
    }
    // the output path is where the bytes go, not part of what they hold
    let echoed = TrainConfig {
        output: None,
        ..cfg.clone()
    };
    Metadata {
        train_config: serde_json::to_value(echoed).ok(),
        epoch: outcome.history.len(),
        metrics,
    }
}

fn finish(cfg: &TrainConfig, outcome: TrainOutcome) -> Result<TrainOutcome> {
    if let Some(path) = &cfg.output {
        save_checkpoint(&outcome.model, &metadata(cfg, &outcome), path)?;
    }
    Ok(outcome)
}

/// Lifter pretraining on ground-truth 2D keypoints. Reads only the
/// manifest; image files are never opened.
pub fn train_lifter(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_manifest(&cfg.dataset)?;
    let model = Model::new(cfg.model.clone(), data.registry()?, cfg.seed)?;
    let samples = data.train_view()?;
    finish(cfg, fit(model, StepKind::Lifter, &samples, cfg)?)
}

/// Detector pretraining with matched location, type and category losses.
pub fn train_detector(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    let model = Model::new(cfg.model.clone(), data.registry()?, cfg.seed)?;
    let samples = data.train_view()?;
    finish(cfg, fit(model, StepKind::Detector, &samples, cfg)?)
}

/// Merge pretrained parts: detector tensors from `detector`, everything
/// else from `lifter`.
pub fn combine(lifter: &Model, detector: &Model) -> Result<Model> {
    if lifter.registry != detector.registry {
        return Err(Error::Invalid("lifter and detector were trained on different categories".into()));
    }
    let mut params = lifter.params.clone();
    for name in detector.params.names_with_prefix(&["detector."]) {
        params.insert(&name, detector.params.get(&name)?.clone());
    }
    let mut config = lifter.config.clone();
    config.detector = detector.config.detector.clone();
    Ok(Model {
        config,
        registry: lifter.registry.clone(),
        params,
    })
}

/// Joint fine-tuning from images, starting from the pretrained parts.
pub fn train_e2e(cfg: &TrainConfig, context: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    let registry = data.registry()?;
    let fresh = Model::new(cfg.model.clone(), registry.clone(), cfg.seed)?;
    let lifter = match &cfg.init_lifter {
        Some(p) => load_checkpoint(p)?.0,
        None => fresh.clone(),
    };
    let det = match &cfg.init_detector {
        Some(p) => load_checkpoint(p)?.0,
        None => fresh,
    };
    let mut model = combine(&lifter, &det)?;
    if model.registry != registry {
        return Err(Error::Invalid("checkpoint categories differ from the dataset".into()));
    }
    model.config.use_context = context;
    let samples = data.train_view()?;
    finish(cfg, fit(model, StepKind::EndToEnd { context }, &samples, cfg)?)
}

/// Dispatch on `cfg.phase`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.phase {
        Phase::LifterOnly => train_lifter(cfg),
        Phase::DetectorPretrain => train_detector(cfg),
        Phase::EndToEnd => train_e2e(cfg, true),
        Phase::EndToEndNoContext => train_e2e(cfg, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_lr_is_identity_and_small_lr_moves() {
        let mut p = ParamStore::new();
        p.insert_param("w", vec![0.5, -1.25, 3.0], &[3]);
        let g = vec![("w".to_string(), Tensor::vector(&[1.0, -2.0, 0.0]))];
        let before = p.get("w").unwrap().data().to_vec();
        let mut adam = Adam::new(0.0);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().data(), before.as_slice());
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g).unwrap();
        let after = p.get("w").unwrap().data();
        // first Adam step moves by lr·sign(g)
        assert!((after[0] - 0.4).abs() < 1e-6 && (after[1] + 1.15).abs() < 1e-6 && after[2] == 3.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::for_phase(Phase::EndToEnd);
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (30, 32, 1e-4));
        assert!(c.validate().is_ok());
        let bad = TrainConfig { epochs: 0, ..c };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"phase":"detector-pretrain","epochs":3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.phase, Phase::DetectorPretrain);
    }

    #[test]
    fn file_keys_overlay_phase_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"phase":"lifter-only","batch_size":8,"model":{"lifter":{"latent_dim":5}}}"#,
        )
        .unwrap();
        let c = TrainConfig::for_phase_with_file(Phase::EndToEnd, Some(&path)).unwrap();
        assert_eq!((c.phase, c.epochs, c.batch_size, c.learning_rate), (Phase::EndToEnd, 30, 8, 1e-4));
        assert_eq!(c.model.lifter.latent_dim, 5);
        assert_eq!(c.model.lifter.feature_dim, ModelConfig::default().lifter.feature_dim);
        std::fs::write(&path, r#"{"epochz":3}"#).unwrap();
        let e = TrainConfig::for_phase_with_file(Phase::LifterOnly, Some(&path)).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
    }
}
