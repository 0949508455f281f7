//! Finite-difference verification of every loss against every parameter
//! tensor of a small end-to-end model.

use serde::{Deserialize, Serialize};

use crate::assignment::{total_loss, LossComponents, LossWeights};
use crate::lifter::LifterConfig;
use crate::model::{Model, ModelConfig};
use crate::synthetic::{generate_dataset, DatasetConfig};
use crate::tensor::{finite_difference_check_coords, Tensor, TensorError};
use crate::train::end_to_end_losses;
use crate::{Error, Result};

pub const LOSSES: [&str; 5] = ["location", "keypoint_type", "category", "reprojection", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor (spread evenly).
    pub coords_per_tensor: usize,
    pub samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 3,
            samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub tensor: String,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().map(|e| e.kinks).sum()
    }
}

fn pick(loss: &str, c: LossComponents, w: &LossWeights) -> Result<Tensor> {
    let t = match loss {
        "location" => c.location,
        "keypoint_type" => c.keypoint_type,
        "category" => c.category,
        "reprojection" => c.reprojection,
        _ => return total_loss(&c, w),
    };
    t.ok_or_else(|| Error::Invalid(format!("loss {loss} was not computed")))
}

/// Small model for the check; cheap enough to evaluate thousands of times.
pub fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        lifter: LifterConfig {
            latent_dim: 4,
            feature_dim: 8,
            trunk_width: 12,
            trunk_layers: 2,
            context_dim: 3,
            ..LifterConfig::default()
        },
        ..ModelConfig::default()
    };
    cfg.detector.dim = 8;
    cfg.detector.heads = 2;
    cfg.detector.blocks = 1;
    cfg.detector.ffn_dim = 8;
    cfg.detector.spare_queries = 1;
    cfg
}

/// Check all five losses against all parameter tensors, with Hungarian
/// matches frozen at the starting point.
pub fn run_gradcheck(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let data = generate_dataset(
        &DatasetConfig {
            categories: 2,
            samples: cfg.samples.max(1),
            seed,
            ..DatasetConfig::default()
        },
        1,
    )?;
    let model = Model::new(small_config(), data.registry()?, seed)?;
    let view = data.train_view()?;
    let batch: Vec<_> = view.iter().collect();
    let weights = LossWeights::default();
    let frozen = model.params.frozen();
    let (_, matches) = end_to_end_losses(&model.config, &frozen, &model.registry, &batch, true, None)?;

    let mut entries = Vec::new();
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        let x = model.params.get(&name)?.detach();
        let n = x.numel();
        let m = cfg.coords_per_tensor.min(n).max(1);
        let coords: Vec<usize> = (0..m).map(|i| i * n / m + (seed as usize + i) % (n / m).max(1)).collect();
        for loss in LOSSES {
            let f = |p: &Tensor| -> crate::tensor::Result<Tensor> {
                let mut params = frozen.clone();
                params.insert(&name, p.clone());
                let wrap = |e: Error| TensorError::Invalid {
                    op: "gradcheck",
                    msg: e.to_string(),
                };
                let (c, _) = end_to_end_losses(&model.config, &params, &model.registry, &batch, true, Some(&matches)).map_err(wrap)?;
                pick(loss, c, &weights).map_err(wrap)
            };
            let r = finite_difference_check_coords(f, &x, cfg.step, &coords)?;
            entries.push(GradcheckEntry {
                loss: loss.to_string(),
                tensor: name.clone(),
                checked: r.checked,
                kinks: r.kinks,
                max_rel_error: r.max_smooth_rel_error,
            });
        }
    }
    Ok(GradcheckReport {
        seed,
        tolerance: cfg.tolerance,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let r = run_gradcheck(
            3,
            &GradcheckConfig {
                coords_per_tensor: 1,
                samples: 2,
                ..GradcheckConfig::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        assert!(r
            .entries
            .iter()
            .any(|e| e.tensor.starts_with("detector.") && e.loss == "reprojection"));
    }
}
