//! Pretrain the keypoint detector on rendered images and report how far
//! the selected keypoints land from the truth.
//!
//! cargo run --release --example detect_keypoints -- [train_per_cat] [epochs]
//!
//! Environment overrides: KP_LR, KP_DIM, KP_BLOCKS, KP_PATCH, KP_BATCH.

use std::time::Instant;

use kplift::detector::{detect, select_in_category, select_keypoints};
use kplift::synthetic::{generate_dataset, DatasetConfig};
use kplift::train::{fit, Phase, StepKind, TrainConfig};
use kplift::Model;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> kplift::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let per_cat = args.first().copied().unwrap_or(200);
    let epochs = args.get(1).copied().unwrap_or(10);
    let data_cfg = DatasetConfig {
        categories: 3,
        samples: 3 * per_cat,
        ..DatasetConfig::default()
    };
    let train = generate_dataset(&data_cfg, 1)?;
    let test = generate_dataset(
        &DatasetConfig {
            samples: 150,
            first_index: data_cfg.samples,
            ..data_cfg.clone()
        },
        1,
    )?;
    let mut cfg = TrainConfig {
        epochs,
        learning_rate: env("KP_LR", 1e-3),
        batch_size: env("KP_BATCH", 32),
        ..TrainConfig::for_phase(Phase::DetectorPretrain)
    };
    cfg.model.detector.dim = env("KP_DIM", cfg.model.detector.dim);
    cfg.model.detector.blocks = env("KP_BLOCKS", cfg.model.detector.blocks);
    cfg.model.detector.patch = env("KP_PATCH", cfg.model.detector.patch);
    let registry = train.registry()?;
    let t = Instant::now();
    let out = fit(
        Model::new(cfg.model.clone(), registry.clone(), 0)?,
        StepKind::Detector,
        &train.train_view()?,
        &cfg,
    )?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for (e, h) in out.history.iter().enumerate() {
        println!(
            "epoch {e:>3}  location {:.4}  type {:.4}  category {:.4}",
            h.location, h.keypoint_type, h.category
        );
    }
    let (mut err, mut n, mut correct) = (0.0, 0, 0);
    for s in &test.samples {
        let image = s.image.as_ref().expect("rendered");
        let det = detect(image, &cfg.model.detector, &out.model.params)?;
        if select_keypoints(&det, &registry)?.category == s.category {
            correct += 1;
        }
        let sel = select_in_category(&det, &registry, s.category)?;
        let block = registry.get(s.category)?.block();
        for (t, j) in block.enumerate() {
            let p = test.frame.to_pixel([s.keypoints2d[(0, t)], s.keypoints2d[(1, t)]]);
            let q = [
                sel.keypoints[(0, j)] * test.frame.size as f64,
                sel.keypoints[(1, j)] * test.frame.size as f64,
            ];
            err += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    println!(
        "test: mean keypoint error {:.2} px, category accuracy {:.3}",
        err / n as f64,
        correct as f64 / test.samples.len() as f64
    );
    Ok(())
}
