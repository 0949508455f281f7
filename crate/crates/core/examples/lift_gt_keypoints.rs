//! Train the lifter on ground-truth 2D keypoints and compare against the
//! template baseline.
//!
//! cargo run --release --example lift_gt_keypoints -- [train_per_cat] [epochs] [latent_dim]
//!
//! Optional environment overrides: KP_LR, KP_FINAL (final lr fraction),
//! KP_SEED, KP_DATA_SEED, KP_BATCH, KP_CATS, KP_DEF (deformation scale), KP_GAIN, KP_NOOCC,
//! KP_ROLL (roll augmentation), KP_LIFTER (lifter config JSON).

use std::time::Instant;

use kplift::eval::{evaluate, template_baseline, EvalMode};
use kplift::synthetic::{generate_dataset, DatasetConfig};
use kplift::train::{fit, Phase, StepKind, TrainConfig};
use kplift::Model;

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn main() -> kplift::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let per_cat = args.first().copied().unwrap_or(500);
    let epochs = args.get(1).copied().unwrap_or(10);
    let mut base = DatasetConfig {
        categories: 3,
        samples: 3 * per_cat,
        render: false,
        ..DatasetConfig::default()
    };
    if let Some(s) = env("KP_DEF") {
        base.generator.deformation_scale = s;
    }
    if let Some(s) = env("KP_DATA_SEED") {
        base.seed = s;
    }
    if let Some(g) = env("KP_GAIN") {
        base.generator.context_gain = g;
    }
    if let Some(c) = env("KP_CATS") {
        base.categories = c;
    }
    if std::env::var("KP_NOOCC").is_ok() {
        base.generator.occlusion = false;
    }
    let train = generate_dataset(&base, 1)?;
    let test = generate_dataset(
        &DatasetConfig {
            samples: 3 * (per_cat / 4).max(10),
            first_index: base.samples,
            ..base.clone()
        },
        1,
    )?;
    for c in &train.categories {
        println!("{} has {} keypoints", c.schema.name, c.k());
    }
    let baseline = template_baseline(&test)?;
    println!("template baseline mpjpe {:.4}", baseline.mpjpe);

    let mut cfg = TrainConfig {
        epochs,
        ..TrainConfig::for_phase(Phase::LifterOnly)
    };
    if let Some(lr) = env("KP_LR") {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = env("KP_SEED") {
        cfg.seed = seed;
    }
    if let Some(b) = env("KP_BATCH") {
        cfg.batch_size = b;
    }
    if let Some(f) = env("KP_FINAL") {
        cfg.final_lr_fraction = f;
    }
    cfg.roll_augmentation = std::env::var("KP_ROLL").is_ok();
    if let Ok(v) = std::env::var("KP_LIFTER") {
        cfg.model.lifter = serde_json::from_str(&v).expect("lifter config");
    }
    if let Some(&d) = args.get(2) {
        cfg.model.lifter.latent_dim = d;
    }
    let model = Model::new(cfg.model.clone(), train.registry()?, cfg.seed)?;
    println!("untrained mpjpe {:.4}", evaluate(&model, &test, EvalMode::GtKeypoints)?.mpjpe);
    let t = Instant::now();
    let out = fit(model, StepKind::Lifter, &train.train_view()?, &cfg)?;
    println!("trained {epochs} epochs in {:.1}s", t.elapsed().as_secs_f64());
    for (e, h) in out.history.iter().enumerate() {
        println!("epoch {e:>3}  reprojection {:.5}", h.reprojection);
    }
    let on_train = evaluate(&out.model, &train, EvalMode::GtKeypoints)?;
    println!("train mpjpe {:.4}", on_train.mpjpe);
    let report = evaluate(&out.model, &test, EvalMode::GtKeypoints)?;
    print!("{}", report.to_table());
    Ok(())
}
