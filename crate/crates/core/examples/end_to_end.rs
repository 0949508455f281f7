//! Full pipeline on rendered images: lifter pretraining, detector
//! pretraining, then joint fine-tuning with and without the context
//! vector. Prints from-images MPJPE for each stage.
//!
//! cargo run --release --example end_to_end -- [train_per_cat] [seed]
//!
//! Environment overrides: KP_LIFT_EPOCHS, KP_DET_EPOCHS, KP_E2E_EPOCHS,
//! KP_VIEW (max view angle in degrees, 0 for any),
//! KP_E2E_LR, KP_LIFT_PER_CAT (lifter pretraining pool, 2D only),
//! KP_GAIN (context gain), KP_D.

use std::time::Instant;

use kplift::eval::{evaluate_detailed, EvalMode};
use kplift::synthetic::{generate_dataset, DatasetConfig};
use kplift::train::{combine, fit, Phase, StepKind, TrainConfig};
use kplift::Model;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> kplift::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let per_cat = args.first().copied().unwrap_or(200) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let mut data_cfg = DatasetConfig {
        categories: 3,
        samples: 3 * per_cat,
        seed: 0,
        ..DatasetConfig::default()
    };
    let view: f64 = env("KP_VIEW", 0.0);
    data_cfg.generator.max_view_angle = (view > 0.0).then_some(view);
    data_cfg.generator.context_gain = env("KP_GAIN", 3.0);
    let t = Instant::now();
    let train = generate_dataset(&data_cfg, 1)?;
    let test = generate_dataset(
        &DatasetConfig {
            samples: 3 * (per_cat / 3).max(10),
            first_index: data_cfg.samples,
            ..data_cfg.clone()
        },
        1,
    )?;
    println!("data in {:.1}s", t.elapsed().as_secs_f64());
    let view = train.train_view()?;

    let mut base = TrainConfig::for_phase(Phase::LifterOnly);
    base.seed = seed;
    base.model.lifter.latent_dim = env("KP_D", 2);
    let registry = train.registry()?;

    let t = Instant::now();
    let lifter_cfg = TrainConfig {
        epochs: env("KP_LIFT_EPOCHS", 30),
        final_lr_fraction: 0.01,
        ..base.clone()
    };
    // lifter pretraining needs no images, so it can draw on a larger pool
    let lift_per_cat: usize = env("KP_LIFT_PER_CAT", 2000);
    let lift_view = generate_dataset(
        &DatasetConfig {
            samples: 3 * lift_per_cat,
            first_index: 1 << 20,
            render: false,
            ..data_cfg.clone()
        },
        1,
    )?
    .train_view()?;
    let lifter = fit(
        Model::new(base.model.clone(), registry.clone(), seed)?,
        StepKind::Lifter,
        &lift_view,
        &lifter_cfg,
    )?
    .model;
    let gt = evaluate_detailed(&lifter, &test, EvalMode::GtKeypoints)?.0;
    println!("lifter in {:.1}s, gt-keypoint mpjpe {:.4}", t.elapsed().as_secs_f64(), gt.mpjpe);

    let t = Instant::now();
    let det_cfg = TrainConfig {
        epochs: env("KP_DET_EPOCHS", 20),
        ..TrainConfig::for_phase(Phase::DetectorPretrain)
    };
    let det_out = fit(
        Model::new(base.model.clone(), registry.clone(), seed)?,
        StepKind::Detector,
        &view,
        &TrainConfig { seed, ..det_cfg },
    )?;
    for (e, h) in det_out.history.iter().enumerate() {
        println!("det epoch {e:>3}  l {:.4} k {:.4} b {:.4}", h.location, h.keypoint_type, h.category);
    }
    let mut two_stage = combine(&lifter, &det_out.model)?;
    two_stage.config.use_context = false;
    let (r, st) = evaluate_detailed(&two_stage, &test, EvalMode::FromImages)?;
    println!(
        "detector in {:.1}s; two-stage from-images mpjpe {:.4} (wrong category {}/{})",
        t.elapsed().as_secs_f64(),
        r.mpjpe,
        st.wrong_category,
        st.samples
    );

    let e2e_cfg = TrainConfig {
        seed,
        epochs: env("KP_E2E_EPOCHS", 10),
        learning_rate: env("KP_E2E_LR", 1e-4),
        ..TrainConfig::for_phase(Phase::EndToEnd)
    };
    for context in [false, true] {
        let t = Instant::now();
        let mut m = two_stage.clone();
        m.config.use_context = context;
        let out = fit(m, StepKind::EndToEnd { context }, &view, &e2e_cfg)?;
        let (r, _) = evaluate_detailed(&out.model, &test, EvalMode::FromImages)?;
        let last = out.history.last().expect("one epoch");
        println!(
            "end-to-end context={context} in {:.1}s: from-images mpjpe {:.4} (loss l {:.4} r {:.4})",
            t.elapsed().as_secs_f64(),
            r.mpjpe,
            last.location,
            last.reprojection
        );
    }
    Ok(())
}
