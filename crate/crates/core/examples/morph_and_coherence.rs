//! Train a lifter briefly, save it, reload it, then decode one sample's
//! latent code under every category's mask and report the coherence of
//! the latent basis.
//!
//! cargo run --release --example morph_and_coherence -- [epochs]

use kplift::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use kplift::eval::{coherence, morph};
use kplift::synthetic::{generate_dataset, DatasetConfig};
use kplift::train::{fit, Phase, StepKind, TrainConfig};
use kplift::Model;

fn main() -> kplift::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let data = generate_dataset(
        &DatasetConfig {
            categories: 3,
            samples: 600,
            render: false,
            ..DatasetConfig::default()
        },
        1,
    )?;
    let mut cfg = TrainConfig {
        epochs,
        ..TrainConfig::for_phase(Phase::LifterOnly)
    };
    cfg.model.lifter.latent_dim = 4;
    let model = Model::new(cfg.model.clone(), data.registry()?, 0)?;
    let trained = fit(model, StepKind::Lifter, &data.train_view()?, &cfg)?.model;

    let path = std::env::temp_dir().join("kplift-morph-demo.ckpt");
    save_checkpoint(&trained, &Metadata::default(), &path)?;
    let (model, _) = load_checkpoint(&path)?;
    println!("coherence of the latent basis {:.4}", coherence(&model)?);

    let sample = &data.samples[0];
    for target in model.registry.iter() {
        let pts = morph(&model, sample, &target.name)?;
        let first = pts.point(0);
        println!(
            "{} -> {:<5} {:>2} points, first ({:+.3}, {:+.3}, {:+.3})",
            data.category(sample.category)?.schema.name,
            target.name,
            pts.k(),
            first[0],
            first[1],
            first[2]
        );
    }
    Ok(())
}
