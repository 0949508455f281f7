use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use kplift::checkpoint::load_checkpoint;
use kplift::eval::{coherence, evaluate_detailed, morph, EvalMode};
use kplift::gradcheck::{run_gradcheck, GradcheckConfig};
use kplift::synthetic::{generate_dataset, read_dataset, write_dataset, DatasetConfig};
use kplift::train::{train, Phase, TrainConfig};

#[derive(Parser)]
#[command(name = "kplift", version, about = "Multi-category keypoint detection and 3D lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Pretrain the lifter on ground-truth 2D keypoints.
    TrainLifter(TrainArgs),
    /// Pretrain the detector on images.
    TrainDetector(TrainArgs),
    /// Fine-tune detector and lifter jointly.
    TrainE2e {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        no_context: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gt-keypoints")]
        mode: EvalMode,
        /// Also write the report as `key = value` lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of all losses on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        coords: Option<usize>,
    },
    /// Mutual coherence of the latent basis.
    Coherence {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode a sample's latent code under another category's mask.
    Morph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        target_category: String,
    },
}

#[derive(Args)]
struct GenData {
    /// JSON dataset config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_lifter: Option<PathBuf>,
    #[arg(long)]
    init_detector: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, phase: Phase) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::for_phase_with_file(phase, self.config.as_deref())?;
        if let Some(v) = &self.data {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.out {
            c.output = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = &self.init_lifter {
            c.init_lifter = Some(v.clone());
        }
        if let Some(v) = &self.init_detector {
            c.init_detector = Some(v.clone());
        }
        Ok(c)
    }
}

fn dataset_config(a: &GenData) -> anyhow::Result<DatasetConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.categories {
        c.categories = v;
    }
    if let Some(v) = a.samples {
        c.samples = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.first_index {
        c.first_index = v;
    }
    Ok(c)
}

fn run_training(phase: Phase, args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.resolve(phase)?;
    if cfg.output.is_none() {
        bail!("no output checkpoint; pass --out or set \"output\"");
    }
    let out = train(&cfg)?;
    if let Some(last) = out.history.last() {
        println!("epochs = {}", out.history.len());
        println!("loss.total = {:.9}", last.total);
    }
    println!("skipped = {}", out.skipped);
    println!("checkpoint = {}", cfg.output.as_deref().unwrap_or(Path::new("")).display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = dataset_config(&a)?;
            let data = generate_dataset(&cfg, a.threads)?;
            write_dataset(&data, &a.out)?;
            println!(
                "wrote {} samples of {} categories to {}",
                data.samples.len(),
                data.categories.len(),
                a.out.display()
            );
        }
        Command::TrainLifter(a) => run_training(Phase::LifterOnly, &a)?,
        Command::TrainDetector(a) => run_training(Phase::DetectorPretrain, &a)?,
        Command::TrainE2e { args, no_context } => {
            let phase = if no_context { Phase::EndToEndNoContext } else { Phase::EndToEnd };
            run_training(phase, &args)?
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
            report,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let data = read_dataset(&data)?;
            let (r, stats) = evaluate_detailed(&model, &data, mode)?;
            print!("{}", r.to_table());
            let mut kv = r.to_key_value();
            if mode == EvalMode::FromImages {
                println!("wrong category: {} of {}", stats.wrong_category, stats.samples);
                let _ = writeln!(kv, "wrong_category = {}", stats.wrong_category);
            }
            if let Some(p) = report {
                std::fs::write(&p, kv).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { seed, coords } => {
            let mut cfg = GradcheckConfig::default();
            if let Some(c) = coords {
                cfg.coords_per_tensor = c;
            }
            let r = run_gradcheck(seed, &cfg)?;
            for e in &r.entries {
                println!(
                    "{:<14} {:<34} {:>3} {:>2} {:.3e}",
                    e.loss, e.tensor, e.checked, e.kinks, e.max_rel_error
                );
            }
            let worst = r.worst().map_or(0.0, |e| e.max_rel_error);
            println!("worst = {worst:.3e} (tolerance {:.0e}, {} kinks skipped)", r.tolerance, r.kinks());
            if !r.passed() {
                bail!("gradient check failed at seed {seed}");
            }
        }
        Command::Coherence { checkpoint } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            println!("coherence = {:.9}", coherence(&model)?);
        }
        Command::Morph {
            checkpoint,
            data,
            sample,
            target_category,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let data = read_dataset(&data)?;
            let s = data
                .samples
                .iter()
                .find(|s| s.id == sample)
                .with_context(|| format!("no sample with id {sample}"))?;
            let pts = morph(&model, s, &target_category)?;
            for c in pts.0.column_iter() {
                println!("{:.6} {:.6} {:.6}", c[0], c[1], c[2]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("kplift: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
