use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meshrecon::decoder::TemplateMode;
use meshrecon::mesh::FactorLadder;
use meshrecon::pipeline::{
    cmd_ablate, cmd_baseline_mc, cmd_eval, cmd_make_template, cmd_reconstruct, ablation_cells, train, Dtype, RunConfig,
    TemplateSource,
};
use meshrecon::synth::{build_dataset, DatasetConfig, Split};
use meshrecon::tensor::CheckpointManifest;
use meshrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "meshrecon", version, about = "Adaptive-template mesh reconstruction from volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    MakeDataset(MakeDataset),
    /// Build the baseline template bundle from a dataset's training split.
    MakeTemplate(MakeTemplate),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Reconstruct meshes for one volume.
    Reconstruct(ReconstructArgs),
    /// Marching cubes on ground-truth labels, scored like eval.
    BaselineMc(BaselineArgs),
    /// Train and test the ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct MakeDataset {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with dataset settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cubic volume edge, a multiple of 16.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    blur: Option<f64>,
    #[arg(long)]
    bumpiness: Option<f64>,
    #[arg(long)]
    modes: Option<usize>,
    /// 1 or 4.
    #[arg(long)]
    structures: Option<usize>,
}

#[derive(Args)]
struct MakeTemplate {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `mean` or `specific:<index>`.
    #[arg(long, default_value = "mean")]
    source: String,
    #[arg(long, default_value_t = 0)]
    smooth_iters: usize,
    /// Four reduction factors, finest first, e.g. `16,8,4,4`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    factors: Option<Vec<f64>>,
}

#[derive(Args)]
struct RunOverrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
}

impl RunOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<TemplateMode>()?;
        }
        if let Some(d) = &self.run_dir {
            cfg.run_dir = d.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(t) = &self.template {
            cfg.template = t.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint stem, e.g. `runs/x/best`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate on; defaults to the training dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report stem; defaults to `eval_<split>` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume stem (`<stem>.json` + `<stem>.raw`).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    iso: f64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

fn checkpoint_dtype(stem: &Path) -> Result<Dtype> {
    let json = stem.with_extension("json");
    let text = std::fs::read_to_string(&json).map_err(|e| Error::Io { path: json.clone(), source: e })?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json.clone(),
        detail: e.to_string(),
    })?;
    match m.dtype.as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(Error::Format {
            path: json,
            detail: format!("unknown dtype {other}"),
        }),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset(a) => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => DatasetConfig::default(),
            };
            cfg.n = a.n.unwrap_or(cfg.n);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.dims = a.dims.map_or(cfg.dims, |d| [d; 3]);
            cfg.blur = a.blur.unwrap_or(cfg.blur);
            cfg.bumpiness = a.bumpiness.unwrap_or(cfg.bumpiness);
            cfg.modes = a.modes.unwrap_or(cfg.modes);
            cfg.structures = a.structures.unwrap_or(cfg.structures);
            let m = build_dataset(&cfg, &a.out)?;
            println!("{} samples written to {} (hash {})", m.samples.len(), a.out.display(), m.hash);
        }
        Command::MakeTemplate(a) => {
            let source: TemplateSource = a.source.parse()?;
            let factors = a.factors.map(|f| FactorLadder([f[0], f[1], f[2], f[3]]));
            let b = cmd_make_template(&a.dataset, source, a.smooth_iters, factors, &a.out)?;
            println!("template levels {:?} written to {}", b.level_sizes(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.run.resolve()?;
            let log = match cfg.dtype {
                Dtype::F32 => train::<f32>(&cfg)?.log,
                Dtype::F64 => train::<f64>(&cfg)?.log,
            };
            let last = log.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final loss {:.6}; best epoch {} (val ASSD {:?}); outputs in {}",
                log.epochs.len(),
                last.train_loss,
                log.best_epoch,
                log.best_val_assd,
                cfg.run_dir.display()
            );
        }
        Command::Eval(a) => {
            let split: Split = a.split.parse()?;
            let r = match checkpoint_dtype(&a.checkpoint)? {
                Dtype::F32 => cmd_eval::<f32>(&a.checkpoint, a.dataset.as_deref(), split, a.out.as_deref())?,
                Dtype::F64 => cmd_eval::<f64>(&a.checkpoint, a.dataset.as_deref(), split, a.out.as_deref())?,
            };
            println!("{} pairs: average ASSD {:.6}, HD {:.6}", r.rows.len(), r.average_assd, r.average_hd);
        }
        Command::Reconstruct(a) => {
            let written = match checkpoint_dtype(&a.checkpoint)? {
                Dtype::F32 => cmd_reconstruct::<f32>(&a.checkpoint, &a.volume, &a.out)?,
                Dtype::F64 => cmd_reconstruct::<f64>(&a.checkpoint, &a.volume, &a.out)?,
            };
            for (p, n) in written {
                println!("{}: {n} vertices", p.display());
            }
        }
        Command::BaselineMc(a) => {
            let split: Split = a.split.parse()?;
            let r = cmd_baseline_mc(&a.dataset, split, a.iso, a.samples, true, Some(&a.out))?;
            println!(
                "{} pairs ({} skipped): average ASSD {:.6}, HD {:.6}",
                r.rows.len(),
                r.skipped,
                r.average_assd,
                r.average_hd
            );
        }
        Command::Ablate(a) => {
            let cfg = a.run.resolve()?;
            let r = cmd_ablate(&cfg, &a.seeds, &ablation_cells())?;
            print!("{}", r.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
