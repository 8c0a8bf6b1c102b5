use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wcomp::harness::{
    analyze_checkpoint, bake_export, eval_checkpoint, grid_search, load_dataset, overhead_report,
    parse_values, split_for_seed, train, write_run_outputs, DatasetConfig, ExperimentConfig,
    RunResult, SeedResult, Trainer,
};
use wcomp::reparam::ReparamKind;
use wcomp::Result;

#[derive(Parser)]
#[command(name = "wcomp", version, about = "Weight-compander training workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Seeds to run (repeatable); replaces the config's list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Reparameterization kind: identity, arctan, arcsinh or erf.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    a_value: Option<f64>,
    #[arg(long)]
    b_value: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.optimizer = c.optimizer.with_lr(lr);
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(k) = &self.kind {
            c.reparam.kind = match k.as_str() {
                "identity" => ReparamKind::Identity,
                "arctan" => ReparamKind::Arctan,
                "arcsinh" => ReparamKind::Arcsinh,
                "erf" => ReparamKind::Erf,
                "weight_norm" => ReparamKind::WeightNorm,
                other => {
                    return Err(wcomp::Error::Config(format!("unknown kind `{other}`")));
                }
            };
        }
        c.reparam.params.a = self.a_value.unwrap_or(c.reparam.params.a);
        c.reparam.params.b = self.b_value.unwrap_or(c.reparam.params.b);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, results and traces.
    Train {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Also save the final training state of each seed.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Grid search over (a, b) on the first seed.
    GridSearch {
        #[command(flatten)]
        cfg: Overrides,
        /// `start:end:step` or a comma-separated list.
        #[arg(long, default_value = "0.5:1.0:0.1")]
        a: String,
        #[arg(long, default_value = "0.5:1.0:0.1")]
        b: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Weight-distribution statistics of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated layer indices; all weighted layers if omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
    },
    /// Export a plain network storing psi(v).
    Bake {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset as inline JSON or a path to a JSON file.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Per-step time of the reparameterization relative to the identity.
    Overhead {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

fn dataset_arg(text: &str) -> Result<DatasetConfig> {
    let path = Path::new(text);
    if path.is_file() {
        let body = std::fs::read_to_string(path)
            .map_err(|e| wcomp::Error::Config(format!("{}: {e}", path.display())))?;
        let mut d: DatasetConfig = serde_json::from_str(&body)?;
        if let Some(dir) = path.parent() {
            d.rebase(dir);
        }
        Ok(d)
    } else {
        Ok(serde_json::from_str(text)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            save_checkpoints,
        } => {
            let config = cfg.load()?;
            let result = if save_checkpoints {
                train_with_checkpoints(&config, &out)?
            } else {
                train(&config)?
            };
            for s in &result.seeds {
                println!(
                    "seed {}: {:?}, best val {:?} at epoch {:?}, test {:?}",
                    s.seed, s.status, s.best_val_acc, s.best_epoch, s.test_acc
                );
            }
            println!("test accuracy {:.4} +- {:.4}", result.test_mean, result.test_std);
            for p in write_run_outputs(&result, &out)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::GridSearch { cfg, a, b, out } => {
            let config = cfg.load()?;
            let grid = grid_search(&config, &parse_values(&a)?, &parse_values(&b)?)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| wcomp::Error::Config(format!("{}: {e}", out.display())))?;
            let path = out.join("grid.csv");
            std::fs::write(&path, grid.to_csv())
                .map_err(|e| wcomp::Error::Config(format!("{}: {e}", path.display())))?;
            print!("{}", grid.to_csv());
            match grid.best {
                Some((a, b, acc)) => println!("best: a={a} b={b} val_acc={acc:.4}"),
                None => println!("no cell completed"),
            }
        }
        Command::Analyze {
            checkpoint,
            layers,
            delta,
        } => {
            let report = analyze_checkpoint(&checkpoint, &layers, delta)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Bake { checkpoint, out } => {
            bake_export(&checkpoint, &out)?;
            println!("baked {} -> {}", checkpoint.display(), out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            data_seed,
        } => {
            let r = eval_checkpoint(&checkpoint, &dataset_arg(&dataset)?, data_seed)?;
            println!(
                "{} samples: loss {:.6} accuracy {:.4}",
                r.samples, r.loss, r.accuracy
            );
        }
        Command::Overhead { cfg, steps } => {
            let config = cfg.load()?;
            let r = overhead_report(&config, steps)?;
            println!("{}", r.summary());
        }
    }
    Ok(())
}

fn run_and_save<T: wcomp::Real>(
    config: &ExperimentConfig,
    splits: wcomp::harness::Splits,
    seed: u64,
    path: &Path,
) -> Result<SeedResult> {
    let mut t = Trainer::<T>::new(config, seed, splits)?;
    while t.step()? {}
    t.checkpoint()?.save(path)?;
    println!("checkpoint {}", path.display());
    t.finish()
}

/// Sequential runs that also store each seed's final training state.
fn train_with_checkpoints(config: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let (pool, test) = load_dataset(&config.dataset, config.data_seed)?;
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let splits = split_for_seed(&pool, &test, config.validation_split, seed);
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)
            .map_err(|e| wcomp::Error::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join("checkpoint.wck");
        seeds.push(match config.precision {
            wcomp::Dtype::F64 => run_and_save::<f64>(config, splits, seed, &path)?,
            wcomp::Dtype::F32 => run_and_save::<f32>(config, splits, seed, &path)?,
        });
    }
    Ok(RunResult::new(config.clone(), seeds))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
