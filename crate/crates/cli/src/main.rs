use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgvq::codec;
use mgvq::experiments::{self, DeadpointConfig, GridConfig};
use mgvq::imaging::Image;
use mgvq::pipeline::Tokenizer;
use mgvq::synthetic;
use mgvq::trainer::{self, load_checkpoint, save_checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "mgvq", version, about = "Multi-group VQ image tokenizer")]
struct Cli {
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tokenizer and write a checkpoint.
    Train(TrainArgs),
    /// Encode an image into a token stream file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Decode a token stream file into a PNG.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Decode with only the first M groups.
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Report PSNR, SSIM and codebook usage on a directory of images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Run a diagnostic sweep and write CSV.
    #[command(subcommand)]
    Experiment(Experiment),
    /// Write a procedural image corpus as PNG files.
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, value_enum, default_value_t = SynthKind::Scenes)]
        kind: SynthKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Scenes,
    Blobs,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set groups=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                TrainConfig::from_kv_file(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory of training/evaluation images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use this many procedural scenes instead of a directory.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = usize::MAX)]
    max_items: usize,
}

impl DataArgs {
    fn load(&self, seed: u64, size: usize) -> Result<Vec<Image>> {
        match (&self.data, self.synthetic) {
            (Some(dir), _) => Ok(trainer::load_dataset(dir, self.max_items, seed, size)?),
            (None, Some(n)) => Ok(synthetic::scenes(n.min(self.max_items), size, seed)),
            (None, None) => bail!("pass --data DIR or --synthetic COUNT"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write.
    #[arg(long, short)]
    output: PathBuf,
    /// JSON-lines metrics log (appended when resuming).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint, keeping its configuration.
    #[arg(long, conflicts_with_all = ["config", "overrides"])]
    resume: Option<PathBuf>,
    /// Total step budget (also extends a resumed run).
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Dead-code fraction for (sub_dim, K) cells on blob images.
    Deadpoints {
        /// Comma-separated DIMxK cells.
        #[arg(long, default_value = "2x32,16x1024")]
        cells: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, short)]
        output: PathBuf,
        /// Per-code coordinates of two-dimensional cells.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// PSNR/SSIM when decoding with the first 1..=G groups.
    Mkeep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Train and evaluate each (G, K) cell with the same budget.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated GxK cells.
        #[arg(long, default_value = "1x256,4x64,8x64,16x64")]
        cells: String,
        /// Train every cell without nested masking.
        #[arg(long)]
        no_nested: bool,
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn parse_cells(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|c| {
            let (a, b) = c
                .trim()
                .split_once('x')
                .with_context(|| format!("cell `{c}` is not AxB"))?;
            Ok((a.parse()?, b.parse()?))
        })
        .collect()
}

fn tokenizer(path: &Path) -> Result<Tokenizer> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Tokenizer::from_checkpoint(&ckpt)?)
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let (mut trainer, append) = match &args.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if seed.is_some_and(|s| s != ckpt.config.seed) {
                bail!(
                    "--seed differs from the checkpoint's seed {}",
                    ckpt.config.seed
                );
            }
            (Trainer::from_checkpoint(ckpt)?, true)
        }
        None => (Trainer::new(args.config.load(seed)?)?, false),
    };
    if let Some(s) = args.steps {
        trainer.set_steps(s);
    }
    let cfg = trainer.config().clone();
    let images = args.data.load(cfg.seed, cfg.image_size)?;
    let (train_set, holdout) = trainer::split_holdout(&images);
    log::info!(
        "training {} steps on {} images ({} held out), G={} K={}",
        cfg.steps.saturating_sub(trainer.step()),
        train_set.len(),
        holdout.len(),
        cfg.groups,
        cfg.codebook_size
    );
    let mut sink: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(BufWriter::new(
            File::options()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(std::io::sink()),
    };
    trainer.fit(train_set, holdout, &mut sink)?;
    save_checkpoint(&trainer.checkpoint(), &args.output)?;
    if !holdout.is_empty() {
        let m = trainer.evaluate(holdout, None)?;
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(args) => train(args, seed)?,
        Command::Encode {
            checkpoint,
            input,
            output,
        } => {
            let tok = tokenizer(&checkpoint)?;
            let s = codec::encode_image(&input, &tok, &output)?;
            println!(
                "{}x{} -> {}x{} grid, {} payload bytes ({:.1}:1), {} file bytes",
                s.orig_h,
                s.orig_w,
                s.grid_h,
                s.grid_w,
                s.payload_bytes,
                s.compression_ratio(),
                s.file_bytes
            );
        }
        Command::Decode {
            checkpoint,
            input,
            output,
            keep,
        } => {
            let tok = tokenizer(&checkpoint)?;
            let img = codec::decode_tokens(&input, &tok, keep, &output)?;
            println!(
                "wrote {}x{} image to {}",
                img.height,
                img.width,
                output.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            keep,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let images = data.load(seed.unwrap_or(ckpt.config.seed), ckpt.config.image_size)?;
            let m = Tokenizer::from_checkpoint(&ckpt)?.evaluate(&images, keep)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Experiment(Experiment::Deadpoints {
            cells,
            steps,
            lr,
            output,
            points,
        }) => {
            let mut cfg = DeadpointConfig {
                cells: parse_cells(&cells)?,
                ..DeadpointConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(l) = lr {
                cfg.learning_rate = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (report, coords) = experiments::run_deadpoint_experiment(&cfg)?;
            report.write_csv(&output)?;
            if let Some(p) = points {
                experiments::ExperimentReport { rows: coords }.write_csv(p)?;
            }
            print!("{}", report.to_csv()?);
        }
        Command::Experiment(Experiment::Mkeep {
            checkpoint,
            data,
            output,
        }) => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let images = data.load(seed.unwrap_or(ckpt.config.seed), ckpt.config.image_size)?;
            let report =
                experiments::run_mkeep_sweep(&Tokenizer::from_checkpoint(&ckpt)?, &images)?;
            report.write_csv(&output)?;
            print!("{}", report.to_csv()?);
        }
        Command::Experiment(Experiment::Grid {
            config,
            data,
            cells,
            no_nested,
            output,
        }) => {
            let base = config.load(seed)?;
            let images = data.load(base.seed, base.image_size)?;
            let cfg = GridConfig {
                cells: parse_cells(&cells)?,
                base,
                nested_masking: !no_nested,
            };
            let report = experiments::run_ablation_grid(&cfg, &images)?;
            report.write_csv(&output)?;
            print!("{}", report.to_csv()?);
        }
        Command::Synth {
            output,
            count,
            size,
            kind,
        } => {
            let s = seed.unwrap_or(0);
            let images = match kind {
                SynthKind::Scenes => synthetic::scenes(count, size, s),
                SynthKind::Blobs => synthetic::blob_images(count, size, s),
            };
            trainer::write_corpus(&images, &output)?;
            println!("wrote {count} images to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
