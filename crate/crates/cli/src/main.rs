//! `cymba`: data preparation, staged training, sampling and evaluation.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid
//! (nothing has been written yet), 2 when the command fails while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cymba_core::config::RunConfig;
use cymba_core::pipeline::{self, SSEN_STAGE, VAE_STAGE};
use cymba_core::voxel::{read_voxel_labels, synthetic_condition};
use cymba_core::Error;

#[derive(Parser, Debug)]
#[command(name = "cymba", version, about = "Sketch-conditioned 3D semantic scene generation")]
struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the epoch count of the training stage being run.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output location: a directory, or the report file for `evaluate`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a sketch and a stand-in PSA (the BEV class map) per label file.
    MakeSketch {
        #[arg(required = true)]
        labels: Vec<PathBuf>,
    },
    /// Generates a synthetic dataset (default: into the data directory).
    GenToy {
        /// Number of scenes; defaults to `toy_scenes`.
        #[arg(long)]
        count: Option<usize>,
    },
    TrainVae {
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    TrainSsen {
        #[arg(long)]
        resume: bool,
    },
    /// Needs the VAE and SSEN checkpoints.
    TrainDiffusion {
        #[arg(long)]
        resume: bool,
    },
    /// Samples one volume per (condition, seed) plus a JSON-lines manifest.
    Sample {
        /// Sketch and PSA paths, alternating.
        #[arg(required = true, value_names = ["SKETCH", "PSA"])]
        conditions: Vec<PathBuf>,
        /// Comma-separated seeds; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Prints a JSON metric report comparing two label directories.
    Evaluate { real: PathBuf, generated: PathBuf },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        let hint = match &e {
            Error::MissingCheckpoint { .. } => "; stages train in order train-vae, train-ssen, train-diffusion",
            _ => "",
        };
        Failure::Runtime(format!("{e}{hint}"))
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn require_dir(p: &Path) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{} is not a directory", p.display())))
    }
}

fn require_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", p.display())))
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| invalid(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        let stage = match cli.command {
            Command::TrainVae { .. } => &mut cfg.vae,
            Command::TrainSsen { .. } => &mut cfg.ssen,
            Command::TrainDiffusion { .. } => &mut cfg.diffusion,
            _ => return Err(invalid("--epochs applies only to training commands")),
        };
        stage.epochs = e;
    }
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

fn report_rows(stage: &str, rows: &[Vec<f64>]) {
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("{stage}: {} epochs, loss {:.6} -> {:.6}", rows.len(), first[first.len() - 1], last[last.len() - 1]);
    } else {
        println!("{stage}: already complete");
    }
}

fn make_sketch(cfg: &RunConfig, labels: &[PathBuf], out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let mut failed = Vec::new();
    for path in labels {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let done = read_voxel_labels(path, cfg.dims, cfg.num_classes)
            .and_then(|g| synthetic_condition(&g, cfg.canny()))
            .and_then(|c| pipeline::write_condition(out, &stem, &c));
        match done {
            Ok((s, p)) => println!("{} -> {}, {}", path.display(), s.display(), p.display()),
            Err(e) => {
                eprintln!("error: {e}");
                failed.push(path.display().to_string());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} inputs failed: {}", failed.len(), labels.len(), failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let rt = Failure::runtime;
    match &cli.command {
        Command::MakeSketch { labels } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            make_sketch(&cfg, labels, &out)
        }
        Command::GenToy { count } => {
            let n = count.unwrap_or(cfg.toy_scenes);
            if n == 0 {
                return Err(invalid("--count must be positive"));
            }
            cfg.toy_config().validate().map_err(|e| invalid(e.to_string()))?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let files = pipeline::write_toy_dataset(&cfg, n, cfg.seed, &out).map_err(rt)?;
            println!("wrote {} scenes to {}", files.len(), out.display());
            Ok(())
        }
        Command::TrainVae { resume } => {
            require_dir(&cfg.data_dir)?;
            report_rows(VAE_STAGE, &pipeline::train_vae_stage(&cfg, *resume).map_err(rt)?);
            Ok(())
        }
        Command::TrainSsen { resume } => {
            require_dir(&cfg.data_dir)?;
            report_rows(SSEN_STAGE, &pipeline::train_ssen_stage(&cfg, *resume).map_err(rt)?);
            Ok(())
        }
        Command::TrainDiffusion { resume } => {
            require_dir(&cfg.data_dir)?;
            let rows = pipeline::train_diffusion_stage(&cfg, *resume).map_err(rt)?;
            report_rows(pipeline::DIFFUSION_STAGE, &rows);
            Ok(())
        }
        Command::Sample { conditions, seeds } => {
            if conditions.len() % 2 != 0 {
                return Err(invalid("conditions come in SKETCH PSA pairs"));
            }
            conditions.iter().try_for_each(|p| require_file(p))?;
            let pairs: Vec<(PathBuf, PathBuf)> = conditions.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let records = pipeline::sample(&cfg, &pairs, &seeds, &out).map_err(rt)?;
            for r in &records {
                println!("{}", r.output.display());
            }
            Ok(())
        }
        Command::Evaluate { real, generated } => {
            require_dir(real)?;
            require_dir(generated)?;
            let report = pipeline::evaluate(&cfg, real, generated).map_err(rt)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
            if let Some(path) = &cli.out {
                std::fs::write(path, format!("{json}\n")).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
            println!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
