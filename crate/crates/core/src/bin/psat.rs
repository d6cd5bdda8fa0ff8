use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use psat::error::{PsatError, Result};
use psat::eval::evaluate;
use psat::fingerprint::{compute_fingerprint, DatasetFingerprint};
use psat::nnet::gradcheck::gradient_check;
use psat::nnet::{load_checkpoint, UNetConfig};
use psat::orchestrator::{parse_strategy, report, run_experiment, ExperimentConfig, OUT_ENV};
use psat::phantom::{generate_cohort, read_cohort, write_cohort, CohortSpec};
use psat::plan::{derive_plan_with_channels, PlanSource, DEFAULT_BASE_CHANNELS, DEFAULT_VOXEL_BUDGET};
use psat::statsbench::{run_preset, Preset};
use psat::train::TransferMode;
use psat::volumes::CohortTag;

#[derive(Parser)]
#[command(name = "psat", version, about = "Pediatric segmentation strategy laboratory on synthetic phantoms")]
struct Cli {
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Strategy code such as PaSaAdTo
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Baseline strategy for significance marks
    #[arg(long, global = true)]
    baseline: Option<String>,
    /// Output root or file
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Multiplier on every epoch count
    #[arg(long = "epochs-scale", global = true)]
    epochs_scale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CohortArg {
    Adult,
    Pediatric,
    Internal,
}

impl From<CohortArg> for CohortTag {
    fn from(c: CohortArg) -> Self {
        match c {
            CohortArg::Adult => CohortTag::Adult,
            CohortArg::Pediatric => CohortTag::Pediatric,
            CohortArg::Internal => CohortTag::Internal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort (case files plus cohort.json) under --out
    Generate {
        #[arg(long, value_enum)]
        cohort: CohortArg,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Fingerprint the training split of a generated cohort
    Fingerprint {
        #[arg(long)]
        cohort_dir: PathBuf,
    },
    /// Derive a training plan from a fingerprint JSON file
    Plan {
        #[arg(long)]
        fingerprint: PathBuf,
        #[arg(long, default_value = "P_a")]
        source: String,
        #[arg(long, default_value_t = DEFAULT_VOXEL_BUDGET)]
        voxel_budget: usize,
        #[arg(long, default_value_t = DEFAULT_BASE_CHANNELS)]
        base_channels: usize,
    },
    /// Pretrain the (P, S, A) part of --strategy and evaluate it without transfer
    Train,
    /// Pretrain and adapt one --strategy, then evaluate it
    Transfer,
    /// Score a checkpoint on a generated cohort
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Render the comparison table of a finished study under --out
    Report,
    /// Run the configured strategy matrix, or a built-in preset
    Study {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Finite-difference check of the network gradients in 64-bit mode
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 2)]
        base: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<PsatError> for Failure {
    fn from(e: PsatError) -> Self {
        match e {
            PsatError::Config(m) => Failure::Config(m),
            PsatError::Parse { .. } | PsatError::InvalidArgument(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn load_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| config_error("--config is required for this command"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.study.seed = seed;
    }
    if let Some(scale) = cli.epochs_scale {
        cfg.study.epochs_scale = scale;
    }
    if let Some(b) = &cli.baseline {
        cfg.study.baseline = b.clone();
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn single_strategy(cli: &Cli, transfer: bool) -> CliResult {
    let raw = cli.strategy.as_deref().ok_or_else(|| config_error("--strategy is required"))?;
    let mut code = parse_strategy(raw)?;
    let mut cfg = load_config(cli)?;
    if !transfer {
        code.transfer = TransferMode::Off;
    }
    cfg.study.strategies = vec![code.to_string()];
    cfg.study.baseline = code.to_string();
    cfg.validate()?;
    let out = run_experiment(&cfg, cli.out.as_deref())?;
    if let Some(t) = &out.table {
        println!("{}", t.text);
    }
    if let Some(m) = out.failures().first() {
        return Err(Failure::Run(format!("{}: {}", m.strategy, m.error.clone().unwrap_or_default())));
    }
    println!("outputs under {}", out.root.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Generate { cohort, n } => {
            let out = cli.out.as_ref().ok_or_else(|| config_error("--out is required"))?;
            let tag: CohortTag = (*cohort).into();
            let c = generate_cohort(&CohortSpec::default_for(tag), *n, cli.seed.unwrap_or(0))?;
            write_cohort(out, &c)?;
            println!("wrote {} {tag} cases to {}", c.len(), out.display());
        }
        Command::Fingerprint { cohort_dir } => {
            let c = read_cohort(cohort_dir)?;
            let cases = if c.splits.train.is_empty() { c.cases.clone() } else { c.train() };
            emit(cli.out.as_deref(), &compute_fingerprint(&cases)?.to_json()?)?;
        }
        Command::Plan { fingerprint, source, voxel_budget, base_channels } => {
            let fp: DatasetFingerprint = serde_json::from_slice(&fs::read(fingerprint).map_err(PsatError::from)?)
                .map_err(|e| config_error(format!("{}: {e}", fingerprint.display())))?;
            let src: PlanSource = source.parse()?;
            let plan = derive_plan_with_channels(&fp, src, *voxel_budget, *base_channels)?;
            emit(cli.out.as_deref(), &plan.to_json()?)?;
        }
        Command::Train => single_strategy(cli, false)?,
        Command::Transfer => single_strategy(cli, true)?,
        Command::Evaluate { checkpoint, cohort_dir, split } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let c = read_cohort(cohort_dir)?;
            let cases = match split {
                SplitArg::Train => c.train(),
                SplitArg::Val => c.val(),
                SplitArg::Test => c.test(),
                SplitArg::All => c.cases.clone(),
            };
            let r = evaluate(&ckpt, &cases, c.spec.cohort_tag)?;
            emit(cli.out.as_deref(), &serde_json::to_string_pretty(&r).map_err(PsatError::from)?)?;
        }
        Command::Report => {
            let root = cli
                .out
                .clone()
                .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                .ok_or_else(|| config_error("--out (or PSAT_OUT) must name a study output root"))?;
            let baseline = cli.baseline.as_deref().ok_or_else(|| config_error("--baseline is required"))?;
            let t = report(&root, baseline)?;
            print!("{}", t.text);
        }
        Command::Study { preset } => match preset {
            Some(name) => {
                if cli.config.is_some() {
                    return Err(config_error("--preset and --config are mutually exclusive"));
                }
                let mut p = Preset::by_name(name)?;
                if let Some(scale) = cli.epochs_scale {
                    p.base.study.epochs_scale = scale;
                }
                p.validate()?;
                let root = cli
                    .out
                    .clone()
                    .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from(format!("psat-{name}")));
                let (verdict, matrix) = run_preset(&p, &root)?;
                print!("{}", verdict.render());
                println!("wall time {:.0}s; verdict in {}", matrix.wall_time_s, root.join("trends.json").display());
                if !matrix.failed_runs.is_empty() {
                    return Err(Failure::Run(format!("failed runs: {}", matrix.failed_runs.join(", "))));
                }
            }
            None => {
                let cfg = load_config(cli)?;
                cfg.validate()?;
                let out = run_experiment(&cfg, cli.out.as_deref())?;
                if let Some(t) = &out.table {
                    print!("{}", t.text);
                }
                let failed: Vec<String> = out.failures().iter().map(|m| m.strategy.clone()).collect();
                if !failed.is_empty() {
                    return Err(Failure::Run(format!("failed strategies: {}", failed.join(", "))));
                }
            }
        },
        Command::Gradcheck { levels, base, patch, classes } => {
            let cfg = UNetConfig::new(*classes, *levels, *base, [*patch; 3])?;
            let r = gradient_check(&cfg, cli.seed.unwrap_or(1), 1e-4, None)?;
            emit(cli.out.as_deref(), &serde_json::to_string_pretty(&r).map_err(PsatError::from)?)?;
            if r.max_rel_error >= 1e-4 {
                return Err(Failure::Run(format!("max relative error {:.3e} exceeds 1e-4", r.max_rel_error)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(3)
        }
    }
}
