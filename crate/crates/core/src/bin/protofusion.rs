//! Command-line front end: synthetic cohort generation, training,
//! evaluation, the missing-rate sweep, interpretability export, and the
//! finite-difference gradient suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protofusion::alignment::MiForm;
use protofusion::data::{self, MissingnessMode, MissingnessSpec};
use protofusion::error::Error;
use protofusion::model::{load_checkpoint, save_checkpoint};
use protofusion::pipeline::{
    self, explain, missingness_sweep, results_table, train, train_log_table, FillStrategy, Task,
    TrainConfig,
};
use protofusion::gradcheck;

#[derive(Parser)]
#[command(name = "protofusion", version, about = "Interpretable multimodal prototyping over histology bags and grouped genomics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it to disk
    Synth {
        #[arg(long, default_value_t = 100)]
        patients: usize,
        #[arg(long, default_value_t = 16)]
        d_embed: usize,
        #[arg(long, default_value_t = 120)]
        genes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a cohort
    Train {
        /// path to the cohort manifest.json
        #[arg(long)]
        data: PathBuf,
        /// output directory for the checkpoint and training log
        #[arg(long)]
        out: PathBuf,
        /// flat key=value configuration file; flags override its entries
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigFlags,
    },
    /// Evaluate a checkpoint on a cohort
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "survival")]
        task: String,
        #[arg(long, default_value = "sgi")]
        strategy: String,
        #[arg(long)]
        missing_mode: Option<String>,
        #[arg(long)]
        missing_rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        missing_seed: u64,
        /// results table destination (TSV); stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across missingness modes, rates, and strategies
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "survival")]
        task: String,
        #[arg(long, default_value = "0,0.2,0.5,0.8,1.0")]
        rates: String,
        #[arg(long, default_value = "patient_wise,feature_wise")]
        modes: String,
        #[arg(long, default_value = "sgi,mean_fill")]
        strategies: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export interpretability tables for a trained checkpoint
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// training log (train_log.tsv) supplying the alignment trace
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Optional overrides for every TrainConfig field.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    k_top: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    schedule_total_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    n_iterations: Option<usize>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    mi_form: Option<String>,
    #[arg(long)]
    disc_lr_scale: Option<f64>,
    #[arg(long)]
    fill_strategy: Option<String>,
    #[arg(long)]
    missing_mode: Option<String>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    missing_seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<MissingnessMode, Error> {
    match s {
        "patient_wise" => Ok(MissingnessMode::PatientWise),
        "feature_wise" => Ok(MissingnessMode::FeatureWise),
        other => Err(Error::Config(format!("unknown missingness mode {other}"))),
    }
}

fn parse_mi_form(s: &str) -> Result<MiForm, Error> {
    match s {
        "cross_pair" => Ok(MiForm::CrossPair),
        "paired_diagonal" => Ok(MiForm::PairedDiagonal),
        other => Err(Error::Config(format!("unknown mi form {other}"))),
    }
}

/// Applies a flat key=value file, then flag overrides, onto the defaults.
fn build_config(path: Option<&PathBuf>, flags: &ConfigFlags) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    let mut missing_mode: Option<MissingnessMode> = None;
    let mut missing_rate: Option<f64> = None;
    let mut missing_seed: u64 = 0;

    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Load {
            path: p.clone(),
            detail: e.to_string(),
        })?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: std::num::ParseIntError| Error::Config(format!("bad {key}: {e}"));
            let badf = |e: std::num::ParseFloatError| Error::Config(format!("bad {key}: {e}"));
            match key {
                "task" => cfg.task = value.parse()?,
                "seed" => cfg.seed = value.parse().map_err(bad)?,
                "batch_size" => cfg.batch_size = value.parse().map_err(bad)?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(badf)?,
                "epochs" => cfg.epochs = value.parse().map_err(bad)?,
                "phase1_epochs" => cfg.phase1_epochs = value.parse().map_err(bad)?,
                "lambda_reg" => cfg.lambda_reg = value.parse().map_err(badf)?,
                "lambda_cycle" => cfg.lambda_cycle = value.parse().map_err(badf)?,
                "k_top" => cfg.k_top = value.parse().map_err(bad)?,
                "accumulation" => cfg.accumulation = value.parse().map_err(bad)?,
                "schedule_total_steps" => {
                    cfg.schedule_total_steps = value.parse().map_err(bad)?
                }
                "hidden" => cfg.hidden = value.parse().map_err(bad)?,
                "n_iterations" => cfg.n_iterations = value.parse().map_err(bad)?,
                "n_bins" => cfg.n_bins = value.parse().map_err(bad)?,
                "mi_form" => cfg.mi_form = parse_mi_form(value)?,
                "disc_lr_scale" => cfg.disc_lr_scale = value.parse().map_err(badf)?,
                "fill_strategy" => cfg.fill_strategy = value.parse()?,
                "missing_mode" => missing_mode = Some(parse_mode(value)?),
                "missing_rate" => missing_rate = Some(value.parse().map_err(badf)?),
                "missing_seed" => missing_seed = value.parse().map_err(bad)?,
                other => return Err(Error::Config(format!("unknown config key {other}"))),
            }
        }
    }

    if let Some(v) = &flags.task {
        cfg.task = v.parse()?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = flags.lambda_reg {
        cfg.lambda_reg = v;
    }
    if let Some(v) = flags.lambda_cycle {
        cfg.lambda_cycle = v;
    }
    if let Some(v) = flags.k_top {
        cfg.k_top = v;
    }
    if let Some(v) = flags.accumulation {
        cfg.accumulation = v;
    }
    if let Some(v) = flags.schedule_total_steps {
        cfg.schedule_total_steps = v;
    }
    if let Some(v) = flags.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = flags.n_iterations {
        cfg.n_iterations = v;
    }
    if let Some(v) = flags.n_bins {
        cfg.n_bins = v;
    }
    if let Some(v) = &flags.mi_form {
        cfg.mi_form = parse_mi_form(v)?;
    }
    if let Some(v) = flags.disc_lr_scale {
        cfg.disc_lr_scale = v;
    }
    if let Some(v) = &flags.fill_strategy {
        cfg.fill_strategy = v.parse()?;
    }
    if let Some(v) = &flags.missing_mode {
        missing_mode = Some(parse_mode(v)?);
    }
    if let Some(v) = flags.missing_rate {
        missing_rate = Some(v);
    }
    if let Some(v) = flags.missing_seed {
        missing_seed = v;
    }
    cfg.missingness = match (missing_mode, missing_rate) {
        (Some(mode), Some(rate)) => Some(MissingnessSpec {
            mode,
            rate,
            seed: missing_seed,
        }),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "missing_mode and missing_rate must be given together".into(),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_spec(
    mode: Option<&String>,
    rate: Option<f64>,
    seed: u64,
) -> Result<Option<MissingnessSpec>, Error> {
    match (mode, rate) {
        (Some(m), Some(r)) => {
            let spec = MissingnessSpec {
                mode: parse_mode(m)?,
                rate: r,
                seed,
            };
            spec.validate()?;
            Ok(Some(spec))
        }
        (None, None) => Ok(None),
        _ => Err(Error::Config(
            "missing_mode and missing_rate must be given together".into(),
        )),
    }
}

fn write_or_print(path: Option<&PathBuf>, content: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, content)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

/// Reads the paired-cosine column out of a training log.
fn trace_from_log(path: &PathBuf) -> Result<Vec<f64>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let mut header = None;
    let mut out = Vec::new();
    for line in text.lines() {
        let cells: Vec<&str> = line.split('\t').collect();
        match header {
            None => {
                header = Some(
                    cells
                        .iter()
                        .position(|c| *c == "cosine")
                        .ok_or_else(|| Error::Schema("training log lacks a cosine column".into()))?,
                );
            }
            Some(idx) => {
                let v: f64 = cells
                    .get(idx)
                    .ok_or_else(|| Error::Schema("short training log row".into()))?
                    .parse()
                    .map_err(|e| Error::Schema(format!("bad cosine value: {e}")))?;
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            patients,
            d_embed,
            genes,
            seed,
            out,
        } => {
            let cohort = data::generate_synthetic(patients, d_embed, genes, seed)?;
            data::save_cohort(&cohort, &out)?;
            println!(
                "wrote {} patients to {}",
                cohort.patients.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data: data_path,
            out,
            config,
            overrides,
        } => {
            let cfg = build_config(config.as_ref(), &overrides)?;
            let cohort = data::load_cohort(&data_path)?;
            let outcome = train(&cohort, &cfg)?;
            save_checkpoint(&outcome.state, &out, cfg.hash())?;
            std::fs::write(out.join("train_log.tsv"), train_log_table(&outcome.logs))?;
            println!(
                "trained {} epochs (freeze epoch: {}); checkpoint in {}",
                outcome.logs.len(),
                outcome
                    .freeze_epoch
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| "none".into()),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data: data_path,
            task,
            strategy,
            missing_mode,
            missing_rate,
            missing_seed,
            out,
        } => {
            let task: Task = task.parse()?;
            let strategy: FillStrategy = strategy.parse()?;
            let spec = parse_spec(missing_mode.as_ref(), missing_rate, missing_seed)?;
            let (state, _) = load_checkpoint(&checkpoint)?;
            let cohort = data::load_cohort(&data_path)?;
            let report = pipeline::evaluate(&state, &cohort, task, spec.as_ref(), strategy)?;
            write_or_print(out.as_ref(), &results_table(&[report]))
        }
        Command::Sweep {
            checkpoint,
            data: data_path,
            task,
            rates,
            modes,
            strategies,
            seed,
            out,
        } => {
            let task: Task = task.parse()?;
            let rates: Vec<f64> = rates
                .split(',')
                .map(|r| {
                    r.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("bad rate {r}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let modes: Vec<MissingnessMode> = modes
                .split(',')
                .map(|m| parse_mode(m.trim()))
                .collect::<Result<_, _>>()?;
            let strategies: Vec<FillStrategy> = strategies
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()?;
            let (state, _) = load_checkpoint(&checkpoint)?;
            let cohort = data::load_cohort(&data_path)?;
            let rows = missingness_sweep(&state, &cohort, task, &rates, &modes, &strategies, seed)?;
            write_or_print(out.as_ref(), &results_table(&rows))
        }
        Command::Explain {
            checkpoint,
            data: data_path,
            out,
            train_log,
        } => {
            let (state, _) = load_checkpoint(&checkpoint)?;
            let cohort = data::load_cohort(&data_path)?;
            let trace = match &train_log {
                Some(p) => Some(trace_from_log(p)?),
                None => None,
            };
            explain(&state, &cohort, trace.as_deref(), &out)?;
            println!("explanation tables in {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::run_all(seed);
            let mut ok = true;
            for r in &results {
                let status = if r.max_rel_err <= gradcheck::TOLERANCE {
                    "ok"
                } else {
                    ok = false;
                    "FAIL"
                };
                println!("{:<32} {:>12.3e}  {}", r.name, r.max_rel_err, status);
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Precondition(
                    "gradient check exceeded tolerance".into(),
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Schema(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
