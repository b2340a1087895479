use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regen::config::{ExperimentConfig, FilterScope};
use regen::pipeline::{self, OnComplete};
use regen::{report, Error, Result};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "regen", version, about = "Source-free domain adaptation for segmentation on synthetic scenes")]
struct Cli {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Redo phases that are already complete.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_parser = parse_scope)]
    filter_scope: Option<FilterScope>,
    /// Condition the generator on a straight-through hard arg-max.
    #[arg(long, global = true)]
    hard_onehot: bool,
    /// Compute device. Only `cpu` exists; other values are accepted with a warning.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic source, target and probe splits.
    GenerateData,
    /// Train the source model on labelled source data.
    Pretrain,
    /// Self-training warm-up of the student on filtered pseudo-labels.
    Warmup,
    /// Train the label-to-image translation network against the frozen teacher.
    TrainTranslation,
    /// Alternate translation and student updates.
    TrainJoint,
    /// Score a checkpoint (the latest segmentation checkpoint by default) on the target split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write report.json, curves and probe panels. Reads the run directory's
    /// config when RUN_DIR is given.
    Report { run_dir: Option<PathBuf> },
    /// Every phase in order, then evaluation and the report.
    RunAll,
    /// One full run per value of a config field.
    Sweep {
        /// Dotted config path, e.g. loss.lambda_pseg.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, each parsed as JSON when possible.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn parse_scope(s: &str) -> std::result::Result<FilterScope, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = cli.filter_scope {
        cfg.schedule.filter_scope = s;
    }
    if cli.hard_onehot {
        cfg.schedule.hard_onehot = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The config stored in a run directory, relocated to where that directory now is.
fn config_from_run_dir(run_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    cfg.output_dir = run_dir.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn print_phase(o: &pipeline::PhaseOutcome) {
    if o.skipped {
        println!("{}: already complete", o.phase);
    } else {
        println!("{}: done in {:.1}s", o.phase, o.seconds);
    }
}

fn print_report(r: &report::Report) {
    let fmt = |v: Option<f64>| v.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "mIoU baseline {} | post-warmup {} | post-joint {} | final {}",
        fmt(r.baseline_miou),
        fmt(r.post_warmup_miou),
        fmt(r.post_joint_miou),
        fmt(r.final_miou)
    );
}

fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        eprintln!("warning: device `{}` is not available, running on cpu", cli.device);
    }
    let mode = OnComplete::from_force(cli.force);
    match &cli.command {
        Command::Report { run_dir: Some(dir) } => {
            print_report(&report::write_report(&config_from_run_dir(dir)?)?);
            return Ok(());
        }
        Command::ShowConfig => {
            println!("{}", load_config(&cli)?.to_pretty_json());
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenerateData => print_phase(&pipeline::generate_data(&cfg, mode)?),
        Command::Pretrain => print_phase(&pipeline::pretrain(&cfg, mode)?),
        Command::Warmup => print_phase(&pipeline::warmup(&cfg, mode)?),
        Command::TrainTranslation => print_phase(&pipeline::train_translation_phase(&cfg, mode)?),
        Command::TrainJoint => print_phase(&pipeline::train_joint_phase(&cfg, mode)?),
        Command::Evaluate { checkpoint } => {
            let s = pipeline::evaluate(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report { .. } => print_report(&report::write_report(&cfg)?),
        Command::RunAll => {
            let (outcomes, rep) = pipeline::run_all(&cfg, cli.force)?;
            outcomes.iter().for_each(print_phase);
            print_report(&rep);
        }
        Command::Sweep { axis, values } => {
            let values: Vec<Value> = values.iter().map(|v| parse_value(v)).collect();
            for p in pipeline::sweep(&cfg, axis, &values, cli.force)? {
                let m = p.final_miou.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
                println!("{axis} = {}: final mIoU {m}", p.value);
            }
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
