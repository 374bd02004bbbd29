use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densebam::config::ExperimentConfig;
use densebam::experiment::{self, AblationAxis};
use densebam::Error;

#[derive(Parser, Debug)]
#[command(name = "densebam", version, about = "Train, evaluate and inspect handwritten math recognizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Checkpoint to evaluate or inspect; for `train`, a GRU checkpoint to warm-start from.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Override one config key by dotted path, e.g. `train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Root seed; overrides `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics, reports and checkpoints.
    Train,
    /// Evaluate a checkpoint on the validation samples.
    Eval,
    /// Train every variant along one configuration axis.
    Ablate {
        /// bam_position, layer_counts or decoder.
        #[arg(long, default_value = "decoder")]
        axis: String,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Write per-step attention heatmaps for one sample.
    AttentionDump {
        /// Index into the configured dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Config(_) => 1,
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => 2,
    }
}

fn load_config(cli: &Cli) -> densebam::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn checkpoint(cli: &Cli) -> densebam::Result<&Path> {
    let path = cli
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("checkpoint not found: {}", path.display())));
    }
    Ok(path)
}

fn run(cli: &Cli) -> densebam::Result<u8> {
    if let Command::Gradcheck = cli.command {
        let outcomes = experiment::gradcheck()?;
        for o in &outcomes {
            println!("{o}");
        }
        let failed = outcomes.iter().filter(|o| !o.passed).count();
        println!("{} checks, {failed} failed", outcomes.len());
        return Ok(u8::from(failed > 0));
    }
    let mut cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Train => {
            if cli.checkpoint.is_some() {
                cfg.init_checkpoint = Some(checkpoint(cli)?.to_path_buf());
            }
            let r = experiment::train(&cfg, &out)?;
            println!(
                "trained {} epochs; best exprate {:.2} at epoch {}; outputs in {}",
                r.epochs,
                r.best.exprate,
                r.best_epoch,
                out.display()
            );
        }
        Command::Eval => {
            let r = experiment::eval(&cfg, checkpoint(cli)?, &out)?;
            println!("{}", serde_json::to_string_pretty(&r.report).expect("report serializes"));
        }
        Command::Ablate { axis } => {
            let axis: AblationAxis = axis.parse()?;
            let t = experiment::ablate(&cfg, axis, &out)?;
            print!("{}", t.to_csv());
        }
        Command::AttentionDump { index } => {
            let d = experiment::attention_dump(&cfg, checkpoint(cli)?, *index, &out)?;
            println!("{} steps written to {}", d.steps, out.display());
            println!("prediction: {}", d.prediction);
            println!("reference:  {}", d.reference);
        }
        Command::Gradcheck => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
