//! `tempro`: command-line front end for temporal-profile detectors.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AttributeArgs, DetectArgs, EvalArgs, ExportScormsArgs, ProfileArgs, SimulateArgs, StatsArgs,
    TrainArgs,
};
use run::{CliError, CliResult, Run};

/// Environment variable that overrides `--threads`.
const THREADS_ENV: &str = "TEMPRO_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "tempro",
    version,
    about = "Temporal-profile infrared small target detection toolkit"
)]
struct Cli {
    /// Worker threads; 1 gives bit-exact reruns. Overridden by TEMPRO_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Where to write the run manifest instead of the command's default.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a JSON scene description.
    Simulate(SimulateArgs),
    /// Train a detector on the train split of a dataset.
    Train(TrainArgs),
    /// Run windowed detection on a sequence or a dataset directory.
    Detect(DetectArgs),
    /// Score detections against ground truth (Pd, Fa, ROC, AUC).
    Eval(EvalArgs),
    /// Export a pixel's temporal profile and its autocorrelation.
    Profile(ProfileArgs),
    /// Integrated-gradients attribution of one target's confidence.
    Attribute(AttributeArgs),
    /// Export every SCorM matrix and its symmetry score.
    ExportScorms(ExportScormsArgs),
    /// Parameter, FLOP and throughput statistics of a model.
    Stats(StatsArgs),
}

fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let env =
        match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count"))
            })?),
            Err(_) => None,
        };
    let n = env
        .or(flag)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn execute(cli: Cli) -> CliResult<()> {
    let threads = resolve_threads(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    tempro_core::runtime::retain_heap();
    let (name, config) = match &cli.command {
        Command::Simulate(a) => ("simulate", serde_json::to_value(a)?),
        Command::Train(a) => ("train", serde_json::to_value(a)?),
        Command::Detect(a) => ("detect", serde_json::to_value(a)?),
        Command::Eval(a) => ("eval", serde_json::to_value(a)?),
        Command::Profile(a) => ("profile", serde_json::to_value(a)?),
        Command::Attribute(a) => ("attribute", serde_json::to_value(a)?),
        Command::ExportScorms(a) => ("export-scorms", serde_json::to_value(a)?),
        Command::Stats(a) => ("stats", serde_json::to_value(a)?),
    };
    let mut run = Run::new(name, config, threads);
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &mut run),
        Command::Train(a) => commands::train(a, &mut run),
        Command::Detect(a) => commands::detect(a, &mut run),
        Command::Eval(a) => commands::eval(a, &mut run),
        Command::Profile(a) => commands::profile(a, &mut run),
        Command::Attribute(a) => commands::attribute(a, &mut run),
        Command::ExportScorms(a) => commands::export_scorms(a, &mut run),
        Command::Stats(a) => commands::stats(a, &mut run),
    }
    .and_then(|mut finished| {
        if let Some(p) = cli.manifest.clone() {
            finished.manifest_path = Some(p);
        }
        let stdout = finished.stdout.take();
        match finished.manifest_path.clone() {
            Some(path) => {
                run.outputs.file(&path)?;
                let body = serde_json::to_vec_pretty(&run.manifest(&finished))?;
                std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
                if let Some(s) = stdout {
                    println!("{s}");
                }
            }
            None => {
                // Commands without an output location print their manifest.
                let doc = serde_json::json!({
                    "result": stdout.map(|s| serde_json::from_str::<serde_json::Value>(&s).unwrap_or(s.into())),
                    "manifest": run.manifest(&finished),
                });
                println!("{}", serde_json::to_string_pretty(&doc)?);
            }
        }
        Ok(())
    });
    if result.is_err() {
        run.outputs.cleanup();
    }
    result
}

fn report(e: &CliError) {
    let doc = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
    eprintln!("{doc}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            report(&err);
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
