//! cytoscreen: PAP-smear screening pipeline driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 model/state error. Worker threads come from `--threads`, then the
//! CYTOSCREEN_THREADS environment variable, then all cores.

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use cytoscreen_core::pipeline::{OutLayout, RunConfig, RunManifest};
use cytoscreen_core::{Error, Result};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "cytoscreen",
    version,
    about = "Cervical-cell screening: nucleus detection, segmentation, classification"
)]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output root directory; overrides the config's out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides the config's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Cap on worker threads (default: CYTOSCREEN_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Re-run a previous command from its manifest; the embedded config
    /// and command are used, so no subcommand is needed.
    #[arg(long, value_name = "FILE")]
    from_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate the deterministic synthetic corpus.
    Synth,
    /// Write stratified train/val/test splits for the cell dataset.
    Split,
    /// Detect nuclei in slide images (files or directories).
    Detect {
        /// Images or directories; defaults to the configured slide dir.
        inputs: Vec<PathBuf>,
    },
    /// Train the patch-CNN segmentation pair.
    TrainSeg,
    /// Segment the test split with the trained model.
    Segment,
    /// Train the classifier (flat, binary, or cascade per config).
    TrainClf,
    /// Classify the test split with the trained classifier.
    Classify,
    /// Build metric tables and the JSON summary from stored artifacts.
    Evaluate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Split => "split",
            Command::Detect { .. } => "detect",
            Command::TrainSeg => "train-seg",
            Command::Segment => "segment",
            Command::TrainClf => "train-clf",
            Command::Classify => "classify",
            Command::Evaluate => "evaluate",
        }
    }

    fn parse(name: &str) -> Option<Command> {
        Some(match name {
            "synth" => Command::Synth,
            "split" => Command::Split,
            "detect" => Command::Detect { inputs: Vec::new() },
            "train-seg" => Command::TrainSeg,
            "segment" => Command::Segment,
            "train-clf" => Command::TrainClf,
            "classify" => Command::Classify,
            "evaluate" => Command::Evaluate,
            _ => return None,
        })
    }
}

fn thread_cap(cli_threads: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = cli_threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be positive".into()));
        }
        return Ok(Some(n));
    }
    match std::env::var("CYTOSCREEN_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                Error::InvalidParameter(format!("CYTOSCREEN_THREADS={v:?} is not a number"))
            })?;
            if n == 0 {
                return Err(Error::InvalidParameter(
                    "CYTOSCREEN_THREADS must be positive".into(),
                ));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = thread_cap(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let (mut config, command) = if let Some(manifest_path) = &cli.from_manifest {
        let manifest = RunManifest::load(manifest_path)?;
        let command = Command::parse(&manifest.command).ok_or_else(|| {
            Error::Config(format!("manifest names unknown command {:?}", manifest.command))
        })?;
        if let Some(given) = &cli.command {
            if given.name() != command.name() {
                return Err(Error::Config(format!(
                    "manifest re-runs {:?} but {:?} was requested",
                    command.name(),
                    given.name()
                )));
            }
        }
        (manifest.config, command)
    } else {
        let command = cli.command.clone().ok_or_else(|| {
            Error::Config("no command given; see --help for the command list".into())
        })?;
        let config = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default().with_derived_seeds(),
        };
        (config, command)
    };

    if let Some(seed) = cli.seed {
        config.seed = seed;
        config = config.with_derived_seeds();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    let layout = OutLayout::new(config.out_dir.clone());

    match &command {
        Command::Synth => commands::cmd_synth(&config, &layout)?,
        Command::Split => commands::cmd_split(&config, &layout)?,
        Command::Detect { inputs } => {
            let failures = commands::cmd_detect(&config, &layout, inputs)?;
            if failures > 0 {
                return Ok(2);
            }
        }
        Command::TrainSeg => commands::cmd_train_seg(&config, &layout)?,
        Command::Segment => commands::cmd_segment(&config, &layout)?,
        Command::TrainClf => commands::cmd_train_clf(&config, &layout)?,
        Command::Classify => commands::cmd_classify(&config, &layout)?,
        Command::Evaluate => commands::cmd_evaluate(&config, &layout)?,
    }
    Ok(0)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap renders help to stdout and errors to stderr.
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
