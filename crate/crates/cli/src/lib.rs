//! `helios` command-line pipeline: synthetic data, dataset building, model
//! training, evaluation reports and charts.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;
use manifest::Manifest;
use pipeline::ChannelOverrides;

#[derive(Debug, Parser)]
#[command(name = "helios", version, about = "Satellite-driven solar nowcasting pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic moving-cloud scene as site cubes.
    SynthGen {
        /// Output directory; defaults to the configured data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build sequence samples and the day-based fold split.
    DatasetBuild,
    /// Train one channel model family on a fold.
    TrainChannel {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Output file stem (defaults to the model name).
        #[arg(long)]
        name: Option<String>,
        /// Use only the last `steps` frames of each history.
        #[arg(long)]
        steps: Option<usize>,
        /// Crop windows to this edge.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train per-site power regressors on a fold.
    TrainNowcast {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Channel-model report on the fold's test days; with --four-way also the power comparison.
    Evaluate {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        four_way: bool,
    },
    /// Re-render charts from the report CSVs.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::DatasetBuild => "dataset-build",
            Command::TrainChannel { .. } => "train-channel",
            Command::TrainNowcast { .. } => "train-nowcast",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
        }
    }
}

/// Load, override, resolve and validate the configuration.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &cli.model_dir {
        cfg.paths.model_dir = d.clone();
    }
    if let Some(d) = &cli.report_dir {
        cfg.paths.report_dir = d.clone();
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Cap rayon workers from `HELIOS_THREADS`; later calls keep the first pool.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("HELIOS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("HELIOS_THREADS must be a positive integer, got '{v}'")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn display(p: &std::path::Path) -> String {
    p.display().to_string()
}

/// Run one parsed command; returns the human-readable summary lines.
pub fn execute(cli: &Cli) -> Result<Vec<String>, CliError> {
    init_threads()?;
    let cfg = effective_config(cli)?;
    let start = Instant::now();
    let mut lines = Vec::new();
    let (dir, outputs) = match &cli.command {
        Command::SynthGen { out } => {
            let out = out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let dirs = pipeline::synth_gen(&cfg, &out)?;
            lines.push(format!("wrote {} site cubes to {}", dirs.len(), out.display()));
            (out, dirs.iter().map(|d| display(d)).collect())
        }
        Command::DatasetBuild => {
            let s = pipeline::dataset_build(&cfg)?;
            lines.push(format!("{} samples over {} days from {} sites", s.samples, s.days, s.sites));
            let dir = cfg.paths.data_dir.join("dataset");
            (dir, vec!["samples.bin".into(), "samples.json".into(), "split.json".into()])
        }
        Command::TrainChannel {
            model,
            fold,
            name,
            steps,
            window,
        } => {
            let ov = ChannelOverrides {
                name: name.clone(),
                steps: *steps,
                window: *window,
            };
            let p = pipeline::train_channel(&cfg, model, *fold, &ov)?;
            lines.push(format!("saved {}", p.display()));
            (pipeline::fold_model_dir(&cfg, *fold), vec![display(&p)])
        }
        Command::TrainNowcast { fold } => {
            let d = pipeline::train_nowcast(&cfg, *fold)?;
            lines.push(format!("saved power regressors to {}", d.display()));
            (d.clone(), vec![display(&d)])
        }
        Command::Evaluate { fold, four_way } => {
            let dir = pipeline::fold_report_dir(&cfg, *fold);
            let mut outs = Vec::new();
            let r = pipeline::evaluate_channels(&cfg, *fold)?;
            lines.push(format!("channel report: {} rows", r.rows.len()));
            outs.push(pipeline::CHANNEL_REPORT.to_string());
            if *four_way {
                let r = pipeline::evaluate_four_way(&cfg, *fold)?;
                lines.push(format!("four-way report: {} rows", r.rows.len()));
                outs.push(pipeline::FOUR_WAY_REPORT.to_string());
            }
            (dir, outs)
        }
        Command::Report => {
            let charts = pipeline::report(&cfg)?;
            lines.push(format!("rendered {} charts", charts.len()));
            (cfg.paths.report_dir.clone(), charts.iter().map(|p| display(p)).collect())
        }
    };
    Manifest::new(cli.command.name(), &cfg, start.elapsed().as_secs_f64(), outputs).write(&dir)?;
    Ok(lines)
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
