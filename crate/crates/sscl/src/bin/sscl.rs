use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sscl::config;
use sscl::data::{gen_synthetic_samples, month_name, write_csv_dataset, StreamConfig, SYNTHETIC_START};
use sscl::error::Error;
use sscl::metrics::AUT_COLUMNS;
use sscl::report::{self, Format};
use sscl::trainer::{run_experiment_in, write_run_dir, StreamSource};

/// Semi-supervised continual learning experiments on drifting binary streams.
#[derive(Debug, Parser)]
#[command(name = "sscl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic drifting stream as a CSV dataset.
    Gen(GenArgs),
    /// Run an experiment and write its run directory.
    Run(RunArgs),
    /// Print the AUT table of one or more run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Experiment config whose `stream.*` settings describe the stream.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream seed; overrides `stream.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of monthly tasks.
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Samples per task.
    #[arg(long)]
    samples_per_task: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Benign:malware ratio, e.g. `9:1`.
    #[arg(long)]
    class_imbalance: Option<String>,
    /// Per-task translation of each class mean.
    #[arg(long)]
    shift: Option<f64>,
    /// Per-feature standard deviation around the class mean.
    #[arg(long)]
    spread: Option<f64>,
    /// Distance between the class means at the first task.
    #[arg(long)]
    separation: Option<f64>,
    /// Cosine between the malware drift and the malware-to-benign axis.
    #[arg(long)]
    malware_drift_alignment: Option<f64>,
    /// Share of the benign drift direction in the rest of the malware drift.
    #[arg(long)]
    drift_coupling: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create or overwrite.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; overrides `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories, each holding a `metrics.csv`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Table format.
    #[arg(long, value_enum, default_value = "markdown")]
    format: ReportFormat,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigParse { .. } | Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn stream_config(args: &GenArgs) -> Result<StreamConfig, Failure> {
    let mut s = match &args.config {
        Some(path) => match config::parse(&read_config(path)?)?.stream {
            StreamSource::Synthetic(s) => s,
            StreamSource::Csv(_) => {
                return Err(Failure::Usage("config describes a csv stream, not a synthetic one".into()))
            }
        },
        None => StreamConfig::default(),
    };
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.n_tasks {
        s.n_tasks = v;
        s.seen_tasks = s.seen_tasks.min(v);
    }
    if let Some(v) = args.samples_per_task {
        s.samples_per_task = v;
    }
    if let Some(v) = args.feature_dim {
        s.feature_dim = v;
    }
    if let Some(v) = &args.class_imbalance {
        let parsed = v
            .split_once(':')
            .and_then(|(b, m)| Some((b.trim().parse().ok()?, m.trim().parse().ok()?)));
        s.class_imbalance =
            parsed.ok_or_else(|| Failure::Usage(format!("--class-imbalance expects b:m, got {v:?}")))?;
    }
    if let Some(v) = args.shift {
        s.shift = v;
    }
    if let Some(v) = args.spread {
        s.spread = v;
    }
    if let Some(v) = args.separation {
        s.separation = v;
    }
    if let Some(v) = args.malware_drift_alignment {
        s.malware_drift_alignment = v;
    }
    if let Some(v) = args.drift_coupling {
        s.drift_coupling = v;
    }
    s.validate()?;
    Ok(s)
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let s = stream_config(&args)?;
    let samples = gen_synthetic_samples(&s)?;
    let months: Vec<String> = (0..s.n_tasks).map(|t| month_name(SYNTHETIC_START, t)).collect();
    let tmp = args.out.with_extension("csv.partial");
    let written = File::create(&tmp)
        .map_err(Error::from)
        .and_then(|f| write_csv_dataset(f, &samples, &months, s.feature_dim))
        .and_then(|()| std::fs::rename(&tmp, &args.out).map_err(Error::from));
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(Failure::Runtime(format!("writing {}: {e}", args.out.display())));
    }
    println!("wrote {} rows over {} tasks to {}", samples.len(), s.n_tasks, args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = config::parse(&read_config(&args.config)?)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
        cfg.validate()?;
    }
    log::info!("running {} over seeds {:?}", cfg.name, cfg.seeds);
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let run = run_experiment_in(&cfg, Some(&args.out))?;
    write_run_dir(&args.out, &cfg, &run)?;
    let mut out = std::io::stdout().lock();
    let mean = run.mean.values();
    let std = run.std.values();
    for (k, col) in AUT_COLUMNS.iter().enumerate() {
        let _ = writeln!(out, "{col:<15} {:.4} ± {:.4}", mean[k], std[k]);
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let rows = report::collect(&args.runs)?;
    let format = match args.format {
        ReportFormat::Csv => Format::Csv,
        ReportFormat::Markdown => Format::Markdown,
    };
    report::render(std::io::stdout().lock(), &rows, format)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
