use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use rovi_core::datamodel::{read_manifest, Stage};
use rovi_core::fixtures::{mock_config_toml, write_corpus};
use rovi_core::gateway::mock::{serve_mocks, MockFixtures};
use rovi_core::pipeline::config::parse_override;
use rovi_core::pipeline::{calibrate, Pipeline, PipelineConfig, RunOptions, StageReport};
use rovi_core::stats::{dataset_stats_of, per_detector_stats_of, StatusFilter};
use rovi_core::validate::{validate_manifest, ValidateOptions};

#[derive(Parser)]
#[command(
    name = "rovi",
    version,
    about = "Instance annotation pipeline: curate, re-caption, detect, resample, cross-check"
)]
struct Cli {
    /// More log output (-v debug, -vv trace). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a contiguous range of stages.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "curate", value_parser = parse_stage)]
        from: Stage,
        #[arg(long, default_value = "finalize", value_parser = parse_stage)]
        to: Stage,
        /// Worker threads; overrides the config file.
        #[arg(long)]
        workers: Option<usize>,
        /// Discard partial output written under a different configuration.
        #[arg(long)]
        force: bool,
        /// Dotted config override, e.g. --set detect.nms_threshold=0.5.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the stage reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Dataset and per-detector statistics of a manifest.
    Stats {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = StatusArg::Verified)]
        status: StatusArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Per-detector score thresholds that balance box counts on a sample.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        target_mean: f64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Serve deterministic mock model backends.
    MockServe {
        /// Fixture directory (mock.toml, chat/, detect/<id>/).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// 0 picks a free port.
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
    /// Check every manifest invariant.
    Validate {
        manifest: PathBuf,
        /// Take the NMS and layer thresholds from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic image corpus and a config that targets a mock service.
    InitDemo {
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value = "http://127.0.0.1:8089")]
        mock_url: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatusArg {
    Verified,
    Resampled,
    All,
}

impl From<StatusArg> for StatusFilter {
    fn from(s: StatusArg) -> Self {
        match s {
            StatusArg::Verified => StatusFilter::Verified,
            StatusArg::Resampled => StatusFilter::Resampled,
            StatusArg::All => StatusFilter::All,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let overrides = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    PipelineConfig::load(path, &overrides).with_context(|| format!("loading {}", path.display()))
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn print_reports(reports: &[StageReport]) {
    println!(
        "{:<11} {:>9} {:>8} {:>7} {:>9} {:>8} {:>7} {:>8}",
        "stage", "processed", "skipped", "failed", "rejected", "carried", "output", "secs"
    );
    for r in reports {
        println!(
            "{:<11} {:>9} {:>8} {:>7} {:>9} {:>8} {:>7} {:>8.2}",
            r.stage.as_str(),
            r.processed,
            r.skipped,
            r.failed,
            r.rejected,
            r.carried,
            r.output,
            r.wall_secs
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, from, to, workers, force, overrides, json } => {
            let cfg = load_config(&config, &overrides)?;
            let pipeline = Pipeline::new(cfg)?;
            let reports = pipeline.run(from, to, &RunOptions { workers, force, ..Default::default() })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print_reports(&reports);
            }
        }
        Command::Stats { manifest, status, format } => {
            let records = read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let filter = status.into();
            let dataset = dataset_stats_of(&records, filter)?;
            let detectors = per_detector_stats_of(&records, filter);
            match format {
                Format::Json => {
                    let v = serde_json::json!({ "dataset": dataset, "detectors": detectors });
                    println!("{}", serde_json::to_string_pretty(&v)?);
                }
                Format::Text => {
                    print!("{dataset}");
                    if !detectors.is_empty() {
                        println!();
                        println!(
                            "{:<10} {:>7} {:>9} {:>10} {:>10}",
                            "detector", "boxes", "share", "coverage", "unique"
                        );
                        for (id, d) in &detectors {
                            println!(
                                "{:<10} {:>7} {:>8.1}% {:>9.1}% {:>9.1}%",
                                id,
                                d.boxes,
                                100.0 * d.box_contribution,
                                100.0 * d.cat_coverage,
                                100.0 * d.unique_cat
                            );
                        }
                    }
                }
            }
        }
        Command::Calibrate { config, sample, target_mean, overrides } => {
            if target_mean.is_nan() || target_mean <= 0.0 {
                bail!("--target-mean must be positive");
            }
            let cfg = load_config(&config, &overrides)?;
            let thresholds = calibrate(&cfg, &sample, target_mean)?;
            // Printed as overrides ready to paste back into `run --set`.
            for (k, spec) in cfg.detect.detectors.iter().enumerate() {
                if let Some(t) = thresholds.get(&spec.id) {
                    println!("detect.detectors.{k}.threshold={t}  # {}", spec.id);
                }
            }
        }
        Command::MockServe { fixtures, port } => {
            let fx = match &fixtures {
                Some(dir) => MockFixtures::load(dir)?,
                None => MockFixtures::default(),
            };
            let server = serve_mocks(fx, port)?;
            println!("listening on {}", server.url());
            std::io::stdout().flush()?;
            tracing::info!(port = server.port(), "mock service up");
            server.wait();
        }
        Command::Validate { manifest, config } => {
            let opts = match config {
                Some(path) => {
                    let cfg = load_config(&path, &[])?;
                    ValidateOptions {
                        nms_threshold: cfg.detect.nms_threshold,
                        layer_iou_max: cfg.resample.layer_iou_max,
                    }
                }
                None => ValidateOptions::default(),
            };
            let report =
                validate_manifest(&manifest, &opts).with_context(|| format!("reading {}", manifest.display()))?;
            for v in &report.violations {
                println!("{v}");
            }
            if !report.is_ok() {
                eprintln!("{} violation(s) in {} record(s)", report.violations.len(), report.records);
                return Ok(ExitCode::from(2));
            }
            println!("ok: {} record(s)", report.records);
        }
        Command::InitDemo { dir, images, mock_url, seed } => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let dir = dir.canonicalize()?;
            let input = write_corpus(&dir, images, seed)?;
            let config = dir.join("rovi.toml");
            std::fs::write(&config, mock_config_toml(&dir.join("work"), &input, &mock_url, seed))?;
            println!("{}", config.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
