//! `flowsynth`: generate, validate, evaluate and preview synthetic optical
//! flow datasets.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowsynth_core::io::FlowFormat;
use flowsynth_core::metrics::OutlierRule;
use flowsynth_core::pipeline::{
    bench, evaluate_dirs, generate_dataset, validate_dataset, write_preview, BenchConfig, BenchReport,
};
use flowsynth_core::Error;

use config::{load_run_config, ConfigError};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "flowsynth", version, about = "Synthetic optical flow datasets from single images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset from a directory of images.
    Generate(GenerateArgs),
    /// Re-check every sample of a dataset with the warp-back audit.
    Validate(ValidateArgs),
    /// Score predicted flow against ground truth.
    Eval(EvalArgs),
    /// Render one sample as a side-by-side montage with its colorized flow.
    Preview(PreviewArgs),
    /// Measure synthesis throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Flo,
    Kitti,
}

impl From<FormatArg> for FlowFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Flo => FlowFormat::Flo,
            FormatArg::Kitti => FlowFormat::Kitti,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    /// Outlier when the error exceeds 3 px and 5% of the true magnitude.
    Both,
    /// Outlier when either bound is exceeded.
    Either,
}

/// Options shared by `generate` and `bench`; unset values fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Args)]
struct RunArgs {
    /// Directory of source images.
    #[arg(long, env = "FLOWSYNTH_INPUT")]
    input: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, env = "FLOWSYNTH_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, env = "FLOWSYNTH_COUNT")]
    count: Option<usize>,
    #[arg(long, env = "FLOWSYNTH_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "FLOWSYNTH_WORKERS")]
    workers: Option<usize>,
    /// TOML file with run settings; `[synthesis]` and `[augment]` tables are optional.
    #[arg(long, env = "FLOWSYNTH_CONFIG")]
    config: Option<PathBuf>,
    /// Flow file formats; repeat or separate with commas.
    #[arg(long, env = "FLOWSYNTH_FORMAT", value_enum, value_delimiter = ',')]
    format: Vec<FormatArg>,
    /// Directory for cached segmentation maps.
    #[arg(long, env = "FLOWSYNTH_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Measure throughput with this configuration instead of writing files.
    #[arg(long, env = "FLOWSYNTH_BENCH")]
    bench: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Manifest file or dataset directory.
    #[arg(long, env = "FLOWSYNTH_INPUT")]
    input: PathBuf,
    /// Write the full audit report as JSON.
    #[arg(long, env = "FLOWSYNTH_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, env = "FLOWSYNTH_WORKERS")]
    workers: Option<usize>,
    /// Supplies audit thresholds.
    #[arg(long, env = "FLOWSYNTH_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted flow files.
    #[arg(long, env = "FLOWSYNTH_INPUT")]
    input: PathBuf,
    /// Directory of ground truth flow files.
    #[arg(long, env = "FLOWSYNTH_GT")]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "both", env = "FLOWSYNTH_RULE")]
    rule: RuleArg,
    /// Write the report as JSON instead of printing it.
    #[arg(long, env = "FLOWSYNTH_OUTPUT")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    /// Manifest file or dataset directory.
    #[arg(long, env = "FLOWSYNTH_INPUT")]
    input: PathBuf,
    #[arg(long)]
    id: String,
    /// PNG to write.
    #[arg(long, env = "FLOWSYNTH_OUTPUT")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1280)]
    width: usize,
    #[arg(long, default_value_t = 544)]
    height: usize,
    /// Ignored; accepted so `bench --bench` and `generate --bench` agree.
    #[arg(long, hide = true)]
    bench: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else if matches!(e, Error::InvalidParameter(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(m) => CliError::Io(m),
            ConfigError::Invalid(m) => CliError::Usage(m),
        }
    }
}

fn manifest_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(flowsynth_core::io::MANIFEST_FILE)
    } else {
        input.to_path_buf()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn print_bench(r: &BenchReport) {
    println!(
        "bench {}x{}: {} samples on {} worker(s) in {:.2} s",
        r.size.width, r.size.height, r.samples, r.workers, r.synthesis_secs
    );
    println!(
        "throughput {:.2} samples/s, {:.2} samples/s/core ({} core(s))",
        r.samples_per_sec, r.samples_per_sec_per_core, r.cores
    );
    println!(
        "segmentation {:.2} s/source (cached per source, not in throughput)",
        r.segmentation_secs_per_source
    );
    println!(
        "augmentation {:.3} s/sample, encoding {:.3} s/sample (measured separately)",
        r.augment_secs_per_sample, r.encode_secs_per_sample
    );
}

fn run_bench(run: &RunArgs, size: flowsynth_core::io::Size) -> Result<(), CliError> {
    let cfg = load_run_config(run.config.as_deref())?;
    let config = BenchConfig {
        size,
        samples: run.count.unwrap_or(BenchConfig::default().samples),
        workers: run.workers.unwrap_or(cfg.workers),
        seed: run.seed.unwrap_or(cfg.seed),
        synthesis: cfg.synthesis,
        input: run.input.clone(),
        ..BenchConfig::default()
    };
    print_bench(&bench(&config)?);
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let run = &args.run;
    if args.bench {
        let cfg = load_run_config(run.config.as_deref())?;
        let size = cfg.target_size.unwrap_or(BenchConfig::default().size);
        return run_bench(run, size);
    }
    let mut cfg = load_run_config(run.config.as_deref())?;
    if let Some(v) = &run.input {
        cfg.input = v.clone();
    }
    if let Some(v) = &run.output {
        cfg.output = v.clone();
    }
    if let Some(v) = run.count {
        cfg.count = v;
    }
    if let Some(v) = run.seed {
        cfg.seed = v;
    }
    if let Some(v) = run.workers {
        cfg.workers = v;
    }
    if !run.format.is_empty() {
        cfg.formats = run.format.iter().map(|&f| f.into()).collect();
        cfg.formats.dedup();
    }
    if let Some(v) = &run.cache_dir {
        cfg.cache_dir = Some(v.clone());
    }
    if cfg.input.as_os_str().is_empty() || cfg.output.as_os_str().is_empty() {
        return Err(CliError::Usage("generate needs --input and --output".into()));
    }
    let summary = generate_dataset(&cfg)?;
    println!(
        "wrote {} of {} samples to {} in {:.1} s ({:.2} samples/s)",
        summary.written,
        cfg.count,
        cfg.output.display(),
        summary.elapsed_secs,
        summary.samples_per_sec
    );
    if summary.failed.is_empty() {
        Ok(())
    } else {
        for f in &summary.failed {
            eprintln!("sample {:06} failed: {}", f.index, f.error);
        }
        Err(CliError::Data(format!("{} sample(s) failed", summary.failed.len())))
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let cfg = load_run_config(args.config.as_deref())?;
    let workers = args.workers.unwrap_or(cfg.workers);
    let path = manifest_path(&args.input);
    let report = flowsynth_core::par::with_workers(workers, || validate_dataset(&path, &cfg.audit))?;
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    println!("{}/{} samples pass the audit", report.n_passed, report.samples.len());
    if report.passed {
        return Ok(());
    }
    for s in report.failures() {
        match (&s.report, &s.error) {
            (_, Some(e)) => eprintln!("FAIL {}: {e}", s.id),
            (Some(r), None) => eprintln!("FAIL {}: mean {:.4}, p99 {:.4}", s.id, r.mean, r.p99),
            (None, None) => eprintln!("FAIL {}", s.id),
        }
    }
    Err(CliError::Data(format!(
        "{} sample(s) failed validation",
        report.samples.len() - report.n_passed
    )))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let rule = match args.rule {
        RuleArg::Both => OutlierRule::Both,
        RuleArg::Either => OutlierRule::Either,
    };
    let report = evaluate_dirs(&args.input, &args.gt, rule)?;
    match &args.output {
        Some(out) => write_json(out, &report)?,
        None => {
            for s in &report.per_sample {
                println!("{}: EPE {:.4}, F1-all {:.2}%", s.name, s.epe, s.f1_all);
            }
        }
    }
    println!(
        "EPE {:.4}, F1-all {:.2}% over {} pixels",
        report.epe_mean, report.f1_all, report.n_valid
    );
    Ok(())
}

fn cmd_preview(args: &PreviewArgs) -> Result<(), CliError> {
    write_preview(&manifest_path(&args.input), &args.id, &args.output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Preview(a) => cmd_preview(a),
        Command::Bench(a) => run_bench(&a.run, flowsynth_core::io::Size::new(a.width, a.height)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FLOWSYNTH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
