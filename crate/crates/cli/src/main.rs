//! `dynamoe`: train, sweep and inspect mixture-of-experts schedule runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynamoe::experiment::{self, DatasetName, ExperimentConfig, FileStatus, Overrides, SweepAxis};
use dynamoe::routing::{compare_patterns, count_patterns_fixed};

#[derive(Parser)]
#[command(name = "dynamoe", version, about = "Mixture-of-experts schedule experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Run a family of variants and print a ranked comparison.
    Sweep(SweepArgs),
    /// Count reachable expert-activation patterns.
    Patterns(PatternArgs),
    /// Check dataset files for presence, integrity and published sizes.
    VerifyData(VerifyArgs),
    /// Print the tables of a finished run or sweep.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training samples.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Omit wall-clock fields so reruns are byte-identical.
    #[arg(long)]
    reproducible: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            output_dir: self.out.clone(),
            seed: self.seed,
            subset_size: self.subset,
            epochs: self.epochs,
            reproducible: self.reproducible,
        });
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated schedule kinds; `mlp` selects the dense baseline.
    #[arg(long, value_delimiter = ',', conflicts_with = "experts", required_unless_present = "experts")]
    schedules: Vec<String>,
    /// Comma-separated expert ranges such as `8-1,4-1`.
    #[arg(long, value_delimiter = ',')]
    experts: Vec<String>,
    /// Comma-separated seeds; results are averaged per variant.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PatternArgs {
    /// Experts in the layer (at most 64).
    #[arg(long)]
    n: usize,
    /// Percentile threshold for dynamic routing.
    #[arg(long, conflicts_with = "k")]
    tau: Option<f64>,
    /// Count fixed Top-K patterns only.
    #[arg(long)]
    k: Option<usize>,
    /// Top-K to compare dynamic routing against.
    #[arg(long, default_value_t = 2)]
    k_fixed: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Take the dataset name and files from a config.
    #[arg(long, conflicts_with_all = ["dataset", "dir"])]
    config: Option<PathBuf>,
    /// mnist, fashion_mnist or cifar10.
    #[arg(long, requires = "dir")]
    dataset: Option<String>,
    /// Directory holding the standard file names.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Treat sizes that differ from the published ones as failures.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or sweep output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Patterns(a) => cmd_patterns(a),
        Command::VerifyData(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let cfg = a.common.load()?;
    let summary = experiment::run(&cfg)?;
    print!("{}", summary.render());
    println!("\nartifacts in {}", cfg.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let s = s.trim().trim_start_matches(['E', 'e']);
    let (hi, lo) = s
        .split_once('-')
        .with_context(|| format!("expert range `{s}` should look like 8-1"))?;
    Ok((hi.parse()?, lo.parse()?))
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let cfg = a.common.load()?;
    let axis = if a.experts.is_empty() {
        SweepAxis::Schedules(a.schedules)
    } else {
        SweepAxis::Experts(a.experts.iter().map(|s| parse_pair(s)).collect::<Result<_>>()?)
    };
    let report = experiment::sweep(&cfg, &axis, &a.seeds)?;
    print!("{}", report.render());
    if report.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} member run(s) failed", report.failures.len());
        Ok(ExitCode::from(2))
    }
}

fn cmd_patterns(a: PatternArgs) -> Result<ExitCode> {
    if let Some(k) = a.k {
        let fixed = count_patterns_fixed(a.n, k)?;
        println!("n={} fixed(K={k})={fixed}", a.n);
        return Ok(ExitCode::SUCCESS);
    }
    let tau = a.tau.unwrap_or(0.7);
    let c = compare_patterns(a.n, tau, a.k_fixed)?;
    println!(
        "n={} tau={tau} K_max={} dynamic={} fixed(K={})={} ratio≈{:.2} bound={:.1}",
        c.n, c.k_max, c.dynamic, c.k_fixed, c.fixed, c.ratio, c.lower_bound
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let (name, files) = if let Some(path) = &a.config {
        let cfg = ExperimentConfig::load(path)?;
        (cfg.dataset.name, experiment::dataset_files(&cfg.dataset))
    } else {
        let (Some(name), Some(dir)) = (&a.dataset, &a.dir) else {
            bail!("pass either --config or --dataset with --dir");
        };
        let name = match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "mnist" => DatasetName::Mnist,
            "fashion_mnist" => DatasetName::FashionMnist,
            "cifar10" | "cifar_10" => DatasetName::Cifar10,
            other => bail!("unknown dataset `{other}`"),
        };
        let files = match name {
            DatasetName::Cifar10 => experiment::published_sizes(name)
                .keys()
                .map(|f| dir.join(f))
                .collect(),
            _ => ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
                .iter()
                .map(|f| {
                    let gz = dir.join(format!("{f}.gz"));
                    if gz.exists() { gz } else { dir.join(f) }
                })
                .collect(),
        };
        (name, files)
    };

    let mut failed = 0;
    for check in experiment::verify_data(name, &files) {
        let records = check.records.map(|n| format!(" ({n} records)")).unwrap_or_default();
        let (tag, bad) = match &check.status {
            FileStatus::Ok => ("ok".to_string(), false),
            FileStatus::Unlisted => ("ok, no published size".to_string(), false),
            FileStatus::SizeMismatch { expected, actual } => (
                format!("size {actual} differs from published {expected}"),
                a.strict,
            ),
            FileStatus::Missing => ("missing".to_string(), true),
            FileStatus::Corrupt(e) => (format!("corrupt: {e}"), true),
        };
        failed += usize::from(bad);
        println!("{:<6} {}{records}: {tag}", if bad { "FAIL" } else { "PASS" }, check.path.display());
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    print!("{}", experiment::report(&a.out)?);
    Ok(ExitCode::SUCCESS)
}
