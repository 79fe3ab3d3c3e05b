//! Command-line front end: spec validation, true estimand values, dataset
//! export, and the full simulation study.
//!
//! Exit codes: 0 success, 1 warnings under `--strict`, 2 errors.

mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use estilab_core::analysis::{
    run_study, write_replicates_csv, write_summary_csv, StudyError, StudyOptions,
};
use estilab_core::config::Scenario;
use estilab_core::dataset::write_patient_csv;
use estilab_core::oracle::truths_for_spec;
use estilab_core::plan::{parse_spec, validate_spec, EstimandSpec, ValidationReport};
use estilab_core::sim::generate_replicate;
use manifest::{sha256_file, RunManifest};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Simulation laboratory for trial estimands with intercurrent events.
#[derive(Parser)]
#[command(name = "estilab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and semantically validate an estimand spec file.
    ValidateSpec(ValidateArgs),
    /// Compute true estimand values by oracle evaluation.
    Truth(TruthArgs),
    /// Run the simulation study: simulate, impute, analyze, pool, compare.
    Simulate(SimulateArgs),
    /// Write one replicate's patient-visit data as CSV.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Estimand spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Scenario config; enables the scenario-dependent rules (R4, R5).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit nonzero when the spec carries warnings.
    #[arg(long)]
    strict: bool,
    /// Emit the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TruthArgs {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    /// Estimand spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Oracle sample size.
    #[arg(long, default_value_t = 1_000_000)]
    n_oracle: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    /// Estimand spec file(s); repeat for several estimands per run.
    #[arg(long, required = true)]
    spec: Vec<PathBuf>,
    /// Number of simulated trial replicates.
    #[arg(long, default_value_t = 1000)]
    replicates: u64,
    /// Completed copies per replicate.
    #[arg(long, default_value_t = 20)]
    imputations: usize,
    /// Oracle sample size for the true estimand values.
    #[arg(long, default_value_t = 1_000_000)]
    n_oracle: usize,
    /// Overrides the scenario seed; all randomness flows from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (default: $ESTILAB_OUT or ./estilab-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-replicate results as CSV.
    #[arg(long)]
    keep_replicates: bool,
    /// Fraction of replicates allowed to fail before aborting.
    #[arg(long, default_value_t = 0.01)]
    failure_budget: f64,
}

#[derive(Args)]
struct DatasetArgs {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    /// Replicate index to generate.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ValidateSpec(args) => cmd_validate(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Dataset(args) => cmd_dataset(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_spec(path: &Path) -> Result<EstimandSpec> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("failed to read spec {}", path.display()))?;
    parse_spec(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut s = Scenario::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

#[derive(Serialize)]
struct JsonReport<'a> {
    errors: &'a [estilab_core::plan::Finding],
    warnings: &'a [estilab_core::plan::Finding],
    clean: bool,
}

fn print_report(report: &ValidationReport, json: bool) {
    if json {
        let payload = JsonReport {
            errors: &report.errors,
            warnings: &report.warnings,
            clean: report.is_clean(),
        };
        println!("{}", serde_json::to_string_pretty(&payload).unwrap());
        return;
    }
    for f in &report.errors {
        println!("error: {f}");
    }
    for f in &report.warnings {
        println!("warning: {f}");
    }
    if report.is_clean() {
        println!("spec is valid: no errors, no warnings");
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let spec = match fs::read_to_string(&args.spec) {
        Ok(text) => match parse_spec(&text) {
            Ok(spec) => spec,
            Err(e) => {
                eprintln!("error: {}: {e}", args.spec.display());
                return Ok(ExitCode::from(2));
            }
        },
        Err(e) => {
            eprintln!("error: failed to read {}: {e}", args.spec.display());
            return Ok(ExitCode::from(2));
        }
    };
    let scenario = match &args.config {
        Some(path) => Some(load_scenario(path, None)?),
        None => None,
    };
    let report = validate_spec(&spec, scenario.as_ref());
    print_report(&report, args.json);
    if !report.errors.is_empty() {
        Ok(ExitCode::from(2))
    } else if args.strict && !report.warnings.is_empty() {
        Ok(ExitCode::from(1))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn cmd_truth(args: TruthArgs) -> Result<ExitCode> {
    let scenario = load_scenario(&args.config, args.seed)?;
    let spec = load_spec(&args.spec)?;
    let report = validate_spec(&spec, Some(&scenario));
    if !report.errors.is_empty() {
        for f in &report.errors {
            eprintln!("error: {f}");
        }
        return Ok(ExitCode::from(2));
    }
    let truths = truths_for_spec(&scenario, &spec, args.n_oracle, scenario.seed)?;
    let json = serde_json::to_string_pretty(&truths)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => print!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dataset(args: DatasetArgs) -> Result<ExitCode> {
    let scenario = load_scenario(&args.config, args.seed)?;
    let patients = generate_replicate(&scenario, args.replicate);
    let mut buf = Vec::new();
    write_patient_csv(&mut buf, args.replicate, &patients)?;
    match &args.out {
        Some(path) => fs::write(path, buf)?,
        None => print!("{}", String::from_utf8(buf).unwrap()),
    }
    Ok(ExitCode::SUCCESS)
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("ESTILAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("estilab-out"))
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let scenario = load_scenario(&args.config, args.seed)?;
    let mut specs = Vec::new();
    for path in &args.spec {
        let spec = load_spec(path)?;
        let report = validate_spec(&spec, Some(&scenario));
        if !report.errors.is_empty() {
            for f in &report.errors {
                eprintln!("error: {}: {f}", path.display());
            }
            bail!("spec validation failed; aborting before any output");
        }
        for f in &report.warnings {
            eprintln!("warning: {}: {f}", path.display());
        }
        specs.push(spec);
    }

    let out_dir = args.out.clone().unwrap_or_else(default_out_dir);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    // The manifest is written before any output it describes.
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: args.config.display().to_string(),
        config_sha256: sha256_file(&args.config)?,
        spec_paths: args.spec.iter().map(|p| p.display().to_string()).collect(),
        spec_sha256: args.spec.iter().map(|p| sha256_file(p)).collect::<Result<_, _>>()?,
        seed: scenario.seed,
        replicates: args.replicates,
        imputations: args.imputations,
        n_oracle: args.n_oracle,
        out_dir: out_dir.display().to_string(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let opts = StudyOptions {
        replicates: args.replicates,
        imputations: args.imputations,
        n_oracle: args.n_oracle,
        failure_budget: args.failure_budget,
    };
    let output = match run_study(&scenario, &specs, &opts) {
        Ok(output) => output,
        Err(err @ StudyError::FailureBudget { .. }) => {
            // Leave a marker so partial output directories are recognizable.
            fs::write(
                out_dir.join("partial_results.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "aborted": true,
                    "reason": err.to_string(),
                }))? + "\n",
            )?;
            eprintln!("error: {err}");
            return Ok(ExitCode::from(2));
        }
        Err(err) => return Err(err.into()),
    };

    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&output.summary)? + "\n")?;
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &output.summary)?;
    fs::write(out_dir.join("summary.csv"), csv)?;
    fs::write(out_dir.join("truths.json"), serde_json::to_string_pretty(&output.truths)? + "\n")?;
    if args.keep_replicates {
        let mut csv = Vec::new();
        write_replicates_csv(&mut csv, &output.replicates)?;
        fs::write(out_dir.join("replicates.csv"), csv)?;
    }

    for e in &output.summary.estimands {
        println!(
            "{}: truth {:.6}  bias {:+.6}  emp se {:.6}  coverage {:.3}  rejection {:.3}  (R={} used, {} failed)",
            e.estimand,
            e.truth,
            e.bias,
            e.empirical_se,
            e.coverage,
            e.rejection_rate,
            e.n_replicates,
            output.summary.n_failed,
        );
    }
    Ok(ExitCode::SUCCESS)
}
