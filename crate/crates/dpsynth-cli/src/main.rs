//! Command line front end for the release pipeline.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 the selection
//! loop stopped without an acceptable candidate, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpsynth::corpus::{self, CorpusSpec};
use dpsynth::data::ingest_csv;
use dpsynth::dp::NoiseSource;
use dpsynth::pipeline::{
    prepare_base, run_metrics, run_release, tune_on_public, write_release_csv,
    PipelineConfig, ReleaseOutcome,
};
use dpsynth::schema::Schema;
use dpsynth::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NO_RELEASE: u8 = 3;

#[derive(Parser)]
#[command(name = "dpsynth", version, about = "Differentially private synthetic microdata releases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a sensitive CSV and write the release.
    Release {
        /// Schema TOML: columns, bounds, binning alternatives.
        #[arg(long)]
        schema: PathBuf,
        /// Pipeline TOML: budgets, criteria, cleaning, search space.
        #[arg(long)]
        config: PathBuf,
        /// Input CSV with a header row.
        #[arg(long)]
        input: PathBuf,
        /// Directory for release.csv, metrics.json, audit.log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Seed for reproducible demo runs. Leave unset for a real release:
        /// noise then comes from the operating system.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate per-configuration pass rates on a public stand-in dataset.
    Tune {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Public CSV the trials run against.
        #[arg(long)]
        input: PathBuf,
        /// Trials per configuration.
        #[arg(long, default_value_t = 20)]
        trials: u64,
        /// Keep configurations whose pass rate reaches this floor.
        #[arg(long, default_value_t = 0.10)]
        floor: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Where to write the JSON report (stdout if unset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a schema and pipeline config without touching data.
    ValidateConfig {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretty-print a metrics.json produced by `release`.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Generate a synthetic birth-registry-shaped CSV for demos and tests.
    GenCorpus {
        #[arg(long, default_value_t = 10_000)]
        rows: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fraction of rows corrupted so cleaning has work to do.
        #[arg(long, default_value_t = 0.0)]
        dirty_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> dpsynth::Result<ExitCode> {
    match command {
        Command::Release {
            schema,
            config,
            input,
            out_dir,
            seed,
        } => release(&schema, &config, &input, &out_dir, seed),
        Command::Tune {
            schema,
            config,
            input,
            trials,
            floor,
            seed,
            out,
        } => tune(&schema, &config, &input, trials, floor, seed, out.as_deref()),
        Command::ValidateConfig { schema, config } => {
            let schema = Schema::load(&schema)?;
            let pipeline = PipelineConfig::load(&config)?;
            pipeline.validate(&schema)?;
            println!("configuration is valid");
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { metrics } => report(&metrics),
        Command::GenCorpus {
            rows,
            seed,
            dirty_fraction,
            out,
        } => {
            if !(0.0..=1.0).contains(&dirty_fraction) {
                return Err(Error::Argument(format!(
                    "dirty_fraction must lie in [0, 1], got {dirty_fraction}"
                )));
            }
            let spec = CorpusSpec {
                rows,
                seed,
                dirty_fraction,
            };
            corpus::write_csv(&out, &spec)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn release(
    schema_path: &std::path::Path,
    config_path: &std::path::Path,
    input: &std::path::Path,
    out_dir: &std::path::Path,
    seed: Option<u64>,
) -> dpsynth::Result<ExitCode> {
    let schema = Schema::load(schema_path)?;
    let pipeline = PipelineConfig::load(config_path)?;
    pipeline.validate(&schema)?;
    let raw = ingest_csv(input, &schema)?;
    let mut noise = match seed {
        Some(s) => {
            eprintln!("note: seeded run, for demos only");
            NoiseSource::seeded_for_test(s)
        }
        None => NoiseSource::secure(),
    };

    match run_release(&schema, &raw, &pipeline, &mut noise)? {
        ReleaseOutcome::Released(bundle) => {
            std::fs::create_dir_all(out_dir)?;
            write_release_csv(out_dir.join("release.csv"), &bundle.released, &mut noise)?;
            let metrics = run_metrics(&bundle);
            std::fs::write(
                out_dir.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)
                    .map_err(|e| Error::Data(e.to_string()))?,
            )?;
            let mut audit = String::new();
            audit.push_str(&format!(
                "input rows: {}, kept after cleaning: {}\n",
                bundle.filter.rows_in, bundle.filter.rows_kept
            ));
            for (rule, dropped) in &bundle.filter.dropped_by_rule {
                if *dropped > 0 {
                    audit.push_str(&format!("  dropped {dropped}: {rule}\n"));
                }
            }
            for line in &bundle.audit {
                audit.push_str(line);
                audit.push('\n');
            }
            std::fs::write(out_dir.join("audit.log"), audit)?;

            println!("released {} records after {} trials", bundle.released.n(), bundle.trials);
            println!("configuration: {}", bundle.configuration.id());
            for rep in &bundle.reports {
                println!(
                    "  {} {}: released {:.6} vs threshold {:.6}",
                    if rep.pass { "pass" } else { "FAIL" },
                    rep.label,
                    rep.released,
                    rep.threshold
                );
            }
            println!(
                "epsilon accounted: {} (spent without the selection factor: {})",
                metrics.epsilon_accounted, metrics.epsilon_spent
            );
            println!("outputs in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        ReleaseOutcome::NoRelease {
            status,
            trials,
            audit,
        } => {
            eprintln!("no release: {status:?} after {trials} trials");
            for line in audit.iter().rev().take(5).rev() {
                eprintln!("  {line}");
            }
            Ok(ExitCode::from(EXIT_NO_RELEASE))
        }
    }
}

fn tune(
    schema_path: &std::path::Path,
    config_path: &std::path::Path,
    input: &std::path::Path,
    trials: u64,
    floor: f64,
    seed: u64,
    out: Option<&std::path::Path>,
) -> dpsynth::Result<ExitCode> {
    let schema = Schema::load(schema_path)?;
    let pipeline = PipelineConfig::load(config_path)?;
    let raw = ingest_csv(input, &schema)?;
    let (base, filter) = prepare_base(&schema, &raw, &pipeline.cleaning)?;
    eprintln!(
        "tuning on {} public records ({} cleaned away), {} trials per configuration",
        base.n(),
        filter.rows_in - filter.rows_kept,
        trials
    );
    let report = tune_on_public(&schema, &base, &pipeline, trials, floor, seed)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(e.to_string()))?;
    match out {
        Some(path) => {
            std::fs::write(path, json)?;
            eprintln!("wrote report to {}", path.display());
        }
        None => println!("{json}"),
    }
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| b.pass_rate.total_cmp(&a.pass_rate));
    for row in rows.iter().take(10) {
        eprintln!(
            "  {:>5.2} {}",
            row.pass_rate,
            row.configuration.id()
        );
    }
    eprintln!(
        "{} of {} configurations reach the {floor} pass-rate floor",
        report.allow_list.len(),
        report.rows.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn report(metrics: &std::path::Path) -> dpsynth::Result<ExitCode> {
    let text = std::fs::read_to_string(metrics)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
    let get = |k: &str| value.get(k).cloned().unwrap_or(serde_json::Value::Null);
    println!("records: {}", get("n"));
    println!("trials: {}", get("trials"));
    println!(
        "epsilon accounted: {}, spent: {}",
        get("epsilon_accounted").as_str().unwrap_or("?"),
        get("epsilon_spent").as_str().unwrap_or("?")
    );
    if let Some(criteria) = value.get("criteria").and_then(|c| c.as_array()) {
        for rep in criteria {
            let pass = rep.get("pass").and_then(|p| p.as_bool()).unwrap_or(false);
            println!(
                "  {} {}: released {} vs threshold {}",
                if pass { "pass" } else { "FAIL" },
                rep.get("label").and_then(|l| l.as_str()).unwrap_or("?"),
                rep.get("released").cloned().unwrap_or(serde_json::Value::Null),
                rep.get("threshold").cloned().unwrap_or(serde_json::Value::Null)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
