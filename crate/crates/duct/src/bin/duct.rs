//! Thin command-line front end over the library: dataset generation,
//! single runs, the ablation ladder, multi-order aggregation, and report
//! re-rendering.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime/numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duct_dil::data::{generate, save_dataset, BenchmarkSpec};
use duct_dil::error::DuctError;
use duct_dil::experiment::{
    run_ablation, run_orders, write_run_outputs, ExperimentConfig, ExperimentState, RunReport,
};

#[derive(Parser)]
#[command(
    name = "duct",
    about = "Domain-incremental learning with dual consolidation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate benchmark dataset files from a benchmark spec JSON.
    GenData { spec: PathBuf, dir: PathBuf },
    /// Run one experiment from a config JSON.
    Run { config: PathBuf },
    /// Run the ablation ladder (baseline through full method) on one config.
    Ablate { config: PathBuf },
    /// Run one config across several task orders and aggregate.
    Orders { config: PathBuf, orders: PathBuf },
    /// Re-render the CSV/JSON summaries from a finished run directory.
    Report { run_dir: PathBuf },
}

fn read_config(path: &Path) -> Result<ExperimentConfig, DuctError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DuctError::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn gen_data(spec_path: &Path, dir: &Path) -> Result<(), DuctError> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| DuctError::Config(format!("{}: {e}", spec_path.display())))?;
    let spec: BenchmarkSpec =
        serde_json::from_str(&text).map_err(|e| DuctError::Config(e.to_string()))?;
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let datasets = generate(&spec)?;
    for ds in &datasets {
        let stem = dir.join(format!("domain{}", ds.domain_index));
        save_dataset(&stem, ds, spec.num_classes)?;
    }
    std::fs::write(
        dir.join("benchmark.json"),
        serde_json::to_string_pretty(&spec).map_err(|e| DuctError::Config(e.to_string()))?,
    )?;
    println!("wrote {} domains to {}", datasets.len(), dir.display());
    Ok(())
}

fn run(config_path: &Path) -> Result<(), DuctError> {
    let cfg = read_config(config_path)?;
    let out_dir = cfg.output_dir.clone();
    let mut state = ExperimentState::new(cfg)?;
    while !state.is_done() {
        state.run_stage()?;
        println!(
            "stage {}/{} done ({})",
            state.stages_done(),
            state.num_stages(),
            state.config().method.name()
        );
    }
    let report = state.report()?;
    write_run_outputs(&out_dir, &report, &state)?;
    print_metrics(&report);
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn print_metrics(report: &RunReport) {
    let m = &report.metrics;
    let forgetting = m
        .forgetting
        .map(|f| format!("{f:.4}"))
        .unwrap_or_else(|| "n/a".to_string());
    println!(
        "method={} avg_acc={:.4} last_acc={:.4} forgetting={}",
        report.config.method.name(),
        m.average_accuracy,
        m.last_accuracy,
        forgetting
    );
}

fn ablate(config_path: &Path) -> Result<(), DuctError> {
    let cfg = read_config(config_path)?;
    let results = run_ablation(&cfg)?;
    println!("{:<18} {:>10} {:>10}", "method", "avg_acc", "last_acc");
    for (method, report) in &results {
        println!(
            "{:<18} {:>10.4} {:>10.4}",
            method.name(),
            report.metrics.average_accuracy,
            report.metrics.last_accuracy
        );
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let table: Vec<_> = results
        .iter()
        .map(|(m, r)| serde_json::json!({ "method": m.name(), "metrics": r.metrics }))
        .collect();
    std::fs::write(
        cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&table).map_err(|e| DuctError::Config(e.to_string()))?,
    )?;
    Ok(())
}

fn orders(config_path: &Path, orders_path: &Path) -> Result<(), DuctError> {
    let cfg = read_config(config_path)?;
    let text = std::fs::read_to_string(orders_path)
        .map_err(|e| DuctError::Config(format!("{}: {e}", orders_path.display())))?;
    let order_list: Vec<Vec<usize>> =
        serde_json::from_str(&text).map_err(|e| DuctError::Config(e.to_string()))?;
    let agg = run_orders(&cfg, &order_list)?;
    println!(
        "orders={} avg_acc={:.4}±{:.4} last_acc={:.4}±{:.4}",
        order_list.len(),
        agg.mean_average_accuracy,
        agg.std_average_accuracy,
        agg.mean_last_accuracy,
        agg.std_last_accuracy
    );
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(
        cfg.output_dir.join("orders.json"),
        serde_json::to_string_pretty(&agg).map_err(|e| DuctError::Config(e.to_string()))?,
    )?;
    Ok(())
}

fn report(run_dir: &Path) -> Result<(), DuctError> {
    let text = std::fs::read_to_string(run_dir.join("report.json"))
        .map_err(|e| DuctError::Config(format!("{}: {e}", run_dir.display())))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| DuctError::Config(e.to_string()))?;
    std::fs::write(
        run_dir.join("accuracy_matrix.csv"),
        report.accuracy.to_csv(),
    )?;
    print_metrics(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { spec, dir } => gen_data(spec, dir),
        Command::Run { config } => run(config),
        Command::Ablate { config } => ablate(config),
        Command::Orders {
            config,
            orders: orders_path,
        } => orders(config, orders_path),
        Command::Report { run_dir } => report(run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (DuctError::Config(_) | DuctError::Format { .. })) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
