use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ncflow::dataset::{
    generate_separable, read_csv, read_manifest, validate_separability, write_manifest, GeneratorConfig,
};
use ncflow::experiment::{
    resolve_out_dir, run_experiment, run_sweep, sweep_cells, verify_run, ExperimentConfig, ExperimentError,
    RunManifest, SweepSpec, VerifySpec,
};
use ncflow::margins::margin_certificate;

#[derive(Parser)]
#[command(
    name = "ncflow",
    version,
    about = "Gradient-flow simulator and Neural Collapse verifier"
)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "NCFLOW_LOG")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Recompute certificates from a run directory and compare with its manifest.
    Verify {
        run_dir: PathBuf,
        /// TOML file with a [verify] table replacing the stored tolerances.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a parameter grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// TOML file with a [sweep] table; defaults to the config's own.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Generate or inspect datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's, else $NCFLOW_OUT/<name>, else runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the resolved plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate an orthogonally separable dataset from a generator config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dataset")]
        stem: String,
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the separability and margin certificates of a dataset (CSV or manifest JSON).
    Inspect {
        path: PathBuf,
        /// Number of classes for a bare CSV.
        #[arg(long)]
        classes: Option<usize>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn report_run(m: &RunManifest, dir: &Path) {
    println!("run {} -> {}", m.name, dir.display());
    for c in &m.checks {
        let t = c.threshold.map_or(String::new(), |t| format!(" {} {t:e}", c.relation));
        println!(
            "  [{}] {} = {:e}{t}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.value
        );
    }
    match &m.reason {
        Some(r) => println!("status: {:?} (exit {}): {r}", m.status, m.exit_code),
        None => println!("status: {:?}", m.status),
    }
}

fn cmd_run(args: &RunArgs) -> Result<i32, ExperimentError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = resolve_out_dir(&cfg, args.out.as_deref());
    if args.dry_run {
        cfg.validate()?;
        print_json(&serde_json::json!({ "out_dir": dir, "config": cfg }));
        return Ok(0);
    }
    let m = run_experiment(&cfg, &dir);
    report_run(&m, &dir);
    Ok(m.exit_code)
}

fn cmd_verify(dir: &Path, config: Option<&Path>) -> Result<i32, ExperimentError> {
    #[derive(Deserialize)]
    struct Overrides {
        verify: VerifySpec,
    }
    let tol = match config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
            let o: Overrides = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
            Some(o.verify)
        }
        None => None,
    };
    let r = verify_run(dir, tol.as_ref())?;
    for m in &r.mismatches {
        println!(
            "  [MISMATCH] {}: stored {} recomputed {}",
            m.field, m.stored, m.recomputed
        );
    }
    for c in &r.checks {
        let t = c.threshold.map_or(String::new(), |t| format!(" {} {t:e}", c.relation));
        println!(
            "  [{}] {} = {:e}{t}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.value
        );
    }
    println!(
        "verify {}: {}",
        dir.display(),
        if r.passed { "passed" } else { "failed" }
    );
    Ok(if r.passed { 0 } else { 5 })
}

fn cmd_sweep(args: &RunArgs, grid: Option<&Path>, jobs: usize) -> Result<i32, ExperimentError> {
    #[derive(Deserialize)]
    struct Grid {
        sweep: SweepSpec,
    }
    let cfg = load_config(&args.config)?;
    let spec = match grid {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<Grid>(&text)
                .map_err(|e| ExperimentError::Config(e.to_string()))?
                .sweep
        }
        None => cfg.sweep.clone().unwrap_or_default(),
    };
    let dir = resolve_out_dir(&cfg, args.out.as_deref());
    if args.dry_run {
        let cells = sweep_cells(&spec, cfg.seed);
        print_json(&serde_json::json!({ "out_dir": dir, "cells": cells, "config": cfg }));
        return Ok(0);
    }
    let s = run_sweep(&cfg, &spec, Some(&dir), jobs)?;
    let ok = s.cells.iter().filter(|c| c.exit_code == 0).count();
    println!(
        "sweep {}: {ok}/{} cells passed -> {}",
        cfg.name,
        s.cells.len(),
        dir.display()
    );
    for a in &s.aggregates {
        let rate = a.pass_rate.map_or(String::new(), |r| format!(" pass {:.3}", r));
        println!("  {}: median {:e} [{:e}, {:e}]{rate}", a.metric, a.median, a.min, a.max);
    }
    Ok(0)
}

fn cmd_dataset(cmd: &DatasetCommand) -> Result<i32, ExperimentError> {
    let data_err = |e: &dyn std::fmt::Display| ExperimentError::Data(e.to_string());
    match cmd {
        DatasetCommand::Generate {
            config,
            out,
            stem,
            dry_run,
        } => {
            let text = std::fs::read_to_string(config)
                .map_err(|e| ExperimentError::Config(format!("{}: {e}", config.display())))?;
            let g: GeneratorConfig = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
            if *dry_run {
                print_json(&serde_json::json!({ "out_dir": out, "generator": g }));
                return Ok(0);
            }
            let data = generate_separable(&g).map_err(|e| data_err(&e))?;
            std::fs::create_dir_all(out).map_err(|e| data_err(&e))?;
            let m = write_manifest(&data, out, stem).map_err(|e| data_err(&e))?;
            print_json(&m);
            Ok(0)
        }
        DatasetCommand::Inspect { path, classes } => {
            let data = if path.extension().is_some_and(|e| e == "json") {
                read_manifest(path).map_err(|e| data_err(&e))?.0
            } else {
                read_csv(path, *classes).map_err(|e| data_err(&e))?
            };
            let cert = validate_separability(&data).map_err(|e| data_err(&e))?;
            let margins = margin_certificate(&data).ok();
            print_json(&serde_json::json!({
                "num_points": data.len(),
                "dim": data.dim(),
                "num_classes": data.num_classes(),
                "certificate": cert,
                "gammas": margins.as_ref().map(|m| m.gammas()),
                "scales": margins.as_ref().map(|m| m.s.clone()),
            }));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify { run_dir, config } => cmd_verify(run_dir, config.as_deref()),
        Command::Sweep { run, grid, jobs } => cmd_sweep(run, grid.as_deref(), *jobs),
        Command::Dataset(d) => cmd_dataset(d),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
