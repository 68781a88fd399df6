//! `ngrad` — run simulations, theory curves, the scalar counterexample,
//! training demos, and the verification suites from the command line.
//!
//! The process exits 0 only when every in-run assertion of the invoked
//! command passed.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ngrad_core::harness::{self, ExperimentConfig, ExperimentKind};
use ngrad_core::invariance::invariance_csv;
use ngrad_core::theory::TheoryCurve;
use ngrad_core::verify;

#[derive(Parser)]
#[command(name = "ngrad", version, about = "A desk-scale natural-gradient laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Master RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses the rayon default (overrides the config file).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output path for the CSV report (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named verification suite and print one PASS/FAIL line per check.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Monte-Carlo simulation of a stochastic quadratic, with theory columns.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form theory curves for a configured problem.
    Theory {
        #[arg(long)]
        config: PathBuf,
    },
    /// The 1-d exact-Fisher vs empirical-Fisher counterexample.
    Counterexample {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        xi: f64,
        #[arg(long)]
        theta0: f64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
    },
    /// Full-batch training demo: GD vs damped natural gradient vs diagonal.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &PathBuf, global: &GlobalArgs, expected: ExperimentKind) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if config.kind != expected {
        bail!("config kind {:?} does not match the subcommand", config.kind);
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(threads) = global.threads {
        config.threads = threads;
    }
    if let Some(out) = &global.out {
        config.out = Some(out.display().to_string());
    }
    Ok(config)
}

fn write_out(out: &Option<String>, csv: &str, meta: Option<&str>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {path}"))?;
            if let Some(meta) = meta {
                fs::write(format!("{path}.meta"), meta)?;
            }
            println!("wrote {path}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { suite } => {
            let threads = cli.global.threads.unwrap_or(0);
            let results = verify::run_suite(&suite, threads)?;
            for r in &results {
                println!("{}", r.line());
            }
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} checks passed", results.len());
            if suite == "invariance" || suite == "all" {
                if let Some(out) = &cli.global.out {
                    let rows = verify::invariance_report(cli.global.seed.unwrap_or(109))?;
                    fs::write(out, invariance_csv(&rows))?;
                    println!("wrote {}", out.display());
                }
            }
            Ok(passed == results.len())
        }
        Command::Simulate { config } => {
            let config = load_config(&config, &cli.global, ExperimentKind::Simulate)?;
            let report = harness::run_monte_carlo(&config)?;
            for c in &report.meta.checks {
                println!("{}", c.line());
            }
            if report.meta.diverged > 0 {
                println!("diverged trials: {}", report.meta.diverged);
            }
            write_out(&config.out, &report.csv(), Some(&report.meta_text()))?;
            Ok(report.all_passed())
        }
        Command::Theory { config } => {
            let config = load_config(&config, &cli.global, ExperimentKind::Theory)?;
            let (problem, spec, _) = config.build_quadratic()?;
            let ks = harness::log_grid(config.horizon);
            let curve = TheoryCurve::compute(&problem, &spec, &ks)?;
            write_out(&config.out, &curve.csv(), None)?;
            Ok(true)
        }
        Command::Counterexample { alpha, xi, theta0, steps } => {
            let report = harness::run_counterexample(theta0, alpha, xi, steps);
            println!(
                "exact-Fisher run: linear contraction |1-alpha|^k reproduced to {:.3e} (ok: {})",
                report.fisher_max_rel_err, report.fisher_linear_ok
            );
            println!(
                "empirical-Fisher run: min |theta_k| = {:.6e} over {} steps (stalls above 1e-6: {})",
                report.empfisher_min_abs, steps, report.empfisher_stalls
            );
            let out = cli.global.out.map(|p| p.display().to_string());
            write_out(&out, &report.csv(), None)?;
            Ok(report.fisher_linear_ok && (xi != 1.0 || report.empfisher_stalls))
        }
        Command::Train { config } => {
            let config = load_config(&config, &cli.global, ExperimentKind::Train)?;
            let train = config
                .train
                .clone()
                .context("train config needs a [train] section")?;
            let report = harness::run_train_demo(&train, config.seed)?;
            let mut ok = true;
            for run in &report.runs {
                let last = run.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
                println!(
                    "[{}] {}: final loss {:.6e} over {} iterations",
                    if run.monotone_after_burn_in { "PASS" } else { "FAIL" },
                    run.name,
                    last,
                    run.rows.len(),
                );
                ok &= run.monotone_after_burn_in;
            }
            if let Some(h_opt) = report.h_opt {
                println!("quadratic optimum reference: {h_opt:.6e}");
            }
            write_out(&config.out, &report.csv(), None)?;
            Ok(ok)
        }
    }
}
