use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fbsde_cli::{emit_plot_data, load_config_with, run_experiment, Overrides};
use fbsde_core::control::validate_control;
use fbsde_core::registry::registry;
use fbsde_core::validate::{validate_problem, Sampler};

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Forward-backward SDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `mc.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in models.
    ListModels,
    /// Check a config and sample the structural hypotheses of its model.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write tidy plot CSVs for a finished result bundle.
    PlotData {
        #[arg(long)]
        bundle: PathBuf,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = load_config_with(&text, &Overrides { seed, out })?;
            let outcome = run_experiment(&cfg)?;
            for c in &outcome.checks {
                println!(
                    "{} {}: value {:e}, reference {:e}, tolerance {:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.reference,
                    c.tolerance
                );
            }
            if let Some(e) = &outcome.error {
                println!("ERROR {e}");
            }
            println!("summary: {}", outcome.dir.join("summary.json").display());
            Ok(ExitCode::from(outcome.exit_code() as u8))
        }
        Command::ListModels => {
            for e in registry() {
                let cf = e.description.closed_form().map(|c| c.formula_id()).unwrap_or("-");
                println!("{:<28} {:<24} {}", e.name, cf, e.summary);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config, seed } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = load_config_with(&text, &Overrides { seed, out: None })?;
            let model = cfg.model.description.build()?;
            let sampler = Sampler::new(cfg.mc.seed, model.problem().horizon);
            let mut reports = validate_problem(model.problem(), &sampler)?;
            if let Some(cp) = model.control() {
                reports.push(validate_control(cp, &sampler)?);
            }
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                match r.witness() {
                    None => println!("PASS {} ({} samples)", r.check, r.samples),
                    Some(w) => println!("FAIL {}: {} violations, first {:?} with {:e} > {:e}", r.check, r.violations.len(), w.point, w.lhs, w.rhs),
                }
            }
            println!("config ok: task {}", cfg.task.kind.as_str());
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::PlotData { bundle } => {
            for p in emit_plot_data(&bundle)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
