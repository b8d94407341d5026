use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polrouter::error::{Error, Result};
use polrouter::harness::{run_experiment, Experiment, ExperimentConfig, OutputFormat};
use polrouter::tomography::{
    deconvolve_fiber, mle_process_tomography, read_chi_json, DeconvolveOptions, MleOptions, TomographyDataset,
};

#[derive(Parser)]
#[command(name = "polrouter", version, about = "Polarization-maintaining photon router simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its data files plus summary.json.
    Run {
        /// switching-curve, rise-fall, process-tomography, deconvolve,
        /// noon-fringe, loss-budget or stability
        name: Experiment,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Expected counts instead of Poisson samples.
        #[arg(long)]
        analytic: bool,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
    /// Print the default configuration as TOML.
    Config,
    /// Reconstruct a process matrix from a counts CSV
    /// (input_label,projector_label,counts,shots).
    Tomography {
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove a fiber process from a total process (both χ JSON files).
    Deconvolve {
        total: PathBuf,
        fiber: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, analytic: bool) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::calibrated(),
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.run.analytic |= analytic;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(command: Command) -> std::result::Result<(), (u8, Error)> {
    let usage = |e: Error| (2, e);
    let failure = |e: Error| {
        let code = match e {
            Error::Usage(_) | Error::Config(_) | Error::Parse(_) => 2,
            _ => 1,
        };
        (code, e)
    };
    match command {
        Command::Run { name, config, seed, out, analytic, format } => {
            // Any problem reading the config is a usage problem.
            let cfg = load_config(config.as_deref(), seed, analytic).map_err(usage)?;
            let output = run_experiment(name, &cfg).map_err(failure)?;
            for path in output.write(&cfg, &out, format).map_err(failure)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Config => print!("{}", ExperimentConfig::calibrated().to_toml()),
        Command::Tomography { data, seed, out } => {
            let data = TomographyDataset::read(&data).map_err(usage)?;
            let report = mle_process_tomography(&data, &MleOptions { seed, ..Default::default() }).map_err(failure)?;
            emit(&report.to_json(), out.as_deref()).map_err(failure)?;
        }
        Command::Deconvolve { total, fiber, seed, out } => {
            let read = |p: &Path| std::fs::read_to_string(p).map_err(Error::from).and_then(|t| read_chi_json(&t));
            let chi_t = read(&total).map_err(usage)?;
            let chi_f = read(&fiber).map_err(usage)?;
            let report =
                deconvolve_fiber(&chi_t, &chi_f, &DeconvolveOptions { seed, ..Default::default() }).map_err(failure)?;
            if !report.converged {
                emit(&report.to_json(), out.as_deref()).map_err(failure)?;
                return Err((1, Error::Analysis(format!("deconvolution did not converge (cost {:?})", report.cost))));
            }
            emit(&report.to_json(), out.as_deref()).map_err(failure)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("polrouter: {e}");
            ExitCode::from(code)
        }
    }
}
