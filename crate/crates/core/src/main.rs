use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedair::runner::{
    emit_csv, render_csv, run_experiment, run_sweep, ExperimentConfig, SweepOutput,
};
use fedair::schemes::SchemeKind;

#[derive(Parser)]
#[command(
    name = "fedair",
    about = "Federated gradient descent over a simulated fading multiple-access channel",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metric trace as CSV.
    Run {
        /// Flat `key = value` config file; defaults to the desk-scale profile.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, e.g. `--set scheme=esa_dsgd --set seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a scheme × seed grid with shared per-seed partitions.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated scheme names.
        #[arg(long, value_delimiter = ',', required = true)]
        schemes: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the oracle-backed numeric checks.
    Selftest,
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> fedair::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in overrides {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            fedair::Error::Config(format!("override '{kv}' must be KEY=VALUE"))
        })?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn write_records(
    cfg: &ExperimentConfig,
    records: &[fedair::runner::MetricRecord],
) -> fedair::Result<()> {
    match &cfg.output {
        Some(path) => {
            emit_csv(records, path)?;
            eprintln!("wrote {} records to {}", records.len(), path.display());
        }
        None => print!("{}", render_csv(records)),
    }
    Ok(())
}

fn run(cli: Cli) -> fedair::Result<bool> {
    match cli.command {
        Command::Run { config, set } => {
            let cfg = load_config(&config, &set)?;
            let out = run_experiment(&cfg)?;
            write_records(&cfg, &out.records)?;
            if !out.ledger_ok {
                eprintln!(
                    "power ledger violated: grand average {:.4} vs budget {:.4}",
                    out.ledger.grand_average(),
                    out.ledger.p_bar()
                );
            }
            Ok(out.ledger_ok)
        }
        Command::Sweep {
            config,
            schemes,
            seeds,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            let kinds = schemes
                .iter()
                .map(|s| SchemeKind::parse(s))
                .collect::<fedair::Result<Vec<_>>>()?;
            let SweepOutput {
                records,
                all_ledgers_ok,
            } = run_sweep(&cfg, &kinds, &seeds)?;
            write_records(&cfg, &records)?;
            if !all_ledgers_ok {
                eprintln!("power ledger violated in at least one run");
            }
            Ok(all_ledgers_ok)
        }
        Command::Selftest => {
            let outcomes = fedair::selftest::run_all();
            let mut ok = true;
            for o in &outcomes {
                println!(
                    "selftest {}: {} ({})",
                    o.name,
                    if o.passed { "PASS" } else { "FAIL" },
                    o.detail
                );
                ok &= o.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
