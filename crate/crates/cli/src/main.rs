use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use accordion_cli::config::{ConfigError, PolicyKind};
use accordion_cli::{
    compare, compare_csv, compare_table, emit_train, threads_from_env, verify, CliError, RunSpec, Which,
};

/// Accordion gradient-communication scheduling on a simulated worker cluster.
#[derive(Parser)]
#[command(name = "accordion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Seed for data, initialisation and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set accordion.eta=0.3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and emit per-epoch metrics.
    Train {
        /// Config file (`key=value` per line); defaults to the canonical desk run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train several configurations on the same data and tabulate metric vs floats sent.
    Compare {
        /// Config files, one row each (repeatable).
        #[arg(long)]
        config: Vec<PathBuf>,
        /// Policies to run per config, e.g. `low,high,accordion`; defaults to each config's own.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one analysis experiment and check its claims; prints a JSON report.
    Verify {
        #[arg(value_enum)]
        which: Which,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the fully resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn resolve(config: Option<&PathBuf>, o: &Overrides) -> Result<RunSpec, ConfigError> {
    let mut spec = match config {
        Some(path) => RunSpec::load(path)?,
        None => RunSpec::default(),
    };
    if let Some(seed) = o.seed {
        spec.seed = seed;
    }
    for assignment in &o.set {
        spec.apply_assignment(assignment)?;
    }
    if let Some(out) = &o.out {
        spec.output_path = Some(out.clone());
    }
    Ok(spec)
}

fn print(text: &str) {
    let mut stdout = std::io::stdout().lock();
    // a closed pipe is not worth a panic
    let _ = stdout.write_all(text.as_bytes());
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = threads_from_env();
    match cli.command {
        Command::Train { config, overrides } => {
            let spec = resolve(config.as_ref(), &overrides)?;
            let out = accordion_cli::train(&spec, threads, false)?;
            print(&emit_train(&spec, &out)?);
        }
        Command::Compare {
            config,
            policies,
            overrides,
        } => {
            let bases: Vec<(String, RunSpec)> = if config.is_empty() {
                vec![("canonical".into(), resolve(None, &overrides)?)]
            } else {
                config
                    .iter()
                    .map(|p| {
                        let label = p
                            .file_stem()
                            .map_or("config".into(), |s| s.to_string_lossy().into_owned());
                        Ok((label, resolve(Some(p), &overrides)?))
                    })
                    .collect::<Result<_, ConfigError>>()?
            };
            let kinds: Vec<PolicyKind> = policies
                .iter()
                .map(|p| {
                    p.parse().map_err(|reason| ConfigError::InvalidValue {
                        key: "--policies".into(),
                        value: p.clone(),
                        reason,
                    })
                })
                .collect::<Result<_, _>>()?;
            let single = bases.len() == 1;
            let mut specs = Vec::new();
            for (label, base) in &bases {
                if kinds.is_empty() {
                    specs.push((label.clone(), base.clone()));
                }
                for kind in &kinds {
                    let mut s = base.clone();
                    s.policy = *kind;
                    let name = if single {
                        kind.name().to_string()
                    } else {
                        format!("{label}/{}", kind.name())
                    };
                    specs.push((name, s));
                }
            }
            let rows = compare(&specs, threads)?;
            if let Some(path) = &overrides.out {
                accordion_cli::write_file(path, &compare_csv(&rows))?;
            }
            print(&compare_table(&rows));
        }
        Command::Verify {
            which,
            config,
            overrides,
        } => {
            let spec = resolve(config.as_ref(), &overrides)?;
            let report = verify::run(which, &spec, threads)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            match &spec.output_path {
                Some(path) => accordion_cli::write_file(path, &json)?,
                None => print(&json),
            }
            if !report.passed {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                return Err(CliError::Assertion(format!(
                    "verify {}: failed {}",
                    which.name(),
                    failed.join(", ")
                )));
            }
        }
        Command::Config { config, overrides } => {
            print(&resolve(config.as_ref(), &overrides)?.serialize());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
