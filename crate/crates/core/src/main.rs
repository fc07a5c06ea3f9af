use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use mzsim::runner::{self, Scenario, SweepAxis};

#[derive(Parser)]
#[command(name = "mzsim", version, about = "Electron-phonon-photon dynamics in a nonlinear Mach-Zehnder interferometer")]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Memory budget in GiB, overriding the config
    #[arg(long, global = true)]
    mem_budget: Option<f64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve one scenario and write its CSV and metadata
    Run { config: PathBuf },
    /// Run a scenario at several values of one axis and compare them
    Sweep {
        config: PathBuf,
        /// pump, idler, signal, phonon, nu, phi or alpha
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Relative convergence threshold
        #[arg(long)]
        threshold: Option<f64>,
        /// Sweep points evolved concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a config without running it
    Validate { config: PathBuf },
    /// Print the Hamiltonian terms of a scenario
    Terms { config: PathBuf },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<Scenario, runner::RunError> {
    let mut s = runner::load_scenario(path)?;
    if let Some(b) = cli.mem_budget {
        s.limits.mem_budget_gib = b;
    }
    Ok(s)
}

fn execute(cli: &Cli) -> Result<(), runner::RunError> {
    match &cli.command {
        Command::Run { config } => {
            let s = load(cli, config)?;
            let ts = runner::run(&s)?;
            let (csv, meta) = ts.write(&cli.out)?;
            info!(
                "wrote {} and {} ({} samples, {:.1} s)",
                csv.display(),
                meta.display(),
                ts.times.len(),
                ts.meta.wall_seconds
            );
        }
        Command::Sweep { config, axis, values, threshold, jobs } => {
            let s = load(cli, config)?;
            let (axis, values, threshold) = match (axis, values, &s.sweep) {
                (Some(a), Some(v), _) => {
                    (SweepAxis::parse(a)?, v.clone(), threshold.unwrap_or(s.sweep.as_ref().map_or(1e-3, |c| c.threshold)))
                }
                (None, None, Some(c)) => (c.axis, c.values.clone(), threshold.unwrap_or(c.threshold)),
                _ => {
                    return Err(runner::RunError::Config(
                        "sweep needs --axis and --values, or a [sweep] table in the config".into(),
                    ))
                }
            };
            let (runs, report) = runner::sweep(&s, axis, &values, threshold, *jobs)?;
            for r in &runs {
                r.write(&cli.out)?;
            }
            let path = runner::write_sweep_report(&report, &cli.out)?;
            for (k, ok) in report.converged.iter().enumerate() {
                println!(
                    "{} {} -> {}: {}",
                    axis.name(),
                    values[k],
                    values[k + 1],
                    if *ok { "converged" } else { "not converged" }
                );
            }
            info!("wrote {}", path.display());
        }
        Command::Validate { config } => {
            let s = load(cli, config)?;
            let space = s.validate()?;
            let (vectors, _) = s.memory_estimate(&space, 0);
            println!(
                "{}: ok (dim {}, {} observables, state memory {:.3} GiB)",
                s.name,
                space.total_dim(),
                s.observables.len(),
                vectors as f64 / (1u64 << 30) as f64
            );
        }
        Command::Terms { config } => {
            let s = load(cli, config)?;
            let space = s.space()?;
            let h = s.hamiltonian(&space)?;
            print!("{}", h.describe_terms());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
