use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flockyap::graph::Convention;
use flockyap::pe::OffsetSpec;
use flockyap_cli::commands::{self, MonitorOptions, PeRequest};
use flockyap_cli::sweep::{self, Axis};
use flockyap_cli::{CliError, ConfigError, Scenario};
use log::info;

/// Consensus and flocking under intermittent communication.
#[derive(Parser, Debug)]
#[command(name = "flockyap", version)]
struct Cli {
    /// Scenario JSON file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; every artifact path is relative to it
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the scenario
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the scenario and write trajectory, state dump and report
    Simulate,
    /// Certify persistence of excitation for one or more window lengths
    VerifyPe {
        /// Window lengths (defaults to the scenario's tau)
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// PE constant in the chosen convention (defaults to the scenario's mu)
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long, value_enum, default_value_t = Conv::Normalized)]
        convention: Conv,
        #[arg(long, value_enum, default_value_t = Offsets::Auto)]
        offsets: Offsets,
        /// Last window end for non-periodic schedules (defaults to t_end)
        #[arg(long)]
        horizon: Option<f64>,
        /// Also check slot averages with this many slots per window
        #[arg(long)]
        slot_averages: Option<usize>,
        #[arg(long, default_value = "pe.json")]
        report: String,
    },
    /// Replay a state dump through the Lyapunov monitors
    MonitorLyapunov {
        /// State dump (defaults to the scenario's `states` output under --out)
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Random directions for the window-averaged inequality
        #[arg(long, default_value_t = 1000)]
        vectors: usize,
        #[arg(long, default_value = "lyapunov.json")]
        report: String,
    },
    /// Vary one numeric scenario field
    Sweep {
        /// Dotted field path, e.g. `kernel.beta` or `eps0`
        #[arg(long)]
        param: String,
        /// Explicit values
        #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "logspace")]
        values: Vec<f64>,
        /// `LO:HI:N` log-spaced values
        #[arg(long)]
        logspace: Option<String>,
        /// Basename of the `.csv` and `.json` tables
        #[arg(long, default_value = "sweep")]
        name: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Conv {
    Normalized,
    Unnormalized,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Offsets {
    Auto,
    Aligned,
}

fn load(cli: &Cli) -> Result<(Scenario, PathBuf), ConfigError> {
    let path = cli.config.as_deref().ok_or_else(|| ConfigError::Invalid("--config is required".into()))?;
    let mut s = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        s = s.with_seed(seed);
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((s, dir))
}

fn parse_logspace(spec: &str, param: &str) -> Result<Axis, ConfigError> {
    let bad = || ConfigError::Invalid(format!("--logspace expects LO:HI:N, got `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else { return Err(bad()) };
    Axis::logspace(param, lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let (scenario, dir) = load(cli)?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&scenario.outputs.verbosity)).try_init();
    match &cli.command {
        Command::Simulate => {
            commands::simulate(&scenario, &dir, &cli.out)?;
            Ok(true)
        }
        Command::VerifyPe { tau, mu, convention, offsets, horizon, slot_averages, report } => {
            let built = scenario.build(&dir)?;
            let convention = match convention {
                Conv::Normalized => Convention::Normalized,
                Conv::Unnormalized => Convention::Unnormalized,
            };
            let scale = match convention {
                Convention::Normalized => 1.0,
                Convention::Unnormalized => scenario.n_agents as f64,
            };
            let mu = mu
                .or(scenario.mu.map(|m| m * scale))
                .ok_or_else(|| ConfigError::Invalid("no mu: pass --mu or set it in the scenario".into()))?;
            let req = PeRequest {
                taus: if tau.is_empty() { vec![scenario.tau] } else { tau.clone() },
                mu,
                horizon: horizon.unwrap_or(scenario.t_end),
                convention,
                offsets: match offsets {
                    Offsets::Auto => OffsetSpec::Auto,
                    Offsets::Aligned => OffsetSpec::Aligned,
                },
                slot_averages: *slot_averages,
            };
            let doc = commands::verify_pe(&built.schedule, &req)?;
            for c in &doc.certificates {
                info!("tau = {}: worst lambda_2 = {:.6e} at t = {} ({})", c.tau, c.worst_lambda2, c.worst_offset, if c.holds { "holds" } else { "fails" });
            }
            commands::write_report(&cli.out, report, &doc)?;
            Ok(doc.all_hold)
        }
        Command::MonitorLyapunov { states, stride, vectors, report } => {
            let built = scenario.build(&dir)?;
            let path = states.clone().unwrap_or_else(|| cli.out.join(&scenario.outputs.states));
            let traj = commands::read_states(&path)?;
            let opts = MonitorOptions { stride: *stride, vectors: *vectors, seed: cli.seed.or(scenario.seed()).unwrap_or(0) };
            let rep = commands::monitor_lyapunov(&scenario, &built, &traj, opts)?;
            commands::write_report(&cli.out, report, &rep)?;
            Ok(rep.ok)
        }
        Command::Sweep { param, values, logspace, name } => {
            let axis = match logspace {
                Some(spec) => parse_logspace(spec, param)?,
                None => Axis { path: param.clone(), values: values.clone() },
            };
            let rows = sweep::sweep(&scenario, &dir, &axis);
            commands::ensure_dir(&cli.out)?;
            let csv_path = cli.out.join(format!("{name}.csv"));
            let file = std::fs::File::create(&csv_path).map_err(|source| CliError::Output { path: csv_path.clone(), source })?;
            sweep::write_csv(&rows, file).map_err(|e| CliError::Output { path: csv_path, source: e.into() })?;
            commands::write_report(&cli.out, &format!("{name}.json"), &rows)?;
            info!("{} rows, {} failed", rows.len(), rows.iter().filter(|r| !r.ok).count());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("flockyap: cannot size thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("flockyap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
