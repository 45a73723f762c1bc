use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qcka_cli::{Output, Result, SweepSpec, SweepVariable};
use qcka_core::params::{self, ConfigDocument, DeviceParams, EtaAMode, ProtocolConfig};

#[derive(Parser)]
#[command(
    name = "qcka",
    version,
    about = "Key rates and simulations for multiplexed MDI conference key agreement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file ({"device", "protocol", "epsilons"}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Number of users.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// User-to-relay fiber length, km.
    #[arg(long = "arm-km", global = true)]
    arm_km: Option<f64>,
    /// Sweep grid: start:stop:step or a comma separated list.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Variable swept by --grid: arm_km, n or L.
    #[arg(long, global = true, default_value = "arm_km")]
    variable: String,
    /// Total pulses per user.
    #[arg(long = "L", global = true)]
    pulses: Option<f64>,
    /// Multiplexed pulses per user per round.
    #[arg(long = "M", global = true)]
    multiplexing: Option<u64>,
    /// Z-basis probability.
    #[arg(long = "p-z", global = true)]
    p_z: Option<f64>,
    /// Simulation rounds.
    #[arg(long, global = true, default_value_t = 1000)]
    rounds: u64,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Apply the switch-network transmittance per photon (eta_a^n).
    #[arg(long = "strict-eta-a", global = true)]
    strict_eta_a: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic rate, gains, error rates and bounds over a grid.
    AsymSweep,
    /// Finite-size key length with optimized p_z over a grid.
    FiniteSweep,
    /// Repeaterless benchmarks over a grid.
    Bounds,
    /// Monte Carlo run: ledger CSV and summary JSON (next to --out).
    Simulate {
        /// Also run sifting, reconciliation and privacy amplification and
        /// write the final keys here as hex.
        #[arg(long = "keys-out")]
        keys_out: Option<PathBuf>,
    },
    /// Optimal Z-basis probability at one point.
    OptimizeP,
    /// Model values next to the published longest-distance table.
    Table,
}

fn load(common: &Common) -> Result<(ProtocolConfig, DeviceParams)> {
    let doc = match &common.config {
        Some(path) => ConfigDocument::from_json(&std::fs::read_to_string(path)?)?,
        None => ConfigDocument::default(),
    };
    let mut config = doc.protocol();
    if let Some(n) = common.n {
        config.n = n;
    }
    if let Some(a) = common.arm_km {
        config.arm_km = a;
    }
    if let Some(l) = common.pulses {
        config.pulses = l;
    }
    if let Some(m) = common.multiplexing {
        config.multiplexing = m;
    }
    if let Some(p) = common.p_z {
        config.p_z = p;
    }
    if common.strict_eta_a {
        config.eta_a_mode = EtaAMode::PerPhoton;
    }
    let validated = params::validate(&config, &doc.device)?;
    for w in &validated.warnings {
        eprintln!("warning: {w}");
    }
    Ok((validated.config, validated.device))
}

fn sweep(common: &Common, config: &ProtocolConfig) -> Result<SweepSpec> {
    let variable: SweepVariable = common.variable.parse()?;
    match &common.grid {
        Some(g) => SweepSpec::parse(variable, g),
        None => Ok(SweepSpec::point(variable, config)),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    let (config, dev) = load(common)?;
    let out = common.out.as_deref();
    let output: Output = match &cli.command {
        Command::AsymSweep => qcka_cli::cmd_asym_sweep(&sweep(common, &config)?, &config, &dev)?,
        Command::FiniteSweep => {
            qcka_cli::cmd_finite_sweep(&sweep(common, &config)?, &config, &dev)?
        }
        Command::Bounds => qcka_cli::cmd_bounds(&sweep(common, &config)?, &config, &dev)?,
        Command::OptimizeP => qcka_cli::cmd_optimize_p(&config, &dev)?,
        Command::Table => qcka_cli::cmd_table(&config, &dev)?,
        Command::Simulate { keys_out } => {
            let sim = qcka_cli::cmd_simulate(
                &config,
                &dev,
                common.rounds,
                common.seed,
                keys_out.is_some(),
            )?;
            match out {
                Some(p) => {
                    emit(Some(p), &sim.ledger_csv)?;
                    emit(Some(&summary_path(p)), &sim.summary_json)?;
                }
                None => {
                    emit(None, &sim.ledger_csv)?;
                    emit(None, &sim.summary_json)?;
                }
            }
            if let (Some(path), Some(hex)) = (keys_out, &sim.keys_hex) {
                emit(Some(path), hex)?;
            }
            return Ok(false);
        }
    };
    emit(out, &output.text)?;
    Ok(output.all_aborted)
}

fn main() -> ExitCode {
    if let Some(threads) = std::env::var("QCKA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .expect("thread pool is configured once");
        }
    }
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("every grid point aborted");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
