//! Experiments behind the `qcka` binary. Every command returns its output as
//! text so that reruns can be compared byte for byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::json;

use qcka_core::params::{self, ConfigDocument, DeviceParams, ProtocolConfig};
use qcka_core::postprocess;
use qcka_core::rate::{self, AnalyzerStats};
use qcka_core::sim::{self, SimOptions, TrialRecording};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] qcka_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(qcka_core::Error::Invalid(_))
            | CliError::Core(qcka_core::Error::Json(_))
            | CliError::Core(qcka_core::Error::NotAProbability { .. })
            | CliError::Core(qcka_core::Error::TooFewUsers(_))
            | CliError::Core(qcka_core::Error::EnumerationBound { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Text produced by a command. `all_aborted` maps to exit code 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub text: String,
    pub all_aborted: bool,
}

impl Output {
    fn ok(text: String) -> Self {
        Self {
            text,
            all_aborted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    ArmKm,
    N,
    L,
}

impl std::str::FromStr for SweepVariable {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arm_km" | "arm-km" => Ok(Self::ArmKm),
            "n" => Ok(Self::N),
            "L" => Ok(Self::L),
            other => Err(CliError::Usage(format!(
                "unknown sweep variable {other:?} (arm_km, n or L)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
}

impl SweepSpec {
    /// `start:stop:step` (stop included) or a comma separated list.
    pub fn parse(variable: SweepVariable, grid: &str) -> Result<Self> {
        let bad = |msg: String| CliError::Usage(format!("invalid grid {grid:?}: {msg}"));
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("{s:?}: {e}")))
        };
        let values = if grid.contains(':') {
            let parts: Vec<&str> = grid.split(':').collect();
            let [start, stop, step] = parts[..] else {
                return Err(bad("expected start:stop:step".into()));
            };
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || !step.is_finite() {
                return Err(bad("step must be positive".into()));
            }
            if stop < start {
                return Err(bad("stop is below start".into()));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            (0..count).map(|i| start + i as f64 * step).collect()
        } else {
            grid.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(num)
                .collect::<Result<Vec<f64>>>()?
        };
        if values.is_empty() {
            return Err(bad("grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("values must be finite".into()));
        }
        if variable == SweepVariable::N && values.iter().any(|v| v.fract() != 0.0 || *v < 2.0) {
            return Err(bad("n must be an integer of at least 2".into()));
        }
        Ok(Self {
            variable,
            grid: values,
        })
    }

    /// The single point given by the base configuration.
    pub fn point(variable: SweepVariable, config: &ProtocolConfig) -> Self {
        let v = match variable {
            SweepVariable::ArmKm => config.arm_km,
            SweepVariable::N => config.n as f64,
            SweepVariable::L => config.pulses,
        };
        Self {
            variable,
            grid: vec![v],
        }
    }

    fn configs(&self, base: &ProtocolConfig) -> Vec<ProtocolConfig> {
        self.grid
            .iter()
            .map(|&v| match self.variable {
                SweepVariable::ArmKm => ProtocolConfig { arm_km: v, ..*base },
                SweepVariable::N => ProtocolConfig {
                    n: v as usize,
                    ..*base
                },
                SweepVariable::L => ProtocolConfig { pulses: v, ..*base },
            })
            .collect()
    }
}

/// Number in six significant digits, scientific notation.
pub fn sci(x: f64) -> String {
    format!("{x:.5e}")
}

/// Comment block carried by every CSV.
pub fn header(config: &ProtocolConfig, dev: &DeviceParams, seed: Option<u64>) -> String {
    let doc = ConfigDocument::new(config, dev);
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!(
        "# qcka {VERSION}\n# params: {}\n# params_sha256: {}\n# seed: {seed}\n",
        doc.to_json(),
        doc.digest()
    )
}

/// Validates every grid point.
fn validate_all(configs: &[ProtocolConfig], dev: &DeviceParams) -> Result<()> {
    for c in configs {
        params::validate(c, dev)?;
    }
    Ok(())
}

fn stats_for(
    configs: &[ProtocolConfig],
    dev: &DeviceParams,
) -> Result<BTreeMap<usize, AnalyzerStats>> {
    let mut out = BTreeMap::new();
    for c in configs {
        if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(c.n) {
            slot.insert(AnalyzerStats::compute(c.n, dev)?);
        }
    }
    Ok(out)
}

fn arm(config: &ProtocolConfig, dev: &DeviceParams) -> f64 {
    (-config.arm_km / dev.l_att).exp()
}

pub fn cmd_asym_sweep(
    spec: &SweepSpec,
    config: &ProtocolConfig,
    dev: &DeviceParams,
) -> Result<Output> {
    let configs = spec.configs(config);
    validate_all(&configs, dev)?;
    let stats = stats_for(&configs, dev)?;
    let rows: Vec<String> = configs
        .par_iter()
        .map(|c| {
            let b = rate::breakdown_with(&stats[&c.n], c, dev);
            let t = arm(c, dev);
            format!(
                "{},{},{},{},{},{},{},{}",
                sci(c.arm_km),
                c.n,
                sci(b.q_z),
                sci(b.e_x),
                sci(b.e_z_max()),
                sci(b.r_asym),
                sci(rate::bound_direct(t, c.n)),
                sci(rate::bound_plob(t * t)),
            )
        })
        .collect();
    let mut text = header(config, dev, None);
    text.push_str("arm_km,n,Q_Z,E_X,max_E_Z,R_asym,bound_direct,bound_plob\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    Ok(Output::ok(text))
}

pub fn cmd_finite_sweep(
    spec: &SweepSpec,
    config: &ProtocolConfig,
    dev: &DeviceParams,
) -> Result<Output> {
    let configs = spec.configs(config);
    validate_all(&configs, dev)?;
    let stats = stats_for(&configs, dev)?;
    let results: Vec<rate::BasisOptimum> = configs
        .par_iter()
        .map(|c| rate::optimize_with(&rate::breakdown_with(&stats[&c.n], c, dev), c))
        .collect();
    let mut text = header(config, dev, None);
    text.push_str("arm_km,n,L,p_star,m,k,mu,leak_EC,key_length,rate,aborted\n");
    for (c, opt) in configs.iter().zip(&results) {
        let r = &opt.report;
        let p = opt.p_star.map_or_else(String::new, sci);
        let num = |x: f64| {
            if r.aborted && !x.is_finite() {
                String::new()
            } else {
                sci(x)
            }
        };
        writeln!(
            text,
            "{},{},{},{p},{},{},{},{},{},{},{}",
            sci(c.arm_km),
            c.n,
            sci(c.pulses),
            r.m,
            r.k,
            num(r.mu),
            num(r.leak_ec),
            r.key_length,
            sci(r.rate_per_pulse),
            r.aborted as u8
        )
        .expect("write to string");
    }
    Ok(Output {
        text,
        all_aborted: results.iter().all(|o| o.report.aborted),
    })
}

pub fn cmd_bounds(spec: &SweepSpec, config: &ProtocolConfig, dev: &DeviceParams) -> Result<Output> {
    let configs = spec.configs(config);
    validate_all(&configs, dev)?;
    let mut text = header(config, dev, None);
    text.push_str("arm_km,n,eta_pair,bound_direct,bound_plob,bound_tgw\n");
    for c in &configs {
        let t = arm(c, dev);
        writeln!(
            text,
            "{},{},{},{},{},{}",
            sci(c.arm_km),
            c.n,
            sci(t * t),
            sci(rate::bound_direct(t, c.n)),
            sci(rate::bound_plob(t * t)),
            sci(rate::bound_tgw(t * t))
        )
        .expect("write to string");
    }
    Ok(Output::ok(text))
}

pub fn cmd_optimize_p(config: &ProtocolConfig, dev: &DeviceParams) -> Result<Output> {
    params::validate(config, dev)?;
    let opt = rate::optimize_basis_prob(config, dev)?;
    let r = &opt.report;
    let mut text = header(config, dev, None);
    text.push_str("n,arm_km,L,p_star,at_boundary,m,k,key_length,rate,aborted\n");
    writeln!(
        text,
        "{},{},{},{},{},{},{},{},{},{}",
        config.n,
        sci(config.arm_km),
        sci(config.pulses),
        opt.p_star.map_or_else(String::new, sci),
        opt.at_boundary as u8,
        r.m,
        r.k,
        r.key_length,
        sci(r.rate_per_pulse),
        r.aborted as u8
    )
    .expect("write to string");
    Ok(Output {
        text,
        all_aborted: r.aborted,
    })
}

pub fn cmd_table(config: &ProtocolConfig, dev: &DeviceParams) -> Result<Output> {
    let rows: Vec<Result<String>> = rate::PUBLISHED_LONGEST_DISTANCE
        .par_iter()
        .map(|&(n, distance, reported)| {
            let base = ProtocolConfig { n, ..*config };
            let stats = AnalyzerStats::compute(n, dev)?;
            let at = ProtocolConfig {
                arm_km: distance,
                ..base
            };
            let b = rate::breakdown_with(&stats, &at, dev);
            let finite = rate::optimize_with(&b, &at).report.rate_per_pulse;
            let longest = rate::longest_finite_distance(&stats, &base, dev, 0.0, 500.0)
                .map_or_else(|| "none".to_string(), |d| format!("{d:.1}"));
            Ok(format!(
                "{n:>3} | {distance:>8.0} | {:>12} | {:>12} | {:>12} | {longest:>10}",
                sci(reported),
                sci(b.r_asym),
                sci(finite),
            ))
        })
        .collect();
    let mut text = header(config, dev, None);
    writeln!(
        text,
        "# columns 2-3 are published values (different error model); the rest are this model at L = {}",
        sci(config.pulses)
    )
    .expect("write to string");
    text.push_str("  n | dist_km  | reported     | model_R_asym | model_finite | longest_km\n");
    for r in rows {
        text.push_str(&r?);
        text.push('\n');
    }
    Ok(Output::ok(text))
}

/// Ledger CSV, summary JSON and (optionally) exported final keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulationOutput {
    pub ledger_csv: String,
    pub summary_json: String,
    pub keys_hex: Option<String>,
}

pub fn cmd_simulate(
    config: &ProtocolConfig,
    dev: &DeviceParams,
    rounds: u64,
    seed: u64,
    with_keys: bool,
) -> Result<SimulationOutput> {
    params::validate(config, dev)?;
    if rounds == 0 {
        return Err(CliError::Usage("rounds must be at least 1".into()));
    }
    let record = if with_keys {
        TrialRecording::Kept
    } else {
        TrialRecording::None
    };
    let ledger = sim::run_protocol_with(config, dev, rounds, seed, SimOptions { record });
    let emp = sim::empirical_rates(&ledger);

    let stats = AnalyzerStats::compute(config.n, dev)?;
    let q_z = rate::gain_z_finite_m(&stats, config, dev)?;
    let q_x = q_z * stats.q_ghz_x / stats.q_ghz_z;
    let z = |e: Option<sim::Estimate>, reference: f64| e.map(|e| e.z_score(reference));
    let z_scores = json!({
        "Q_Z": z(emp.q_z, q_z),
        "Q_X": z(emp.q_x, q_x),
        "E_X": z(emp.e_x, stats.e_x),
        "E_Z": emp.e_z_marginal.iter().zip(&stats.e_z_marginal).map(|(e, r)| z(*e, *r)).collect::<Vec<_>>(),
    });
    let mut summary = ledger.summary_json();
    summary["version"] = json!(VERSION);
    summary["analytic"] = json!({
        "Q_Z_finite_M": q_z,
        "Q_X_finite_M": q_x,
        "Q_Z_asymptotic": rate::gain_z_with(&stats, config, dev).value,
        "E_Z": stats.e_z_marginal,
        "E_X": stats.e_x,
    });
    summary["z_scores"] = z_scores;

    let keys_hex = if with_keys {
        let out = postprocess::run_pipeline(&ledger, seed)?;
        summary["key"] = json!({
            "m": out.raw.m(),
            "k": out.raw.k(),
            "key_length": out.report.key_length,
            "leak_EC": out.reconciled.leak_bits,
            "tags_agree": out.keys.tags_agree,
            "epsilon": out.keys.epsilon,
        });
        Some(out.keys.to_hex_export(&ledger.params.digest()))
    } else {
        None
    };

    let mut ledger_csv = header(config, dev, Some(seed));
    ledger_csv.push_str(&format!("# rounds: {rounds}\n"));
    ledger_csv.push_str(&ledger.to_csv());
    let mut summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    summary_json.push('\n');
    Ok(SimulationOutput {
        ledger_csv,
        summary_json,
        keys_hex,
    })
}
