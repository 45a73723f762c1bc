//! Closed-form key-rate engine.
//!
//! Gains and error rates come from the exact analyser enumerator averaged
//! over uniformly random preparations and the two noise channels. On top of
//! those sit the asymptotic conference rate, the finite-size key length and
//! the repeaterless benchmarks.

use serde::Serialize;

use crate::analyzer::{self, PreparedQubit, Verdict};
use crate::error::{Error, Result};
use crate::multiplex;
use crate::params::{DeviceParams, EtaAMode, ProtocolConfig};

/// Reported numbers of the published comparison table (n, longest distance
/// in km, key rate in bit/pulse). They rely on an error model that is not
/// reproduced here and are only ever displayed next to model output.
pub const PUBLISHED_LONGEST_DISTANCE: [(usize, f64, f64); 3] = [
    (3, 324.0, 3.4125e-9),
    (6, 292.0, 3.0994e-9),
    (10, 270.0, 2.3384e-10),
];

/// h(x) = −x·log2 x − (1−x)·log2(1−x), with 0·log 0 = 0.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::NotAProbability {
            what: "x",
            value: x,
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

fn entropy(x: f64) -> f64 {
    binary_entropy(x.clamp(0.0, 1.0)).expect("clamped")
}

/// Distance-independent analyser statistics for one (n, device) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzerStats {
    pub n: usize,
    /// Acceptance probability of an all-Z group, averaged over bits and noise.
    pub q_ghz_z: f64,
    pub q_ghz_x: f64,
    /// 2^(1−n)·η_dⁿ, the dark-count-free value.
    pub q_ghz_ideal: f64,
    /// E_Z^{1,i} for i = 2..n.
    pub e_z_marginal: Vec<f64>,
    pub e_x: f64,
    /// Accepted X groups whose verdict sign is opposite to the projection.
    pub x_misidentified: f64,
    /// Accepted Z groups that came from a failed projection.
    pub z_fail_accepted: f64,
}

impl AnalyzerStats {
    pub fn compute(n: usize, dev: &DeviceParams) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewUsers(n));
        }
        if n > analyzer::MAX_ENUMERATION_USERS {
            return Err(Error::EnumerationBound {
                n,
                max: analyzer::MAX_ENUMERATION_USERS,
            });
        }
        let patterns = 1usize << n;
        let weight = 1.0 / patterns as f64;

        // Z basis: c is the photon bit string after e_flip. Prepared bits are
        // uniform, so given c each record differs from its photon w.p. e_flip.
        let e = dev.e_flip;
        let same = 2.0 * e * (1.0 - e);
        let differ = e * e + (1.0 - e) * (1.0 - e);
        let mut q_z = 0.0;
        let mut z_fail = 0.0;
        let mut z_err = vec![0.0; n - 1];
        for c in 0..patterns {
            let photons: Vec<PreparedQubit> = (0..n)
                .map(|i| PreparedQubit::z((c >> i) & 1 == 1))
                .collect();
            let dist = analyzer::enumerate_outcome_distribution(&photons, dev)?;
            let acc = dist.accepted();
            q_z += weight * acc;
            z_fail += weight * dist.fail_accepted();
            for (i, err) in z_err.iter_mut().enumerate() {
                let agree = (c & 1) == ((c >> (i + 1)) & 1);
                *err += weight * acc * if agree { same } else { differ };
            }
        }

        // X basis: s is the photon sign string after e_phase. The product of
        // the prepared signs equals that of the photons unless an odd number
        // of phase flips occurred.
        let keep = 0.5 * (1.0 + (1.0 - 2.0 * dev.e_phase).powi(n as i32));
        let mut q_x = 0.0;
        let mut x_err = 0.0;
        let mut x_misid = 0.0;
        for s in 0..patterns {
            let photons: Vec<PreparedQubit> = (0..n)
                .map(|i| PreparedQubit::x((s >> i) & 1 == 1))
                .collect();
            let dist = analyzer::enumerate_outcome_distribution(&photons, dev)?;
            let photon_parity_even = s.count_ones() % 2 == 0;
            let prepared_odd = if photon_parity_even { 1.0 - keep } else { keep };
            q_x += weight * dist.accepted();
            x_misid += weight * dist.misidentified();
            x_err += weight
                * (dist.verdict(Verdict::GhzPlus) * prepared_odd
                    + dist.verdict(Verdict::GhzMinus) * (1.0 - prepared_odd));
        }

        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        Ok(Self {
            n,
            q_ghz_z: q_z,
            q_ghz_x: q_x,
            q_ghz_ideal: 2f64.powi(1 - n as i32) * dev.eta_d.powi(n as i32),
            e_z_marginal: z_err.iter().map(|&err| ratio(err, q_z)).collect(),
            e_x: ratio(x_err, q_x),
            x_misidentified: ratio(x_misid, q_x),
            z_fail_accepted: ratio(z_fail, q_z),
        })
    }

    pub fn e_z_max(&self) -> f64 {
        self.e_z_marginal.iter().copied().fold(0.0, f64::max)
    }
}

/// A labeled multiplicative factor of a gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainFactor {
    pub label: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gain {
    pub value: f64,
    pub factors: Vec<GainFactor>,
}

fn eta_a_factor(config: &ProtocolConfig, dev: &DeviceParams) -> f64 {
    match config.eta_a_mode {
        EtaAMode::Lumped => dev.eta_a(),
        EtaAMode::PerPhoton => dev.eta_a().powi(config.n as i32),
    }
}

fn gain_from(q_ghz: f64, label: &'static str, config: &ProtocolConfig, dev: &DeviceParams) -> Gain {
    let factors = vec![
        GainFactor {
            label,
            value: q_ghz,
        },
        GainFactor {
            label: "p_qnd",
            value: dev.p_qnd,
        },
        GainFactor {
            label: "eta_a",
            value: eta_a_factor(config, dev),
        },
        GainFactor {
            label: "eta_sps",
            value: dev.eta_sps,
        },
        GainFactor {
            label: "sqrt_eta_channel",
            value: (-config.arm_km / dev.l_att).exp(),
        },
    ];
    Gain {
        value: factors.iter().map(|f| f.value).product(),
        factors,
    }
}

/// Q_Z = Q^GHZ_Z · p_QND · η_a · η_sps · √η_channel.
pub fn gain_z(config: &ProtocolConfig, dev: &DeviceParams) -> Result<Gain> {
    let stats = AnalyzerStats::compute(config.n, dev)?;
    Ok(gain_z_with(&stats, config, dev))
}

pub fn gain_z_with(stats: &AnalyzerStats, config: &ProtocolConfig, dev: &DeviceParams) -> Gain {
    gain_from(stats.q_ghz_z, "q_ghz_z", config, dev)
}

pub fn gain_x_with(stats: &AnalyzerStats, config: &ProtocolConfig, dev: &DeviceParams) -> Gain {
    gain_from(stats.q_ghz_x, "q_ghz_x", config, dev)
}

/// Z gain at finite M: the heralding-and-grouping stage contributes
/// E[groups]/M instead of its M→∞ limit η_sps·√η_channel·p_QND.
pub fn gain_z_finite_m(
    stats: &AnalyzerStats,
    config: &ProtocolConfig,
    dev: &DeviceParams,
) -> Result<f64> {
    let eta_pre = multiplex::herald_efficiency(config, dev);
    let groups = multiplex::expected_groups(config.multiplexing, eta_pre, config.n)?;
    Ok(stats.q_ghz_z * eta_a_factor(config, dev) * groups.value / config.multiplexing as f64)
}

/// (E_Z^{1,i} for i = 2..n, E_X) conditioned on accepted verdicts.
pub fn error_rates(config: &ProtocolConfig, dev: &DeviceParams) -> Result<(Vec<f64>, f64)> {
    let stats = AnalyzerStats::compute(config.n, dev)?;
    Ok((stats.e_z_marginal, stats.e_x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateBreakdown {
    pub q_z: f64,
    pub q_x: f64,
    pub e_z_marginal: Vec<f64>,
    pub e_x: f64,
    pub r_asym: f64,
    /// Factors of `q_z`.
    pub components: Vec<GainFactor>,
}

impl RateBreakdown {
    pub fn e_z_max(&self) -> f64 {
        self.e_z_marginal.iter().copied().fold(0.0, f64::max)
    }
}

pub fn rate_breakdown(config: &ProtocolConfig, dev: &DeviceParams) -> Result<RateBreakdown> {
    let stats = AnalyzerStats::compute(config.n, dev)?;
    Ok(breakdown_with(&stats, config, dev))
}

pub fn breakdown_with(
    stats: &AnalyzerStats,
    config: &ProtocolConfig,
    dev: &DeviceParams,
) -> RateBreakdown {
    let gz = gain_z_with(stats, config, dev);
    let gx = gain_x_with(stats, config, dev);
    let mut b = RateBreakdown {
        q_z: gz.value,
        q_x: gx.value,
        e_z_marginal: stats.e_z_marginal.clone(),
        e_x: stats.e_x,
        r_asym: 0.0,
        components: gz.factors,
    };
    b.r_asym = asymptotic_rate(&b);
    b
}

/// R = max(0, Q_Z·[1 − max_i h(E_Z^{1,i}) − h(E_X)]).
pub fn asymptotic_rate(b: &RateBreakdown) -> f64 {
    let bracket = 1.0 - entropy(b.e_z_max()) - entropy(b.e_x);
    (b.q_z * bracket).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuEstimate {
    pub value: f64,
    /// λ actually used; differs from the input when it was clamped.
    pub lambda: f64,
    pub clamped: bool,
}

/// Statistical deviation of the phase error rate:
///
/// μ(λ, ε) = [(1−2λ)AG/(m+k) + √(A²G²/(m+k)² + 4λ(1−λ)G)] / [2 + 2A²G/(m+k)²]
///
/// with A = max(m, k) and G = (m+k)/(mk)·ln[(m+k)/(2π mk λ(1−λ) ε²)].
/// λ is clamped into [1/(2k), 1 − 1/(2k)] so that G stays finite.
pub fn mu(lambda: f64, eps: f64, m: u64, k: u64) -> Result<MuEstimate> {
    if m == 0 || k == 0 {
        return Err(Error::MuDomain(format!(
            "need m, k >= 1, got m = {m}, k = {k}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::MuDomain(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::NotAProbability {
            what: "lambda",
            value: lambda,
        });
    }
    let (m, k) = (m as f64, k as f64);
    let floor = 1.0 / (2.0 * k);
    let used = lambda.clamp(floor, 1.0 - floor);
    let clamped = used != lambda;
    let l = used;

    let sum = m + k;
    let a = m.max(k);
    let g = sum / (m * k)
        * (sum / (2.0 * std::f64::consts::PI * m * k * l * (1.0 - l) * eps * eps)).ln();
    if !(g > 0.0) {
        return Err(Error::MuDomain(format!("G = {g} is not positive")));
    }
    let num = (1.0 - 2.0 * l) * a * g / sum
        + (a * a * g * g / (sum * sum) + 4.0 * l * (1.0 - l) * g).sqrt();
    let den = 2.0 + 2.0 * a * a * g / (sum * sum);
    Ok(MuEstimate {
        value: (num / den).max(0.0),
        lambda: used,
        clamped,
    })
}

/// m = ⌊p_zⁿ·Q_Z·L⌋ and k = ⌊(1−p_z)ⁿ·Q_X·L⌋.
pub fn sifted_counts(config: &ProtocolConfig, q_z: f64, q_x: f64) -> (u64, u64) {
    let n = config.n as i32;
    let m = (config.p_z.powi(n) * q_z * config.pulses).floor();
    let k = ((1.0 - config.p_z).powi(n) * q_x * config.pulses).floor();
    (m.max(0.0) as u64, k.max(0.0) as u64)
}

/// leak_EC = f·m·h(E_Z) + log2(2(n−1)/ε_c).
pub fn leak_ec(m: u64, e_z_max: f64, f: f64, n: usize, eps_c: f64) -> f64 {
    f * m as f64 * entropy(e_z_max) + (2.0 * (n as f64 - 1.0) / eps_c).log2()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteKeyReport {
    pub p_z: f64,
    pub m: u64,
    pub k: u64,
    /// Phase error rate fed to μ (after clamping).
    pub lambda: f64,
    pub mu: f64,
    pub mu_clamped: bool,
    pub leak_ec: f64,
    /// Key length before the clamp at zero, bits.
    pub raw_length: f64,
    /// ⌊max(0, raw_length)⌋.
    pub key_length: u64,
    pub rate_per_pulse: f64,
    pub aborted: bool,
    pub abort_reason: Option<String>,
}

impl FiniteKeyReport {
    fn abort(p_z: f64, m: u64, k: u64, reason: String) -> Self {
        Self {
            p_z,
            m,
            k,
            lambda: f64::NAN,
            mu: f64::NAN,
            mu_clamped: false,
            leak_ec: f64::NAN,
            raw_length: f64::NAN,
            key_length: 0,
            rate_per_pulse: 0.0,
            aborted: true,
            abort_reason: Some(reason),
        }
    }
}

/// l = m[q − h(E_X + μ(E_X, ε′))] − leak_EC − 2·log2(1/(2ε̄)).
pub fn finite_key_length(config: &ProtocolConfig, dev: &DeviceParams) -> Result<FiniteKeyReport> {
    let b = rate_breakdown(config, dev)?;
    Ok(finite_key_with(&b, config))
}

pub fn finite_key_with(b: &RateBreakdown, config: &ProtocolConfig) -> FiniteKeyReport {
    let (m, k) = sifted_counts(config, b.q_z, b.q_x);
    finite_key_from_counts(m, k, b.e_x, b.e_z_max(), config)
}

/// Key length for given sifted counts and error rates. This is the single
/// evaluation used both for analytic curves and for simulated blocks.
pub fn finite_key_from_counts(
    m: u64,
    k: u64,
    e_x: f64,
    e_z_max: f64,
    config: &ProtocolConfig,
) -> FiniteKeyReport {
    if k == 0 || m == 0 {
        return FiniteKeyReport::abort(
            config.p_z,
            m,
            k,
            format!("no data to work with (m = {m}, k = {k})"),
        );
    }
    let budget = &config.budget;
    let dev = match mu(e_x, budget.eps_prime, m, k) {
        Ok(d) => d,
        Err(e) => return FiniteKeyReport::abort(config.p_z, m, k, e.to_string()),
    };
    let leak = leak_ec(m, e_z_max, config.f, config.n, budget.eps_c);
    let penalty = 2.0 * (1.0 / (2.0 * budget.eps_bar)).log2();
    let phase = dev.lambda + dev.value;
    let raw = m as f64 * (config.q - entropy(phase.min(0.5))) - leak - penalty;

    let reason = if phase >= 0.5 {
        Some(format!("phase error bound {phase:.4} reached 1/2"))
    } else if raw <= 0.0 {
        Some("key length not positive".to_string())
    } else {
        None
    };
    let key_length = if reason.is_some() {
        0
    } else {
        raw.floor() as u64
    };
    FiniteKeyReport {
        p_z: config.p_z,
        m,
        k,
        lambda: dev.lambda,
        mu: dev.value,
        mu_clamped: dev.clamped,
        leak_ec: leak,
        raw_length: raw,
        key_length,
        rate_per_pulse: key_length as f64 / config.pulses,
        aborted: reason.is_some(),
        abort_reason: reason,
    }
}

/// Star-network benchmark: −log2(1−η)/(n−1) with η = arm².
pub fn bound_direct(arm_transmittance: f64, n: usize) -> f64 {
    bound_plob(arm_transmittance * arm_transmittance) / (n as f64 - 1.0)
}

/// −log2(1−η); infinite at η = 1.
pub fn bound_plob(eta: f64) -> f64 {
    if eta >= 1.0 {
        return f64::INFINITY;
    }
    -(-eta).ln_1p() / std::f64::consts::LN_2
}

/// log2((1+η)/(1−η)); infinite at η = 1.
pub fn bound_tgw(eta: f64) -> f64 {
    if eta >= 1.0 {
        return f64::INFINITY;
    }
    (eta.ln_1p() - (-eta).ln_1p()) / std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisOptimum {
    /// `None` when every grid point aborts.
    pub p_star: Option<f64>,
    pub report: FiniteKeyReport,
    /// The optimum sits on the outermost grid point.
    pub at_boundary: bool,
}

/// Golden-section bracket width at which the search stops.
pub const P_TOLERANCE: f64 = 1e-4;

/// Maximizes key_length/L over p_z: 99-point grid, then golden-section
/// refinement around the best grid point.
pub fn optimize_basis_prob(config: &ProtocolConfig, dev: &DeviceParams) -> Result<BasisOptimum> {
    let b = rate_breakdown(config, dev)?;
    Ok(optimize_with(&b, config))
}

pub fn optimize_with(b: &RateBreakdown, config: &ProtocolConfig) -> BasisOptimum {
    let eval = |p: f64| finite_key_with(b, &ProtocolConfig { p_z: p, ..*config });
    let grid: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
    let mut best_i = None;
    let mut best = eval(0.5);
    for (i, &p) in grid.iter().enumerate() {
        let r = eval(p);
        if !r.aborted && (best_i.is_none() || r.rate_per_pulse > best.rate_per_pulse) {
            best_i = Some(i);
            best = r;
        }
    }
    let Some(i) = best_i else {
        return BasisOptimum {
            p_star: None,
            report: best,
            at_boundary: false,
        };
    };

    let mut lo = if i == 0 { 1e-4 } else { grid[i - 1] };
    let mut hi = if i + 1 == grid.len() {
        1.0 - 1e-4
    } else {
        grid[i + 1]
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = eval(x1).rate_per_pulse;
    let mut f2 = eval(x2).rate_per_pulse;
    while hi - lo > P_TOLERANCE {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = eval(x1).rate_per_pulse;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = eval(x2).rate_per_pulse;
        }
    }
    let refined = eval(0.5 * (lo + hi));
    if !refined.aborted && refined.rate_per_pulse > best.rate_per_pulse {
        best = refined;
    }
    BasisOptimum {
        p_star: Some(best.p_z),
        at_boundary: i == 0 || i + 1 == grid.len(),
        report: best,
    }
}

/// Arm length in [lo, hi] km at which the asymptotic rate meets the direct
/// transmission bound, by bisection. `None` if the sign does not change.
pub fn crossover_distance(
    stats: &AnalyzerStats,
    config: &ProtocolConfig,
    dev: &DeviceParams,
    lo: f64,
    hi: f64,
) -> Option<f64> {
    let gap = |d: f64| {
        let c = ProtocolConfig {
            arm_km: d,
            ..*config
        };
        let r = breakdown_with(stats, &c, dev).r_asym;
        r - bound_direct((-d / dev.l_att).exp(), config.n)
    };
    bisect(gap, lo, hi, 1e-6)
}

/// Longest arm with a positive finite-size key (p_z optimized), searched in [lo, hi].
pub fn longest_finite_distance(
    stats: &AnalyzerStats,
    config: &ProtocolConfig,
    dev: &DeviceParams,
    lo: f64,
    hi: f64,
) -> Option<f64> {
    let rate = |d: f64| {
        let c = ProtocolConfig {
            arm_km: d,
            ..*config
        };
        optimize_with(&breakdown_with(stats, &c, dev), &c)
            .report
            .rate_per_pulse
    };
    if rate(lo) <= 0.0 {
        return None;
    }
    if rate(hi) > 0.0 {
        return Some(hi);
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 0.01 {
        let mid = 0.5 * (a + b);
        if rate(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(a)
}

fn bisect(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa.signum() == fb.signum() {
        return None;
    }
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if f(mid).signum() == fa.signum() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(0.5 * (a + b))
}
