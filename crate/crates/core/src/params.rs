//! Physical device constants, protocol configuration and the failure budget.
//!
//! Everything downstream takes these by reference and assumes they passed
//! [`validate`]. Values are plain data: once validated they are never
//! changed, so they can be shared freely across worker threads.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hardware constants of sources, QND heralding, switching and detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// Probability that a source actually emits its single photon.
    pub eta_sps: f64,
    /// Success probability of the QND arrival measurement.
    pub p_qnd: f64,
    /// Probability that the QND measurement heralds an empty slot.
    pub p_false: f64,
    /// Detector efficiency.
    pub eta_d: f64,
    /// Dark-count probability per detector per trial.
    pub p_d: f64,
    /// Active feedforward time, seconds.
    pub tau_a: f64,
    /// Speed of light in fiber, m/s.
    pub c_fiber: f64,
    /// Fiber attenuation length, km.
    pub l_att: f64,
    /// Per-photon bit-flip probability (toggles Z-basis bits).
    pub e_flip: f64,
    /// Per-photon phase-flip probability (toggles X-basis signs).
    pub e_phase: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            eta_sps: 0.9,
            p_qnd: 0.5,
            p_false: 0.0,
            eta_d: 0.93,
            p_d: 1e-9,
            tau_a: 67e-9,
            c_fiber: 2.0e8,
            l_att: 27.14,
            e_flip: 0.005,
            e_phase: 0.015,
        }
    }
}

impl DeviceParams {
    /// Lossless, noiseless hardware. Only the analyser's 2^(1-n) survives.
    pub fn ideal() -> Self {
        Self {
            eta_sps: 1.0,
            p_qnd: 1.0,
            p_false: 0.0,
            eta_d: 1.0,
            p_d: 0.0,
            tau_a: 0.0,
            c_fiber: 2.0e8,
            l_att: 27.14,
            e_flip: 0.0,
            e_phase: 0.0,
        }
    }

    /// Same hardware with both noise channels switched off.
    pub fn without_noise(self) -> Self {
        Self {
            e_flip: 0.0,
            e_phase: 0.0,
            ..self
        }
    }

    pub fn eta_a(&self) -> f64 {
        feedforward_transmittance(self.tau_a, self.c_fiber, self.l_att)
    }

    fn violations(&self, out: &mut Vec<String>) {
        let probabilities = [
            ("eta_sps", self.eta_sps),
            ("p_qnd", self.p_qnd),
            ("p_false", self.p_false),
            ("eta_d", self.eta_d),
            ("p_d", self.p_d),
            ("e_flip", self.e_flip),
            ("e_phase", self.e_phase),
        ];
        for (name, v) in probabilities {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} out of range: {v} not in [0, 1]"));
            }
        }
        if !(self.l_att > 0.0) {
            out.push(format!("l_att must be positive, got {}", self.l_att));
        }
        if !(self.tau_a >= 0.0) {
            out.push(format!("tau_a must be nonnegative, got {}", self.tau_a));
        }
        if !(self.c_fiber > 0.0) {
            out.push(format!("c_fiber must be positive, got {}", self.c_fiber));
        }
    }
}

/// How the feedforward transmittance enters the group gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaAMode {
    /// One factor of η_a per group, as in the published gain factorization.
    #[default]
    Lumped,
    /// Every photon crosses the switch network on its own: η_a^n.
    PerPhoton,
}

/// Failure probabilities of the composable security statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonBudget {
    pub eps_c: f64,
    pub eps_s: f64,
    /// Confidence parameter of the phase-error deviation μ.
    pub eps_prime: f64,
    /// ε̄ in the 2·log2(1/(2ε̄)) penalty.
    pub eps_bar: f64,
}

impl Default for EpsilonBudget {
    fn default() -> Self {
        Self::with_secrecy(1e-15, 1e-10)
    }
}

impl EpsilonBudget {
    /// Splits `eps_s` evenly into ε′ = ε̄ = ε_s / 3.
    pub fn with_secrecy(eps_c: f64, eps_s: f64) -> Self {
        Self {
            eps_c,
            eps_s,
            eps_prime: eps_s / 3.0,
            eps_bar: eps_s / 3.0,
        }
    }

    pub fn eps_sec(&self) -> f64 {
        self.eps_c + self.eps_s
    }

    fn violations(&self, out: &mut Vec<String>) {
        for (name, v) in [
            ("eps_c", self.eps_c),
            ("eps_s", self.eps_s),
            ("eps_prime", self.eps_prime),
            ("eps_bar", self.eps_bar),
        ] {
            if !(v > 0.0 && v < 1.0) {
                out.push(format!("{name} out of range: {v} not in (0, 1)"));
            }
        }
        // the even split lands exactly on eps_s up to rounding
        let used = self.eps_prime + 2.0 * self.eps_bar;
        if used > self.eps_s * (1.0 + 1e-12) {
            out.push(format!(
                "epsilon budget not closed: eps_prime + 2 eps_bar = {used:e} exceeds eps_s = {:e}",
                self.eps_s
            ));
        }
    }
}

/// Protocol-level choices shared by every user (symmetric star).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Number of users.
    pub n: usize,
    /// Fiber length from each user to the relay, km.
    pub arm_km: f64,
    /// Multiplexed pulses per user per round.
    #[serde(rename = "M")]
    pub multiplexing: u64,
    /// Probability of preparing in the Z basis.
    pub p_z: f64,
    /// Total pulses per user.
    #[serde(rename = "L")]
    pub pulses: f64,
    /// Error-correction inefficiency.
    pub f: f64,
    /// Preparation quality.
    pub q: f64,
    pub eta_a_mode: EtaAMode,
    #[serde(skip)]
    pub budget: EpsilonBudget,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n: 3,
            arm_km: 50.0,
            multiplexing: 10_000,
            p_z: 0.5,
            pulses: 1e12,
            f: 1.1,
            q: 1.0,
            eta_a_mode: EtaAMode::Lumped,
            budget: EpsilonBudget::default(),
        }
    }
}

impl ProtocolConfig {
    fn violations(&self, out: &mut Vec<String>) {
        if self.n < 2 {
            out.push(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.arm_km >= 0.0 && self.arm_km.is_finite()) {
            out.push(format!(
                "arm_km must be a finite nonnegative distance, got {}",
                self.arm_km
            ));
        }
        if self.multiplexing < 1 {
            out.push("M must be at least 1".to_string());
        }
        if !(self.p_z > 0.0 && self.p_z < 1.0) {
            out.push(format!("p_z out of range: {} not in (0, 1)", self.p_z));
        }
        if !(self.pulses >= 1.0 && self.pulses.is_finite()) {
            out.push(format!("L must be at least 1, got {}", self.pulses));
        }
        if !(self.f >= 1.0) {
            out.push(format!("f must be at least 1, got {}", self.f));
        }
        if !(0.0..=1.0).contains(&self.q) {
            out.push(format!("q out of range: {} not in [0, 1]", self.q));
        }
        self.budget.violations(out);
    }
}

/// √η_channel = exp(−arm/l_att).
pub fn arm_transmittance(arm_km: f64, l_att: f64) -> Result<f64> {
    if !(l_att > 0.0) {
        return Err(Error::Invalid(vec![format!(
            "l_att must be positive, got {l_att}"
        )]));
    }
    if !(arm_km >= 0.0) {
        return Err(Error::Invalid(vec![format!(
            "arm_km must be nonnegative, got {arm_km}"
        )]));
    }
    Ok((-arm_km / l_att).exp())
}

/// Switching delay as an equivalent fiber loss: exp(−τ_a·c/l_att), with τ_a·c in km.
pub fn feedforward_transmittance(tau_a: f64, c_fiber: f64, l_att: f64) -> f64 {
    let delay_km = tau_a * c_fiber / 1000.0;
    (-delay_km / l_att).exp()
}

/// Closed-form single-arm efficiency used for the multiplexing warning:
/// 2^(1−n)·η_dⁿ·p_QND·η_a·η_sps·√η_channel. Dark counts and noise are ignored.
pub fn nominal_efficiency(config: &ProtocolConfig, dev: &DeviceParams) -> f64 {
    let n = config.n as i32;
    let eta_a = match config.eta_a_mode {
        EtaAMode::Lumped => dev.eta_a(),
        EtaAMode::PerPhoton => dev.eta_a().powi(n),
    };
    let arm = (-config.arm_km / dev.l_att).exp();
    2f64.powi(1 - n) * dev.eta_d.powi(n) * dev.p_qnd * eta_a * dev.eta_sps * arm
}

/// A configuration that passed every invariant, with non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub config: ProtocolConfig,
    pub device: DeviceParams,
    pub warnings: Vec<String>,
}

/// Checks every invariant of both parameter sets. All violations are
/// collected before failing. A multiplexing count below 1/η_t only warns.
pub fn validate(config: &ProtocolConfig, dev: &DeviceParams) -> Result<Validated> {
    let mut errors = Vec::new();
    dev.violations(&mut errors);
    config.violations(&mut errors);
    if !errors.is_empty() {
        return Err(Error::Invalid(errors));
    }

    let mut warnings = Vec::new();
    let eta_t = nominal_efficiency(config, dev);
    if eta_t > 0.0 && (config.multiplexing as f64) < 1.0 / eta_t {
        warnings.push(format!(
            "M below eta_t^-1: M = {} < {:.1} (eta_t = {eta_t:.4e}); fewer than one group per round on average",
            config.multiplexing,
            1.0 / eta_t
        ));
    }
    Ok(Validated {
        config: *config,
        device: *dev,
        warnings,
    })
}

/// On-disk configuration: `{"device": …, "protocol": …, "epsilons": …}`.
/// Missing keys take defaults, unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDocument {
    pub device: DeviceParams,
    pub protocol: ProtocolConfig,
    pub epsilons: EpsilonBudget,
}

impl ConfigDocument {
    pub fn new(config: &ProtocolConfig, device: &DeviceParams) -> Self {
        Self {
            device: *device,
            protocol: *config,
            epsilons: config.budget,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConfigDocument = serde_json::from_str(text)?;
        Ok(doc)
    }

    /// Protocol section with the epsilon budget folded in.
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            budget: self.epsilons,
            ..self.protocol
        }
    }

    /// Compact, key-ordered JSON used in report headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameter snapshot serializes")
    }

    /// SHA-256 of [`Self::to_json`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
