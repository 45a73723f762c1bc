//! Linear-optics GHZ analyser.
//!
//! The analyser interferes one photon per user and can only announce the two
//! states `|GHZ±⟩ = (|H…H⟩ ± |V…V⟩)/√2`. Each spatial mode ends in a pair of
//! threshold detectors measuring in the ± basis. The detector model is:
//!
//! * a GHZ± projection produces exactly one click per mode, with an even
//!   (GHZ+) or odd (GHZ−) number of "−" clicks, uniformly among such patterns;
//! * a failed projection bunches two photons into one mode and leaves one
//!   mode empty, so it can only be accepted through a dark count;
//! * each true click survives with probability η_d, and every detector
//!   independently dark-clicks with probability p_d.
//!
//! [`enumerate_outcome_distribution`] marginalizes this model exactly over all
//! 4ⁿ click subsets and is the oracle for both the rate engine and the
//! Monte Carlo sampler.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::DeviceParams;

/// Largest group size handled by exact enumeration (4^12 ≈ 1.7e7 patterns).
pub const MAX_ENUMERATION_USERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

/// One of the four BB84 polarization states.
///
/// Z: `false` ↔ H, `true` ↔ V. X: `false` ↔ +, `true` ↔ −.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreparedQubit {
    pub basis: Basis,
    pub bit: bool,
}

impl PreparedQubit {
    pub const fn z(bit: bool) -> Self {
        Self {
            basis: Basis::Z,
            bit,
        }
    }

    pub const fn x(bit: bool) -> Self {
        Self {
            basis: Basis::X,
            bit,
        }
    }

    /// Real amplitudes on (H, V).
    pub fn amplitudes(&self) -> (f64, f64) {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        match (self.basis, self.bit) {
            (Basis::Z, false) => (1.0, 0.0),
            (Basis::Z, true) => (0.0, 1.0),
            (Basis::X, false) => (r, r),
            (Basis::X, true) => (r, -r),
        }
    }

    /// ±1 eigenvalue of the X-basis sign (only meaningful for X preparations).
    pub fn sign(&self) -> i8 {
        if self.bit {
            -1
        } else {
            1
        }
    }

    /// The state after the per-photon noise channels: e_flip toggles Z bits,
    /// e_phase toggles X signs.
    pub fn with_noise<R: Rng + ?Sized>(self, dev: &DeviceParams, rng: &mut R) -> Self {
        let p = match self.basis {
            Basis::Z => dev.e_flip,
            Basis::X => dev.e_phase,
        };
        if p > 0.0 && rng.random_bool(p) {
            Self {
                bit: !self.bit,
                ..self
            }
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    GhzPlus,
    GhzMinus,
    Invalid,
}

impl Verdict {
    pub fn is_accepted(self) -> bool {
        !matches!(self, Verdict::Invalid)
    }

    fn index(self) -> usize {
        match self {
            Verdict::GhzPlus => 0,
            Verdict::GhzMinus => 1,
            Verdict::Invalid => 2,
        }
    }
}

/// Which component of the input state the projection selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Plus,
    Minus,
    Fail,
}

impl Branch {
    fn index(self) -> usize {
        match self {
            Branch::Plus => 0,
            Branch::Minus => 1,
            Branch::Fail => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// Click flags of the 2n analyser detectors, detector `2m + d` for mode `m`
/// and sign `d` (0 = "+", 1 = "−").
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClickPattern {
    clicks: Vec<bool>,
}

impl ClickPattern {
    pub fn empty(n: usize) -> Self {
        Self {
            clicks: vec![false; 2 * n],
        }
    }

    pub fn from_clicks(clicks: Vec<bool>, n: usize) -> Result<Self> {
        if clicks.len() != 2 * n {
            return Err(Error::PatternSize {
                got: clicks.len(),
                expected: 2 * n,
            });
        }
        Ok(Self { clicks })
    }

    /// One click per mode at the given signs.
    pub fn from_signs(signs: &[Sign]) -> Self {
        let mut p = Self::empty(signs.len());
        for (m, s) in signs.iter().enumerate() {
            p.set(m, *s, true);
        }
        p
    }

    pub fn modes(&self) -> usize {
        self.clicks.len() / 2
    }

    pub fn get(&self, mode: usize, sign: Sign) -> bool {
        self.clicks[Self::slot(mode, sign)]
    }

    pub fn set(&mut self, mode: usize, sign: Sign, on: bool) {
        self.clicks[Self::slot(mode, sign)] = on;
    }

    pub fn clicks(&self) -> &[bool] {
        &self.clicks
    }

    fn slot(mode: usize, sign: Sign) -> usize {
        2 * mode
            + match sign {
                Sign::Plus => 0,
                Sign::Minus => 1,
            }
    }
}

/// Projection probabilities of a product input onto GHZ+, GHZ− and the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub plus: f64,
    pub minus: f64,
    pub fail: f64,
}

impl Overlap {
    fn of(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.plus,
            Branch::Minus => self.minus,
            Branch::Fail => self.fail,
        }
    }
}

pub fn ghz_overlap(prep: &[PreparedQubit]) -> Result<Overlap> {
    if prep.len() < 2 {
        return Err(Error::TooFewUsers(prep.len()));
    }
    let (h, v) = prep.iter().fold((1.0, 1.0), |(h, v), q| {
        let (a, b) = q.amplitudes();
        (h * a, v * b)
    });
    let plus = 0.5 * (h + v) * (h + v);
    let minus = 0.5 * (h - v) * (h - v);
    Ok(Overlap {
        plus,
        minus,
        fail: (1.0 - plus - minus).max(0.0),
    })
}

pub fn sample_branch<R: Rng + ?Sized>(overlap: &Overlap, rng: &mut R) -> Branch {
    let u: f64 = rng.random();
    if u < overlap.plus {
        Branch::Plus
    } else if u < overlap.plus + overlap.minus {
        Branch::Minus
    } else {
        Branch::Fail
    }
}

/// Canonical detector signature of a GHZ± projection: one click per mode and
/// "−"-click parity matching the verdict, uniform among such patterns.
pub fn ideal_pattern<R: Rng + ?Sized>(
    verdict: Verdict,
    n: usize,
    rng: &mut R,
) -> Result<ClickPattern> {
    let odd = match verdict {
        Verdict::GhzPlus => false,
        Verdict::GhzMinus => true,
        Verdict::Invalid => return Err(Error::InvalidVerdict),
    };
    if n < 2 {
        return Err(Error::TooFewUsers(n));
    }
    let mut signs = Vec::with_capacity(n);
    let mut parity = false;
    for _ in 0..n - 1 {
        let minus: bool = rng.random();
        parity ^= minus;
        signs.push(if minus { Sign::Minus } else { Sign::Plus });
    }
    signs.push(if parity != odd {
        Sign::Minus
    } else {
        Sign::Plus
    });
    Ok(ClickPattern::from_signs(&signs))
}

/// Truth pattern of a failed projection: two photons share one mode (a single
/// detector), another mode is left empty, the rest carry one photon each.
pub fn bunched_pattern<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ClickPattern {
    let empty = rng.random_range(0..n);
    let mut pattern = ClickPattern::empty(n);
    for m in (0..n).filter(|&m| m != empty) {
        let sign = if rng.random() {
            Sign::Minus
        } else {
            Sign::Plus
        };
        pattern.set(m, sign, true);
    }
    pattern
}

/// Detector layer: true clicks survive with η_d (only in modes that actually
/// carry photons); every detector then ORs in a dark count with p_d.
pub fn apply_detectors<R: Rng + ?Sized>(
    truth: &ClickPattern,
    photons_present: &[bool],
    dev: &DeviceParams,
    rng: &mut R,
) -> ClickPattern {
    let clicks = truth
        .clicks
        .iter()
        .enumerate()
        .map(|(j, &fired)| {
            let real = fired && photons_present[j / 2] && rng.random_bool(dev.eta_d);
            let dark = dev.p_d > 0.0 && rng.random_bool(dev.p_d);
            real || dark
        })
        .collect();
    ClickPattern { clicks }
}

pub fn classify(pattern: &ClickPattern) -> Verdict {
    let mut odd = false;
    for pair in pattern.clicks.chunks_exact(2) {
        match (pair[0], pair[1]) {
            (true, false) => {}
            (false, true) => odd = !odd,
            _ => return Verdict::Invalid,
        }
    }
    if odd {
        Verdict::GhzMinus
    } else {
        Verdict::GhzPlus
    }
}

/// One sampled analyser run on an (already noisy) group of photons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledOutcome {
    pub branch: Branch,
    pub verdict: Verdict,
}

pub fn sample_outcome<R: Rng + ?Sized>(
    prep: &[PreparedQubit],
    photons_present: &[bool],
    dev: &DeviceParams,
    rng: &mut R,
) -> Result<SampledOutcome> {
    let overlap = ghz_overlap(prep)?;
    let branch = sample_branch(&overlap, rng);
    let n = prep.len();
    let truth = match branch {
        Branch::Plus => ideal_pattern(Verdict::GhzPlus, n, rng)?,
        Branch::Minus => ideal_pattern(Verdict::GhzMinus, n, rng)?,
        Branch::Fail => bunched_pattern(n, rng),
    };
    let observed = apply_detectors(&truth, photons_present, dev, rng);
    Ok(SampledOutcome {
        branch,
        verdict: classify(&observed),
    })
}

/// Exact joint law of (projection branch, announced verdict).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeDistribution {
    /// `joint[branch][verdict]`, rows Plus/Minus/Fail, columns GhzPlus/GhzMinus/Invalid.
    pub joint: [[f64; 3]; 3],
}

impl OutcomeDistribution {
    pub fn verdict(&self, v: Verdict) -> f64 {
        self.joint.iter().map(|row| row[v.index()]).sum()
    }

    pub fn joint(&self, b: Branch, v: Verdict) -> f64 {
        self.joint[b.index()][v.index()]
    }

    pub fn accepted(&self) -> f64 {
        self.verdict(Verdict::GhzPlus) + self.verdict(Verdict::GhzMinus)
    }

    /// Accepted with the opposite sign to the projection that happened.
    pub fn misidentified(&self) -> f64 {
        self.joint(Branch::Plus, Verdict::GhzMinus) + self.joint(Branch::Minus, Verdict::GhzPlus)
    }

    /// Accepted although the projection failed (dark-count assisted).
    pub fn fail_accepted(&self) -> f64 {
        self.joint(Branch::Fail, Verdict::GhzPlus) + self.joint(Branch::Fail, Verdict::GhzMinus)
    }

    pub fn total(&self) -> f64 {
        self.joint.iter().flatten().sum()
    }
}

/// Exact outcome distribution for a product input of photons, all present.
pub fn enumerate_outcome_distribution(
    prep: &[PreparedQubit],
    dev: &DeviceParams,
) -> Result<OutcomeDistribution> {
    let overlap = ghz_overlap(prep)?;
    enumerate_for_overlap(&overlap, prep.len(), dev)
}

/// Same as [`enumerate_outcome_distribution`] for a precomputed overlap.
pub fn enumerate_for_overlap(
    overlap: &Overlap,
    n: usize,
    dev: &DeviceParams,
) -> Result<OutcomeDistribution> {
    let conditional = detector_response(n, dev)?;
    let mut joint = [[0.0; 3]; 3];
    for b in [Branch::Plus, Branch::Minus, Branch::Fail] {
        for v in 0..3 {
            joint[b.index()][v] = overlap.of(b) * conditional[b.index()][v];
        }
    }
    Ok(OutcomeDistribution { joint })
}

type Response = [[f64; 3]; 3];
type ResponseCache = HashMap<(usize, u64, u64), Response>;

/// `P(verdict | branch)` for the detector model, by enumeration over every
/// subset of the 2n detectors. Depends only on (n, η_d, p_d) and is memoized.
pub fn detector_response(n: usize, dev: &DeviceParams) -> Result<Response> {
    if n < 2 {
        return Err(Error::TooFewUsers(n));
    }
    if n > MAX_ENUMERATION_USERS {
        return Err(Error::EnumerationBound {
            n,
            max: MAX_ENUMERATION_USERS,
        });
    }
    static CACHE: OnceLock<Mutex<ResponseCache>> = OnceLock::new();
    let key = (n, dev.eta_d.to_bits(), dev.p_d.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
        return Ok(*hit);
    }
    let response = enumerate_response(n, dev.eta_d, dev.p_d);
    cache.lock().expect("cache lock").insert(key, response);
    Ok(response)
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    carry: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn enumerate_response(n: usize, eta_d: f64, p_d: f64) -> Response {
    // Per-mode observation states: bit 0 = "+" fired, bit 1 = "−" fired.
    let on_true = 1.0 - (1.0 - eta_d) * (1.0 - p_d);
    let on_dark = p_d;
    let fire = |on: bool, p: f64| if on { p } else { 1.0 - p };
    let mut plus_given = [0.0; 4];
    let mut minus_given = [0.0; 4];
    let mut empty_given = [0.0; 4];
    for st in 0..4 {
        let (p, m) = (st & 1 == 1, st & 2 == 2);
        plus_given[st] = fire(p, on_true) * fire(m, on_dark);
        minus_given[st] = fire(p, on_dark) * fire(m, on_true);
        empty_given[st] = fire(p, on_dark) * fire(m, on_dark);
    }
    let avg: [f64; 4] = std::array::from_fn(|s| 0.5 * (plus_given[s] + minus_given[s]));
    let half_diff: [f64; 4] = std::array::from_fn(|s| 0.5 * (plus_given[s] - minus_given[s]));
    let inv_n = 1.0 / n as f64;

    // The lowest two modes are enumerated inside each work item.
    let total = 1usize << (2 * n);
    let chunk = 16usize;
    let partials: Vec<[[Neumaier; 3]; 3]> = (0..total / chunk)
        .into_par_iter()
        .map(|c| {
            let mut acc = [[Neumaier::default(); 3]; 3];
            for s in c * chunk..(c + 1) * chunk {
                let mut all_avg = 1.0;
                let mut all_diff = 1.0;
                // sum over the empty mode e of z_e · Π_{m≠e} avg_m
                let mut one_empty = 0.0;
                let mut valid = true;
                let mut odd = false;
                for m in 0..n {
                    let st = (s >> (2 * m)) & 3;
                    one_empty = one_empty * avg[st] + all_avg * empty_given[st];
                    all_avg *= avg[st];
                    all_diff *= half_diff[st];
                    match st {
                        1 => {}
                        2 => odd = !odd,
                        _ => valid = false,
                    }
                }
                let verdict = match (valid, odd) {
                    (false, _) => Verdict::Invalid,
                    (true, false) => Verdict::GhzPlus,
                    (true, true) => Verdict::GhzMinus,
                }
                .index();
                // parity-constrained sums over the 2^(n-1) truth patterns
                acc[0][verdict].add((all_avg + all_diff).max(0.0));
                acc[1][verdict].add((all_avg - all_diff).max(0.0));
                acc[2][verdict].add(one_empty * inv_n);
            }
            acc
        })
        .collect();

    let mut out = [[Neumaier::default(); 3]; 3];
    for part in &partials {
        for b in 0..3 {
            for v in 0..3 {
                out[b][v].add(part[b][v].value());
            }
        }
    }
    std::array::from_fn(|b| std::array::from_fn(|v| out[b][v].value()))
}

/// Every product preparation of n users, in lexicographic order.
pub fn all_preparations(n: usize) -> impl Iterator<Item = Vec<PreparedQubit>> {
    let states = [
        PreparedQubit::z(false),
        PreparedQubit::z(true),
        PreparedQubit::x(false),
        PreparedQubit::x(true),
    ];
    (0..1usize << (2 * n)).map(move |code| (0..n).map(|i| states[(code >> (2 * i)) & 3]).collect())
}
