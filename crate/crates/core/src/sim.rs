//! Seeded Monte Carlo of the full protocol.
//!
//! One round is M pulses per user: heralding, FIFO grouping, per-group
//! preparation and noise, feedforward loss, analyser sampling, announcement
//! and sifting. Every round draws from its own ChaCha8 stream (master seed,
//! stream = round index), so the ledger does not depend on how rounds are
//! scheduled across threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analyzer::{self, Basis, PreparedQubit, Verdict};
use crate::error::{Error, Result};
use crate::multiplex;
use crate::params::{ConfigDocument, DeviceParams, EtaAMode, ProtocolConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SiftClass {
    KeygenZ,
    TestX,
    Discard,
}

impl SiftClass {
    pub fn of(preps: &[PreparedQubit]) -> Self {
        if preps.iter().all(|p| p.basis == Basis::Z) {
            SiftClass::KeygenZ
        } else if preps.iter().all(|p| p.basis == Basis::X) {
            SiftClass::TestX
        } else {
            SiftClass::Discard
        }
    }
}

/// One announced group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialRecord {
    pub round: u64,
    pub group: u64,
    /// Prepared states, one per user (before channel noise).
    pub preps: Vec<PreparedQubit>,
    pub verdict: Verdict,
    pub kept: bool,
    pub class: SiftClass,
}

/// Which trial records the ledger retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrialRecording {
    #[default]
    None,
    /// Only kept KEYGEN_Z and TEST_X trials (what sifting needs).
    Kept,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    pub record: TrialRecording,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub pulses_per_user: u64,
    /// Heralds over all users, including false ones.
    pub heralds: u64,
    pub false_heralds: u64,
    pub groups: u64,
    pub accepted: u64,
    pub ghz_plus: u64,
    pub ghz_minus: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Tallies {
    /// Groups in which every user chose Z.
    pub z_groups: u64,
    pub z_accepted: u64,
    /// Accepted all-Z groups where user 1 and user i (i = 2..n) disagree.
    pub z_disagreements: Vec<u64>,
    pub x_groups: u64,
    pub x_accepted: u64,
    pub x_parity_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationLedger {
    pub n: usize,
    pub seed: u64,
    pub rounds: u64,
    pub params: ConfigDocument,
    pub totals: Totals,
    pub tallies: Tallies,
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
}

/// Error iff the verdict's parity disagrees with the product of the prepared signs.
pub fn phase_error_rule(verdict: Verdict, preps: &[PreparedQubit]) -> Result<bool> {
    if !verdict.is_accepted() || preps.iter().any(|p| p.basis != Basis::X) {
        return Err(Error::NotAnXTrial);
    }
    let odd = preps.iter().filter(|p| p.bit).count() % 2 == 1;
    Ok(match verdict {
        Verdict::GhzPlus => odd,
        _ => !odd,
    })
}

pub fn run_protocol(
    config: &ProtocolConfig,
    dev: &DeviceParams,
    rounds: u64,
    seed: u64,
) -> SimulationLedger {
    run_protocol_with(config, dev, rounds, seed, SimOptions::default())
}

pub fn run_protocol_with(
    config: &ProtocolConfig,
    dev: &DeviceParams,
    rounds: u64,
    seed: u64,
    options: SimOptions,
) -> SimulationLedger {
    let n = config.n;
    let parts: Vec<RoundResult> = (0..rounds)
        .into_par_iter()
        .map(|round| run_round(config, dev, seed, round, options.record))
        .collect();

    let mut totals = Totals {
        pulses_per_user: rounds * config.multiplexing,
        ..Totals::default()
    };
    let mut tallies = Tallies {
        z_disagreements: vec![0; n.saturating_sub(1)],
        ..Tallies::default()
    };
    let mut trials = Vec::new();
    for part in parts {
        totals.heralds += part.totals.heralds;
        totals.false_heralds += part.totals.false_heralds;
        totals.groups += part.totals.groups;
        totals.accepted += part.totals.accepted;
        totals.ghz_plus += part.totals.ghz_plus;
        totals.ghz_minus += part.totals.ghz_minus;
        tallies.z_groups += part.tallies.z_groups;
        tallies.z_accepted += part.tallies.z_accepted;
        for (acc, d) in tallies
            .z_disagreements
            .iter_mut()
            .zip(&part.tallies.z_disagreements)
        {
            *acc += d;
        }
        tallies.x_groups += part.tallies.x_groups;
        tallies.x_accepted += part.tallies.x_accepted;
        tallies.x_parity_errors += part.tallies.x_parity_errors;
        trials.extend(part.trials);
    }
    SimulationLedger {
        n,
        seed,
        rounds,
        params: ConfigDocument::new(config, dev),
        totals,
        tallies,
        trials,
    }
}

struct RoundResult {
    totals: Totals,
    tallies: Tallies,
    trials: Vec<TrialRecord>,
}

fn run_round(
    config: &ProtocolConfig,
    dev: &DeviceParams,
    seed: u64,
    round: u64,
    record: TrialRecording,
) -> RoundResult {
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);

    let arrivals = multiplex::herald_arrivals(config, dev, &mut rng);
    let plan = multiplex::form_groups(&arrivals);
    let slots = multiplex::fill_slots(&arrivals, &plan, &mut rng);
    let eta_a = dev.eta_a();

    let mut totals = Totals {
        heralds: arrivals.per_user().iter().sum(),
        false_heralds: arrivals.false_heralds.iter().sum(),
        groups: plan.n_groups,
        ..Totals::default()
    };
    let mut tallies = Tallies {
        z_disagreements: vec![0; n - 1],
        ..Tallies::default()
    };
    let mut trials = Vec::new();

    // Preparations of grouped pulses only: the others never reach the
    // analyser and the choices are iid, so this does not change the law.
    for (group, slot) in slots.iter().enumerate() {
        let preps: Vec<PreparedQubit> = (0..n)
            .map(|_| {
                let basis = if rng.random_bool(config.p_z) {
                    Basis::Z
                } else {
                    Basis::X
                };
                PreparedQubit {
                    basis,
                    bit: rng.random(),
                }
            })
            .collect();
        let photons: Vec<PreparedQubit> =
            preps.iter().map(|p| p.with_noise(dev, &mut rng)).collect();
        let present: Vec<bool> = match config.eta_a_mode {
            EtaAMode::Lumped => {
                let through = rng.random_bool(eta_a);
                slot.iter().map(|&s| s && through).collect()
            }
            EtaAMode::PerPhoton => slot.iter().map(|&s| s && rng.random_bool(eta_a)).collect(),
        };
        let outcome = analyzer::sample_outcome(&photons, &present, dev, &mut rng)
            .expect("n >= 2 is validated");
        let verdict = outcome.verdict;
        let class = SiftClass::of(&preps);
        let accepted = verdict.is_accepted();
        match verdict {
            Verdict::GhzPlus => totals.ghz_plus += 1,
            Verdict::GhzMinus => totals.ghz_minus += 1,
            Verdict::Invalid => {}
        }
        totals.accepted += accepted as u64;
        match class {
            SiftClass::KeygenZ => {
                tallies.z_groups += 1;
                if accepted {
                    tallies.z_accepted += 1;
                    for (i, d) in tallies.z_disagreements.iter_mut().enumerate() {
                        *d += (preps[0].bit != preps[i + 1].bit) as u64;
                    }
                }
            }
            SiftClass::TestX => {
                tallies.x_groups += 1;
                if accepted {
                    tallies.x_accepted += 1;
                    tallies.x_parity_errors +=
                        phase_error_rule(verdict, &preps).expect("accepted X trial") as u64;
                }
            }
            SiftClass::Discard => {}
        }
        let kept = accepted && class != SiftClass::Discard;
        let keep_record = match record {
            TrialRecording::None => false,
            TrialRecording::Kept => kept,
            TrialRecording::All => true,
        };
        if keep_record {
            trials.push(TrialRecord {
                round,
                group: group as u64,
                preps,
                verdict,
                kept,
                class,
            });
        }
    }
    RoundResult {
        totals,
        tallies,
        trials,
    }
}

/// A frequency with its Wald standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    fn wald(count: u64, trials: f64) -> Option<Self> {
        if trials <= 0.0 {
            return None;
        }
        let p = count as f64 / trials;
        Some(Self {
            value: p,
            std_error: (p * (1.0 - p).max(0.0) / trials).sqrt(),
        })
    }

    /// (value − reference)/std_error; 0 when both coincide with no spread.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = self.value - reference;
        if diff == 0.0 {
            0.0
        } else if self.std_error == 0.0 {
            diff.signum() * f64::INFINITY
        } else {
            diff / self.std_error
        }
    }
}

/// Empirical counterparts of the rate-engine quantities. `None` marks a class
/// with nothing to count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalRates {
    /// Accepted all-Z groups per all-Z pulse per user: count/(p_zⁿ·pulses).
    pub q_z: Option<Estimate>,
    pub q_x: Option<Estimate>,
    pub e_z_marginal: Vec<Option<Estimate>>,
    pub e_x: Option<Estimate>,
}

pub fn empirical_rates(ledger: &SimulationLedger) -> EmpiricalRates {
    let config = ledger.params.protocol();
    let n = ledger.n as i32;
    let pulses = ledger.totals.pulses_per_user as f64;
    let t = &ledger.tallies;
    let z_pulses = config.p_z.powi(n) * pulses;
    let x_pulses = (1.0 - config.p_z).powi(n) * pulses;
    let positive = |e: Option<Estimate>, count: u64| e.filter(|_| count > 0);
    EmpiricalRates {
        q_z: positive(Estimate::wald(t.z_accepted, z_pulses), t.z_accepted),
        q_x: positive(Estimate::wald(t.x_accepted, x_pulses), t.x_accepted),
        e_z_marginal: t
            .z_disagreements
            .iter()
            .map(|&d| Estimate::wald(d, t.z_accepted as f64))
            .collect(),
        e_x: Estimate::wald(t.x_parity_errors, t.x_accepted as f64),
    }
}

impl SimulationLedger {
    /// One row per tally class: `class,count`.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("pulses_per_user".to_string(), self.totals.pulses_per_user),
            ("heralds".to_string(), self.totals.heralds),
            ("false_heralds".to_string(), self.totals.false_heralds),
            ("groups".to_string(), self.totals.groups),
            ("accepted".to_string(), self.totals.accepted),
            ("ghz_plus".to_string(), self.totals.ghz_plus),
            ("ghz_minus".to_string(), self.totals.ghz_minus),
            ("z_groups".to_string(), self.tallies.z_groups),
            ("z_accepted".to_string(), self.tallies.z_accepted),
        ];
        for (i, d) in self.tallies.z_disagreements.iter().enumerate() {
            rows.push((format!("z_disagree_1_{}", i + 2), *d));
        }
        rows.push(("x_groups".to_string(), self.tallies.x_groups));
        rows.push(("x_accepted".to_string(), self.tallies.x_accepted));
        rows.push(("x_parity_errors".to_string(), self.tallies.x_parity_errors));

        let mut out = String::from("class,count\n");
        for (class, count) in rows {
            out.push_str(&format!("{class},{count}\n"));
        }
        out
    }

    /// Parameter snapshot, seed, counts and empirical rates as JSON.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "rounds": self.rounds,
            "params": self.params,
            "params_digest": self.params.digest(),
            "totals": self.totals,
            "tallies": self.tallies,
            "empirical": empirical_rates(self),
        })
    }

    /// Every tally fits inside the totals it was drawn from.
    pub fn check_conservation(&self) -> bool {
        let t = &self.totals;
        let y = &self.tallies;
        t.heralds <= t.pulses_per_user * self.n as u64
            && t.false_heralds <= t.heralds
            && t.groups * self.n as u64 <= t.heralds
            && t.accepted <= t.groups
            && t.ghz_plus + t.ghz_minus == t.accepted
            && y.z_groups + y.x_groups <= t.groups
            && y.z_accepted <= y.z_groups
            && y.x_accepted <= y.x_groups
            && y.z_accepted + y.x_accepted <= t.accepted
            && y.x_parity_errors <= y.x_accepted
            && y.z_disagreements.iter().all(|&d| d <= y.z_accepted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> DeviceParams {
        DeviceParams {
            p_d: 0.0,
            ..DeviceParams::default()
        }
        .without_noise()
    }

    #[test]
    fn phase_rule_examples() {
        let s = |bits: [bool; 3]| bits.map(PreparedQubit::x);
        assert!(!phase_error_rule(Verdict::GhzPlus, &s([false, false, false])).unwrap());
        assert!(phase_error_rule(Verdict::GhzPlus, &s([false, false, true])).unwrap());
        assert!(!phase_error_rule(Verdict::GhzMinus, &s([true, false, false])).unwrap());
        assert!(phase_error_rule(Verdict::GhzMinus, &s([false, false, false])).unwrap());
        let mixed = [PreparedQubit::x(false), PreparedQubit::z(false)];
        assert!(matches!(
            phase_error_rule(Verdict::GhzPlus, &mixed),
            Err(Error::NotAnXTrial)
        ));
        assert!(phase_error_rule(Verdict::Invalid, &s([false; 3])).is_err());
    }

    #[test]
    fn lossless_two_user_z_accepts_half() {
        // every round makes one group; acceptance is the bit-match probability 1/2
        let config = ProtocolConfig {
            n: 2,
            arm_km: 0.0,
            multiplexing: 1,
            p_z: 1.0,
            ..Default::default()
        };
        let dev = DeviceParams {
            p_qnd: 1.0,
            eta_sps: 1.0,
            tau_a: 0.0,
            ..DeviceParams::ideal()
        };
        let rounds = 40_000;
        let ledger = run_protocol_with(
            &config,
            &dev,
            rounds,
            7,
            SimOptions {
                record: TrialRecording::Kept,
            },
        );
        assert_eq!(ledger.totals.groups, rounds);
        let frac = ledger.tallies.z_accepted as f64 / rounds as f64;
        let sigma = (0.25 / rounds as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "{frac}");
        // perfect-correlation postselection
        for t in &ledger.trials {
            assert!(t.preps.iter().all(|p| p.bit == t.preps[0].bit));
        }
        assert!(ledger.tallies.z_disagreements.iter().all(|&d| d == 0));
    }

    #[test]
    fn all_z_means_no_test_class() {
        let config = ProtocolConfig {
            p_z: 1.0,
            multiplexing: 1000,
            ..Default::default()
        };
        let ledger = run_protocol(&config, &DeviceParams::default(), 20, 3);
        assert_eq!(ledger.tallies.x_groups, 0);
        assert_eq!(ledger.tallies.x_accepted, 0);
        let rates = empirical_rates(&ledger);
        assert!(rates.e_x.is_none());
        assert!(rates.q_x.is_none());
    }

    #[test]
    fn empty_ledger_has_no_estimates() {
        let config = ProtocolConfig {
            arm_km: 2000.0,
            multiplexing: 10,
            ..Default::default()
        };
        let ledger = run_protocol(&config, &quiet(), 5, 1);
        assert_eq!(ledger.totals.accepted, 0);
        let rates = empirical_rates(&ledger);
        assert!(rates.q_z.is_none() && rates.e_x.is_none());
        assert!(rates.e_z_marginal.iter().all(Option::is_none));
    }

    #[test]
    fn ideal_devices_give_zero_error_estimates() {
        let config = ProtocolConfig {
            arm_km: 10.0,
            multiplexing: 2000,
            ..Default::default()
        };
        let ledger = run_protocol(&config, &quiet(), 50, 11);
        let rates = empirical_rates(&ledger);
        assert_eq!(rates.e_x.unwrap().value, 0.0);
        for e in rates.e_z_marginal {
            assert_eq!(e.unwrap().value, 0.0);
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let config = ProtocolConfig {
            multiplexing: 2000,
            ..Default::default()
        };
        let dev = DeviceParams::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    run_protocol_with(
                        &config,
                        &dev,
                        64,
                        99,
                        SimOptions {
                            record: TrialRecording::All,
                        },
                    )
                })
        };
        let one = run(1);
        let many = run(8);
        assert_eq!(one, many);
        assert_eq!(one.to_csv(), many.to_csv());
        assert_ne!(one, run_protocol(&config, &dev, 64, 100));
    }

    #[test]
    fn records_are_consistent() {
        let config = ProtocolConfig {
            multiplexing: 2000,
            ..Default::default()
        };
        let ledger = run_protocol_with(
            &config,
            &DeviceParams::default(),
            20,
            5,
            SimOptions {
                record: TrialRecording::All,
            },
        );
        assert_eq!(ledger.trials.len() as u64, ledger.totals.groups);
        for t in &ledger.trials {
            assert_eq!(t.class, SiftClass::of(&t.preps));
            if t.kept {
                assert!(t.verdict.is_accepted());
                assert_ne!(t.class, SiftClass::Discard);
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_class() {
        let ledger = run_protocol(
            &ProtocolConfig {
                multiplexing: 500,
                ..Default::default()
            },
            &DeviceParams::default(),
            3,
            1,
        );
        let csv = ledger.to_csv();
        assert_eq!(csv.lines().count(), 1 + 9 + 2 + 3);
        assert!(csv.contains("z_disagree_1_3,"));
        let json = ledger.summary_json();
        assert_eq!(json["seed"], 1);
        assert_eq!(json["params"]["protocol"]["M"], 500);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conservation(n in 2usize..6, arm in 0.0f64..120.0, m in 1u64..400, p_false in 0.0f64..0.2, seed in any::<u64>()) {
            let config = ProtocolConfig { n, arm_km: arm, multiplexing: m, ..Default::default() };
            let dev = DeviceParams { p_false, ..DeviceParams::default() };
            let ledger = run_protocol(&config, &dev, 4, seed);
            prop_assert!(ledger.check_conservation());
        }
    }
}
