//! Spatial multiplexing and adaptive grouping at the relay.
//!
//! Each round every user fires M pulses in parallel. The relay heralds
//! arrivals with a QND measurement, then routes heralded photons, one per
//! user, into the analyser. The number of groups is the smallest per-user
//! herald count; leftovers are dropped since nothing is stored across rounds.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::params::{DeviceParams, ProtocolConfig};

/// Above this M, [`expected_groups`] switches to the Gaussian approximation.
pub const EXACT_GROUPS_LIMIT: u64 = 100_000;

/// Heralds per user in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArrivalTally {
    /// Heralds that carry a photon.
    pub arrived: Vec<u64>,
    /// Heralds of empty slots.
    pub false_heralds: Vec<u64>,
}

impl ArrivalTally {
    pub fn per_user(&self) -> Vec<u64> {
        self.arrived
            .iter()
            .zip(&self.false_heralds)
            .map(|(a, f)| a + f)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupPlan {
    pub n_groups: u64,
    pub leftover: Vec<u64>,
}

/// η_sps·√η_channel·p_QND: probability that one pulse is heralded at the relay.
pub fn herald_efficiency(config: &ProtocolConfig, dev: &DeviceParams) -> f64 {
    dev.eta_sps * (-config.arm_km / dev.l_att).exp() * dev.p_qnd
}

pub fn herald_arrivals<R: Rng + ?Sized>(
    config: &ProtocolConfig,
    dev: &DeviceParams,
    rng: &mut R,
) -> ArrivalTally {
    let eta_pre = herald_efficiency(config, dev);
    let m = config.multiplexing;
    let mut arrived = Vec::with_capacity(config.n);
    let mut false_heralds = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let a = binomial(m, eta_pre, rng);
        arrived.push(a);
        false_heralds.push(binomial(m - a, dev.p_false, rng));
    }
    ArrivalTally {
        arrived,
        false_heralds,
    }
}

fn binomial<R: Rng + ?Sized>(trials: u64, p: f64, rng: &mut R) -> u64 {
    if trials == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return trials;
    }
    Binomial::new(trials, p)
        .expect("p checked above")
        .sample(rng)
}

pub fn form_groups(tally: &ArrivalTally) -> GroupPlan {
    let counts = tally.per_user();
    let n_groups = counts.iter().copied().min().unwrap_or(0);
    GroupPlan {
        n_groups,
        leftover: counts.iter().map(|c| c - n_groups).collect(),
    }
}

/// Which grouped slots hold a photon: `slots[g][user]`.
///
/// Heralds are grouped first-in first-out. Arrival order is exchangeable
/// across the M iid pulses, so the grouped slots of each user are a uniform
/// draw without replacement from its heralds.
pub fn fill_slots<R: Rng + ?Sized>(
    tally: &ArrivalTally,
    plan: &GroupPlan,
    rng: &mut R,
) -> Vec<Vec<bool>> {
    let n = tally.arrived.len();
    let groups = plan.n_groups as usize;
    let mut slots = vec![vec![true; n]; groups];
    for user in 0..n {
        let mut real = tally.arrived[user];
        let mut empty = tally.false_heralds[user];
        if empty == 0 {
            continue;
        }
        for slot in slots.iter_mut() {
            let is_real = rng.random_range(0..real + empty) < real;
            if is_real {
                real -= 1;
            } else {
                empty -= 1;
            }
            slot[user] = is_real;
        }
    }
    slots
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupsMethod {
    Exact,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedGroups {
    pub value: f64,
    pub method: GroupsMethod,
}

/// E[min of n iid Binomial(M, η)].
///
/// Exact for M ≤ [`EXACT_GROUPS_LIMIT`] via E[min] = Σ_{k≥1} P(X ≥ k)ⁿ, with the
/// survival function accumulated from the upper tail. Larger M uses
/// μ − σ·e_n where e_n is the mean of the largest of n standard normals.
pub fn expected_groups(m: u64, eta: f64, n: usize) -> Result<ExpectedGroups> {
    if m < 1 {
        return Err(Error::Invalid(vec!["M must be at least 1".into()]));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::NotAProbability {
            what: "eta_pre",
            value: eta,
        });
    }
    if eta == 0.0 || eta == 1.0 {
        return Ok(ExpectedGroups {
            value: eta * m as f64,
            method: GroupsMethod::Exact,
        });
    }
    if m <= EXACT_GROUPS_LIMIT {
        return Ok(ExpectedGroups {
            value: exact_expected_min(m, eta, n),
            method: GroupsMethod::Exact,
        });
    }
    let mean = m as f64 * eta;
    let sd = (mean * (1.0 - eta)).sqrt();
    Ok(ExpectedGroups {
        value: (mean - sd * expected_max_std_normal(n)).max(0.0),
        method: GroupsMethod::Gaussian,
    })
}

fn exact_expected_min(m: u64, eta: f64, n: usize) -> f64 {
    let ratio = (eta / (1.0 - eta)).ln();
    let mut log_pmf = Vec::with_capacity(m as usize + 1);
    let mut lp = m as f64 * (1.0 - eta).ln();
    log_pmf.push(lp);
    for k in 0..m {
        lp += ((m - k) as f64).ln() - ((k + 1) as f64).ln() + ratio;
        log_pmf.push(lp);
    }
    let mut survival = 0.0;
    let mut total = 0.0;
    for k in (1..=m as usize).rev() {
        survival += log_pmf[k].exp();
        total += survival.min(1.0).powi(n as i32);
    }
    total
}

/// E[max of n iid N(0,1)] = ∫ x·n·φ(x)·Φ(x)^(n−1) dx, Simpson's rule on [−12, 12].
pub fn expected_max_std_normal(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let steps = 8000;
    let (lo, hi) = (-12.0f64, 12.0f64);
    let h = (hi - lo) / steps as f64;
    let density = |x: f64| {
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * erfc(-x / std::f64::consts::SQRT_2);
        x * n as f64 * phi * cdf.powi(n as i32 - 1)
    };
    let mut s = density(lo) + density(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * density(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Smallest M with M·η_t ≥ 1.
pub fn min_multiplexing(eta_t: f64) -> Result<u64> {
    if !(eta_t > 0.0 && eta_t <= 1.0) {
        return Err(Error::Invalid(vec![format!(
            "eta_t must lie in (0, 1], got {eta_t}"
        )]));
    }
    Ok((1.0 / eta_t).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config_with(m: u64, n: usize) -> ProtocolConfig {
        ProtocolConfig {
            n,
            multiplexing: m,
            arm_km: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn lossless_heralding_fills_every_slot() {
        let dev = DeviceParams::ideal();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = herald_arrivals(&config_with(10, 3), &dev, &mut rng);
        assert_eq!(t.per_user(), vec![10, 10, 10]);
        assert_eq!(form_groups(&t).n_groups, 10);
    }

    #[test]
    fn dead_channel_fails_the_round() {
        let dev = DeviceParams {
            eta_sps: 0.0,
            ..DeviceParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = herald_arrivals(&config_with(100, 3), &dev, &mut rng);
        assert_eq!(t.per_user(), vec![0, 0, 0]);
        assert_eq!(form_groups(&t).n_groups, 0);
    }

    #[test]
    fn herald_mean_concentrates() {
        // eta_pre = 0.01 through p_qnd alone
        let dev = DeviceParams {
            eta_sps: 1.0,
            p_qnd: 0.01,
            ..DeviceParams::default()
        };
        let config = config_with(1_000_000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rounds = 200;
        let total: u64 = (0..rounds)
            .map(|_| herald_arrivals(&config, &dev, &mut rng).arrived[0])
            .sum();
        let trials = rounds as f64 * 1e6;
        let sigma = (trials * 0.01 * 0.99).sqrt();
        assert!((total as f64 - 0.01 * trials).abs() < 3.0 * sigma);
    }

    #[test]
    fn group_examples() {
        let plan = |c: Vec<u64>| {
            form_groups(&ArrivalTally {
                false_heralds: vec![0; c.len()],
                arrived: c,
            })
        };
        assert_eq!(
            plan(vec![3, 5, 2]),
            GroupPlan {
                n_groups: 2,
                leftover: vec![1, 3, 0]
            }
        );
        assert_eq!(plan(vec![0, 9, 9]).n_groups, 0);
        assert_eq!(plan(vec![7, 7, 7]).n_groups, 7);
    }

    #[test]
    fn slots_respect_false_herald_counts() {
        let tally = ArrivalTally {
            arrived: vec![3, 10, 4],
            false_heralds: vec![2, 0, 1],
        };
        let plan = form_groups(&tally);
        assert_eq!(plan.n_groups, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slots = fill_slots(&tally, &plan, &mut rng);
        let real = |u: usize| slots.iter().filter(|s| s[u]).count();
        assert_eq!(real(0), 3);
        assert_eq!(real(1), 5);
        assert!(real(2) == 4);
    }

    #[test]
    fn single_pulse_needs_everyone() {
        let g = expected_groups(1, 0.3, 2).unwrap();
        assert_relative_eq!(g.value, 0.09, epsilon = 1e-15);
        assert_eq!(g.method, GroupsMethod::Exact);
    }

    // Values frozen from an exact sum of binomial survival functions
    // (scipy.stats.binom.sf), independent of this implementation.
    #[test]
    fn order_statistic_oracle_values() {
        let g = expected_groups(100_000, 0.1, 3).unwrap();
        assert_relative_eq!(g.value / 1e4, 0.9919751627850548, epsilon = 1e-9);
        let g = expected_groups(100_000, 0.1, 10).unwrap();
        assert_relative_eq!(g.value / 1e4, 0.9854250468267852, epsilon = 1e-9);
        let g = expected_groups(20_000, 0.5, 10).unwrap();
        assert_relative_eq!(g.value / 1e4, 0.9891194863786034, epsilon = 1e-9);
        // Gaussian branch, against the exact value 0.9915841314775476
        let g = expected_groups(1_000_000, 0.01, 3).unwrap();
        assert_eq!(g.method, GroupsMethod::Gaussian);
        assert_relative_eq!(g.value / 1e4, 0.9915841314775476, epsilon = 2e-5);
    }

    #[test]
    fn expected_max_normal_known_values() {
        assert_relative_eq!(
            expected_max_std_normal(2),
            1.0 / std::f64::consts::PI.sqrt(),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            expected_max_std_normal(3),
            1.5 / std::f64::consts::PI.sqrt(),
            epsilon = 1e-10
        );
        // tabulated: E[max of 10] = 1.538752
        assert_relative_eq!(expected_max_std_normal(10), 1.538752, epsilon = 1e-6);
    }

    #[test]
    fn exact_min_matches_sampling() {
        let (m, eta, n) = (10u64, 0.5, 2usize);
        let exact = expected_groups(m, eta, n).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dist = Binomial::new(m, eta).unwrap();
        let samples = 10_000_000u64;
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let x = dist.sample(&mut rng).min(dist.sample(&mut rng)) as f64;
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }

    #[test]
    fn min_multiplexing_examples() {
        assert_eq!(min_multiplexing(1.0).unwrap(), 1);
        assert_eq!(min_multiplexing(0.5).unwrap(), 2);
        assert_eq!(min_multiplexing(1.43e-2).unwrap(), 70);
        assert!(min_multiplexing(0.0).is_err());
    }

    #[test]
    fn ratio_approaches_one() {
        for n in [2usize, 3, 5, 10] {
            let mut last = 0.0;
            for m in [1_000u64, 10_000, 100_000, 1_000_000, 10_000_000] {
                let eta = 0.1;
                let r = expected_groups(m, eta, n).unwrap().value / (m as f64 * eta);
                assert!(r > last && r <= 1.0, "n={n} M={m}: {r}");
                if m as f64 * eta >= 1e5 {
                    assert!(1.0 - r < 0.005, "n={n} M={m}: {r}");
                }
                last = r;
            }
        }
    }

    proptest! {
        #[test]
        fn groups_never_exceed_any_count(c in prop::collection::vec(0u64..1000, 2..10)) {
            let t = ArrivalTally { false_heralds: vec![0; c.len()], arrived: c.clone() };
            let plan = form_groups(&t);
            prop_assert!(c.iter().all(|&x| plan.n_groups <= x));
            prop_assert_eq!(form_groups(&t), plan);
        }

        #[test]
        fn heralds_bounded_by_m(m in 1u64..5000, seed in any::<u64>()) {
            let dev = DeviceParams { p_false: 0.0, ..DeviceParams::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = herald_arrivals(&config_with(m, 3), &dev, &mut rng);
            prop_assert!(t.per_user().iter().all(|&c| c <= m));
        }
    }
}
