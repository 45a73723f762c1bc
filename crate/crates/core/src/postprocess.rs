//! Classical postprocessing of simulated raw keys: sifting, parameter
//! estimation, reconciliation accounting and Toeplitz privacy amplification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{EpsilonBudget, ProtocolConfig};
use crate::rate::{self, FiniteKeyReport};
use crate::sim::{self, SiftClass, SimulationLedger};

/// Width of the correctness tag compared across users.
pub const TAG_BITS: usize = 50;

/// Packed bit string, bit i in word i/64 at position i%64. Bits past `len` are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut s = Self::default();
        for b in bits {
            s.push(b);
        }
        s
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut s = Self::zeros(len);
        for w in s.words.iter_mut() {
            *w = rng.random();
        }
        s.trim();
        s
    }

    fn trim(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.words[self.len / 64] |= (bit as u64) << (self.len % 64);
        self.len += 1;
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        let b = self.get(i);
        self.set(i, !b);
    }

    pub fn xor(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        Self {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
            len: self.len,
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.xor(other).count_ones()
    }

    /// 64 bits starting at `start`, zero-filled past the end.
    fn window(&self, start: usize) -> u64 {
        let (k, off) = (start / 64, start % 64);
        let lo = self.words.get(k).copied().unwrap_or(0);
        if off == 0 {
            return lo;
        }
        let hi = self.words.get(k + 1).copied().unwrap_or(0);
        (lo >> off) | (hi << (64 - off))
    }

    fn reversed(&self) -> Self {
        Self::from_bits((0..self.len).rev().map(|i| self.get(i)))
    }

    /// Hex, most significant bit of each byte first, zero padded.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        hex::encode(bytes)
    }
}

/// Sifted raw key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawKeyBlock {
    /// One string of length m per user, user 1 first.
    pub keys: Vec<BitString>,
    /// One flag per kept X trial, set when the parity test failed.
    pub test_errors: Vec<bool>,
}

impl RawKeyBlock {
    pub fn m(&self) -> usize {
        self.keys.first().map_or(0, BitString::len)
    }

    pub fn k(&self) -> usize {
        self.test_errors.len()
    }

    /// Fraction of positions where user i+1 (i ≥ 1) differs from user 1.
    pub fn disagreement(&self) -> Vec<f64> {
        let m = self.m() as f64;
        self.keys[1..]
            .iter()
            .map(|key| key.hamming(&self.keys[0]) as f64 / m)
            .collect()
    }

    pub fn phase_error_rate(&self) -> f64 {
        self.test_errors.iter().filter(|&&e| e).count() as f64 / self.k() as f64
    }
}

/// Key bits from kept all-Z trials (unchanged for either verdict sign) and
/// parity flags from kept all-X trials. Needs a ledger recorded with trials.
pub fn sift(ledger: &SimulationLedger) -> Result<RawKeyBlock> {
    let mut keys = vec![BitString::default(); ledger.n];
    let mut test_errors = Vec::new();
    for t in ledger.trials.iter().filter(|t| t.kept) {
        match t.class {
            SiftClass::KeygenZ => {
                for (key, p) in keys.iter_mut().zip(&t.preps) {
                    key.push(p.bit);
                }
            }
            SiftClass::TestX => test_errors.push(sim::phase_error_rule(t.verdict, &t.preps)?),
            SiftClass::Discard => {}
        }
    }
    if keys[0].is_empty() {
        return Err(Error::Abort("no key-generation trials".into()));
    }
    if test_errors.is_empty() {
        return Err(Error::Abort("no parameter-estimation trials".into()));
    }
    Ok(RawKeyBlock { keys, test_errors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconciled {
    /// Every user's string now equals user 1's.
    pub block: RawKeyBlock,
    pub disagreement: Vec<f64>,
    pub leak_bits: f64,
}

/// Each user i corrects towards user 1 by learning its mismatch positions;
/// the cost charged is f·m·h(max disagreement) + log2(2(n−1)/ε_c).
pub fn reconcile(block: &RawKeyBlock, config: &ProtocolConfig) -> Result<Reconciled> {
    let disagreement = block.disagreement();
    let worst = disagreement.iter().copied().fold(0.0, f64::max);
    if worst > 0.5 {
        return Err(Error::Abort(format!("disagreement {worst:.3} exceeds 1/2")));
    }
    let leak_bits = rate::leak_ec(
        block.m() as u64,
        worst,
        config.f,
        config.n,
        config.budget.eps_c,
    );
    let reference = block.keys[0].clone();
    Ok(Reconciled {
        block: RawKeyBlock {
            keys: vec![reference; block.keys.len()],
            test_errors: block.test_errors.clone(),
        },
        disagreement,
        leak_bits,
    })
}

/// Random binary Toeplitz matrix T[i][j] = s[i − j + in_len − 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzHash {
    diagonals: BitString,
    in_len: usize,
    out_len: usize,
}

impl ToeplitzHash {
    pub fn from_seed(in_len: usize, out_len: usize, seed: u64) -> Self {
        Self::from_rng(in_len, out_len, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng<R: Rng + ?Sized>(in_len: usize, out_len: usize, rng: &mut R) -> Self {
        Self {
            diagonals: BitString::random((in_len + out_len).saturating_sub(1), rng),
            in_len,
            out_len,
        }
    }

    pub fn apply(&self, input: &BitString) -> BitString {
        assert_eq!(input.len(), self.in_len, "hash input length");
        // row i of T against x equals s[i .. i+in_len] against x reversed
        let rev = input.reversed();
        let mut out = BitString::zeros(self.out_len);
        for i in 0..self.out_len {
            let parity = rev.words.iter().enumerate().fold(0u32, |acc, (w, &x)| {
                acc ^ (self.diagonals.window(i + 64 * w) & x).count_ones()
            }) & 1;
            if parity == 1 {
                out.set(i, true);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub eps_c: f64,
    pub eps_s: f64,
    pub eps_sec: f64,
}

impl EpsilonReport {
    pub fn of(budget: &EpsilonBudget) -> Self {
        Self {
            eps_c: budget.eps_c,
            eps_s: budget.eps_s,
            eps_sec: budget.eps_sec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalKeySet {
    pub keys: Vec<BitString>,
    /// 50-bit hash of each final key.
    pub tags: Vec<u64>,
    pub tags_agree: bool,
    pub epsilon: EpsilonReport,
}

impl FinalKeySet {
    pub fn length(&self) -> usize {
        self.keys.first().map_or(0, BitString::len)
    }

    /// Header lines followed by one `A<i> <hex>` line per user.
    pub fn to_hex_export(&self, params_digest: &str) -> String {
        let mut out = format!(
            "# length_bits: {}\n# eps_c: {:e}\n# eps_s: {:e}\n# eps_sec: {:e}\n# params_sha256: {params_digest}\n",
            self.length(),
            self.epsilon.eps_c,
            self.epsilon.eps_s,
            self.epsilon.eps_sec
        );
        for (i, key) in self.keys.iter().enumerate() {
            out.push_str(&format!("A{} {}\n", i + 1, key.to_hex()));
        }
        out
    }
}

/// Compresses every user's m-bit string to l bits with one shared Toeplitz
/// matrix drawn from `seed`, then compares 50-bit tags of the results.
pub fn privacy_amplify(
    block: &RawKeyBlock,
    l: usize,
    seed: u64,
    budget: &EpsilonBudget,
) -> Result<FinalKeySet> {
    if l == 0 {
        return Err(Error::Abort("key length is zero".into()));
    }
    let m = block.m();
    if l > m {
        return Err(Error::Invalid(vec![format!(
            "key length {l} exceeds block length {m}"
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hash = ToeplitzHash::from_rng(m, l, &mut rng);
    rng.set_stream(1);
    let tagger = ToeplitzHash::from_rng(l, TAG_BITS, &mut rng);

    let keys: Vec<BitString> = block.keys.iter().map(|k| hash.apply(k)).collect();
    let tags: Vec<u64> = keys.iter().map(|k| tagger.apply(k).words[0]).collect();
    Ok(FinalKeySet {
        tags_agree: tags.iter().all(|&t| t == tags[0]),
        keys,
        tags,
        epsilon: EpsilonReport::of(budget),
    })
}

/// Everything the pipeline produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub raw: RawKeyBlock,
    pub reconciled: Reconciled,
    /// Rate-engine evaluation on the observed m, k, E_X and E_Z.
    pub report: FiniteKeyReport,
    pub keys: FinalKeySet,
}

/// sift → parameter estimation → reconcile → privacy amplification.
pub fn run_pipeline(ledger: &SimulationLedger, seed: u64) -> Result<PipelineOutput> {
    let config = ProtocolConfig {
        pulses: ledger.totals.pulses_per_user as f64,
        ..ledger.params.protocol()
    };
    let raw = sift(ledger)?;
    let e_z_max = raw.disagreement().into_iter().fold(0.0, f64::max);
    let report = rate::finite_key_from_counts(
        raw.m() as u64,
        raw.k() as u64,
        raw.phase_error_rate(),
        e_z_max,
        &config,
    );
    if report.aborted {
        return Err(Error::Abort(
            report.abort_reason.clone().unwrap_or_default(),
        ));
    }
    let reconciled = reconcile(&raw, &config)?;
    let keys = privacy_amplify(
        &reconciled.block,
        report.key_length as usize,
        seed,
        &config.budget,
    )?;
    Ok(PipelineOutput {
        raw,
        reconciled,
        report,
        keys,
    })
}
