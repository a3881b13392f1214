//! Pure epsilon differential privacy primitives.
//!
//! Everything that touches randomness goes through [`NoiseSource`], which
//! keeps an append-only transcript of every draw. Privacy spending is
//! recorded in a [`BudgetLedger`] whose totals are exact rationals; floats
//! appear only where noise is actually generated.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, ToPrimitive, Zero};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Clamps `x` into `[lo, hi]`.
pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    assert!(lo <= hi, "clip called with lo > hi");
    x.max(lo).min(hi)
}

/// Standard deviation of a Laplace release with the given sensitivity and
/// budget: sqrt(2) * delta / epsilon.
pub fn laplace_sigma(delta: f64, epsilon: f64) -> f64 {
    std::f64::consts::SQRT_2 * delta / epsilon
}

// ---------------------------------------------------------------------------
// Exact decimal budgets

/// A privacy budget parsed from decimal text. Arithmetic on budgets is exact;
/// the float view is derived only when calibrating noise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Budget {
    text: String,
    value: BigRational,
}

impl Budget {
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let bad = || Error::Config(format!("invalid decimal budget {text:?}"));
        if t.is_empty() {
            return Err(bad());
        }
        let (int_part, frac_part) = match t.split_once('.') {
            Some((i, f)) => (i, f),
            None => (t, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(bad());
        }
        let mut numer = if int_part.is_empty() {
            BigInt::zero()
        } else {
            BigInt::from_str(int_part).map_err(|_| bad())?
        };
        let mut denom = BigInt::one();
        for c in frac_part.chars() {
            numer = numer * 10 + (c as u8 - b'0');
            denom *= 10;
        }
        Ok(Budget {
            text: t.to_string(),
            value: BigRational::new(numer, denom),
        })
    }

    pub fn zero() -> Self {
        Budget {
            text: "0".to_string(),
            value: BigRational::zero(),
        }
    }

    /// Budget from an exact rational; text form is derived.
    pub fn from_rational(value: BigRational) -> Result<Self> {
        if value < BigRational::zero() {
            return Err(Error::Config(format!(
                "budget must be nonnegative, got {}",
                decimal_string(&value)
            )));
        }
        Ok(Budget {
            text: decimal_string(&value),
            value,
        })
    }

    /// Exact product, e.g. applying a split fraction.
    pub fn times(&self, factor: &Budget) -> Budget {
        Budget::from_rational(self.value.clone() * factor.rational())
            .expect("product of nonnegative budgets")
    }

    /// Exact difference; errors when the result would be negative.
    pub fn minus(&self, other: &Budget) -> Result<Budget> {
        Budget::from_rational(self.value.clone() - other.rational())
    }

    /// Exact quotient by a positive integer, for even budget splits.
    pub fn div_int(&self, k: u64) -> Result<Budget> {
        if k == 0 {
            return Err(Error::Argument("cannot split a budget zero ways".into()));
        }
        Budget::from_rational(self.value.clone() / BigRational::from_integer(BigInt::from(k)))
    }

    pub fn rational(&self) -> &BigRational {
        &self.value
    }

    pub fn to_f64(&self) -> f64 {
        self.value.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_zero(&self) -> bool {
        self.value.is_zero()
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Budget::parse(s)
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Budget::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Renders a rational as decimal text when its denominator divides a power of
/// ten, falling back to `p/q` otherwise.
pub fn decimal_string(r: &BigRational) -> String {
    let r = r.reduced();
    let mut denom = r.denom().clone();
    let mut twos = 0u32;
    let mut fives = 0u32;
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    while (&denom % &two).is_zero() {
        denom /= &two;
        twos += 1;
    }
    while (&denom % &five).is_zero() {
        denom /= &five;
        fives += 1;
    }
    if !denom.is_one() {
        return format!("{}/{}", r.numer(), r.denom());
    }
    let digits = twos.max(fives);
    let mut scaled = r.numer().clone();
    for _ in 0..digits.saturating_sub(twos) {
        scaled *= &two;
    }
    for _ in 0..digits.saturating_sub(fives) {
        scaled *= &five;
    }
    let neg = scaled < BigInt::zero();
    let mut s = scaled.magnitude().to_string();
    if digits > 0 {
        while s.len() <= digits as usize {
            s.insert(0, '0');
        }
        s.insert(s.len() - digits as usize, '.');
    }
    if neg {
        s.insert(0, '-');
    }
    s
}

// ---------------------------------------------------------------------------
// Noise source

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum DrawKind {
    Uniform,
    Laplace { scale: f64 },
    Index { bound: u64 },
}

/// One logged random draw.
#[derive(Debug, Clone, Serialize)]
pub struct Draw {
    pub purpose: &'static str,
    #[serde(flatten)]
    pub kind: DrawKind,
    pub value: f64,
}

enum Backend {
    Os(OsRng),
    Seeded(Box<ChaCha20Rng>),
    Replay(VecDeque<Draw>),
}

/// CSPRNG front end with an append-only transcript of every draw.
///
/// Production sources come from the operating system generator and cannot be
/// seeded. The deterministic test mode seeds a ChaCha20 stream; replay mode
/// feeds back a previously exported transcript and panics on divergence.
pub struct NoiseSource {
    backend: Backend,
    transcript: Vec<Draw>,
    recording: bool,
}

impl NoiseSource {
    /// Operating-system CSPRNG. No seed is accepted in this mode.
    pub fn secure() -> Self {
        NoiseSource {
            backend: Backend::Os(OsRng),
            transcript: Vec::new(),
            recording: true,
        }
    }

    /// Deterministic CSPRNG stream for tests and tuning runs.
    pub fn seeded_for_test(seed: u64) -> Self {
        NoiseSource {
            backend: Backend::Seeded(Box::new(ChaCha20Rng::seed_from_u64(seed))),
            transcript: Vec::new(),
            recording: true,
        }
    }

    /// Replays a recorded transcript; draws must match purpose and kind.
    /// Replay covers mechanism-level draws; bulk sampling draws are not
    /// recorded, so a full pipeline cannot be replayed end to end.
    pub fn replay(draws: Vec<Draw>) -> Self {
        NoiseSource {
            backend: Backend::Replay(draws.into()),
            transcript: Vec::new(),
            recording: true,
        }
    }

    /// Toggles transcript recording. Bulk per-record sampling suspends it to
    /// keep the audit log at mechanism granularity; replay consumption is
    /// unaffected.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.backend, Backend::Os(_))
    }

    fn next_u64(&mut self) -> u64 {
        match &mut self.backend {
            Backend::Os(rng) => rng.next_u64(),
            Backend::Seeded(rng) => rng.next_u64(),
            Backend::Replay(_) => unreachable!("replay draws never reach the raw generator"),
        }
    }

    fn replayed(&mut self, purpose: &'static str, kind: DrawKind) -> Option<f64> {
        if let Backend::Replay(queue) = &mut self.backend {
            let draw = queue
                .pop_front()
                .unwrap_or_else(|| panic!("transcript exhausted at draw {purpose:?}"));
            assert_eq!(draw.purpose, purpose, "replay purpose mismatch");
            assert_eq!(draw.kind, kind, "replay kind mismatch for {purpose:?}");
            let value = draw.value;
            if self.recording {
                self.transcript.push(draw);
            }
            Some(value)
        } else {
            None
        }
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self, purpose: &'static str) -> f64 {
        if let Some(v) = self.replayed(purpose, DrawKind::Uniform) {
            return v;
        }
        let value = loop {
            let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                break u;
            }
        };
        if self.recording {
            self.transcript.push(Draw {
                purpose,
                kind: DrawKind::Uniform,
                value,
            });
        }
        value
    }

    /// Uniform index in `0..bound`. Rejection sampling keeps it unbiased.
    pub fn uniform_index(&mut self, purpose: &'static str, bound: usize) -> usize {
        assert!(bound > 0, "uniform_index bound must be positive");
        let kind = DrawKind::Index {
            bound: bound as u64,
        };
        if let Some(v) = self.replayed(purpose, kind) {
            return v as usize;
        }
        let b = bound as u64;
        let zone = u64::MAX - u64::MAX % b;
        let value = loop {
            let x = self.next_u64();
            if x < zone {
                break x % b;
            }
        };
        if self.recording {
            self.transcript.push(Draw {
                purpose,
                kind,
                value: value as f64,
            });
        }
        value as usize
    }

    /// Laplace draw centred at zero via the inverse CDF.
    pub fn laplace(&mut self, purpose: &'static str, scale: f64) -> f64 {
        assert!(
            scale.is_finite() && scale > 0.0,
            "laplace scale must be finite and positive"
        );
        let kind = DrawKind::Laplace { scale };
        if let Some(v) = self.replayed(purpose, kind) {
            return v;
        }
        let u = loop {
            let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 && u < 1.0 {
                break u;
            }
        };
        let centered = u - 0.5;
        let value = -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln();
        if self.recording {
            self.transcript.push(Draw {
                purpose,
                kind,
                value,
            });
        }
        value
    }

    /// Samples `k` distinct indices from `0..n` without replacement.
    pub fn index_subset(&mut self, purpose: &'static str, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.uniform_index(purpose, n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, purpose: &'static str, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_index(purpose, i + 1);
            items.swap(i, j);
        }
    }

    pub fn transcript(&self) -> &[Draw] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<Draw> {
        std::mem::take(&mut self.transcript)
    }

    /// Writes the transcript as JSON lines. Callers must keep the output
    /// inside the private boundary.
    pub fn export_transcript<W: Write>(&self, mut out: W) -> Result<()> {
        for draw in &self.transcript {
            serde_json::to_writer(&mut out, draw)
                .map_err(|e| Error::Data(format!("transcript export: {e}")))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl fmt::Debug for NoiseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.backend {
            Backend::Os(_) => "secure",
            Backend::Seeded(_) => "seeded",
            Backend::Replay(_) => "replay",
        };
        write!(f, "NoiseSource({mode}, {} draws)", self.transcript.len())
    }
}

// ---------------------------------------------------------------------------
// Sensitivity and ledger

/// A global sensitivity bound together with the argument for it.
#[derive(Debug, Clone, Serialize)]
pub struct Sensitivity {
    pub value: f64,
    pub derivation: String,
}

impl Sensitivity {
    pub fn new(value: f64, derivation: impl Into<String>) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::Argument(format!(
                "sensitivity must be finite and positive, got {value}"
            )));
        }
        Ok(Sensitivity {
            value,
            derivation: derivation.into(),
        })
    }
}

/// Whether a charge sits inside the selection loop (and is multiplied by the
/// selection factor in the tight total) or outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeScope {
    SelectionLoop,
    PreLoop,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChargeEntry {
    pub label: String,
    pub epsilon: Budget,
    pub sensitivity: Option<Sensitivity>,
    pub mechanism: &'static str,
    pub scope: ChargeScope,
}

/// Append-only record of privacy spending with exact rational totals.
#[derive(Debug, Clone, Serialize, Default)]
pub struct BudgetLedger {
    selection_factor: u32,
    entries: Vec<ChargeEntry>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        BudgetLedger {
            selection_factor: 1,
            entries: Vec::new(),
        }
    }

    pub fn charge(
        &mut self,
        label: impl Into<String>,
        epsilon: &Budget,
        sensitivity: Option<Sensitivity>,
        mechanism: &'static str,
        scope: ChargeScope,
    ) -> Result<()> {
        if epsilon.rational() <= &BigRational::zero() {
            return Err(Error::Argument(format!(
                "ledger charge requires epsilon > 0, got {epsilon}"
            )));
        }
        self.entries.push(ChargeEntry {
            label: label.into(),
            epsilon: epsilon.clone(),
            sensitivity,
            mechanism,
            scope,
        });
        Ok(())
    }

    pub fn set_selection_factor(&mut self, factor: u32) {
        assert!(factor >= 1);
        self.selection_factor = factor;
    }

    pub fn selection_factor(&self) -> u32 {
        self.selection_factor.max(1)
    }

    pub fn entries(&self) -> &[ChargeEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends all of `other`'s entries; the selection factor is unchanged.
    pub fn merge(&mut self, other: BudgetLedger) {
        self.entries.extend(other.entries);
    }

    /// Conservative total: selection_factor x sum of all entries.
    pub fn total(&self) -> BigRational {
        let sum: BigRational = self
            .entries
            .iter()
            .map(|e| e.epsilon.rational().clone())
            .sum();
        BigRational::from_integer(BigInt::from(self.selection_factor())) * sum
    }

    /// Scope-aware total: pre-loop entries are charged once, loop entries
    /// are multiplied by the selection factor.
    pub fn tight_total(&self) -> BigRational {
        let factor = BigRational::from_integer(BigInt::from(self.selection_factor()));
        let mut total = BigRational::zero();
        for e in &self.entries {
            match e.scope {
                ChargeScope::SelectionLoop => total += &factor * e.epsilon.rational(),
                ChargeScope::PreLoop => total += e.epsilon.rational().clone(),
            }
        }
        total
    }
}

/// Total privacy cost of a ledger under basic composition with the selection
/// factor applied: selection_factor x sum of entry budgets.
pub fn compose(ledger: &BudgetLedger) -> BigRational {
    ledger.total()
}

/// Adds Laplace noise calibrated to `sensitivity / epsilon`, records the
/// charge, and returns the noised value. The ledger is only appended to.
pub fn laplace_release(
    value: f64,
    sensitivity: &Sensitivity,
    epsilon: &Budget,
    label: &str,
    scope: ChargeScope,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Argument(format!(
            "laplace_release value must be finite, got {value}"
        )));
    }
    let eps = epsilon.to_f64();
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Argument(format!(
            "laplace_release requires epsilon > 0, got {epsilon}"
        )));
    }
    let scale = sensitivity.value / eps;
    let drawn = noise.laplace("laplace_release", scale);
    ledger.charge(
        label,
        epsilon,
        Some(sensitivity.clone()),
        "laplace",
        scope,
    )?;
    Ok(value + drawn)
}

/// Samples an index with probability proportional to
/// exp(epsilon * score / (2 * sensitivity)). Scores must be finite.
pub fn exponential_mechanism(
    scores: &[f64],
    epsilon: f64,
    sensitivity: f64,
    purpose: &'static str,
    noise: &mut NoiseSource,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Argument(
            "exponential_mechanism needs at least one candidate".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument(
            "exponential_mechanism scores must be finite".into(),
        ));
    }
    if !(epsilon.is_finite() && epsilon > 0.0 && sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(Error::Argument(
            "exponential_mechanism requires positive epsilon and sensitivity".into(),
        ));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .map(|s| (epsilon * (s - max) / (2.0 * sensitivity)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = noise.uniform(purpose) * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u <= acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Monte-Carlo audit of the Laplace mechanism's epsilon bound.
///
/// Releases the neighbouring values 0 and 1 (sensitivity 1) `draws` times
/// each, histograms both samples, and returns the worst bucket excess of the
/// empirical density ratio over exp(epsilon), measured in standard errors of
/// the ratio estimate. Buckets with fewer than 25 observations on either
/// side are skipped.
pub fn empirical_epsilon_excess(epsilon: f64, draws: usize, noise: &mut NoiseSource) -> f64 {
    assert!(epsilon > 0.0);
    let scale = 1.0 / epsilon;
    let width = scale / 2.0;
    let lo = -8.0 * scale;
    let buckets = ((8.0 * scale - lo) / width).ceil() as usize + 1;
    let mut h0 = vec![0u64; buckets];
    let mut h1 = vec![0u64; buckets];
    for _ in 0..draws {
        let x0 = noise.laplace("epsilon_audit", scale);
        let x1 = 1.0 + noise.laplace("epsilon_audit", scale);
        for (x, h) in [(x0, &mut h0), (x1, &mut h1)] {
            let idx = ((x - lo) / width).floor();
            if idx >= 0.0 && (idx as usize) < buckets {
                h[idx as usize] += 1;
            }
        }
    }
    let bound = epsilon.exp();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..buckets {
        let (a, b) = (h0[i] as f64, h1[i] as f64);
        if a < 25.0 || b < 25.0 {
            continue;
        }
        for (num, den) in [(a, b), (b, a)] {
            let ratio = num / den;
            let se = ratio * (1.0 / num + 1.0 / den).sqrt();
            worst = worst.max((ratio - bound) / se);
        }
    }
    worst
}
