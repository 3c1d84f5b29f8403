//! Discretization of a continuous CDF into symbol probabilities, both as
//! floating-point PMFs and as 16-bit cumulative frequencies for the coder.

use crate::error::{Error, Result};

/// Bits of precision of the coder's cumulative frequencies.
pub const FREQ_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << FREQ_BITS;
/// Smallest probability any symbol may get.
pub const MIN_PROB: f64 = 1.0 / TOTAL as f64;
/// Default upper bound on the number of in-range symbols per band.
pub const DEFAULT_SUPPORT_CAP: usize = 1024;

/// Probabilities of the integers `q_min..=q_max` under a CDF `c`.
///
/// `p(q) = 2^-16 + (c(q + 1/2) - c(q - 1/2)) * (1 - n * 2^-16)` where the
/// first and last symbols absorb the tails (`c` taken as 0 below and 1 above
/// the support). Every probability is at least `2^-16` and the total is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePmf {
    q_min: i64,
    probs: Vec<f64>,
}

impl DiscretePmf {
    pub fn from_cdf(q_min: i64, q_max: i64, cdf: impl Fn(f64) -> f64) -> Result<Self> {
        if q_max < q_min {
            return Err(Error::Usage(format!("empty support [{q_min}, {q_max}]")));
        }
        let n = (q_max - q_min + 1) as usize;
        if n > TOTAL as usize {
            return Err(Error::Usage(format!("support of {n} symbols exceeds {TOTAL}")));
        }
        let spread = 1.0 - n as f64 * MIN_PROB;
        let edges: Vec<f64> = (0..=n)
            .map(|k| match k {
                0 => 0.0,
                k if k == n => 1.0,
                k => cdf((q_min + k as i64) as f64 - 0.5),
            })
            .collect();
        let probs = edges.windows(2).map(|w| MIN_PROB + (w[1] - w[0]).max(0.0) * spread).collect();
        Ok(DiscretePmf { q_min, probs })
    }

    /// Uniform distribution over `q_min..=q_max`.
    pub fn uniform(q_min: i64, q_max: i64) -> Result<Self> {
        let n = (q_max - q_min + 1) as f64;
        Self::from_cdf(q_min, q_max, |x| ((x - q_min as f64 + 0.5) / n).clamp(0.0, 1.0))
    }

    pub fn q_min(&self) -> i64 {
        self.q_min
    }

    pub fn q_max(&self) -> i64 {
        self.q_min + self.probs.len() as i64 - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of `q`, with out-of-range values mapped to the end symbols.
    pub fn prob(&self, q: i64) -> f64 {
        let k = (q - self.q_min).clamp(0, self.probs.len() as i64 - 1);
        self.probs[k as usize]
    }

    pub fn bits(&self, q: i64) -> f64 {
        -self.prob(q).log2()
    }

    /// Quantized cumulative table of this PMF.
    pub fn freq_table(&self) -> FreqTable {
        let mut acc = 0.0;
        let cdf: Vec<f64> = self
            .probs
            .iter()
            .map(|p| {
                let c = acc;
                acc += p;
                c
            })
            .collect();
        FreqTable::build(self.q_min, self.probs.len(), |k| cdf[k])
    }
}

/// Cumulative-frequency view of a symbol model over symbol indices `0..len`.
#[allow(clippy::len_without_is_empty)]
pub trait SymbolModel {
    fn len(&self) -> usize;

    /// `(cum, freq)` of symbol index `s`.
    fn interval(&self, s: usize) -> (u32, u32);

    /// The symbol whose interval contains `target`, with its `(cum, freq)`.
    fn lookup(&self, target: u32) -> (usize, u32, u32);
}

/// Unclamped quantized cumulative at edge `k` of an `n`-symbol support.
/// `c_k` is the continuous CDF at the lower edge of symbol `k`.
#[inline]
fn raw_cum(k: usize, n: usize, c_k: f64) -> u32 {
    let spread = f64::from(TOTAL - n as u32);
    let scaled = crate::quant::round_half_away(c_k.clamp(0.0, 1.0) * spread) as u32;
    k as u32 + scaled
}

/// Edge value at the midpoint of `[a, b]`, clamped so that every symbol in
/// both halves keeps at least one unit of frequency.
#[inline]
fn clamp_mid(raw: u32, a: usize, mid: usize, b: usize, ca: u32, cb: u32) -> u32 {
    raw.clamp(ca + (mid - a) as u32, cb - (b - mid) as u32)
}

/// Cumulative frequencies defined by bisection of the support: each edge is
/// evaluated once its enclosing interval is known and clamped into it. The
/// resulting table is strictly increasing for any `cdf`, even one that is not
/// exactly monotone in floating point. Encoding or decoding one symbol costs
/// `O(log n)` CDF evaluations.
pub struct TreeCdf<F: Fn(usize) -> f64> {
    n: usize,
    edge_cdf: F,
}

impl<F: Fn(usize) -> f64> TreeCdf<F> {
    /// `edge_cdf(k)` is the continuous CDF at the lower edge of symbol `k`,
    /// queried only for `0 < k < n`.
    pub fn new(n: usize, edge_cdf: F) -> Self {
        assert!((2..=TOTAL as usize).contains(&n), "support must hold 2..=2^16 symbols, got {n}");
        TreeCdf { n, edge_cdf }
    }

    fn edge(&self, mid: usize, a: usize, b: usize, ca: u32, cb: u32) -> u32 {
        clamp_mid(raw_cum(mid, self.n, (self.edge_cdf)(mid)), a, mid, b, ca, cb)
    }
}

impl<F: Fn(usize) -> f64> SymbolModel for TreeCdf<F> {
    fn len(&self) -> usize {
        self.n
    }

    fn interval(&self, s: usize) -> (u32, u32) {
        let (mut a, mut b, mut ca, mut cb) = (0, self.n, 0, TOTAL);
        while b - a > 1 {
            let mid = (a + b) / 2;
            let cm = self.edge(mid, a, b, ca, cb);
            if s < mid {
                (b, cb) = (mid, cm);
            } else {
                (a, ca) = (mid, cm);
            }
        }
        (ca, cb - ca)
    }

    fn lookup(&self, target: u32) -> (usize, u32, u32) {
        let (mut a, mut b, mut ca, mut cb) = (0, self.n, 0, TOTAL);
        while b - a > 1 {
            let mid = (a + b) / 2;
            let cm = self.edge(mid, a, b, ca, cb);
            if target < cm {
                (b, cb) = (mid, cm);
            } else {
                (a, ca) = (mid, cm);
            }
        }
        (a, ca, cb - ca)
    }
}

/// Fully tabulated [`TreeCdf`], for models shared by a whole band.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    q_min: i64,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Table for `n` symbols starting at `q_min`; `edge_cdf(k)` as in [`TreeCdf::new`].
    pub fn build(q_min: i64, n: usize, edge_cdf: impl Fn(usize) -> f64) -> Self {
        assert!((2..=TOTAL as usize).contains(&n), "support must hold 2..=2^16 symbols, got {n}");
        let mut cum = vec![0u32; n + 1];
        cum[n] = TOTAL;
        fill(&mut cum, 0, n, n, &edge_cdf);
        FreqTable { q_min, cum }
    }

    pub fn q_min(&self) -> i64 {
        self.q_min
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }
}

fn fill(cum: &mut [u32], a: usize, b: usize, n: usize, edge_cdf: &impl Fn(usize) -> f64) {
    if b - a <= 1 {
        return;
    }
    let mid = (a + b) / 2;
    cum[mid] = clamp_mid(raw_cum(mid, n, edge_cdf(mid)), a, mid, b, cum[a], cum[b]);
    fill(cum, a, mid, n, edge_cdf);
    fill(cum, mid, b, n, edge_cdf);
}

impl SymbolModel for FreqTable {
    fn len(&self) -> usize {
        self.cum.len() - 1
    }

    fn interval(&self, s: usize) -> (u32, u32) {
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    fn lookup(&self, target: u32) -> (usize, u32, u32) {
        let s = self.cum.partition_point(|&c| c <= target) - 1;
        let s = s.min(self.len() - 1);
        (s, self.cum[s], self.cum[s + 1] - self.cum[s])
    }
}

/// Support `[q_min, q_max]` of at most `cap` symbols covering as many of
/// `values` as possible. One unused guard symbol is kept at each end, so the
/// end symbols (which carry escape suffixes) only see true outliers.
pub fn choose_support(values: &[i64], cap: usize) -> (i64, i64) {
    assert!(cap >= 3);
    if values.is_empty() {
        return (-1, 1);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = cap as i64 - 3;
    if hi.saturating_sub(lo) <= width {
        return (lo - 1, hi + 1);
    }
    let (mut best, mut best_lo, mut j) = (0, lo, 0);
    for i in 0..sorted.len() {
        if i > 0 && sorted[i] == sorted[i - 1] {
            continue;
        }
        while j < sorted.len() && sorted[j] - sorted[i] <= width {
            j += 1;
        }
        if j - i > best {
            best = j - i;
            best_lo = sorted[i];
        }
    }
    (best_lo - 1, best_lo + width + 1)
}
