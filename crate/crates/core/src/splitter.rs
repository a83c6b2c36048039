//! Random red-packet amount allocation and its analytic moments.
//!
//! A packet with total `a` cents and `n` recipients is split sequentially:
//! the draw at order `o < n` is uniform on `(0, 2R/m]` where `R` is the
//! remaining amount and `m = n - o + 1` the remaining recipient count; the
//! last recipient takes the surplus. A single recipient takes everything.
//!
//! Two modes exist:
//!
//! * **rounded** ([`split_random`]): the platform-style draw — the
//!   continuous value is rounded half-up to the nearest cent and clamped to
//!   `[1, R - (m-1)]` so every later recipient can still get the 1-cent
//!   minimum. Sums are exactly `a`, every share is >= 1 cent.
//! * **continuous** ([`split_random_continuous`]): the mathematical
//!   algorithm with no rounding. All moment and distribution oracles run
//!   against this mode so analytic formulas are tested against the
//!   algorithm itself, not the rounding variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::money::MoneyCents;
use crate::rng::RngStream;

/// Cap on a packet's total amount: 200 CNY.
pub const MAX_TOTAL_CENTS: i64 = 20_000;

/// Sender-chosen packet parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSpec {
    pub total: MoneyCents,
    pub n_recipients: u32,
}

impl PacketSpec {
    /// Validates the invariants: at least one recipient, at least one cent
    /// per recipient, and the 200 CNY cap.
    pub fn new(total: MoneyCents, n_recipients: u32) -> Result<Self> {
        if n_recipients < 1 {
            return Err(Error::InvalidPacketSpec("n_recipients must be >= 1".into()));
        }
        if total.cents() < n_recipients as i64 {
            return Err(Error::InvalidPacketSpec(format!(
                "total {} cents cannot give {} recipients 1 cent each",
                total.cents(),
                n_recipients
            )));
        }
        if total.cents() > MAX_TOTAL_CENTS {
            return Err(Error::InvalidPacketSpec(format!(
                "total {} cents exceeds the {MAX_TOTAL_CENTS}-cent cap",
                total.cents()
            )));
        }
        Ok(Self { total, n_recipients })
    }
}

/// One share of a split packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareDraw {
    /// Order of receiving time, 1-based.
    pub order: u32,
    pub amount: MoneyCents,
}

/// Platform-style split: integer cents, exact conservation.
pub fn split_random(spec: &PacketSpec, rng: &mut RngStream) -> Vec<ShareDraw> {
    let n = spec.n_recipients;
    let mut remaining = spec.total.cents();
    let mut out = Vec::with_capacity(n as usize);
    for o in 1..=n {
        let m = (n - o + 1) as i64;
        let amount = if m == 1 {
            remaining
        } else {
            let hi = 2.0 * remaining as f64 / m as f64;
            let u = rng.next_f64_open_closed() * hi;
            let rounded = (u + 0.5).floor() as i64;
            rounded.clamp(1, remaining - (m - 1))
        };
        out.push(ShareDraw { order: o, amount: MoneyCents(amount) });
        remaining -= amount;
    }
    out
}

/// Rounding-free split; amounts in (fractional) cents.
pub fn split_random_continuous(spec: &PacketSpec, rng: &mut RngStream) -> Vec<f64> {
    let n = spec.n_recipients;
    let mut remaining = spec.total.cents() as f64;
    let mut out = Vec::with_capacity(n as usize);
    for o in 1..n {
        let m = (n - o + 1) as f64;
        let v = rng.next_f64_open_closed() * (2.0 * remaining / m);
        out.push(v);
        remaining -= v;
    }
    out.push(remaining);
    out
}

/// Exact expected share `a/n` as a reduced rational (cents).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactShare {
    pub numer: i64,
    pub denom: i64,
}

impl ExactShare {
    pub fn as_f64(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

/// `E[V_o] = a/n` for every order; returned exactly.
pub fn expected_share(spec: &PacketSpec) -> ExactShare {
    let a = spec.total.cents();
    let n = spec.n_recipients as i64;
    let g = gcd(a, n);
    ExactShare { numer: a / g, denom: n / g }
}

/// Closed-form `Var(V_o)` from the law of total variance (cents^2).
///
/// With `m_k = n - k + 1`, the second moment obeys
/// `E[V_o^2] = (4 a^2 / (3 m_o^2)) * prod_{k<o} (1 - 2/m_k + 4/(3 m_k^2))`,
/// so `Var(V_o) = E[V_o^2] - (a/n)^2` for `o < n`; the last two draws split
/// the surplus uniformly and are identically distributed, hence
/// `Var(V_n) = Var(V_{n-1})`. A single recipient has zero variance.
pub fn analytic_variance(spec: &PacketSpec, order: u32) -> Result<f64> {
    check_order(spec, order)?;
    let n = spec.n_recipients;
    if n == 1 {
        return Ok(0.0);
    }
    let o = if order == n { n - 1 } else { order };
    let a = spec.total.cents() as f64;
    let mean = a / n as f64;
    let mut q = a * a; // E[(a - S_{k})^2] running product
    for k in 1..o {
        let m = (n - k + 1) as f64;
        q *= 1.0 - 2.0 / m + 4.0 / (3.0 * m * m);
    }
    let m_o = (n - o + 1) as f64;
    Ok(4.0 * q / (3.0 * m_o * m_o) - mean * mean)
}

/// The competing pure-ratio rule `Var(V_{o+1}) = (1 + 1/(3(n-o)^2)) Var(V_o)`.
///
/// This rule actually governs the raw second moments `E[V_o^2]`, not the
/// variances; it is kept so the Monte Carlo verifier can report which of the
/// two candidate formulas the sampler supports. See [`analytic_variance`].
pub fn ratio_rule_variance(spec: &PacketSpec, order: u32) -> Result<f64> {
    check_order(spec, order)?;
    let n = spec.n_recipients;
    if n == 1 {
        return Ok(0.0);
    }
    let o = if order == n { n - 1 } else { order };
    let a = spec.total.cents() as f64;
    let nf = n as f64;
    let mut var = a * a / (3.0 * nf * nf);
    for k in 1..o {
        let d = (n - k) as f64;
        var *= 1.0 + 1.0 / (3.0 * d * d);
    }
    Ok(var)
}

fn check_order(spec: &PacketSpec, order: u32) -> Result<()> {
    if order < 1 || order > spec.n_recipients {
        return Err(Error::InvalidOrder { order, n: spec.n_recipients });
    }
    Ok(())
}

/// Draw `V_order` once in continuous mode (only the needed prefix is drawn).
fn draw_order_continuous(spec: &PacketSpec, order: u32, rng: &mut RngStream) -> f64 {
    let n = spec.n_recipients;
    let mut remaining = spec.total.cents() as f64;
    let last_drawn = order.min(n - 1);
    let mut v = remaining; // n == 1 case: the only recipient takes all
    for o in 1..=last_drawn {
        let m = (n - o + 1) as f64;
        v = rng.next_f64_open_closed() * (2.0 * remaining / m);
        remaining -= v;
    }
    if order == n && n > 1 {
        remaining
    } else {
        v
    }
}

fn draw_order_rounded(spec: &PacketSpec, order: u32, rng: &mut RngStream) -> i64 {
    // Rounded draws need the full prefix bookkeeping; reuse the main path.
    split_random(spec, rng)[order as usize - 1].amount.cents()
}

/// Which sampler feeds [`sample_share_distribution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Rounded,
    Continuous,
}

/// `reps` iid draws of `V_order` (cents), sharded deterministically.
///
/// Shard `i` uses the substream keyed by `(a, n, order, mode, i)`, so the
/// result is identical for any worker count.
pub fn sample_share_distribution(
    spec: &PacketSpec,
    order: u32,
    reps: usize,
    rng: &RngStream,
    mode: SplitMode,
) -> Result<Vec<f64>> {
    check_order(spec, order)?;
    const SHARD: usize = 1 << 14;
    let n_shards = reps.div_ceil(SHARD);
    let mode_tag = match mode {
        SplitMode::Rounded => 1,
        SplitMode::Continuous => 2,
    };
    let mut out = vec![0.0f64; reps];
    out.par_chunks_mut(SHARD).enumerate().for_each(|(shard, chunk)| {
        let mut stream = rng.derive_path(&[
            spec.total.cents() as u64,
            spec.n_recipients as u64,
            order as u64,
            mode_tag,
            shard as u64,
        ]);
        for slot in chunk.iter_mut() {
            *slot = match mode {
                SplitMode::Rounded => draw_order_rounded(spec, order, &mut stream) as f64,
                SplitMode::Continuous => draw_order_continuous(spec, order, &mut stream),
            };
        }
    });
    debug_assert!(n_shards * SHARD >= reps);
    Ok(out)
}

/// Monte Carlo variance estimate with its own standard error.
#[derive(Debug, Clone, Copy)]
pub struct VarianceEstimate {
    /// Unbiased sample variance (cents^2).
    pub variance: f64,
    /// Standard error of the variance estimate.
    pub mc_se: f64,
    pub reps: usize,
}

impl VarianceEstimate {
    /// |variance - reference| in units of the MC standard error.
    pub fn deviation_in_ses(&self, reference: f64) -> f64 {
        (self.variance - reference).abs() / self.mc_se
    }
}

/// Sample variance (and its standard error) of `V_order` over `reps`
/// independent continuous draws. This is the adjudicating oracle for the
/// analytic variance formulas.
pub fn share_variance_mc(
    spec: &PacketSpec,
    order: u32,
    reps: usize,
    rng: &RngStream,
) -> Result<VarianceEstimate> {
    if reps < 2 {
        return Err(Error::InvalidInput("variance MC needs reps >= 2".into()));
    }
    let xs = sample_share_distribution(spec, order, reps, rng, SplitMode::Continuous)?;
    Ok(variance_with_se(&xs))
}

/// Two-pass central moments; SE via the standard fourth-moment formula
/// `Var(s^2) = (m4 - s^4 (N-3)/(N-1)) / N`.
pub fn variance_with_se(xs: &[f64]) -> VarianceEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    let s2 = m2 * n / (n - 1.0);
    let var_of_s2 = (m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n;
    VarianceEstimate { variance: s2, mc_se: var_of_s2.max(0.0).sqrt(), reps: xs.len() }
}

/// Sample mean with standard error.
#[derive(Debug, Clone, Copy)]
pub struct MeanEstimate {
    pub mean: f64,
    pub mc_se: f64,
    pub reps: usize,
}

impl MeanEstimate {
    pub fn deviation_in_ses(&self, reference: f64) -> f64 {
        (self.mean - reference).abs() / self.mc_se
    }
}

pub fn mean_with_se(xs: &[f64]) -> MeanEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    MeanEstimate { mean, mc_se: (var / n).sqrt(), reps: xs.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(a: i64, n: u32) -> PacketSpec {
        PacketSpec::new(MoneyCents(a), n).unwrap()
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(PacketSpec::new(MoneyCents(2), 3).is_err());
        assert!(PacketSpec::new(MoneyCents(100), 0).is_err());
        assert!(PacketSpec::new(MoneyCents(20_001), 1).is_err());
        assert!(PacketSpec::new(MoneyCents(20_000), 1).is_ok());
    }

    #[test]
    fn single_recipient_takes_all() {
        let mut rng = RngStream::new(1);
        let draws = split_random(&spec(1000, 1), &mut rng);
        assert_eq!(draws.len(), 1);
        assert_eq!(draws[0].amount, MoneyCents(1000));
        assert_eq!(draws[0].order, 1);
    }

    #[test]
    fn minimum_amount_forces_all_ones() {
        // a = 3 cents, n = 3: clamping leaves exactly one feasible allocation.
        for seed in 0..50 {
            let mut rng = RngStream::new(seed);
            let draws = split_random(&spec(3, 3), &mut rng);
            let amounts: Vec<i64> = draws.iter().map(|d| d.amount.cents()).collect();
            assert_eq!(amounts, vec![1, 1, 1], "seed {seed}");
        }
    }

    #[test]
    fn conservation_min_share_and_support() {
        let mut rng = RngStream::new(99);
        for &(a, n) in &[(1000, 5), (500, 3), (7, 5), (20_000, 100), (101, 2)] {
            let s = spec(a, n);
            let bound = (2.0 * a as f64 / n as f64).ceil() as i64;
            for _ in 0..200 {
                let draws = split_random(&s, &mut rng);
                assert_eq!(draws.len(), n as usize);
                let total: i64 = draws.iter().map(|d| d.amount.cents()).sum();
                assert_eq!(total, a);
                assert!(draws.iter().all(|d| d.amount.cents() >= 1));
                assert!(draws[0].amount.cents() <= bound, "V1 {} > {bound}", draws[0].amount.cents());
            }
        }
    }

    #[test]
    fn continuous_conserves() {
        let mut rng = RngStream::new(3);
        let s = spec(1000, 5);
        for _ in 0..100 {
            let vs = split_random_continuous(&s, &mut rng);
            let sum: f64 = vs.iter().sum();
            assert!((sum - 1000.0).abs() < 1e-9);
            assert!(vs.iter().all(|&v| v > 0.0 || v == 0.0));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(1234, 7);
        let a = split_random(&s, &mut RngStream::new(5));
        let b = split_random(&s, &mut RngStream::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn expected_share_exact() {
        assert_eq!(expected_share(&spec(1000, 5)), ExactShare { numer: 200, denom: 1 });
        assert_eq!(expected_share(&spec(500, 3)), ExactShare { numer: 500, denom: 3 });
        assert_eq!(expected_share(&spec(777, 1)), ExactShare { numer: 777, denom: 1 });
    }

    #[test]
    fn analytic_variance_known_values() {
        // Var(V1) = a^2/(3n^2); Var(V2) = a^2/(3n^2) + 4a^2/(9(n-1)^2 n^2).
        let s = spec(1000, 5);
        let v1 = analytic_variance(&s, 1).unwrap();
        assert!((v1 - 1e6 / 75.0).abs() < 1e-9);
        let v2 = analytic_variance(&s, 2).unwrap();
        let expect = 1e6 / 75.0 + 4.0 * 1e6 / (9.0 * 16.0 * 25.0);
        assert!((v2 - expect).abs() < 1e-9, "{v2} vs {expect}");
        // n = 2: both orders have variance a^2/12 under either candidate.
        let s2 = spec(600, 2);
        for o in 1..=2 {
            assert!((analytic_variance(&s2, o).unwrap() - 600.0 * 600.0 / 12.0).abs() < 1e-9);
            assert!((ratio_rule_variance(&s2, o).unwrap() - 600.0 * 600.0 / 12.0).abs() < 1e-9);
        }
        // Last two orders identically distributed.
        assert_eq!(
            analytic_variance(&s, 5).unwrap(),
            analytic_variance(&s, 4).unwrap()
        );
        // Degenerate single recipient.
        assert_eq!(analytic_variance(&spec(100, 1), 1).unwrap(), 0.0);
    }

    #[test]
    fn candidates_disagree_for_n_over_2() {
        let s = spec(1000, 5);
        let direct = analytic_variance(&s, 2).unwrap();
        let ratio = ratio_rule_variance(&s, 2).unwrap();
        assert!((direct - ratio).abs() > 100.0, "direct {direct} ratio {ratio}");
    }

    #[test]
    fn invalid_order_rejected() {
        let s = spec(1000, 5);
        assert!(matches!(
            share_variance_mc(&s, 6, 100, &RngStream::new(1)),
            Err(Error::InvalidOrder { .. })
        ));
        assert!(analytic_variance(&s, 0).is_err());
    }

    #[test]
    fn sharded_sampling_is_schedule_independent() {
        let s = spec(500, 3);
        let rng = RngStream::new(42);
        let a = sample_share_distribution(&s, 2, 40_000, &rng, SplitMode::Continuous).unwrap();
        let b = sample_share_distribution(&s, 2, 40_000, &rng, SplitMode::Continuous).unwrap();
        assert_eq!(a, b);
    }
}
