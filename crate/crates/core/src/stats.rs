//! Hypothesis-testing utilities: two-sample Kolmogorov-Smirnov, per-stratum
//! randomization checks, and the Benjamini-Hochberg step-up correction.

use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::panel::{ObservationRow, StratumKey};

/// A test statistic with its p-value.
#[derive(Debug, Clone, Copy)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// Two-sided two-sample KS test. `D` is exact (evaluated at every jump
/// point of both empirical CDFs); the p-value uses the asymptotic
/// Kolmogorov series at the effective size `n_x n_y / (n_x + n_y)`.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::EmptySample("KS needs >= 2 points per sample".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let nx = xs.len() as f64;
    let ny = ys.len() as f64;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / nx - j as f64 / ny).abs());
    }

    let ne = nx * ny / (nx + ny);
    let lambda = ne.sqrt() * d;
    Ok(TestResult { statistic: d, p_value: kolmogorov_sf(lambda), n_x: xs.len(), n_y: ys.len() })
}

/// Asymptotic Kolmogorov survival function
/// `P(K > lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2)`,
/// truncated at 100 terms with early exit once terms fall below 1e-12.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100u32 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Benjamini-Hochberg step-up: adjusted p_(i) = min_{j >= i} (m p_(j) / j),
/// capped at 1, returned in the original order, plus the rejection set at
/// the given alpha.
#[derive(Debug, Clone)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
    pub alpha: f64,
}

pub fn bh_adjust(p_values: &[f64], alpha: f64) -> Result<BhResult> {
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput("p-values must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap().then(a.cmp(&b)));
    let mut adjusted = vec![0.0f64; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        // p * (m/j) rather than (m*p)/j so the j == m case is exactly p.
        let candidate = p_values[idx] * (m as f64 / (rank + 1) as f64);
        running_min = running_min.min(candidate);
        adjusted[idx] = running_min.min(1.0);
    }
    let reject = adjusted.iter().map(|&a| a <= alpha).collect();
    Ok(BhResult { adjusted, reject, alpha })
}

/// Per-stratum covariates the randomization check regresses on T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Female,
    Age,
    Degree,
    Fricnt,
    Joincnt,
    HistorySendAmt,
    HistorySendCnt,
    HistoryRecvAmt,
    HistoryRecvCnt,
    GroupAmt,
    GroupNum,
    /// Simulation-only latent confounder (leak detection).
    Wealth,
}

impl Attribute {
    /// The eleven standard covariates, in report order.
    pub const STANDARD: [Attribute; 11] = [
        Attribute::Female,
        Attribute::Age,
        Attribute::Degree,
        Attribute::Fricnt,
        Attribute::Joincnt,
        Attribute::HistorySendAmt,
        Attribute::HistorySendCnt,
        Attribute::HistoryRecvAmt,
        Attribute::HistoryRecvCnt,
        Attribute::GroupAmt,
        Attribute::GroupNum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Female => "female",
            Attribute::Age => "age",
            Attribute::Degree => "degree",
            Attribute::Fricnt => "fricnt",
            Attribute::Joincnt => "joincnt",
            Attribute::HistorySendAmt => "history_sendamt",
            Attribute::HistorySendCnt => "history_sendcnt",
            Attribute::HistoryRecvAmt => "history_recvamt",
            Attribute::HistoryRecvCnt => "history_recvcnt",
            Attribute::GroupAmt => "groupamt",
            Attribute::GroupNum => "groupnum",
            Attribute::Wealth => "wealth",
        }
    }

    pub fn value(&self, row: &ObservationRow) -> f64 {
        match self {
            Attribute::Female => row.cov.female as u8 as f64,
            Attribute::Age => row.cov.age as f64,
            Attribute::Degree => row.cov.degree as f64,
            Attribute::Fricnt => row.cov.fricnt as f64,
            Attribute::Joincnt => row.cov.joincnt as f64,
            Attribute::HistorySendAmt => row.cov.history_sendamt as f64 / 100.0,
            Attribute::HistorySendCnt => row.cov.history_sendcnt as f64,
            Attribute::HistoryRecvAmt => row.cov.history_recvamt as f64 / 100.0,
            Attribute::HistoryRecvCnt => row.cov.history_recvcnt as f64,
            Attribute::GroupAmt => row.cov.groupamt as f64 / 100.0,
            Attribute::GroupNum => row.cov.groupnum as f64,
            Attribute::Wealth => row.cov.wealth,
        }
    }
}

/// One stratum's attribute-on-T regression.
#[derive(Debug, Clone)]
pub struct StratumSlope {
    pub stratum: StratumKey,
    pub n: usize,
    pub slope: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

/// Randomization-check summary for one attribute. BH is applied across
/// strata within the attribute.
#[derive(Debug, Clone)]
pub struct RandomizationCheck {
    pub attribute: &'static str,
    pub slopes: Vec<StratumSlope>,
    pub n_skipped: usize,
    pub n_significant: usize,
    pub alpha: f64,
}

impl RandomizationCheck {
    pub fn share_significant(&self) -> f64 {
        if self.slopes.is_empty() {
            0.0
        } else {
            self.n_significant as f64 / self.slopes.len() as f64
        }
    }
}

/// Within every stratum, regresses the attribute on the amount received and
/// collects classical t p-values; strata with fewer than 3 rows (or no
/// treatment variance) are skipped and counted.
pub fn randomization_check(
    rows: &[ObservationRow],
    attribute: Attribute,
    alpha: f64,
) -> Result<RandomizationCheck> {
    let mut by_stratum: BTreeMap<StratumKey, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        by_stratum
            .entry(row.stratum)
            .or_default()
            .push((row.treatment.as_cny(), attribute.value(row)));
    }

    let mut slopes = Vec::new();
    let mut n_skipped = 0usize;
    for (key, data) in by_stratum {
        if data.len() < 3 {
            n_skipped += 1;
            continue;
        }
        match simple_ols_t_test(&data) {
            Some((slope, p)) => {
                slopes.push(StratumSlope { stratum: key, n: data.len(), slope, p_raw: p, p_adjusted: 1.0 })
            }
            None => n_skipped += 1,
        }
    }

    let raw: Vec<f64> = slopes.iter().map(|s| s.p_raw).collect();
    let bh = bh_adjust(&raw, alpha)?;
    let mut n_significant = 0;
    for (s, (&adj, &rej)) in slopes.iter_mut().zip(bh.adjusted.iter().zip(&bh.reject)) {
        s.p_adjusted = adj;
        if rej {
            n_significant += 1;
        }
    }
    Ok(RandomizationCheck {
        attribute: attribute.name(),
        slopes,
        n_skipped,
        n_significant,
        alpha,
    })
}

/// Slope and two-sided classical t p-value of y ~ 1 + x. Returns None when
/// x has no variance; a constant y yields slope 0 with p = 1.
fn simple_ols_t_test(data: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = data.len() as f64;
    let mx = data.iter().map(|d| d.0).sum::<f64>() / n;
    let my = data.iter().map(|d| d.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in data {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    if syy <= 0.0 {
        return Some((0.0, 1.0));
    }
    let df = n - 2.0;
    let rss = (syy - slope * sxy).max(0.0);
    if rss <= 1e-300 {
        // Perfect fit: distinguish a real slope from a constant.
        return Some((slope, if slope.abs() < 1e-300 { 1.0 } else { 0.0 }));
    }
    let se = (rss / df / sxx).sqrt();
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Some((slope, p))
}
