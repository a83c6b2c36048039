//! Stratified fixed-effects OLS with Poisson cluster bootstrap, the linear
//! misspecification benchmark, interaction and inequity regressions, and
//! cross-sample difference tests.
//!
//! Fixed effects are absorbed by within-cell demeaning (algebraically
//! identical to including every stratum dummy, exact in one pass for a
//! single factor); dummy columns are never materialized. With the optional
//! group-size fixed effect the columns are residualized by alternating
//! projections. Standard errors and CIs come from a Poisson(1) cluster
//! bootstrap with substreams keyed by replicate index, so replicates are
//! schedule-independent.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::panel::{ObservationRow, StratumKey};
use crate::population::Population;
use crate::rng::RngStream;

const TAG_BOOT: u64 = 0x20;

/// Outcome selector; the index picks a window from the panel's window list.
/// Money outcomes are in CNY so coefficients read per-CNY.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Overall(usize),
    Extensive(usize),
    /// Amount conditional on sending; rows that did not send drop out.
    Intensive(usize),
    Direct(usize),
    Indirect(usize),
    /// Average amount sent to the user's other groups; single-group users
    /// drop out.
    OtherGroups(usize),
    EdgesAdded(usize),
    Edges7d,
}

impl Outcome {
    /// Value for a row, or None when the row is outside the conditional
    /// sample for this outcome.
    pub fn value(&self, row: &ObservationRow) -> Option<f64> {
        match *self {
            Outcome::Overall(w) => Some(row.outcomes[w].overall_cents as f64 / 100.0),
            Outcome::Extensive(w) => Some(if row.outcomes[w].sent { 1.0 } else { 0.0 }),
            Outcome::Intensive(w) => row.outcomes[w]
                .sent
                .then(|| row.outcomes[w].overall_cents as f64 / 100.0),
            Outcome::Direct(w) => Some(row.outcomes[w].direct_cents as f64 / 100.0),
            Outcome::Indirect(w) => Some(row.outcomes[w].indirect_cents as f64 / 100.0),
            Outcome::OtherGroups(w) => (row.n_other_groups > 0)
                .then(|| row.outcomes[w].other_groups_avg_cents / 100.0),
            Outcome::EdgesAdded(w) => Some(row.outcomes[w].edges_added as f64),
            Outcome::Edges7d => Some(row.edges_added_7d as f64),
        }
    }

    pub fn label(&self, windows_s: &[f64]) -> String {
        let win = |w: usize| format_window(windows_s[w]);
        match *self {
            Outcome::Overall(w) => format!("overall_{}", win(w)),
            Outcome::Extensive(w) => format!("extensive_{}", win(w)),
            Outcome::Intensive(w) => format!("intensive_{}", win(w)),
            Outcome::Direct(w) => format!("direct_{}", win(w)),
            Outcome::Indirect(w) => format!("indirect_{}", win(w)),
            Outcome::OtherGroups(w) => format!("other_groups_{}", win(w)),
            Outcome::EdgesAdded(w) => format!("edges_{}", win(w)),
            Outcome::Edges7d => "edges_7d".into(),
        }
    }
}

pub fn format_window(seconds: f64) -> String {
    let s = seconds.round() as i64;
    if s % 86_400 == 0 {
        format!("{}d", s / 86_400)
    } else if s % 3600 == 0 {
        format!("{}h", s / 3600)
    } else {
        format!("{}m", s / 60)
    }
}

/// Network moderators entering interaction regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moderator {
    ClusteringCoefficient,
    NormalizedDegree,
    Eigen,
    AvgNormalizedDegree,
    OverallClustering,
}

impl Moderator {
    pub fn value(&self, row: &ObservationRow) -> f64 {
        match self {
            Moderator::ClusteringCoefficient => row.cov.clustering,
            Moderator::NormalizedDegree => row.cov.norm_degree,
            Moderator::Eigen => row.cov.eigen,
            Moderator::AvgNormalizedDegree => row.cov.avg_norm_degree,
            Moderator::OverallClustering => row.cov.overall_clustering,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Moderator::ClusteringCoefficient => "clustering",
            Moderator::NormalizedDegree => "norm_degree",
            Moderator::Eigen => "eigen",
            Moderator::AvgNormalizedDegree => "avg_norm_degree",
            Moderator::OverallClustering => "overall_clustering",
        }
    }
}

/// Extra columns for stratified regressions (treatment is always first).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regressor {
    Interaction(Moderator),
    Main(Moderator),
    /// Second-largest over largest amount (inequity regressions).
    ZRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    /// Within-stratum demeaning, optional absorbed group-size factor.
    Stratified { group_size_fe: bool },
    /// y ~ 1 + T + A + N + O with the stratum vector entered linearly.
    LinearSpec,
    /// Naive pooled y ~ 1 + T.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct Regression {
    pub kind: RegKind,
    pub outcome: Outcome,
    pub extras: Vec<Regressor>,
}

impl Regression {
    pub fn stratified(outcome: Outcome) -> Self {
        Self { kind: RegKind::Stratified { group_size_fe: false }, outcome, extras: Vec::new() }
    }
    pub fn pooled(outcome: Outcome) -> Self {
        Self { kind: RegKind::Pooled, outcome, extras: Vec::new() }
    }
    pub fn linear_spec(outcome: Outcome) -> Self {
        Self { kind: RegKind::LinearSpec, outcome, extras: Vec::new() }
    }
}

/// Compiled design: column-major regressors, dense stratum/cluster codes.
pub struct Design {
    pub y: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub names: Vec<String>,
    pub stratum: Vec<u32>,
    pub n_strata: usize,
    /// Optional second absorbed factor (levels, count).
    pub factor2: Option<(Vec<u32>, usize)>,
    pub cluster: Vec<u32>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Expand cluster weights to row weights.
    pub fn row_weights(&self, cluster_weights: &[f64]) -> Vec<f64> {
        self.cluster.iter().map(|&c| cluster_weights[c as usize]).collect()
    }
}

pub fn build_design(rows: &[ObservationRow], reg: &Regression) -> Result<Design> {
    let mut y = Vec::new();
    let mut kept: Vec<&ObservationRow> = Vec::new();
    for row in rows {
        if let Some(v) = reg.outcome.value(row) {
            y.push(v);
            kept.push(row);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptySample("no rows in the outcome sample".into()));
    }

    let t: Vec<f64> = kept.iter().map(|r| r.treatment.as_cny()).collect();
    let mut xs = vec![t];
    let mut names = vec!["amount_received".to_string()];

    match reg.kind {
        RegKind::Stratified { .. } => {
            for extra in &reg.extras {
                match extra {
                    Regressor::Interaction(m) => {
                        xs.push(
                            kept.iter()
                                .map(|r| r.treatment.as_cny() * m.value(r))
                                .collect(),
                        );
                        names.push(format!("amount_received_x_{}", m.name()));
                    }
                    Regressor::Main(m) => {
                        xs.push(kept.iter().map(|r| m.value(r)).collect());
                        names.push(m.name().to_string());
                    }
                    Regressor::ZRatio => {
                        let col: Option<Vec<f64>> =
                            kept.iter().map(|r| r.z_ratio).collect();
                        xs.push(col.ok_or_else(|| {
                            Error::InvalidInput("row without a defined ratio Z".into())
                        })?);
                        names.push("ratio".to_string());
                    }
                }
            }
        }
        RegKind::LinearSpec => {
            if kept.len() < 5 {
                return Err(Error::EmptySample("linear specification needs >= 5 rows".into()));
            }
            xs.push(kept.iter().map(|r| r.stratum.amount_cents as f64 / 100.0).collect());
            xs.push(kept.iter().map(|r| r.stratum.n_received as f64).collect());
            xs.push(kept.iter().map(|r| r.stratum.order as f64).collect());
            names.extend(
                ["total_amount", "n_recipients", "order"].map(String::from),
            );
        }
        RegKind::Pooled => {}
    }

    // Stratum coding: real strata for the stratified kind, one global cell
    // (an absorbed intercept) otherwise.
    let (stratum, n_strata) = match reg.kind {
        RegKind::Stratified { .. } => {
            let mut codes: BTreeMap<StratumKey, u32> = BTreeMap::new();
            let mut col = Vec::with_capacity(kept.len());
            for r in &kept {
                let next = codes.len() as u32;
                let code = *codes.entry(r.stratum).or_insert(next);
                col.push(code);
            }
            let n = codes.len();
            (col, n)
        }
        _ => (vec![0u32; kept.len()], 1),
    };

    let factor2 = match reg.kind {
        RegKind::Stratified { group_size_fe: true } => {
            let mut codes: BTreeMap<u32, u32> = BTreeMap::new();
            let mut col = Vec::with_capacity(kept.len());
            for r in &kept {
                let next = codes.len() as u32;
                let code = *codes.entry(r.cov.group_size).or_insert(next);
                col.push(code);
            }
            let n = codes.len();
            Some((col, n))
        }
        _ => None,
    };

    let cluster: Vec<u32> = kept.iter().map(|r| r.cluster_id).collect();
    Ok(Design { y, xs, names, stratum, n_strata, factor2, cluster })
}

/// Point-fit result before any bootstrap.
#[derive(Debug, Clone)]
pub struct FitCore {
    pub beta: Vec<f64>,
    pub rss: f64,
    pub tss: f64,
    pub n_used: usize,
    pub strata_active: usize,
    pub factor2_active: usize,
}

impl FitCore {
    pub fn adj_r2(&self, k: usize) -> f64 {
        if self.tss <= 0.0 {
            return f64::NAN;
        }
        let r2 = 1.0 - self.rss / self.tss;
        let df_model =
            k + self.strata_active + self.factor2_active.saturating_sub(1);
        let n = self.n_used as f64;
        if n <= df_model as f64 {
            return f64::NAN;
        }
        1.0 - (1.0 - r2) * (n - 1.0) / (n - df_model as f64)
    }
}

/// Weighted fixed-effects fit. `weights` are row weights (`None` means 1).
pub fn weighted_fe_fit(design: &Design, weights: Option<&[f64]>) -> Result<FitCore> {
    match &design.factor2 {
        None => fit_single_factor(design, weights),
        Some(_) => fit_two_factor(design, weights),
    }
}

fn fit_single_factor(design: &Design, weights: Option<&[f64]>) -> Result<FitCore> {
    let n = design.n_rows();
    let k = design.xs.len();
    let s = design.n_strata;
    let w_at = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut wsum = vec![0.0f64; s];
    let mut ysum = vec![0.0f64; s];
    let mut xsum = vec![0.0f64; s * k];
    let mut w_all = 0.0;
    let mut wy_all = 0.0;
    let mut n_used = 0usize;
    for i in 0..n {
        let w = w_at(i);
        if w <= 0.0 {
            continue;
        }
        n_used += 1;
        let st = design.stratum[i] as usize;
        wsum[st] += w;
        ysum[st] += w * design.y[i];
        for (j, col) in design.xs.iter().enumerate() {
            xsum[st * k + j] += w * col[i];
        }
        w_all += w;
        wy_all += w * design.y[i];
    }
    if n_used == 0 {
        return Err(Error::Unidentified("all rows have zero weight".into()));
    }
    let y_bar = wy_all / w_all;

    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    let mut yty = 0.0f64;
    let mut tss = 0.0f64;
    let mut raw_xx = vec![0.0f64; k];
    let mut xc = vec![0.0f64; k];
    for i in 0..n {
        let w = w_at(i);
        if w <= 0.0 {
            continue;
        }
        let st = design.stratum[i] as usize;
        let wm = wsum[st];
        let yc = design.y[i] - ysum[st] / wm;
        for (j, col) in design.xs.iter().enumerate() {
            xc[j] = col[i] - xsum[st * k + j] / wm;
            raw_xx[j] += w * col[i] * col[i];
        }
        for a in 0..k {
            for b in a..k {
                xtx[a * k + b] += w * xc[a] * xc[b];
            }
            xty[a] += w * xc[a] * yc;
        }
        yty += w * yc * yc;
        let dy = design.y[i] - y_bar;
        tss += w * dy * dy;
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }

    let beta = solve_spd(&xtx, &xty, k, &raw_xx)?;
    let explained: f64 = (0..k).map(|j| beta[j] * xty[j]).sum();
    let rss = (yty - explained).max(0.0);
    let strata_active = wsum.iter().filter(|&&w| w > 0.0).count();
    Ok(FitCore { beta, rss, tss, n_used, strata_active, factor2_active: 0 })
}

#[allow(clippy::needless_range_loop)] // several parallel arrays indexed together
fn fit_two_factor(design: &Design, weights: Option<&[f64]>) -> Result<FitCore> {
    const MAX_CYCLES: usize = 200;
    const TOL: f64 = 1e-11;
    let (f2, n_f2) = design.factor2.as_ref().expect("two-factor path");
    let n = design.n_rows();
    let k = design.xs.len();
    let w_at = |i: usize| weights.map_or(1.0, |w| w[i]);

    // Residualize [y, x...] against both factors by alternating projections.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    cols.push(design.y.clone());
    for x in &design.xs {
        cols.push(x.clone());
    }

    let mut w_all = 0.0;
    let mut n_used = 0usize;
    for i in 0..n {
        let w = w_at(i);
        if w > 0.0 {
            w_all += w;
            n_used += 1;
        }
    }
    if n_used == 0 {
        return Err(Error::Unidentified("all rows have zero weight".into()));
    }
    // Global weighted y mean for TSS, before demeaning clobbers y.
    let wy_all: f64 =
        (0..n).map(|i| w_at(i) * design.y[i]).sum();
    let y_bar = wy_all / w_all;
    let tss: f64 = (0..n)
        .map(|i| {
            let w = w_at(i);
            let d = design.y[i] - y_bar;
            w.max(0.0) * d * d
        })
        .sum();

    let scale: Vec<f64> = cols
        .iter()
        .map(|c| {
            (0..n)
                .map(|i| w_at(i).max(0.0) * c[i] * c[i])
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();

    let mut wsum1 = vec![0.0f64; design.n_strata];
    for i in 0..n {
        let w = w_at(i);
        if w > 0.0 {
            wsum1[design.stratum[i] as usize] += w;
        }
    }
    let mut wsum2 = vec![0.0f64; *n_f2];
    for i in 0..n {
        let w = w_at(i);
        if w > 0.0 {
            wsum2[f2[i] as usize] += w;
        }
    }

    let mut means1 = vec![0.0f64; design.n_strata];
    let mut means2 = vec![0.0f64; *n_f2];
    for _cycle in 0..MAX_CYCLES {
        let mut max_adj = 0.0f64;
        for (ci, col) in cols.iter_mut().enumerate() {
            // factor 1 pass
            means1.iter_mut().for_each(|m| *m = 0.0);
            for i in 0..n {
                let w = w_at(i);
                if w > 0.0 {
                    means1[design.stratum[i] as usize] += w * col[i];
                }
            }
            for (m, &w) in means1.iter_mut().zip(&wsum1) {
                if w > 0.0 {
                    *m /= w;
                }
            }
            for i in 0..n {
                col[i] -= means1[design.stratum[i] as usize];
            }
            // factor 2 pass
            means2.iter_mut().for_each(|m| *m = 0.0);
            for i in 0..n {
                let w = w_at(i);
                if w > 0.0 {
                    means2[f2[i] as usize] += w * col[i];
                }
            }
            for (m, &w) in means2.iter_mut().zip(&wsum2) {
                if w > 0.0 {
                    *m /= w;
                }
            }
            let mut adj = 0.0f64;
            for i in 0..n {
                col[i] -= means2[f2[i] as usize];
            }
            for m in &means2 {
                adj = adj.max(m.abs());
            }
            max_adj = max_adj.max(adj / scale[ci]);
        }
        if max_adj <= TOL {
            break;
        }
    }

    // OLS on the residualized columns (weighted, no intercept).
    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    let mut yty = 0.0f64;
    let mut raw_xx = vec![0.0f64; k];
    for i in 0..n {
        let w = w_at(i);
        if w <= 0.0 {
            continue;
        }
        let yc = cols[0][i];
        for a in 0..k {
            let xa = cols[a + 1][i];
            raw_xx[a] += w * design.xs[a][i] * design.xs[a][i];
            for b in a..k {
                xtx[a * k + b] += w * xa * cols[b + 1][i];
            }
            xty[a] += w * xa * yc;
        }
        yty += w * yc * yc;
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }
    let beta = solve_spd(&xtx, &xty, k, &raw_xx)?;
    let explained: f64 = (0..k).map(|j| beta[j] * xty[j]).sum();
    let rss = (yty - explained).max(0.0);
    let strata_active = wsum1.iter().filter(|&&w| w > 0.0).count();
    let factor2_active = wsum2.iter().filter(|&&w| w > 0.0).count();
    Ok(FitCore { beta, rss, tss, n_used, strata_active, factor2_active })
}

/// Cholesky solve of a symmetric positive-definite system; fails loudly on
/// rank deficiency (no identifying variation or collinear regressors).
fn solve_spd(a: &[f64], b: &[f64], k: usize, raw_diag_scale: &[f64]) -> Result<Vec<f64>> {
    if k == 1 {
        // Single regressor: one exact division.
        let floor = 1e-12 * raw_diag_scale[0].max(1e-300);
        if a[0] <= floor {
            return Err(Error::Unidentified("no within-stratum treatment variance".into()));
        }
        return Ok(vec![b[0] / a[0]]);
    }
    let mut l = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for p in 0..j {
                sum -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                let floor = 1e-12 * raw_diag_scale[i].max(1e-300);
                if sum <= floor {
                    return Err(if k == 1 {
                        Error::Unidentified(
                            "no within-stratum treatment variance".into(),
                        )
                    } else {
                        Error::Collinear(format!("column {i} is in the span of the others"))
                    });
                }
                l[i * k + j] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    // Forward/back substitution.
    let mut z = vec![0.0f64; k];
    for i in 0..k {
        let mut sum = b[i];
        for p in 0..i {
            sum -= l[i * k + p] * z[p];
        }
        z[i] = sum / l[i * k + i];
    }
    let mut x = vec![0.0f64; k];
    for i in (0..k).rev() {
        let mut sum = z[i];
        for p in (i + 1)..k {
            sum -= l[p * k + i] * x[p];
        }
        x[i] = sum / l[i * k + i];
    }
    Ok(x)
}

/// Groups sharing any user merge into one bootstrap cluster.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub group_to_cluster: BTreeMap<u64, u32>,
    pub n_clusters: usize,
}

pub fn build_clusters(pop: &Population) -> ClusterAssignment {
    let idx_of: BTreeMap<u64, usize> =
        pop.groups.iter().enumerate().map(|(i, g)| (g.group_id, i)).collect();
    let mut parent: Vec<usize> = (0..pop.groups.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for member in pop.members.values() {
        if member.group_ids.len() > 1 {
            let first = idx_of[&member.group_ids[0]];
            for g in &member.group_ids[1..] {
                let a = find(&mut parent, first);
                let b = find(&mut parent, idx_of[g]);
                if a != b {
                    parent[b.max(a)] = b.min(a);
                }
            }
        }
    }
    let mut labels: BTreeMap<usize, u32> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (i, g) in pop.groups.iter().enumerate() {
        let root = find(&mut parent, i);
        let next = labels.len() as u32;
        let label = *labels.entry(root).or_insert(next);
        out.insert(g.group_id, label);
    }
    ClusterAssignment { n_clusters: labels.len(), group_to_cluster: out }
}

/// Replicate draws of a statistic under Poisson(1) cluster weights.
#[derive(Debug, Clone)]
pub struct BootstrapDist {
    pub reps: usize,
    pub skipped: usize,
    /// More than 10% of replicates had no identifying variation; inference
    /// from the remaining replicates is suspect.
    pub unstable: bool,
    /// Kept replicate statistic vectors, in replicate order.
    pub replicates: Vec<Vec<f64>>,
}

impl BootstrapDist {
    pub fn coord(&self, j: usize) -> Vec<f64> {
        self.replicates.iter().map(|r| r[j]).collect()
    }

    pub fn se(&self, j: usize) -> f64 {
        let xs = self.coord(j);
        let n = xs.len() as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    /// Percentile 95% CI (2.5/97.5, linear interpolation).
    pub fn percentile_ci(&self, j: usize) -> (f64, f64) {
        let mut xs = self.coord(j);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (percentile(&xs, 0.025), percentile(&xs, 0.975))
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Poisson(1) cluster bootstrap of an arbitrary statistic.
///
/// `statistic` receives the cluster weight vector for one replicate and
/// returns the statistic vector, or an error when the replicate has no
/// identifying variation (such replicates are skipped and counted; more
/// than 10% skipped is reported as instability).
pub fn poisson_cluster_bootstrap<F>(
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
    statistic: F,
) -> Result<BootstrapDist>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if reps < 1 {
        return Err(Error::InvalidInput("bootstrap needs reps >= 1".into()));
    }
    let results: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng.derive_path(&[TAG_BOOT, rep as u64]);
            let weights: Vec<f64> =
                (0..n_clusters).map(|_| r.poisson(1.0) as f64).collect();
            statistic(&weights).ok()
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped == reps {
        return Err(Error::BootstrapUnstable { skipped, total: reps });
    }
    Ok(BootstrapDist {
        reps,
        skipped,
        unstable: skipped * 10 > reps,
        replicates: results.into_iter().flatten().collect(),
    })
}

/// One coefficient with bootstrap uncertainty.
#[derive(Debug, Clone)]
pub struct TermEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Bootstrap-t against the normal distribution.
    pub p_value: f64,
}

/// Full regression report: coefficients, bootstrap diagnostics, fit stats.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub terms: Vec<TermEstimate>,
    pub n_obs: usize,
    pub n_strata: usize,
    pub adj_r2: f64,
    pub bootstrap_reps: usize,
    pub skipped_replicates: usize,
    /// Set when more than 10% of replicates were skipped.
    pub unstable: bool,
}

impl EstimateReport {
    pub fn term(&self, name: &str) -> Option<&TermEstimate> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// The treatment coefficient (first term).
    pub fn beta(&self) -> &TermEstimate {
        &self.terms[0]
    }
}

fn normal_two_sided_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

fn term_from_dist(name: &str, estimate: f64, dist: &BootstrapDist, j: usize) -> TermEstimate {
    let se = dist.se(j);
    let (ci_lo, ci_hi) = dist.percentile_ci(j);
    let p_value = if se > 0.0 {
        normal_two_sided_p(estimate / se)
    } else if estimate.abs() < 1e-300 {
        1.0
    } else {
        0.0
    };
    TermEstimate { name: name.to_string(), estimate, se, ci_lo, ci_hi, p_value }
}

/// Fits a regression and bootstraps its coefficients.
///
/// `n_clusters` must cover every cluster id on the rows (use the full
/// panel's cluster count so subsample weights stay aligned).
pub fn estimate(
    rows: &[ObservationRow],
    reg: &Regression,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    let design = build_design(rows, reg)?;
    let fit = weighted_fe_fit(&design, None)?;
    let k = design.xs.len();
    let dist = poisson_cluster_bootstrap(n_clusters, reps, rng, |cw| {
        let w = design.row_weights(cw);
        weighted_fe_fit(&design, Some(&w)).map(|f| f.beta)
    })?;
    let terms = design
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| term_from_dist(name, fit.beta[j], &dist, j))
        .collect();
    Ok(EstimateReport {
        terms,
        n_obs: design.n_rows(),
        n_strata: fit.strata_active,
        adj_r2: fit.adj_r2(k),
        bootstrap_reps: reps,
        skipped_replicates: dist.skipped,
        unstable: dist.unstable,
    })
}

/// Stratified fixed-effects OLS of the outcome on the amount received.
pub fn stratified_fe_ols(
    rows: &[ObservationRow],
    outcome: Outcome,
    extras: &[Regressor],
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    let reg = Regression {
        kind: RegKind::Stratified { group_size_fe: false },
        outcome,
        extras: extras.to_vec(),
    };
    estimate(rows, &reg, n_clusters, reps, rng)
}

/// The misspecified benchmark: stratum variables entered linearly.
pub fn linear_spec_ols(
    rows: &[ObservationRow],
    outcome: Outcome,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    estimate(rows, &Regression::linear_spec(outcome), n_clusters, reps, rng)
}

/// Naive pooled OLS (no strata) — the confounded comparator.
pub fn pooled_ols(
    rows: &[ObservationRow],
    outcome: Outcome,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    estimate(rows, &Regression::pooled(outcome), n_clusters, reps, rng)
}

/// Moderation: main effects plus T x moderator products, with absorbed
/// group-size fixed effects when flagged.
pub fn interaction_regression(
    rows: &[ObservationRow],
    outcome: Outcome,
    moderators: &[Moderator],
    group_size_fe: bool,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    let mut extras = Vec::new();
    for m in moderators {
        extras.push(Regressor::Interaction(*m));
    }
    for m in moderators {
        extras.push(Regressor::Main(*m));
    }
    let reg = Regression { kind: RegKind::Stratified { group_size_fe }, outcome, extras };
    estimate(rows, &reg, n_clusters, reps, rng)
}

/// Inequity regression on luckiest recipients: outcome on T and the ratio
/// Z of the second-largest to the largest amount. Rows must be luckiest
/// recipients with a defined Z.
pub fn inequity_regression(
    rows: &[ObservationRow],
    outcome: Outcome,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    if rows.is_empty() {
        return Err(Error::EmptySample("no luckiest rows".into()));
    }
    if let Some(bad) = rows.iter().find(|r| !r.luckiest || r.z_ratio.is_none()) {
        return Err(Error::InvalidInput(format!(
            "row for user {} is not a luckiest recipient with a defined ratio",
            bad.user_id
        )));
    }
    let reg = Regression {
        kind: RegKind::Stratified { group_size_fe: false },
        outcome,
        extras: vec![Regressor::ZRatio],
    };
    estimate(rows, &reg, n_clusters, reps, rng)
}

/// Difference between two fits under joint replicate weights.
#[derive(Debug, Clone)]
pub struct DifferenceTest {
    pub side_a: EstimateReport,
    pub side_b: EstimateReport,
    /// beta_a - beta_b for the treatment coefficient.
    pub difference: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

fn paired_difference(
    design_a: &Design,
    design_b: &Design,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<DifferenceTest> {
    let fit_a = weighted_fe_fit(design_a, None)?;
    let fit_b = weighted_fe_fit(design_b, None)?;
    let dist = poisson_cluster_bootstrap(n_clusters, reps, rng, |cw| {
        let wa = design_a.row_weights(cw);
        let wb = design_b.row_weights(cw);
        let ba = weighted_fe_fit(design_a, Some(&wa))?;
        let bb = weighted_fe_fit(design_b, Some(&wb))?;
        let mut v = vec![ba.beta[0] - bb.beta[0]];
        v.extend_from_slice(&ba.beta);
        v.extend_from_slice(&bb.beta);
        Ok(v)
    })?;
    let ka = design_a.xs.len();
    let kb = design_b.xs.len();
    let side_a = EstimateReport {
        terms: design_a
            .names
            .iter()
            .enumerate()
            .map(|(j, n)| term_from_dist(n, fit_a.beta[j], &dist, 1 + j))
            .collect(),
        n_obs: design_a.n_rows(),
        n_strata: fit_a.strata_active,
        adj_r2: fit_a.adj_r2(ka),
        bootstrap_reps: reps,
        skipped_replicates: dist.skipped,
        unstable: dist.unstable,
    };
    let side_b = EstimateReport {
        terms: design_b
            .names
            .iter()
            .enumerate()
            .map(|(j, n)| term_from_dist(n, fit_b.beta[j], &dist, 1 + ka + j))
            .collect(),
        n_obs: design_b.n_rows(),
        n_strata: fit_b.strata_active,
        adj_r2: fit_b.adj_r2(kb),
        bootstrap_reps: reps,
        skipped_replicates: dist.skipped,
        unstable: dist.unstable,
    };
    let diff = fit_a.beta[0] - fit_b.beta[0];
    let se = dist.se(0);
    let (ci_lo, ci_hi) = dist.percentile_ci(0);
    let p_value = if se > 0.0 { normal_two_sided_p(diff / se) } else { 1.0 };
    Ok(DifferenceTest { side_a, side_b, difference: diff, se, ci_lo, ci_hi, p_value })
}

/// Splits rows by a label and tests the treatment-coefficient difference
/// with a joint bootstrap (the same cluster weights on both sides).
pub fn subsample_difference_test<F>(
    rows: &[ObservationRow],
    split: F,
    reg: &Regression,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<DifferenceTest>
where
    F: Fn(&ObservationRow) -> bool,
{
    let a: Vec<ObservationRow> = rows.iter().filter(|r| split(r)).cloned().collect();
    let b: Vec<ObservationRow> = rows.iter().filter(|r| !split(r)).cloned().collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample("one subsample is empty".into()));
    }
    let design_a = build_design(&a, reg)?;
    let design_b = build_design(&b, reg)?;
    paired_difference(&design_a, &design_b, n_clusters, reps, rng)
}

/// Tests the treatment-coefficient difference of two specifications on the
/// same rows (used for the misspecification comparison).
pub fn specification_difference_test(
    rows: &[ObservationRow],
    reg_a: &Regression,
    reg_b: &Regression,
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<DifferenceTest> {
    let design_a = build_design(rows, reg_a)?;
    let design_b = build_design(rows, reg_b)?;
    paired_difference(&design_a, &design_b, n_clusters, reps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::MoneyCents;
    use crate::panel::{Covariates, WindowOutcome};

    /// Minimal row for estimator tests.
    pub(crate) fn test_row(
        stratum: (i64, u32, u32),
        t_cents: i64,
        y_cny: f64,
        cluster: u32,
    ) -> ObservationRow {
        ObservationRow {
            packet_id: 0,
            group_id: cluster as u64,
            user_id: 0,
            cluster_id: cluster,
            stratum: StratumKey {
                amount_cents: stratum.0,
                n_received: stratum.1,
                order: stratum.2,
            },
            t_recv: 0.0,
            treatment: MoneyCents(t_cents),
            luckiest: false,
            z_ratio: None,
            festival: false,
            n_other_groups: 0,
            cov: Covariates {
                female: false,
                age: 30,
                degree: 0,
                fricnt: 0,
                joincnt: 1,
                history_sendamt: 0,
                history_sendcnt: 0,
                history_recvamt: 0,
                history_recvcnt: 0,
                groupamt: 0,
                groupnum: 0,
                wealth: 1.0,
                clustering: 0.0,
                norm_degree: 0.0,
                eigen: 0.0,
                group_size: 3,
                avg_norm_degree: 0.0,
                overall_clustering: 0.0,
                group_type: "other".into(),
            },
            outcomes: vec![WindowOutcome {
                overall_cents: (y_cny * 100.0).round() as i64,
                sent: y_cny > 0.0,
                direct_cents: 0,
                indirect_cents: 0,
                other_groups_avg_cents: 0.0,
                edges_added: 0,
            }],
            edges_added_7d: 0,
        }
    }

    #[test]
    fn two_stratum_hand_example_is_exactly_one() {
        // Stratum 1: (T, Y) = (1, 1), (2, 2); stratum 2: (0, 5), (2, 7).
        let rows = vec![
            test_row((100, 2, 1), 100, 1.0, 0),
            test_row((100, 2, 1), 200, 2.0, 0),
            test_row((200, 2, 1), 0, 5.0, 1),
            test_row((200, 2, 1), 200, 7.0, 1),
        ];
        let design = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        let fit = weighted_fe_fit(&design, None).unwrap();
        assert_eq!(fit.beta[0], 1.0);
    }

    #[test]
    fn constant_outcome_gives_zero_beta() {
        let rows = vec![
            test_row((100, 2, 1), 100, 3.0, 0),
            test_row((100, 2, 1), 200, 3.0, 0),
        ];
        let design = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        let fit = weighted_fe_fit(&design, None).unwrap();
        assert_eq!(fit.beta[0], 0.0);
    }

    #[test]
    fn singleton_strata_contribute_nothing() {
        let mut rows = vec![
            test_row((100, 2, 1), 100, 1.0, 0),
            test_row((100, 2, 1), 200, 2.0, 0),
            test_row((200, 2, 1), 0, 5.0, 1),
            test_row((200, 2, 1), 200, 7.0, 1),
        ];
        let design = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        let base = weighted_fe_fit(&design, None).unwrap().beta[0];
        // Fresh singleton strata, wild values.
        rows.push(test_row((999, 9, 9), 12345, 99.0, 2));
        rows.push(test_row((888, 8, 8), 1, -50.0, 3));
        let design2 = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        let with_singletons = weighted_fe_fit(&design2, None).unwrap().beta[0];
        assert_eq!(base.to_bits(), with_singletons.to_bits());
    }

    #[test]
    fn all_singletons_unidentified() {
        let rows = vec![
            test_row((100, 2, 1), 100, 1.0, 0),
            test_row((200, 2, 1), 200, 2.0, 0),
        ];
        let design = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        assert!(matches!(
            weighted_fe_fit(&design, None),
            Err(Error::Unidentified(_))
        ));
    }

    #[test]
    fn unit_weights_match_unweighted_exactly() {
        let rows = vec![
            test_row((100, 2, 1), 100, 1.3, 0),
            test_row((100, 2, 1), 200, 2.9, 0),
            test_row((200, 3, 2), 0, 5.1, 1),
            test_row((200, 3, 2), 200, 7.7, 1),
            test_row((200, 3, 2), 100, 6.0, 2),
        ];
        let design = build_design(&rows, &Regression::stratified(Outcome::Overall(0))).unwrap();
        let a = weighted_fe_fit(&design, None).unwrap();
        let ones = vec![1.0; design.n_rows()];
        let b = weighted_fe_fit(&design, Some(&ones)).unwrap();
        assert_eq!(a.beta[0].to_bits(), b.beta[0].to_bits());
    }

    #[test]
    fn pooled_matches_simple_ols() {
        // y = 2 + 3 t plus noise pattern solved by hand below.
        let rows = vec![
            test_row((1, 1, 1), 0, 2.0, 0),
            test_row((1, 1, 1), 100, 5.0, 0),
            test_row((1, 1, 1), 200, 8.0, 1),
        ];
        let design = build_design(&rows, &Regression::pooled(Outcome::Overall(0))).unwrap();
        let fit = weighted_fe_fit(&design, None).unwrap();
        assert!((fit.beta[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_extras_signaled() {
        let mut rows = vec![
            test_row((100, 2, 1), 100, 1.0, 0),
            test_row((100, 2, 1), 200, 2.0, 0),
            test_row((200, 2, 1), 0, 5.0, 1),
            test_row((200, 2, 1), 200, 7.0, 1),
        ];
        for r in rows.iter_mut() {
            r.cov.clustering = 0.5; // constant moderator
        }
        let err = interaction_regression(
            &rows,
            Outcome::Overall(0),
            &[Moderator::ClusteringCoefficient],
            false,
            2,
            10,
            &RngStream::new(1),
        );
        assert!(matches!(err, Err(Error::Collinear(_))), "{err:?}");
    }

    #[test]
    fn cluster_components_merge_via_shared_users() {
        use crate::population::{generate_population, PopulationConfig};
        let config = PopulationConfig {
            groups: 12,
            size_mean: 5.0,
            size_log_sd: 0.0,
            overlap_rate: 0.0,
            ..Default::default()
        };
        let mut pop = generate_population(&config, &RngStream::new(3)).unwrap();
        // Disjoint groups: one cluster per group.
        let ca = build_clusters(&pop);
        assert_eq!(ca.n_clusters, 12);
        // Chain g0-u-g1 and g1-v-g2: one merged cluster.
        let u = *pop.groups[0].members().first().unwrap();
        let v = *pop.groups[1].members().first().unwrap();
        pop.members.get_mut(&u).unwrap().group_ids.push(1);
        pop.members.get_mut(&v).unwrap().group_ids.push(2);
        let ca = build_clusters(&pop);
        assert_eq!(ca.n_clusters, 10);
        let c0 = ca.group_to_cluster[&0];
        assert_eq!(c0, ca.group_to_cluster[&1]);
        assert_eq!(c0, ca.group_to_cluster[&2]);
    }

    #[test]
    fn bootstrap_identical_rows_zero_se() {
        let rows: Vec<ObservationRow> = (0..10)
            .map(|i| {
                let mut r = test_row((100, 2, 1), (i % 2) as i64 * 100, 1.0, i as u32);
                r.outcomes[0].overall_cents = 100 + (i % 2) as i64 * 100;
                r
            })
            .collect();
        let rep = stratified_fe_ols(
            &rows,
            Outcome::Overall(0),
            &[],
            10,
            200,
            &RngStream::new(5),
        )
        .unwrap();
        // Every stratum cell has slope exactly 1, so replicates never move.
        assert!(rep.beta().se < 1e-12, "se {}", rep.beta().se);
        assert!((rep.beta().estimate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_grand_mean_matches_analytic_poisson_se() {
        // Two clusters with values 0 and 2: the Poisson-weighted mean
        // (w0*0 + w1*2) / (w0 + w1) over w ~ Poisson(1). Its SD is computed
        // by exact enumeration over a truncated weight grid.
        let values = [0.0f64, 2.0f64];
        let stat = |cw: &[f64]| -> Result<Vec<f64>> {
            let wsum: f64 = cw.iter().sum();
            if wsum <= 0.0 {
                return Err(Error::Unidentified("all weights zero".into()));
            }
            let mean = cw.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / wsum;
            Ok(vec![mean])
        };
        let dist =
            poisson_cluster_bootstrap(2, 10_000, &RngStream::new(7), stat).unwrap();
        let se = dist.se(0);
        // Exact conditional SD given not both weights zero.
        let pois = |k: u32| -> f64 {
            let mut p = (-1.0f64).exp();
            for i in 1..=k {
                p *= 1.0 / i as f64;
            }
            p
        };
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut mass = 0.0;
        for w0 in 0..30u32 {
            for w1 in 0..30u32 {
                if w0 == 0 && w1 == 0 {
                    continue;
                }
                let p = pois(w0) * pois(w1);
                let v = 2.0 * w1 as f64 / (w0 + w1) as f64;
                mean += p * v;
                m2 += p * v * v;
                mass += p;
            }
        }
        mean /= mass;
        m2 /= mass;
        let exact_sd = (m2 - mean * mean).sqrt();
        assert!(
            (se - exact_sd).abs() / exact_sd < 0.1,
            "bootstrap se {se} vs exact {exact_sd}"
        );
    }

    #[test]
    fn empty_subsample_errors() {
        let rows = vec![
            test_row((100, 2, 1), 100, 1.0, 0),
            test_row((100, 2, 1), 200, 2.0, 0),
        ];
        let err = subsample_difference_test(
            &rows,
            |_| true,
            &Regression::stratified(Outcome::Overall(0)),
            1,
            10,
            &RngStream::new(1),
        );
        assert!(matches!(err, Err(Error::EmptySample(_))));
    }

    #[test]
    fn inequity_constant_ratio_unidentified() {
        // All luckiest rows share one packet-level Z: the ratio column is
        // absorbed by the stratum means and the regression must signal it.
        let mut rows = vec![
            test_row((100, 2, 1), 60, 1.0, 0),
            test_row((100, 2, 1), 70, 2.0, 0),
            test_row((100, 2, 1), 80, 3.0, 1),
        ];
        for r in rows.iter_mut() {
            r.luckiest = true;
            r.z_ratio = Some(0.5);
        }
        let err = inequity_regression(&rows, Outcome::Overall(0), 2, 10, &RngStream::new(1));
        assert!(matches!(err, Err(Error::Collinear(_))), "{err:?}");
    }

    #[test]
    fn inequity_rejects_non_luckiest_rows() {
        let rows = vec![test_row((100, 2, 1), 100, 1.0, 0)];
        assert!(inequity_regression(&rows, Outcome::Overall(0), 1, 10, &RngStream::new(1))
            .is_err());
    }
}
