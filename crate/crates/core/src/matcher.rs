//! Exact one-to-many matching of luckiest-draw recipients to non-luckiest
//! recipients with identical (total amount, receiver count, order, amount
//! received), plus matched contrasts on kth-subsequent-packet outcomes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimator::{poisson_cluster_bootstrap, BootstrapDist};
use crate::panel::ObservationRow;
use crate::rng::RngStream;
use crate::simulator::EventLog;
use statrs::distribution::{ContinuousCDF, Normal};

/// Exact match cell: all components in integer cents / counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchKey {
    pub amount_cents: i64,
    pub n_received: u32,
    pub order: u32,
    pub t_cents: i64,
}

impl MatchKey {
    pub fn of(row: &ObservationRow) -> Self {
        Self {
            amount_cents: row.stratum.amount_cents,
            n_received: row.stratum.n_received,
            order: row.stratum.order,
            t_cents: row.treatment.cents(),
        }
    }
}

/// Matched cells: row indices of treated (luckiest) and control sides.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub cells: BTreeMap<MatchKey, (Vec<usize>, Vec<usize>)>,
    pub n_treated_total: usize,
    pub n_treated_matched: usize,
    pub n_control_matched: usize,
}

impl MatchResult {
    /// Share of treated rows that found at least one exact control.
    pub fn match_rate(&self) -> f64 {
        if self.n_treated_total == 0 {
            0.0
        } else {
            self.n_treated_matched as f64 / self.n_treated_total as f64
        }
    }
}

/// Exact matching with explicit treated labels (placebo tests relabel).
pub fn exact_match_with_labels(rows: &[ObservationRow], treated: &[bool]) -> MatchResult {
    assert_eq!(rows.len(), treated.len());
    let mut cells: BTreeMap<MatchKey, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut n_treated_total = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let cell = cells.entry(MatchKey::of(row)).or_default();
        if treated[i] {
            n_treated_total += 1;
            cell.0.push(i);
        } else {
            cell.1.push(i);
        }
    }
    cells.retain(|_, (t, c)| !t.is_empty() && !c.is_empty());
    let n_treated_matched = cells.values().map(|(t, _)| t.len()).sum();
    let n_control_matched = cells.values().map(|(_, c)| c.len()).sum();
    MatchResult { cells, n_treated_total, n_treated_matched, n_control_matched }
}

/// Matches each luckiest-draw recipient with non-luckiest recipients
/// holding (A, N, O, T) constant.
pub fn exact_match(rows: &[ObservationRow]) -> MatchResult {
    let labels: Vec<bool> = rows.iter().map(|r| r.luckiest).collect();
    exact_match_with_labels(rows, &labels)
}

/// Which kth-subsequent-packet statistic a contrast compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchedOutcome {
    /// Amount (CNY) the row's user sent as the kth subsequent packet in the
    /// group; 0 when someone else (or nobody) sent it.
    Overall,
    /// Indicator of being the kth subsequent sender.
    Extensive,
    /// Amount conditional on being the kth subsequent sender.
    Intensive,
}

impl MatchedOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            MatchedOutcome::Overall => "overall",
            MatchedOutcome::Extensive => "extensive",
            MatchedOutcome::Intensive => "intensive",
        }
    }
}

/// Per-row kth-subsequent-packet outcome values (`None` drops the row from
/// the conditional sample, as for the intensive margin).
pub fn kth_subsequent_values(
    log: &EventLog,
    rows: &[ObservationRow],
    k: usize,
    outcome: MatchedOutcome,
) -> Result<Vec<Option<f64>>> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    // Per-group packet list in time order (the global order restricted).
    let mut per_group: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut position: BTreeMap<u64, usize> = BTreeMap::new();
    for (idx, p) in log.packets.iter().enumerate() {
        let list = per_group.entry(p.group_id).or_default();
        position.insert(p.packet_id, list.len());
        list.push(idx);
    }

    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let pos = *position
            .get(&row.packet_id)
            .ok_or_else(|| Error::UnknownReference(format!("packet {}", row.packet_id)))?;
        let list = &per_group[&row.group_id];
        let value = match list.get(pos + k) {
            Some(&next_idx) => {
                let next = &log.packets[next_idx];
                let is_sender = next.sender_id == row.user_id;
                match outcome {
                    MatchedOutcome::Overall => {
                        Some(if is_sender { next.total.as_cny() } else { 0.0 })
                    }
                    MatchedOutcome::Extensive => Some(if is_sender { 1.0 } else { 0.0 }),
                    MatchedOutcome::Intensive => is_sender.then(|| next.total.as_cny()),
                }
            }
            // No kth subsequent packet before the horizon.
            None => match outcome {
                MatchedOutcome::Overall | MatchedOutcome::Extensive => Some(0.0),
                MatchedOutcome::Intensive => None,
            },
        };
        out.push(value);
    }
    Ok(out)
}

/// Matched-contrast estimate with cluster-bootstrap CI.
#[derive(Debug, Clone)]
pub struct ContrastResult {
    pub difference: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
    pub n_cells: usize,
    pub reps: usize,
    pub skipped: usize,
}

/// Weighted mean difference (treated minus control) across matched cells,
/// cell weights proportional to the treated count (the ATT convention).
/// The CI reuses the Poisson cluster bootstrap with weights applied to the
/// rows of both sides.
pub fn matched_contrast(
    rows: &[ObservationRow],
    matched: &MatchResult,
    values: &[Option<f64>],
    n_clusters: usize,
    reps: usize,
    rng: &RngStream,
) -> Result<ContrastResult> {
    if matched.cells.is_empty() {
        return Err(Error::EmptySample("no matched cells".into()));
    }
    if values.len() != rows.len() {
        return Err(Error::InvalidInput("values must align with rows".into()));
    }

    let contrast = |cluster_weights: Option<&[f64]>| -> Result<(f64, usize)> {
        let w_of = |i: usize| {
            cluster_weights.map_or(1.0, |cw| cw[rows[i].cluster_id as usize])
        };
        let mut num = 0.0;
        let mut den = 0.0;
        let mut n_cells = 0usize;
        for (t_idx, c_idx) in matched.cells.values() {
            let mut tw = 0.0;
            let mut tsum = 0.0;
            for &i in t_idx {
                if let Some(v) = values[i] {
                    let w = w_of(i);
                    tw += w;
                    tsum += w * v;
                }
            }
            let mut cw = 0.0;
            let mut csum = 0.0;
            for &i in c_idx {
                if let Some(v) = values[i] {
                    let w = w_of(i);
                    cw += w;
                    csum += w * v;
                }
            }
            if tw > 0.0 && cw > 0.0 {
                let diff = tsum / tw - csum / cw;
                num += tw * diff;
                den += tw;
                n_cells += 1;
            }
        }
        if den <= 0.0 {
            return Err(Error::Unidentified("no matched cell survives the weights".into()));
        }
        Ok((num / den, n_cells))
    };

    let (difference, n_cells) = contrast(None)?;
    let dist: BootstrapDist =
        poisson_cluster_bootstrap(n_clusters, reps, rng, |cw| {
            contrast(Some(cw)).map(|(d, _)| vec![d])
        })?;
    let se = dist.se(0);
    let (ci_lo, ci_hi) = dist.percentile_ci(0);
    let p_value = if se > 0.0 {
        let n = Normal::new(0.0, 1.0).unwrap();
        (2.0 * (1.0 - n.cdf((difference / se).abs()))).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(ContrastResult {
        difference,
        se,
        ci_lo,
        ci_hi,
        p_value,
        n_cells,
        reps,
        skipped: dist.skipped,
    })
}

/// Random relabeling within each matched cell (placebo test).
pub fn placebo_labels(
    rows: &[ObservationRow],
    matched: &MatchResult,
    rng: &mut RngStream,
) -> Vec<bool> {
    let mut labels: Vec<bool> = rows.iter().map(|r| r.luckiest).collect();
    for (t_idx, c_idx) in matched.cells.values() {
        let mut all: Vec<usize> = t_idx.iter().chain(c_idx.iter()).copied().collect();
        rng.shuffle(&mut all);
        for (pos, &i) in all.iter().enumerate() {
            labels[i] = pos < t_idx.len();
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::MoneyCents;
    use crate::panel::{Covariates, StratumKey, WindowOutcome};

    fn row(a: i64, n: u32, o: u32, t: i64, luckiest: bool, cluster: u32) -> ObservationRow {
        ObservationRow {
            packet_id: 0,
            group_id: cluster as u64,
            user_id: o as u64,
            cluster_id: cluster,
            stratum: StratumKey { amount_cents: a, n_received: n, order: o },
            t_recv: 0.0,
            treatment: MoneyCents(t),
            luckiest,
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
                overall_cents: 0,
                sent: false,
                direct_cents: 0,
                indirect_cents: 0,
                other_groups_avg_cents: 0.0,
                edges_added: 0,
            }],
            edges_added_7d: 0,
        }
    }

    #[test]
    fn identical_rows_match() {
        let rows = vec![
            row(1000, 5, 2, 200, true, 0),
            row(1000, 5, 2, 200, false, 1),
        ];
        let m = exact_match(&rows);
        assert_eq!(m.cells.len(), 1);
        assert_eq!(m.match_rate(), 1.0);
    }

    #[test]
    fn one_cent_off_does_not_match() {
        let rows = vec![
            row(1000, 5, 2, 200, true, 0),
            row(1000, 5, 2, 199, false, 1),
        ];
        let m = exact_match(&rows);
        assert!(m.cells.is_empty());
        assert_eq!(m.match_rate(), 0.0);
        assert_eq!(m.n_treated_total, 1);
    }

    #[test]
    fn hand_contrast_is_one() {
        // One cell: treated outcomes {2, 4}, control {1, 3} -> diff 1.0.
        let rows = vec![
            row(1000, 5, 2, 200, true, 0),
            row(1000, 5, 2, 200, true, 1),
            row(1000, 5, 2, 200, false, 2),
            row(1000, 5, 2, 200, false, 3),
        ];
        let values = vec![Some(2.0), Some(4.0), Some(1.0), Some(3.0)];
        let m = exact_match(&rows);
        let c = matched_contrast(&rows, &m, &values, 4, 200, &RngStream::new(1)).unwrap();
        assert!((c.difference - 1.0).abs() < 1e-12);
        assert_eq!(c.n_cells, 1);
    }

    #[test]
    fn duplicating_controls_leaves_contrast_unchanged() {
        let mut rows = vec![
            row(1000, 5, 2, 200, true, 0),
            row(1000, 5, 2, 200, false, 1),
            row(500, 3, 1, 150, true, 2),
            row(500, 3, 1, 150, false, 3),
        ];
        let values: Vec<Option<f64>> = vec![Some(3.0), Some(1.0), Some(5.0), Some(2.0)];
        let m = exact_match(&rows);
        let base =
            matched_contrast(&rows, &m, &values, 4, 50, &RngStream::new(2)).unwrap().difference;
        // Duplicate every control row.
        rows.push(rows[1].clone());
        rows.push(rows[3].clone());
        let values2: Vec<Option<f64>> =
            vec![Some(3.0), Some(1.0), Some(5.0), Some(2.0), Some(1.0), Some(2.0)];
        let m2 = exact_match(&rows);
        let dup =
            matched_contrast(&rows, &m2, &values2, 4, 50, &RngStream::new(2)).unwrap().difference;
        assert!((base - dup).abs() < 1e-12);
    }

    #[test]
    fn matched_cells_share_key_fields() {
        let rows = vec![
            row(1000, 5, 2, 200, true, 0),
            row(1000, 5, 2, 200, false, 1),
            row(500, 3, 1, 150, true, 2),
            row(500, 3, 1, 150, false, 3),
            row(500, 3, 1, 149, false, 3),
        ];
        let m = exact_match(&rows);
        for (key, (t, c)) in &m.cells {
            for &i in t.iter().chain(c.iter()) {
                assert_eq!(MatchKey::of(&rows[i]), *key);
            }
        }
    }

    #[test]
    fn no_matched_cells_errors() {
        let rows = vec![row(1000, 5, 2, 200, true, 0)];
        let m = exact_match(&rows);
        let values = vec![Some(1.0)];
        assert!(matched_contrast(&rows, &m, &values, 1, 10, &RngStream::new(3)).is_err());
    }
}
