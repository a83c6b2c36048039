//! Recipient x spontaneous-packet panel construction.
//!
//! A packet is *spontaneous* when no packet was sent in the same group
//! within `tau` before it (equivalently, it heads a session). Each
//! recipient of a spontaneous packet becomes one observation row carrying
//! the stratum key (total amount, number of actual receivers, order), the
//! treatment (amount received), pre-treatment covariates, and outcomes per
//! time window. The sender's own self-receipt rows are dropped.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::money::MoneyCents;
use crate::population::Population;
use crate::simulator::{EventLog, Packet, EDGE_WINDOW_S};

/// A stratum is the exact cell (total amount A, actual receiver count N,
/// order of receiving time O); the platform randomizes the amount within it.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct StratumKey {
    pub amount_cents: i64,
    pub n_received: u32,
    pub order: u32,
}

/// Pre-treatment covariates for randomization checks and moderation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Covariates {
    pub female: bool,
    pub age: u32,
    /// Within-group friend count.
    pub degree: u32,
    /// Total in-group friends across all sampled groups.
    pub fricnt: u32,
    /// Number of groups the user belongs to.
    pub joincnt: u32,
    pub history_sendamt: i64,
    pub history_sendcnt: u32,
    pub history_recvamt: i64,
    pub history_recvcnt: u32,
    /// All-member packet cents sent in this group before the packet.
    pub groupamt: i64,
    pub groupnum: u32,
    /// Latent confounder driver (observable in the simulation only).
    pub wealth: f64,
    pub clustering: f64,
    pub norm_degree: f64,
    pub eigen: f64,
    pub group_size: u32,
    pub avg_norm_degree: f64,
    pub overall_clustering: f64,
    pub group_type: String,
}

/// Outcomes measured over one window after the receive time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowOutcome {
    /// Cents the user sent to this group within the window.
    pub overall_cents: i64,
    pub sent: bool,
    /// Of the amount sent, cents received by the original sender.
    pub direct_cents: i64,
    /// Cents received by other group members (excluding the user's own
    /// self-receipts and the original sender).
    pub indirect_cents: i64,
    /// Average cents sent to each of the user's other groups.
    pub other_groups_avg_cents: f64,
    pub edges_added: u32,
}

/// One recipient x spontaneous-packet observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationRow {
    pub packet_id: u64,
    pub group_id: u64,
    pub user_id: u64,
    /// Bootstrap cluster (connected component of group-user membership).
    pub cluster_id: u32,
    pub stratum: StratumKey,
    pub t_recv: f64,
    pub treatment: MoneyCents,
    pub luckiest: bool,
    /// Second-largest over largest received amount for this packet.
    pub z_ratio: Option<f64>,
    pub festival: bool,
    pub n_other_groups: u32,
    pub cov: Covariates,
    /// Parallel to the configured windows.
    pub outcomes: Vec<WindowOutcome>,
    /// Edges the user added in this group within 7 days.
    pub edges_added_7d: u32,
}

/// Panel construction knobs. `windows_s` must be ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelOptions {
    pub windows_s: Vec<f64>,
    pub tau_s: f64,
    /// Drop spontaneous packets too close to the horizon for the largest
    /// window to complete, so no outcome is censored.
    pub drop_censored: bool,
    /// Extend the censoring margin to the 7-day edge window (needed when
    /// the tie-formation outcome is analyzed; costs a week of horizon).
    pub edge_margin: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            windows_s: vec![600.0, 3600.0, 10_800.0, 21_600.0, 43_200.0, 86_400.0],
            tau_s: 24.0 * 3600.0,
            drop_censored: true,
            edge_margin: true,
        }
    }
}

impl PanelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tau_s <= 0.0 {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if self.windows_s.is_empty() {
            return Err(Error::InvalidConfig("at least one window required".into()));
        }
        if self.windows_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("windows must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Flags each packet (by position in `log.packets`) as spontaneous:
/// no same-group packet within `tau` before it.
pub fn label_spontaneous(log: &EventLog, tau_s: f64) -> Vec<bool> {
    let mut last_send: BTreeMap<u64, f64> = BTreeMap::new();
    let mut flags = Vec::with_capacity(log.packets.len());
    for p in &log.packets {
        let spont = match last_send.get(&p.group_id) {
            Some(&prev) => p.t_send - prev >= tau_s,
            None => true,
        };
        flags.push(spont);
        last_send.insert(p.group_id, p.t_send);
    }
    flags
}

/// Spontaneous packet ids under the gap rule.
pub fn spontaneous_packet_ids(log: &EventLog, tau_s: f64) -> Vec<u64> {
    label_spontaneous(log, tau_s)
        .iter()
        .zip(&log.packets)
        .filter_map(|(&s, p)| s.then_some(p.packet_id))
        .collect()
}

/// Per-group metric tables, computed once on the initial graphs
/// (pre-treatment by construction).
pub struct GroupMetrics {
    pub size: u32,
    pub avg_norm_degree: f64,
    pub overall_clustering: f64,
    pub group_type: String,
    /// Keyed by member index: (degree, clustering, normalized degree, eigen).
    pub member: Vec<(u32, f64, f64, f64)>,
}

pub fn compute_group_metrics(pop: &Population) -> Result<BTreeMap<u64, GroupMetrics>> {
    let mut out = BTreeMap::new();
    for g in &pop.groups {
        let eigen = g.eigenvector_centrality()?;
        let member = (0..g.len())
            .map(|i| {
                (
                    g.degree_idx(i) as u32,
                    g.clustering_coefficient_idx(i),
                    g.normalized_degree_idx(i),
                    eigen[i],
                )
            })
            .collect();
        out.insert(
            g.group_id,
            GroupMetrics {
                size: g.len() as u32,
                avg_norm_degree: g.average_normalized_degree()?,
                overall_clustering: g.overall_clustering(),
                group_type: g.group_type.clone(),
                member,
            },
        );
    }
    Ok(out)
}

/// Per (group, user): time-ordered (send time, total cents, packet index).
type SendIndex = BTreeMap<(u64, u64), Vec<(f64, i64, usize)>>;

#[derive(Default, Clone, Copy)]
struct UserHistory {
    sendamt: i64,
    sendcnt: u32,
    recvamt: i64,
    recvcnt: u32,
}

/// Builds the panel. `group_cluster` maps group id to bootstrap cluster id
/// (see `estimator::build_clusters`).
pub fn build_panel(
    log: &EventLog,
    pop: &Population,
    opts: &PanelOptions,
    group_cluster: &BTreeMap<u64, u32>,
) -> Result<Vec<ObservationRow>> {
    opts.validate()?;
    let spont = label_spontaneous(log, opts.tau_s);
    let metrics = compute_group_metrics(pop)?;

    // Per (group, user) time-ordered send list: (t, total cents, packet idx).
    let mut sends: SendIndex = BTreeMap::new();
    for (idx, p) in log.packets.iter().enumerate() {
        sends.entry((p.group_id, p.sender_id)).or_default().push((
            p.t_send,
            p.total.cents(),
            idx,
        ));
    }
    // Per (group, user) time-ordered tie-formation times (initiator side).
    let mut tie_times: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for e in &log.edges {
        tie_times.entry((e.group_id, e.user_a)).or_default().push(e.t);
    }

    // fricnt: total in-group friends across the user's groups.
    let mut fricnt: BTreeMap<u64, u32> = BTreeMap::new();
    for g in &pop.groups {
        for (i, u) in g.members().iter().enumerate() {
            *fricnt.entry(*u).or_insert(0) += g.degree_idx(i) as u32;
        }
    }

    let mut max_window = opts.windows_s.last().copied().unwrap();
    if opts.edge_margin {
        max_window = max_window.max(EDGE_WINDOW_S);
    }
    let horizon_s = log.horizon_s();

    let mut user_hist: BTreeMap<(u64, u64), UserHistory> = BTreeMap::new();
    let mut group_hist: BTreeMap<u64, (i64, u32)> = BTreeMap::new();
    let mut rows: Vec<ObservationRow> = Vec::new();

    for (idx, packet) in log.packets.iter().enumerate() {
        if spont[idx] && (!opts.drop_censored || packet.t_send + max_window <= horizon_s) {
            emit_rows(
                packet, pop, opts, &metrics, &sends, &tie_times, &fricnt, &user_hist,
                &group_hist, group_cluster, log, &mut rows,
            )?;
        }
        // Update history after the packet so covariates stay pre-treatment.
        let gh = group_hist.entry(packet.group_id).or_insert((0, 0));
        gh.0 += packet.total.cents();
        gh.1 += 1;
        let sh = user_hist.entry((packet.group_id, packet.sender_id)).or_default();
        sh.sendamt += packet.total.cents();
        sh.sendcnt += 1;
        for r in &packet.receives {
            let rh = user_hist.entry((packet.group_id, r.user_id)).or_default();
            rh.recvamt += r.amount.cents();
            rh.recvcnt += 1;
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn emit_rows(
    packet: &Packet,
    pop: &Population,
    opts: &PanelOptions,
    metrics: &BTreeMap<u64, GroupMetrics>,
    sends: &SendIndex,
    tie_times: &BTreeMap<(u64, u64), Vec<f64>>,
    fricnt: &BTreeMap<u64, u32>,
    user_hist: &BTreeMap<(u64, u64), UserHistory>,
    group_hist: &BTreeMap<u64, (i64, u32)>,
    group_cluster: &BTreeMap<u64, u32>,
    log: &EventLog,
    rows: &mut Vec<ObservationRow>,
) -> Result<()> {
    let gid = packet.group_id;
    let gm = metrics
        .get(&gid)
        .ok_or_else(|| Error::UnknownReference(format!("group {gid}")))?;
    let group = pop.group(gid).expect("metrics imply group");
    let n_received = packet.n_received();
    let z_ratio = packet.second_to_largest_ratio();
    let cluster_id = *group_cluster
        .get(&gid)
        .ok_or_else(|| Error::UnknownReference(format!("no cluster for group {gid}")))?;
    let (groupamt, groupnum) = group_hist.get(&gid).copied().unwrap_or((0, 0));

    for r in &packet.receives {
        if r.user_id == packet.sender_id {
            continue; // the sender's share of her own packet is excluded
        }
        let member = pop
            .members
            .get(&r.user_id)
            .ok_or_else(|| Error::UnknownReference(format!("user {}", r.user_id)))?;
        let midx = group
            .index_of(r.user_id)
            .ok_or(Error::MemberNotInGroup { user: r.user_id, group: gid })?;
        let (degree, clustering, norm_degree, eigen) = gm.member[midx];
        let hist = user_hist.get(&(gid, r.user_id)).copied().unwrap_or_default();

        let outcomes = window_outcomes(
            packet, r.user_id, r.t, opts, sends, tie_times, member, gid, log,
        );
        let edges_added_7d = count_in_window(
            tie_times.get(&(gid, r.user_id)).map(Vec::as_slice).unwrap_or(&[]),
            r.t,
            EDGE_WINDOW_S,
        ) as u32;

        rows.push(ObservationRow {
            packet_id: packet.packet_id,
            group_id: gid,
            user_id: r.user_id,
            cluster_id,
            stratum: StratumKey {
                amount_cents: packet.total.cents(),
                n_received,
                order: r.order,
            },
            t_recv: r.t,
            treatment: r.amount,
            luckiest: r.luckiest,
            z_ratio,
            festival: packet.festival,
            n_other_groups: member.group_ids.len() as u32 - 1,
            cov: Covariates {
                female: member.female,
                age: member.age,
                degree,
                fricnt: fricnt.get(&r.user_id).copied().unwrap_or(0),
                joincnt: member.group_ids.len() as u32,
                history_sendamt: hist.sendamt,
                history_sendcnt: hist.sendcnt,
                history_recvamt: hist.recvamt,
                history_recvcnt: hist.recvcnt,
                groupamt,
                groupnum,
                wealth: member.wealth,
                clustering,
                norm_degree,
                eigen,
                group_size: gm.size,
                avg_norm_degree: gm.avg_norm_degree,
                overall_clustering: gm.overall_clustering,
                group_type: gm.group_type.clone(),
            },
            outcomes,
            edges_added_7d,
        });
    }
    Ok(())
}

fn count_in_window(times: &[f64], t0: f64, window: f64) -> usize {
    let lo = times.partition_point(|&t| t <= t0);
    let hi = times.partition_point(|&t| t <= t0 + window);
    hi - lo
}

#[allow(clippy::too_many_arguments)]
fn window_outcomes(
    packet: &Packet,
    user: u64,
    t_recv: f64,
    opts: &PanelOptions,
    sends: &SendIndex,
    tie_times: &BTreeMap<(u64, u64), Vec<f64>>,
    member: &crate::population::Member,
    gid: u64,
    log: &EventLog,
) -> Vec<WindowOutcome> {
    let n_windows = opts.windows_s.len();
    let mut overall = vec![0i64; n_windows];
    let mut direct = vec![0i64; n_windows];
    let mut indirect = vec![0i64; n_windows];
    let max_w = *opts.windows_s.last().unwrap();

    if let Some(user_sends) = sends.get(&(gid, user)) {
        let start = user_sends.partition_point(|&(t, _, _)| t <= t_recv);
        for &(t, total, pidx) in &user_sends[start..] {
            if t > t_recv + max_w {
                break;
            }
            // Split of this sent packet: share to the original sender vs
            // shares to other members (own self-receipt excluded).
            let sent_packet = &log.packets[pidx];
            let mut to_sender = 0i64;
            let mut to_others = 0i64;
            for rr in &sent_packet.receives {
                if rr.user_id == packet.sender_id {
                    to_sender += rr.amount.cents();
                } else if rr.user_id != user {
                    to_others += rr.amount.cents();
                }
            }
            for (wi, &w) in opts.windows_s.iter().enumerate() {
                if t <= t_recv + w {
                    overall[wi] += total;
                    direct[wi] += to_sender;
                    indirect[wi] += to_others;
                }
            }
        }
    }

    // Generalized reciprocity: average cents sent to each other group.
    let other_groups: Vec<u64> =
        member.group_ids.iter().copied().filter(|&g| g != gid).collect();
    let mut other_totals = vec![0i64; n_windows];
    for og in &other_groups {
        if let Some(user_sends) = sends.get(&(*og, user)) {
            let start = user_sends.partition_point(|&(t, _, _)| t <= t_recv);
            for &(t, total, _) in &user_sends[start..] {
                if t > t_recv + max_w {
                    break;
                }
                for (wi, &w) in opts.windows_s.iter().enumerate() {
                    if t <= t_recv + w {
                        other_totals[wi] += total;
                    }
                }
            }
        }
    }

    let ties = tie_times.get(&(gid, user)).map(Vec::as_slice).unwrap_or(&[]);

    (0..n_windows)
        .map(|wi| WindowOutcome {
            overall_cents: overall[wi],
            sent: overall[wi] > 0,
            direct_cents: direct[wi],
            indirect_cents: indirect[wi],
            other_groups_avg_cents: if other_groups.is_empty() {
                0.0
            } else {
                other_totals[wi] as f64 / other_groups.len() as f64
            },
            edges_added: count_in_window(ties, t_recv, opts.windows_s[wi]) as u32,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::MoneyCents;
    use crate::simulator::{EdgeEvent, FestivalCalendar, Receive, SimStats};

    fn packet(id: u64, gid: u64, sender: u64, t: f64, recv: &[(u64, i64, f64)]) -> Packet {
        Packet {
            packet_id: id,
            group_id: gid,
            sender_id: sender,
            total: MoneyCents(recv.iter().map(|r| r.1).sum()),
            n_declared: recv.len() as u32,
            t_send: t,
            festival: false,
            receives: recv
                .iter()
                .enumerate()
                .map(|(i, &(u, a, rt))| Receive {
                    user_id: u,
                    order: i as u32 + 1,
                    amount: MoneyCents(a),
                    t: rt,
                    luckiest: false,
                })
                .collect(),
        }
    }

    fn log_of(packets: Vec<Packet>, horizon_days: u32) -> EventLog {
        EventLog {
            packets,
            edges: Vec::new(),
            calendar: FestivalCalendar::default(),
            horizon_days,
            stats: SimStats::default(),
        }
    }

    const H: f64 = 3600.0;

    #[test]
    fn spontaneous_gap_rule() {
        // Single packet -> spontaneous.
        let log = log_of(vec![packet(0, 1, 10, 5.0 * H, &[])], 10);
        assert_eq!(label_spontaneous(&log, 24.0 * H), vec![true]);

        // Two packets 1h apart: first only.
        let log = log_of(
            vec![
                packet(0, 1, 10, 5.0 * H, &[]),
                packet(1, 1, 11, 6.0 * H, &[]),
            ],
            10,
        );
        assert_eq!(label_spontaneous(&log, 24.0 * H), vec![true, false]);

        // t = 0, 25h, 26h: packets 1 and 2 spontaneous.
        let log = log_of(
            vec![
                packet(0, 1, 10, 0.0, &[]),
                packet(1, 1, 11, 25.0 * H, &[]),
                packet(2, 1, 12, 26.0 * H, &[]),
            ],
            10,
        );
        assert_eq!(label_spontaneous(&log, 24.0 * H), vec![true, true, false]);

        // Different groups do not interact.
        let log = log_of(
            vec![
                packet(0, 1, 10, 0.0, &[]),
                packet(1, 2, 20, 1.0 * H, &[]),
            ],
            10,
        );
        assert_eq!(label_spontaneous(&log, 24.0 * H), vec![true, true]);
    }

    // Full build_panel coverage lives in the integration tests where a real
    // population and log are available; here we pin the window bookkeeping.
    #[test]
    fn count_in_window_boundaries() {
        let times = [1.0, 2.0, 3.0, 10.0];
        assert_eq!(count_in_window(&times, 1.0, 2.0), 2); // (1, 3]
        assert_eq!(count_in_window(&times, 0.0, 0.5), 0);
        assert_eq!(count_in_window(&times, 0.0, 100.0), 4);
    }

    #[test]
    fn edge_event_shape() {
        let e = EdgeEvent { group_id: 1, user_a: 2, user_b: 3, t: 4.0 };
        assert_eq!(e.user_a, 2);
    }
}
