//! Agent-based gift-stream simulation with known ground-truth contagion
//! parameters and the confounders that would bias naive estimators:
//! wealth homophily (wealthy groups both send and receive more), temporal
//! bursts (sessions), and festival activity spikes.
//!
//! Groups simulate independently on per-group rng substreams; the merged
//! log is sorted afterwards, so output is identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

use crate::error::Result;
use crate::money::MoneyCents;
use crate::population::Population;
use crate::rng::RngStream;
use crate::splitter::{split_random, PacketSpec, MAX_TOTAL_CENTS};

const TAG_SIM: u64 = 0x10;

/// Round packet totals senders actually pick (cents). Keeping amounts on a
/// menu keeps the (A, N, O) strata densely populated.
const AMOUNT_MENU_CENTS: [i64; 12] =
    [20, 50, 100, 200, 500, 888, 1000, 2000, 5000, 8888, 10_000, 20_000];

/// Recipient-count menu with weights.
const N_MENU: [(u32, f64); 6] =
    [(1, 0.08), (2, 0.15), (3, 0.22), (5, 0.33), (8, 0.14), (10, 0.08)];

pub const DAY_S: f64 = 86_400.0;
/// Tie-formation outcomes are measured over this extended window.
pub const EDGE_WINDOW_S: f64 = 7.0 * DAY_S;

/// Behavioral ground truth plus world mechanics.
///
/// The first block holds the estimands the estimation pipeline must
/// recover; the second block holds response/process knobs. Probabilities
/// are clamped to [0, 1] at evaluation time; the simulator counts how often
/// the clamp binds (a bound clamp biases the linear-probability estimand,
/// so configs should keep `resp_base_prob + theta_ext * T_max < 1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorParams {
    /// Spontaneous packets per member per day.
    pub baseline_send_rate: f64,
    /// True extensive margin: added send probability per CNY received.
    pub theta_ext: f64,
    /// True intensive margin: added CNY sent per CNY received, given sending.
    pub theta_int: f64,
    /// Added send probability for the luckiest-draw recipient.
    pub delta_luck: f64,
    /// Inequity norm: the luckiest recipient's bump additionally grows by
    /// this amount times (1 - Z), Z being the second-largest over largest
    /// received amount (0 when fewer than two receives).
    pub luck_inequity: f64,
    /// Scales theta_ext on festival days (1 = no heterogeneity).
    pub festival_multiplier: f64,
    /// Probability that a packet is followed by a session-continuation
    /// packet from a random member (temporal clustering).
    pub burst_rate: f64,
    /// exp(elasticity * wealth_z) multiplies baseline rate and packet size.
    pub wealth_elasticity: f64,
    /// New-edge probability per CNY received (network-dynamics truth).
    pub tie_formation_rate: f64,

    /// Base probability in the response lottery.
    pub resp_base_prob: f64,
    /// Window within which a triggered response lands.
    pub resp_window_s: f64,
    /// Mean of the truncated-exponential response delay.
    pub resp_delay_mean_s: f64,
    /// Moderation: member i responds with theta_ext +
    /// slope * clustering_coefficient(i).
    pub theta_ext_clust_slope: f64,
    /// Convex packet-scale response: adds quad * (A_cny / n)^2 (the squared
    /// per-recipient scale) to the response probability. A nonlinear
    /// function of the stratum variables that a linear specification
    /// cannot absorb (misspecification demonstration).
    pub amount_response_quad: f64,

    /// Probability a member opens a given packet.
    pub open_prob: f64,
    /// Mean gap between successive opens.
    pub open_gap_mean_s: f64,
    /// Mean gap to a burst continuation packet.
    pub burst_gap_mean_s: f64,
    /// Baseline-rate multiplier on festival days (temporal clustering).
    pub festival_rate_mult: f64,
    /// Location (CNY) of the packet-amount draw.
    pub amount_base_cny: f64,
    /// Log-sd of the packet-amount draw.
    pub amount_log_sd: f64,
    /// Wealth tilt on packet size.
    pub size_elasticity: f64,
    /// Mean delay until a formed tie appears.
    pub tie_delay_mean_s: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            baseline_send_rate: 0.05,
            theta_ext: 0.003,
            theta_int: 0.0,
            delta_luck: 0.0,
            luck_inequity: 0.0,
            festival_multiplier: 1.0,
            burst_rate: 0.3,
            wealth_elasticity: 0.5,
            tie_formation_rate: 0.002,
            resp_base_prob: 0.03,
            resp_window_s: 600.0,
            resp_delay_mean_s: 180.0,
            theta_ext_clust_slope: 0.0,
            amount_response_quad: 0.0,
            open_prob: 0.85,
            open_gap_mean_s: 25.0,
            burst_gap_mean_s: 600.0,
            festival_rate_mult: 1.0,
            amount_base_cny: 1.5,
            amount_log_sd: 0.9,
            size_elasticity: 0.25,
            tie_delay_mean_s: 1.5 * DAY_S,
        }
    }
}

/// Days on which festivals fall: day `d` is festive iff
/// `period > 0 && d % period < length`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FestivalCalendar {
    pub period_days: u32,
    pub length_days: u32,
}

impl FestivalCalendar {
    pub fn is_festival_day(&self, day: u32) -> bool {
        self.period_days > 0 && day % self.period_days < self.length_days
    }

    pub fn is_festival_time(&self, t_s: f64) -> bool {
        self.is_festival_day((t_s / DAY_S) as u32)
    }
}

/// One share received.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Receive {
    pub user_id: u64,
    pub order: u32,
    pub amount: MoneyCents,
    pub t: f64,
    pub luckiest: bool,
}

/// One packet with its receives (ordered by order of receiving time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Packet {
    pub packet_id: u64,
    pub group_id: u64,
    pub sender_id: u64,
    pub total: MoneyCents,
    pub n_declared: u32,
    pub t_send: f64,
    pub festival: bool,
    pub receives: Vec<Receive>,
}

impl Packet {
    /// Actual number of receivers (packets can expire partially taken).
    pub fn n_received(&self) -> u32 {
        self.receives.len() as u32
    }

    /// Ratio of the second-largest to the largest received amount.
    pub fn second_to_largest_ratio(&self) -> Option<f64> {
        if self.receives.len() < 2 {
            return None;
        }
        let mut largest = i64::MIN;
        let mut second = i64::MIN;
        for r in &self.receives {
            let v = r.amount.cents();
            if v > largest {
                second = largest;
                largest = v;
            } else if v > second {
                second = v;
            }
        }
        Some(second as f64 / largest as f64)
    }
}

/// A within-group friendship formed during the simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub group_id: u64,
    pub user_a: u64,
    pub user_b: u64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SimStats {
    /// Times the response-probability clamp bound at 0 or 1.
    pub clamp_hits: u64,
    /// Cents left in packets that expired partially taken.
    pub unopened_residue: i64,
    pub n_packets: usize,
    pub n_receives: usize,
}

/// Time-ordered event log for a simulated world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventLog {
    /// Globally sorted by (t_send, group_id); ids are dense 0..n.
    pub packets: Vec<Packet>,
    /// Sorted by (t, group_id).
    pub edges: Vec<EdgeEvent>,
    pub calendar: FestivalCalendar,
    pub horizon_days: u32,
    pub stats: SimStats,
}

impl EventLog {
    pub fn horizon_s(&self) -> f64 {
        self.horizon_days as f64 * DAY_S
    }
}

/// Why a send was scheduled. Responses carry the received amount so the
/// intensive-margin shift can be applied to the sent amount.
#[derive(Debug, Clone, Copy)]
enum Cause {
    Baseline,
    Burst,
    Response { received: MoneyCents },
}

struct PendingSend {
    t: f64,
    seq: u64,
    sender: usize,
    cause: Cause,
}

impl PartialEq for PendingSend {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for PendingSend {}
impl PartialOrd for PendingSend {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingSend {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other
            .t
            .partial_cmp(&self.t)
            .unwrap()
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct GroupOutcome {
    packets: Vec<Packet>,
    edges: Vec<EdgeEvent>,
    clamp_hits: u64,
    residue: i64,
}

/// Runs the simulation. Deterministic per (population, params, seed).
pub fn simulate(
    pop: &Population,
    params: &BehaviorParams,
    calendar: FestivalCalendar,
    horizon_days: u32,
    rng: &RngStream,
) -> Result<EventLog> {
    let mut outcomes: Vec<GroupOutcome> = pop
        .groups
        .par_iter()
        .map(|group| {
            let mut grng = rng.derive_path(&[TAG_SIM, group.group_id]);
            simulate_group(pop, group.group_id, params, calendar, horizon_days, &mut grng)
        })
        .collect();

    let mut stats = SimStats::default();
    let mut packets = Vec::new();
    let mut edges = Vec::new();
    for out in outcomes.iter_mut() {
        stats.clamp_hits += out.clamp_hits;
        stats.unopened_residue += out.residue;
        packets.append(&mut out.packets);
        edges.append(&mut out.edges);
    }
    packets.sort_by(|a, b| {
        a.t_send
            .partial_cmp(&b.t_send)
            .unwrap()
            .then(a.group_id.cmp(&b.group_id))
            .then(a.packet_id.cmp(&b.packet_id))
    });
    for (i, p) in packets.iter_mut().enumerate() {
        p.packet_id = i as u64;
    }
    edges.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap()
            .then(a.group_id.cmp(&b.group_id))
            .then(a.user_a.cmp(&b.user_a))
    });
    stats.n_packets = packets.len();
    stats.n_receives = packets.iter().map(|p| p.receives.len()).sum();
    Ok(EventLog { packets, edges, calendar, horizon_days, stats })
}

fn simulate_group(
    pop: &Population,
    group_id: u64,
    params: &BehaviorParams,
    calendar: FestivalCalendar,
    horizon_days: u32,
    grng: &mut RngStream,
) -> GroupOutcome {
    let group = pop.group(group_id).expect("group exists");
    let size = group.len();
    let horizon_s = horizon_days as f64 * DAY_S;

    // Per-member precomputation.
    let wealth_mult: Vec<f64> = group
        .members()
        .iter()
        .map(|u| (params.wealth_elasticity * pop.members[u].wealth_z).exp())
        .collect();
    let clustering: Vec<f64> =
        (0..size).map(|i| group.clustering_coefficient_idx(i)).collect();

    // Dynamic friend sets (initial graph plus formed ties) for tie targets.
    let mut friends: Vec<Vec<u32>> =
        (0..size).map(|i| group.neighbors_idx(i).to_vec()).collect();

    let mut queue: BinaryHeap<PendingSend> = BinaryHeap::new();
    let mut seq: u64 = 0;

    // Baseline initiations: per member per day Poisson arrivals.
    for day in 0..horizon_days {
        let fest = calendar.is_festival_day(day);
        let day_mult = if fest {
            params.festival_rate_mult * group.festival_propensity
        } else {
            1.0
        };
        for (member, mult) in wealth_mult.iter().enumerate() {
            let lambda = params.baseline_send_rate * mult * day_mult;
            let k = grng.poisson(lambda);
            for _ in 0..k {
                let t = (day as f64 + grng.next_f64()) * DAY_S;
                queue.push(PendingSend { t, seq, sender: member, cause: Cause::Baseline });
                seq += 1;
            }
        }
    }

    let mut packets: Vec<Packet> = Vec::new();
    let mut edges: Vec<EdgeEvent> = Vec::new();
    let mut clamp_hits = 0u64;
    let mut residue = 0i64;
    let mut local_id = 0u64;
    let n_weights: Vec<f64> = N_MENU.iter().map(|&(_, w)| w).collect();

    while let Some(send) = queue.pop() {
        if send.t >= horizon_s {
            continue;
        }
        let t = send.t;
        let fest = calendar.is_festival_time(t);
        let sender = send.sender;

        // Amount: menu value nearest (in log space) to a wealth-tilted
        // lognormal target; responses add the intensive-margin shift.
        let target_cny = params.amount_base_cny
            * (params.amount_log_sd * grng.gaussian()
                + params.size_elasticity * pop.members[&group.user_at(sender)].wealth_z)
                .exp();
        let base_cents = nearest_menu_amount(target_cny);
        let amount_cents = match send.cause {
            Cause::Response { received } => (base_cents
                + (params.theta_int * received.cents() as f64).round() as i64)
                .clamp(1, MAX_TOTAL_CENTS),
            _ => base_cents,
        };

        // Recipient count: menu draw, capped by group size and amount.
        let n_idx = grng.weighted_index(&n_weights);
        let n = (N_MENU[n_idx].0 as i64).min(size as i64).min(amount_cents).max(1) as u32;

        let spec = PacketSpec::new(MoneyCents(amount_cents), n).expect("menu amounts are valid");
        let draws = split_random(&spec, grng);

        // Openers: a uniformly random subset of members, in random order.
        let mut willing: Vec<usize> =
            (0..size).filter(|_| grng.bernoulli(params.open_prob)).collect();
        grng.shuffle(&mut willing);
        let k = willing.len().min(n as usize);

        let mut receives = Vec::with_capacity(k);
        let mut t_open = t;
        let mut taken = 0i64;
        for (slot, &opener) in willing[..k].iter().enumerate() {
            t_open += grng.exponential(params.open_gap_mean_s).max(1e-9);
            if t_open - t >= DAY_S - 1e-3 {
                break; // packet expires 24h after being sent
            }
            let draw = draws[slot];
            taken += draw.amount.cents();
            receives.push(Receive {
                user_id: group.user_at(opener),
                order: draw.order,
                amount: draw.amount,
                t: t_open,
                luckiest: false,
            });
        }
        residue += amount_cents - taken;
        if let Some(max_idx) = receives
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                // Largest amount wins; ties break toward the earliest order.
                a.amount.cmp(&b.amount).then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
        {
            receives[max_idx].luckiest = true;
        }

        // Responses, tie formation.
        let quad_bump = params.amount_response_quad
            * (amount_cents as f64 / 100.0 / n as f64).powi(2);
        let fm = if fest { params.festival_multiplier } else { 1.0 };
        let inequity_gap = if params.luck_inequity != 0.0 && receives.len() >= 2 {
            let mut amounts: Vec<i64> = receives.iter().map(|r| r.amount.cents()).collect();
            amounts.sort_unstable_by(|a, b| b.cmp(a));
            1.0 - amounts[1] as f64 / amounts[0] as f64
        } else {
            0.0
        };
        for r in &receives {
            let member = group.index_of(r.user_id).expect("receiver is a member");
            let theta_i = params.theta_ext + params.theta_ext_clust_slope * clustering[member];
            let luck_bump = if r.luckiest {
                params.delta_luck + params.luck_inequity * inequity_gap
            } else {
                0.0
            };
            let p_raw = params.resp_base_prob
                + theta_i * fm * r.amount.as_cny()
                + luck_bump
                + quad_bump;
            let p = p_raw.clamp(0.0, 1.0);
            if p != p_raw {
                clamp_hits += 1;
            }
            if grng.bernoulli(p) {
                let delay =
                    truncated_exp(grng, params.resp_delay_mean_s, params.resp_window_s);
                queue.push(PendingSend {
                    t: r.t + delay,
                    seq,
                    sender: member,
                    cause: Cause::Response { received: r.amount },
                });
                seq += 1;
            }
            if params.tie_formation_rate > 0.0 {
                let p_tie = (params.tie_formation_rate * r.amount.as_cny()).clamp(0.0, 1.0);
                if grng.bernoulli(p_tie) {
                    if let Some(partner) = pick_non_friend(member, size, &friends, grng) {
                        friends[member].push(partner as u32);
                        friends[partner].push(member as u32);
                        let delay =
                            truncated_exp(grng, params.tie_delay_mean_s, EDGE_WINDOW_S);
                        let t_edge = r.t + delay;
                        if t_edge < horizon_s {
                            edges.push(EdgeEvent {
                                group_id,
                                user_a: r.user_id,
                                user_b: group.user_at(partner),
                                t: t_edge,
                            });
                        }
                    }
                }
            }
        }

        // Session continuation (the temporal-clustering confounder): a
        // random wealth-weighted member follows up, independent of amounts.
        if params.burst_rate > 0.0 && grng.bernoulli(params.burst_rate) {
            let follower = grng.weighted_index(&wealth_mult);
            let gap = grng.exponential(params.burst_gap_mean_s).max(1e-9);
            queue.push(PendingSend {
                t: t + gap,
                seq,
                sender: follower,
                cause: Cause::Burst,
            });
            seq += 1;
        }

        packets.push(Packet {
            packet_id: local_id,
            group_id,
            sender_id: group.user_at(sender),
            total: MoneyCents(amount_cents),
            n_declared: n,
            t_send: t,
            festival: fest,
            receives,
        });
        local_id += 1;
    }

    packets.sort_by(|a, b| a.t_send.partial_cmp(&b.t_send).unwrap().then(a.packet_id.cmp(&b.packet_id)));
    enforce_strict_times(&mut packets);
    edges.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.user_a.cmp(&b.user_a)));
    GroupOutcome { packets, edges, clamp_hits, residue }
}

fn nearest_menu_amount(target_cny: f64) -> i64 {
    let target = (target_cny.max(0.01) * 100.0).ln();
    let mut best = AMOUNT_MENU_CENTS[0];
    let mut best_d = f64::INFINITY;
    for &m in &AMOUNT_MENU_CENTS {
        let d = ((m as f64).ln() - target).abs();
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Exponential with the given mean, truncated to (0, cap) by inverse CDF.
fn truncated_exp(rng: &mut RngStream, mean: f64, cap: f64) -> f64 {
    let u = rng.next_f64();
    let tail = 1.0 - (-cap / mean).exp();
    (-mean * (1.0 - u * tail).ln()).clamp(1e-9, cap * (1.0 - 1e-9))
}

fn pick_non_friend(
    member: usize,
    size: usize,
    friends: &[Vec<u32>],
    rng: &mut RngStream,
) -> Option<usize> {
    let candidates: Vec<usize> = (0..size)
        .filter(|&j| j != member && !friends[member].contains(&(j as u32)))
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(candidates.len() as u64) as usize])
    }
}

/// Bumps any tied timestamps so the per-group event sequence (sends and
/// receives pooled) is strictly increasing. Relative order is preserved,
/// so within-packet ordering survives.
fn enforce_strict_times(packets: &mut [Packet]) {
    // (time, packet index, 0 for the send / receive index + 1)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in packets.iter().enumerate() {
        events.push((p.t_send, pi, 0));
        for (ri, r) in p.receives.iter().enumerate() {
            events.push((r.t, pi, ri + 1));
        }
    }
    events.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut last = f64::NEG_INFINITY;
    for (t, pi, ri) in events {
        let fixed = if t <= last { last + 1e-9 } else { t };
        last = fixed;
        if fixed != t {
            if ri == 0 {
                packets[pi].t_send = fixed;
            } else {
                packets[pi].receives[ri - 1].t = fixed;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_population, PopulationConfig};

    fn small_pop(seed: u64) -> Population {
        let config = PopulationConfig {
            groups: 20,
            size_mean: 8.0,
            size_log_sd: 0.3,
            overlap_rate: 0.05,
            ..Default::default()
        };
        generate_population(&config, &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn zero_rate_gives_empty_log() {
        let pop = small_pop(1);
        let params = BehaviorParams { baseline_send_rate: 0.0, ..Default::default() };
        let log =
            simulate(&pop, &params, FestivalCalendar::default(), 10, &RngStream::new(2)).unwrap();
        assert!(log.packets.is_empty());
        assert!(log.edges.is_empty());
    }

    #[test]
    fn conservation_and_receive_invariants() {
        let pop = small_pop(3);
        let params = BehaviorParams {
            baseline_send_rate: 0.3,
            theta_ext: 0.003,
            tie_formation_rate: 0.005,
            ..Default::default()
        };
        let log =
            simulate(&pop, &params, FestivalCalendar::default(), 15, &RngStream::new(4)).unwrap();
        assert!(!log.packets.is_empty());
        let mut received_total = 0i64;
        for p in &log.packets {
            assert!(p.receives.len() <= p.n_declared as usize);
            let mut last_t = p.t_send;
            let mut sum = 0i64;
            for (i, r) in p.receives.iter().enumerate() {
                assert_eq!(r.order as usize, i + 1, "orders are 1..k consecutive");
                assert!(r.t > last_t, "receive strictly after send/previous receive");
                assert!(r.t - p.t_send < DAY_S, "receives within 24h");
                assert!(r.amount.cents() >= 1);
                last_t = r.t;
                sum += r.amount.cents();
            }
            assert!(sum <= p.total.cents());
            if p.receives.len() == p.n_declared as usize {
                assert_eq!(sum, p.total.cents(), "fully taken packets conserve exactly");
            }
            received_total += sum;
        }
        let sent_total: i64 = log.packets.iter().map(|p| p.total.cents()).sum();
        assert_eq!(sent_total - received_total, log.stats.unopened_residue);
        // Exactly one luckiest per non-empty packet, max amount, earliest order tie-break.
        for p in &log.packets {
            if p.receives.is_empty() {
                continue;
            }
            let lucky: Vec<&Receive> = p.receives.iter().filter(|r| r.luckiest).collect();
            assert_eq!(lucky.len(), 1);
            let max_amt = p.receives.iter().map(|r| r.amount).max().unwrap();
            assert_eq!(lucky[0].amount, max_amt);
            let first_max = p.receives.iter().find(|r| r.amount == max_amt).unwrap();
            assert_eq!(lucky[0].order, first_max.order);
        }
    }

    #[test]
    fn timestamps_strictly_increase_within_group() {
        let pop = small_pop(5);
        let params = BehaviorParams { baseline_send_rate: 0.5, ..Default::default() };
        let log =
            simulate(&pop, &params, FestivalCalendar::default(), 10, &RngStream::new(6)).unwrap();
        for g in pop.groups.iter().map(|g| g.group_id) {
            let mut ts: Vec<f64> = Vec::new();
            for p in log.packets.iter().filter(|p| p.group_id == g) {
                ts.push(p.t_send);
                ts.extend(p.receives.iter().map(|r| r.t));
            }
            let mut sorted = ts.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in sorted.windows(2) {
                assert!(w[0] < w[1], "tied timestamps {} {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_schedule() {
        let pop = small_pop(7);
        let params = BehaviorParams { baseline_send_rate: 0.4, theta_ext: 0.01, ..Default::default() };
        let cal = FestivalCalendar { period_days: 7, length_days: 2 };
        let a = simulate(&pop, &params, cal, 12, &RngStream::new(8)).unwrap();
        let b = simulate(&pop, &params, cal, 12, &RngStream::new(8)).unwrap();
        assert_eq!(a.packets.len(), b.packets.len());
        for (pa, pb) in a.packets.iter().zip(&b.packets) {
            assert_eq!(pa.packet_id, pb.packet_id);
            assert_eq!(pa.t_send, pb.t_send);
            assert_eq!(pa.total, pb.total);
            assert_eq!(pa.receives.len(), pb.receives.len());
            for (ra, rb) in pa.receives.iter().zip(&pb.receives) {
                assert_eq!(ra.amount, rb.amount);
                assert_eq!(ra.t, rb.t);
            }
        }
    }

    #[test]
    fn festival_days_raise_activity() {
        let pop = small_pop(9);
        let params = BehaviorParams {
            baseline_send_rate: 0.2,
            festival_rate_mult: 4.0,
            burst_rate: 0.0,
            ..Default::default()
        };
        let cal = FestivalCalendar { period_days: 2, length_days: 1 };
        let log = simulate(&pop, &params, cal, 30, &RngStream::new(10)).unwrap();
        let fest = log.packets.iter().filter(|p| p.festival).count();
        let non = log.packets.len() - fest;
        assert!(fest > 2 * non, "festival {fest} vs non {non}");
    }

    #[test]
    fn ratio_of_second_to_largest() {
        let p = Packet {
            packet_id: 0,
            group_id: 0,
            sender_id: 0,
            total: MoneyCents(100),
            n_declared: 3,
            t_send: 0.0,
            festival: false,
            receives: vec![
                Receive { user_id: 1, order: 1, amount: MoneyCents(50), t: 1.0, luckiest: true },
                Receive { user_id: 2, order: 2, amount: MoneyCents(30), t: 2.0, luckiest: false },
                Receive { user_id: 3, order: 3, amount: MoneyCents(20), t: 3.0, luckiest: false },
            ],
        };
        assert!((p.second_to_largest_ratio().unwrap() - 0.6).abs() < 1e-15);
        let single = Packet { receives: p.receives[..1].to_vec(), ..p.clone() };
        assert!(single.second_to_largest_ratio().is_none());
    }
}
