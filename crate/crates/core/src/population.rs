//! Synthetic populations: groups, members with attributes, and within-group
//! friendship graphs with controllable wealth homophily.
//!
//! The generator is sharded by group with per-group rng substreams, so the
//! output is bitwise reproducible per seed and independent of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::GroupGraph;
use crate::rng::RngStream;

const TAG_GROUP: u64 = 0x01;
const TAG_OVERLAP: u64 = 0x02;

/// One user. `wealth` is the latent positive confounder driver: it raises
/// both activity and packet sizes in the simulator and clusters within
/// groups when homophily is on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Member {
    pub user_id: u64,
    pub age: u32,
    pub female: bool,
    pub wealth: f64,
    /// Standardized log-wealth (the latent homophily coordinate).
    pub wealth_z: f64,
    /// Sorted ids of the groups this user belongs to.
    pub group_ids: Vec<u64>,
}

/// Generation knobs.
///
/// `homophily` is the target correlation of log-wealth between members of
/// the same group (a group-level random effect share); the generated value
/// is measured by [`Population::wealth_homophily`]. `edge_homophily_*` are
/// the logistic penalties on attribute distance in the edge model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub groups: u32,
    /// Mean group size; sizes are lognormal around the implied median,
    /// clipped to [3, 500]. Dispersion 0 gives constant sizes.
    pub size_mean: f64,
    pub size_log_sd: f64,
    /// Target within-group edge probability for attribute-identical pairs
    /// at centered distances. 1.0 means a complete graph, 0.0 no edges.
    pub edge_density: f64,
    /// Penalty per unit |Δ log-wealth (z)| in the edge logit.
    pub edge_homophily_wealth: f64,
    /// Penalty per decade of |Δ age| in the edge logit.
    pub edge_homophily_age: f64,
    /// Target within-group correlation of log-wealth, in [0, 1).
    pub homophily: f64,
    pub wealth_log_mean: f64,
    pub wealth_log_sd: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_share: f64,
    /// Fraction of users added as extra members of a second group.
    pub overlap_rate: f64,
    /// Group-type labels with sampling weights, e.g. [("relative", 0.3), ...].
    pub group_types: Vec<(String, f64)>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            groups: 100,
            size_mean: 19.0,
            size_log_sd: 0.6,
            edge_density: 0.4,
            edge_homophily_wealth: 0.8,
            edge_homophily_age: 0.5,
            homophily: 0.4,
            wealth_log_mean: 4.0,
            wealth_log_sd: 0.7,
            age_mean: 29.0,
            age_sd: 9.0,
            female_share: 0.48,
            overlap_rate: 0.03,
            group_types: vec![
                ("relative".into(), 0.30),
                ("classmate".into(), 0.06),
                ("coworker".into(), 0.02),
                ("other".into(), 0.62),
            ],
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidConfig("groups must be >= 1".into()));
        }
        if !(3.0..=500.0).contains(&self.size_mean) {
            return Err(Error::InvalidConfig("size_mean must be in [3, 500]".into()));
        }
        if self.size_log_sd < 0.0 {
            return Err(Error::InvalidConfig("size_log_sd must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return Err(Error::InvalidConfig("edge_density must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.homophily) {
            return Err(Error::InvalidConfig("homophily must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.female_share) {
            return Err(Error::InvalidConfig("female_share must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::InvalidConfig("overlap_rate must be in [0, 1]".into()));
        }
        if self.group_types.is_empty() || self.group_types.iter().all(|(_, w)| *w <= 0.0) {
            return Err(Error::InvalidConfig("group_types needs a positive-weight label".into()));
        }
        Ok(())
    }
}

/// The generated world: members plus per-group graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Population {
    /// Keyed by user id.
    pub members: BTreeMap<u64, Member>,
    /// Sorted by group id.
    pub groups: Vec<GroupGraph>,
}

impl Population {
    pub fn group(&self, group_id: u64) -> Option<&GroupGraph> {
        self.groups
            .binary_search_by_key(&group_id, |g| g.group_id)
            .ok()
            .map(|i| &self.groups[i])
    }

    pub fn n_users(&self) -> usize {
        self.members.len()
    }

    /// Pearson correlation of standardized log-wealth over all unordered
    /// within-group member pairs. This is the measured homophily.
    pub fn wealth_homophily(&self) -> f64 {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        let mut n = 0.0;
        for g in &self.groups {
            let zs: Vec<f64> =
                g.members().iter().map(|u| self.members[u].wealth_z).collect();
            for i in 0..zs.len() {
                for j in (i + 1)..zs.len() {
                    // Symmetrize so the estimate is order-free.
                    for (x, y) in [(zs[i], zs[j]), (zs[j], zs[i])] {
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                        n += 1.0;
                    }
                }
            }
        }
        if n < 2.0 {
            return 0.0;
        }
        let cov = sxy / n - (sx / n) * (sy / n);
        let vx = sxx / n - (sx / n) * (sx / n);
        let vy = syy / n - (sy / n) * (sy / n);
        if vx <= 0.0 || vy <= 0.0 {
            0.0
        } else {
            cov / (vx * vy).sqrt()
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Generates a population per config. Deterministic per seed.
pub fn generate_population(config: &PopulationConfig, rng: &RngStream) -> Result<Population> {
    config.validate()?;
    let size_median = (config.size_mean.ln() - config.size_log_sd * config.size_log_sd / 2.0).exp();
    let type_names: Vec<&str> = config.group_types.iter().map(|(n, _)| n.as_str()).collect();
    let type_weights: Vec<f64> = config.group_types.iter().map(|(_, w)| *w).collect();

    // Per-group generation on independent substreams; user ids are blocked
    // by group (group g owns ids [g * 1e6, ...)), so sharding is safe.
    let per_group: Vec<(GroupGraph, Vec<Member>)> = (0..config.groups)
        .into_par_iter()
        .map(|gidx| {
            let mut grng = rng.derive_path(&[TAG_GROUP, gidx as u64]);
            let group_id = gidx as u64;
            let size = if config.size_log_sd == 0.0 {
                config.size_mean.round() as usize
            } else {
                let s = (size_median.ln() + config.size_log_sd * grng.gaussian()).exp();
                (s.round() as usize).clamp(3, 500)
            };
            let group_effect = grng.gaussian();
            let rho = config.homophily;
            let base_uid = group_id * 1_000_000;

            let mut members = Vec::with_capacity(size);
            for k in 0..size {
                let z = rho.sqrt() * group_effect + (1.0 - rho).sqrt() * grng.gaussian();
                let wealth = (config.wealth_log_mean + config.wealth_log_sd * z).exp();
                let age = (config.age_mean + config.age_sd * grng.gaussian())
                    .round()
                    .clamp(13.0, 80.0) as u32;
                members.push(Member {
                    user_id: base_uid + k as u64,
                    age,
                    female: grng.bernoulli(config.female_share),
                    wealth,
                    wealth_z: z,
                    group_ids: vec![group_id],
                });
            }

            let mut graph = GroupGraph::new(group_id, members.iter().map(|m| m.user_id).collect());
            graph.group_type = type_names[grng.weighted_index(&type_weights)].to_string();
            graph.festival_propensity = 0.5 + grng.next_f64();

            // Homophilous Erdos-Renyi: logistic edge probability in the
            // centered attribute distances.
            let d = config.edge_density;
            if d >= 1.0 {
                for a in 0..size {
                    for b in (a + 1)..size {
                        graph.add_edge_idx(a, b);
                    }
                }
            } else if d > 0.0 {
                let base_logit = logit(d);
                // Centering terms so the realized density stays near `d`.
                let mean_dz = 2.0 * ((1.0 - rho) / std::f64::consts::PI).sqrt();
                let mean_dage = 2.0 * config.age_sd / std::f64::consts::PI.sqrt() / 10.0;
                for a in 0..size {
                    for b in (a + 1)..size {
                        let dz = (members[a].wealth_z - members[b].wealth_z).abs();
                        let dage = (members[a].age as f64 - members[b].age as f64).abs() / 10.0;
                        let x = base_logit
                            - config.edge_homophily_wealth * (dz - mean_dz)
                            - config.edge_homophily_age * (dage - mean_dage);
                        if grng.bernoulli(logistic(x)) {
                            graph.add_edge_idx(a, b);
                        }
                    }
                }
            }
            (graph, members)
        })
        .collect();

    let mut groups = Vec::with_capacity(per_group.len());
    let mut members: BTreeMap<u64, Member> = BTreeMap::new();
    for (graph, ms) in per_group {
        for m in ms {
            members.insert(m.user_id, m);
        }
        groups.push(graph);
    }
    groups.sort_by_key(|g| g.group_id);

    // Multi-group membership: a fraction of users also joins one other
    // group, which makes the cluster bootstrap nontrivial.
    if config.overlap_rate > 0.0 && groups.len() > 1 {
        let mut orng = rng.derive(TAG_OVERLAP);
        let user_ids: Vec<u64> = members.keys().copied().collect();
        let n_extra = (config.overlap_rate * user_ids.len() as f64).round() as usize;
        for _ in 0..n_extra {
            let uid = user_ids[orng.gen_range(user_ids.len() as u64) as usize];
            let home = members[&uid].group_ids[0];
            let mut target = orng.gen_range(groups.len() as u64) as usize;
            if groups[target].group_id == home {
                target = (target + 1) % groups.len();
            }
            let tgid = groups[target].group_id;
            let member = members.get_mut(&uid).unwrap();
            if member.group_ids.contains(&tgid) || groups[target].len() >= 500 {
                continue;
            }
            member.group_ids.push(tgid);
            member.group_ids.sort_unstable();
            // Rebuild the target graph with the new member, keeping edges.
            let old = &groups[target];
            let mut ids: Vec<u64> = old.members().to_vec();
            ids.push(uid);
            let mut rebuilt = GroupGraph::new(tgid, ids);
            rebuilt.group_type = old.group_type.clone();
            rebuilt.festival_propensity = old.festival_propensity;
            for (a, b) in old.edges_idx() {
                rebuilt.add_edge(old.user_at(a), old.user_at(b)).unwrap();
            }
            // Wire the newcomer with plain density (no homophily reweighting).
            let new_idx = rebuilt.index_of(uid).unwrap();
            for other in 0..rebuilt.len() {
                if other != new_idx && orng.bernoulli(config.edge_density.min(1.0)) {
                    rebuilt.add_edge_idx(new_idx, other);
                }
            }
            groups[target] = rebuilt;
        }
    }

    Ok(Population { members, groups })
}
