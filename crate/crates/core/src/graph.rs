//! Within-group friendship graphs and the network metrics used as
//! moderators: per-member clustering coefficient and normalized degree,
//! group-level density (average normalized degree), overall clustering,
//! and eigenvector centrality.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Undirected friendship graph over one group's members.
///
/// Members are stored sorted by user id; edges are symmetric, no self
/// loops. `labels` carry the group-type tag and festival-activity
/// propensity used by the simulator and the subsample splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupGraph {
    pub group_id: u64,
    /// Sorted member user ids.
    members: Vec<u64>,
    /// Adjacency lists parallel to `members`, each sorted.
    adjacency: Vec<Vec<u32>>,
    pub group_type: String,
    pub festival_propensity: f64,
}

impl GroupGraph {
    pub fn new(group_id: u64, mut members: Vec<u64>) -> Self {
        members.sort_unstable();
        members.dedup();
        let n = members.len();
        Self {
            group_id,
            members,
            adjacency: vec![Vec::new(); n],
            group_type: String::new(),
            festival_propensity: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[u64] {
        &self.members
    }

    /// Local index of a user id, if a member.
    pub fn index_of(&self, user: u64) -> Option<usize> {
        self.members.binary_search(&user).ok()
    }

    pub fn user_at(&self, idx: usize) -> u64 {
        self.members[idx]
    }

    /// Adds an undirected edge by member index. Self-edges and duplicates
    /// are ignored.
    pub fn add_edge_idx(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        if let Err(pos) = self.adjacency[a].binary_search(&(b as u32)) {
            self.adjacency[a].insert(pos, b as u32);
            let pos_b = self.adjacency[b].binary_search(&(a as u32)).unwrap_err();
            self.adjacency[b].insert(pos_b, a as u32);
        }
    }

    pub fn add_edge(&mut self, user_a: u64, user_b: u64) -> Result<()> {
        let a = self
            .index_of(user_a)
            .ok_or(Error::MemberNotInGroup { user: user_a, group: self.group_id })?;
        let b = self
            .index_of(user_b)
            .ok_or(Error::MemberNotInGroup { user: user_b, group: self.group_id })?;
        self.add_edge_idx(a, b);
        Ok(())
    }

    pub fn has_edge_idx(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&(b as u32)).is_ok()
    }

    pub fn neighbors_idx(&self, i: usize) -> &[u32] {
        &self.adjacency[i]
    }

    pub fn degree_idx(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Sorted (a, b) member-index pairs with a < b.
    pub fn edges_idx(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.adjacency.iter().enumerate() {
            for &b in nbrs {
                if (b as usize) > a {
                    out.push((a, b as usize));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn member_index(&self, user: u64) -> Result<usize> {
        self.index_of(user)
            .ok_or(Error::MemberNotInGroup { user, group: self.group_id })
    }

    /// Fraction of ordered friend pairs (j, k) of `user` that are
    /// themselves friends; 0 when the member has fewer than 2 in-group
    /// friends (keeps those rows in the regression sample).
    pub fn clustering_coefficient(&self, user: u64) -> Result<f64> {
        let i = self.member_index(user)?;
        Ok(self.clustering_coefficient_idx(i))
    }

    pub fn clustering_coefficient_idx(&self, i: usize) -> f64 {
        let nbrs = &self.adjacency[i];
        let d = nbrs.len();
        if d < 2 {
            return 0.0;
        }
        let mut closed = 0usize;
        for (pos, &j) in nbrs.iter().enumerate() {
            for &k in &nbrs[pos + 1..] {
                if self.has_edge_idx(j as usize, k as usize) {
                    closed += 1;
                }
            }
        }
        // `closed` counts unordered pairs; the ordered-pair ratio is equal.
        2.0 * closed as f64 / (d * (d - 1)) as f64
    }

    /// degree / group size, in [0, 1].
    pub fn normalized_degree(&self, user: u64) -> Result<f64> {
        let i = self.member_index(user)?;
        Ok(self.normalized_degree_idx(i))
    }

    pub fn normalized_degree_idx(&self, i: usize) -> f64 {
        self.adjacency[i].len() as f64 / self.members.len() as f64
    }

    /// Network density: sum of degrees / (|G| * (|G| - 1)).
    pub fn average_normalized_degree(&self) -> Result<f64> {
        let n = self.members.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "average normalized degree needs >= 2 members, group {} has {n}",
                self.group_id
            )));
        }
        let degree_sum: usize = self.adjacency.iter().map(Vec::len).sum();
        Ok(degree_sum as f64 / (n * (n - 1)) as f64)
    }

    /// Closed connected ordered triples over connected ordered triples
    /// (transitivity); 0 when no member has two friends.
    pub fn overall_clustering(&self) -> f64 {
        let mut open = 0u64; // connected ordered triples, centered at each member
        let mut closed = 0u64;
        for nbrs in self.adjacency.iter() {
            let d = nbrs.len() as u64;
            if d < 2 {
                continue;
            }
            open += d * (d - 1);
            for (pos, &j) in nbrs.iter().enumerate() {
                for &k in &nbrs[pos + 1..] {
                    if self.has_edge_idx(j as usize, k as usize) {
                        closed += 2; // ordered pairs (j,k) and (k,j)
                    }
                }
            }
        }
        if open == 0 {
            0.0
        } else {
            closed as f64 / open as f64
        }
    }

    /// Principal eigenvector of the adjacency relation, non-negative and
    /// normalized to unit Euclidean length, by power iteration to relative
    /// tolerance 1e-9 (iteration runs on A + I so bipartite components do
    /// not oscillate; the eigenvector is the same). Isolates get 0. A graph
    /// with no edges at all returns the zero vector.
    pub fn eigenvector_centrality(&self) -> Result<Vec<f64>> {
        const MAX_ITER: usize = 10_000;
        const TOL: f64 = 1e-9;
        let n = self.members.len();
        if n == 0 {
            return Err(Error::InvalidInput("eigenvector centrality of empty graph".into()));
        }
        if self.edge_count() == 0 {
            return Ok(vec![0.0; n]);
        }
        let norm0 = 1.0 / (n as f64).sqrt();
        let mut x = vec![norm0; n];
        let mut next = vec![0.0f64; n];
        for _ in 0..MAX_ITER {
            for i in 0..n {
                let mut acc = x[i]; // the +I shift
                for &j in &self.adjacency[i] {
                    acc += x[j as usize];
                }
                next[i] = acc;
            }
            let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonConvergence(MAX_ITER));
            }
            let mut delta = 0.0f64;
            for i in 0..n {
                next[i] /= norm;
                delta = delta.max((next[i] - x[i]).abs());
            }
            std::mem::swap(&mut x, &mut next);
            if delta <= TOL {
                // Isolates carry no centrality; zero them and renormalize.
                let mut dirty = false;
                for (i, v) in x.iter_mut().enumerate() {
                    if self.adjacency[i].is_empty() && *v != 0.0 {
                        *v = 0.0;
                        dirty = true;
                    }
                }
                if dirty {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in x.iter_mut() {
                            *v /= norm;
                        }
                    }
                }
                return Ok(x);
            }
        }
        Err(Error::NonConvergence(MAX_ITER))
    }

    /// Scores keyed by user id.
    pub fn eigenvector_centrality_map(&self) -> Result<BTreeMap<u64, f64>> {
        let scores = self.eigenvector_centrality()?;
        Ok(self.members.iter().copied().zip(scores).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: u64, edges: &[(u64, u64)]) -> GroupGraph {
        let mut g = GroupGraph::new(0, (0..n).collect());
        for &(a, b) in edges {
            g.add_edge(a, b).unwrap();
        }
        g
    }

    fn triangle() -> GroupGraph {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }

    fn star4() -> GroupGraph {
        graph(4, &[(0, 1), (0, 2), (0, 3)])
    }

    #[test]
    fn clustering_triangle_and_star() {
        let t = triangle();
        for u in 0..3 {
            assert_eq!(t.clustering_coefficient(u).unwrap(), 1.0);
        }
        let s = star4();
        assert_eq!(s.clustering_coefficient(0).unwrap(), 0.0);
        // Leaves have < 2 friends: defined as 0.
        assert_eq!(s.clustering_coefficient(1).unwrap(), 0.0);
    }

    #[test]
    fn clustering_cycle_and_clique() {
        let c4 = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert_eq!(c4.clustering_coefficient(0).unwrap(), 0.0);
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(k4.clustering_coefficient(0).unwrap(), 1.0);
    }

    #[test]
    fn normalized_degree_cases() {
        let t = triangle();
        assert!((t.normalized_degree(0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut g = GroupGraph::new(0, (0..5).collect());
        g.add_edge(0, 1).unwrap();
        assert_eq!(g.normalized_degree(4).unwrap(), 0.0);
        let mut full10 = GroupGraph::new(0, (0..10).collect());
        for b in 1..10 {
            full10.add_edge(0, b).unwrap();
        }
        assert!((full10.normalized_degree(0).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn average_normalized_degree_cases() {
        assert_eq!(triangle().average_normalized_degree().unwrap(), 1.0);
        let empty = graph(4, &[]);
        assert_eq!(empty.average_normalized_degree().unwrap(), 0.0);
        let path3 = graph(3, &[(0, 1), (1, 2)]);
        assert!((path3.average_normalized_degree().unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(graph(1, &[]).average_normalized_degree().is_err());
    }

    #[test]
    fn overall_clustering_cases() {
        assert_eq!(triangle().overall_clustering(), 1.0);
        assert_eq!(star4().overall_clustering(), 0.0);
        // Triangle plus pendant edge: closed 6 of 10 ordered triples... the
        // hand count: centers 0,1 (degree 2, both in triangle) give 2 each
        // closed; center 2 (degree 3) has 6 ordered pairs, 2 closed.
        let tp = graph(4, &[(0, 1), (1, 2), (0, 2), (2, 3)]);
        assert!((tp.overall_clustering() - 0.6).abs() < 1e-15);
        // No connected triples at all.
        assert_eq!(graph(3, &[(0, 1)]).overall_clustering(), 0.0);
    }

    #[test]
    fn eigenvector_complete_star_edge() {
        let k3 = triangle();
        let e = k3.eigenvector_centrality().unwrap();
        for v in &e {
            assert!((v - 1.0 / 3.0f64.sqrt()).abs() < 1e-8);
        }
        let s = star4();
        let e = s.eigenvector_centrality().unwrap();
        assert!((e[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-8, "center {}", e[0]);
        for leaf in &e[1..] {
            assert!((leaf - 1.0 / 6.0f64.sqrt()).abs() < 1e-8);
        }
        let mut pair = GroupGraph::new(0, vec![0, 1]);
        pair.add_edge(0, 1).unwrap();
        let e = pair.eigenvector_centrality().unwrap();
        assert!((e[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((e[1] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eigenvector_isolates_get_zero() {
        // Triangle plus two isolates.
        let g = graph(5, &[(0, 1), (1, 2), (0, 2)]);
        let e = g.eigenvector_centrality().unwrap();
        assert_eq!(e[3], 0.0);
        assert_eq!(e[4], 0.0);
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eigenvector_no_edges_is_zero_vector() {
        let g = graph(3, &[]);
        assert_eq!(g.eigenvector_centrality().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn metrics_reject_non_members() {
        let t = triangle();
        assert!(t.clustering_coefficient(17).is_err());
        assert!(t.normalized_degree(17).is_err());
    }

    #[test]
    fn relabeling_invariance() {
        // Same topology under shifted user ids.
        let a = graph(4, &[(0, 1), (1, 2), (0, 2), (2, 3)]);
        let mut b = GroupGraph::new(1, vec![100, 200, 300, 400]);
        for &(x, y) in &[(100u64, 200u64), (200, 300), (100, 300), (300, 400)] {
            b.add_edge(x, y).unwrap();
        }
        assert_eq!(a.overall_clustering(), b.overall_clustering());
        assert_eq!(
            a.clustering_coefficient(2).unwrap(),
            b.clustering_coefficient(300).unwrap()
        );
    }
}
