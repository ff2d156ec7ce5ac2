//! Intra-patient lesion matching on the embedding graph.
//!
//! Four phases run in order:
//!
//! 1. **Merge**: nodes from the same study closer than `t1` collapse into
//!    one node (transitively) whose embedding is the mean of its members.
//! 2. **Threshold**: edges between different studies longer than `t2`
//!    are dropped. Nodes of the same study are never connected.
//! 3. **Exclusion**: every node keeps, per other study, only its shortest
//!    edge; an edge survives when it is the shortest from both ends. Ties
//!    go to the neighbor with the smaller lesion id. All comparisons use
//!    the post-threshold graph.
//! 4. **Extraction**: connected components are the matched groups.

use serde::{Deserialize, Serialize};

use super::union_find::UnionFind;
use crate::error::{Error, Result};
use crate::model::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Intra-study merge threshold.
    pub t1: f64,
    /// Inter-study edge threshold.
    pub t2: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig { t1: 0.1, t2: 0.5 }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t1 && self.t1 < self.t2) {
            return Err(Error::Config(format!(
                "matching needs 0 < t1 < t2 (t1 = {}, t2 = {})",
                self.t1, self.t2
            )));
        }
        Ok(())
    }
}

/// A lesion measurement entering the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchNode {
    pub lesion_id: u64,
    pub patient_id: u64,
    pub study_id: u64,
    pub embedding: Vec<f64>,
}

/// A graph node after the merge phase.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    /// Member lesion ids, ascending.
    pub members: Vec<u64>,
    pub study_id: u64,
    pub embedding: Vec<f64>,
}

impl GraphNode {
    /// Smallest member id; used to break distance ties.
    pub fn key(&self) -> u64 {
        self.members[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// Weighted undirected graph over one patient's lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

fn validate_nodes(lesions: &[MatchNode]) -> Result<()> {
    if let Some(first) = lesions.first() {
        let dim = first.embedding.len();
        for l in lesions {
            if l.patient_id != first.patient_id {
                return Err(Error::MixedPatients(first.patient_id, l.patient_id));
            }
            if l.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: l.embedding.len(),
                });
            }
        }
    }
    Ok(())
}

fn mean(vectors: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

impl LesionGraph {
    /// Merge phase plus the complete inter-study edge set.
    pub fn build(lesions: &[MatchNode], t1: f64) -> Result<Self> {
        validate_nodes(lesions)?;
        let mut sorted: Vec<&MatchNode> = lesions.iter().collect();
        sorted.sort_by_key(|l| l.lesion_id);
        if sorted.windows(2).any(|w| w[0].lesion_id == w[1].lesion_id) {
            let dup = sorted
                .windows(2)
                .find(|w| w[0].lesion_id == w[1].lesion_id)
                .unwrap()[0]
                .lesion_id;
            return Err(Error::DuplicateLesion(dup));
        }

        let n = sorted.len();
        let mut uf = UnionFind::new(n);
        let t1_sq = t1 * t1;
        for i in 0..n {
            for j in i + 1..n {
                if sorted[i].study_id == sorted[j].study_id
                    && squared_distance(&sorted[i].embedding, &sorted[j].embedding) < t1_sq
                {
                    uf.union(i, j);
                }
            }
        }
        let nodes: Vec<GraphNode> = uf
            .groups()
            .into_iter()
            .map(|g| {
                let embs: Vec<&[f64]> = g.iter().map(|&i| sorted[i].embedding.as_slice()).collect();
                GraphNode {
                    members: g.iter().map(|&i| sorted[i].lesion_id).collect(),
                    study_id: sorted[g[0]].study_id,
                    embedding: mean(&embs),
                }
            })
            .collect();

        let mut edges = Vec::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                if nodes[i].study_id != nodes[j].study_id {
                    let distance = squared_distance(&nodes[i].embedding, &nodes[j].embedding).sqrt();
                    edges.push(Edge { i, j, distance });
                }
            }
        }
        Ok(LesionGraph { nodes, edges })
    }

    /// Drops edges longer than `t2`.
    pub fn threshold(&mut self, t2: f64) {
        self.edges.retain(|e| e.distance <= t2);
    }

    /// Keeps an edge only when it is, from both endpoints, the shortest
    /// edge into the other endpoint's study.
    pub fn exclude(&mut self) {
        let n = self.nodes.len();
        // best[node] = list of (study, neighbor, distance) minima
        let mut best: Vec<Vec<(u64, usize, f64)>> = vec![Vec::new(); n];
        let mut offer = |from: usize, to: usize, d: f64, nodes: &[GraphNode]| {
            let study = nodes[to].study_id;
            let slot = best[from].iter_mut().find(|(s, _, _)| *s == study);
            match slot {
                None => best[from].push((study, to, d)),
                Some(cur) => {
                    let better = d < cur.2 || (d == cur.2 && nodes[to].key() < nodes[cur.1].key());
                    if better {
                        *cur = (study, to, d);
                    }
                }
            }
        };
        for e in &self.edges {
            offer(e.i, e.j, e.distance, &self.nodes);
            offer(e.j, e.i, e.distance, &self.nodes);
        }
        let is_best = |from: usize, to: usize, nodes: &[GraphNode]| {
            best[from]
                .iter()
                .any(|(s, nb, _)| *s == nodes[to].study_id && *nb == to)
        };
        let nodes = &self.nodes;
        self.edges
            .retain(|e| is_best(e.i, e.j, nodes) && is_best(e.j, e.i, nodes));
    }

    /// Connected components as sorted lesion-id groups, ordered by their
    /// smallest id.
    pub fn components(&self) -> Vec<Vec<u64>> {
        let mut uf = UnionFind::new(self.nodes.len());
        for e in &self.edges {
            uf.union(e.i, e.j);
        }
        let mut groups: Vec<Vec<u64>> = uf
            .groups()
            .into_iter()
            .map(|g| {
                let mut ids: Vec<u64> = g
                    .iter()
                    .flat_map(|&i| self.nodes[i].members.iter().copied())
                    .collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        groups.sort_by_key(|g| g[0]);
        groups
    }
}

/// Groups one patient's lesions into matched instances.
pub fn match_lesions(lesions: &[MatchNode], cfg: &MatchingConfig) -> Result<Vec<Vec<u64>>> {
    cfg.validate()?;
    let mut graph = LesionGraph::build(lesions, cfg.t1)?;
    graph.threshold(cfg.t2);
    graph.exclude();
    Ok(graph.components())
}

/// Splits lesions by patient (ascending patient id).
pub fn by_patient(lesions: Vec<MatchNode>) -> Vec<Vec<MatchNode>> {
    let mut map: std::collections::BTreeMap<u64, Vec<MatchNode>> = Default::default();
    for l in lesions {
        map.entry(l.patient_id).or_default().push(l);
    }
    map.into_values().collect()
}

/// Matches every patient independently; `(patient_id, groups)` in
/// ascending patient order.
pub fn match_all(
    patients: &[Vec<MatchNode>],
    cfg: &MatchingConfig,
) -> Result<Vec<(u64, Vec<Vec<u64>>)>> {
    patients
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| Ok((p[0].patient_id, match_lesions(p, cfg)?)))
        .collect()
}
