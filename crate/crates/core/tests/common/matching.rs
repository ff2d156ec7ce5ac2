//! Direct quadratic reference for lesion matching.

use lesion_graph::graph::{MatchNode, MatchingConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reference: reachability closure for the merge, then every rule checked
/// pair by pair.
pub fn reference(lesions: &[MatchNode], t1: f64, t2: f64) -> Vec<Vec<u64>> {
    let mut ls: Vec<&MatchNode> = lesions.iter().collect();
    ls.sort_by_key(|l| l.lesion_id);
    let n = ls.len();

    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
        for j in 0..n {
            if ls[i].study_id == ls[j].study_id && dist(&ls[i].embedding, &ls[j].embedding) < t1 {
                reach[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    // (members, study, mean embedding), members ascending
    let mut nodes: Vec<(Vec<u64>, u64, Vec<f64>)> = Vec::new();
    let mut seen = vec![false; n];
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
        let dim = ls[i].embedding.len();
        let mut mean = vec![0.0; dim];
        for &m in &members {
            seen[m] = true;
            for (o, v) in mean.iter_mut().zip(&ls[m].embedding) {
                *o += v;
            }
        }
        for o in &mut mean {
            *o /= members.len() as f64;
        }
        nodes.push((members.iter().map(|&m| ls[m].lesion_id).collect(), ls[i].study_id, mean));
    }

    let m = nodes.len();
    let d = |i: usize, j: usize| dist(&nodes[i].2, &nodes[j].2);
    let edge = |i: usize, j: usize| i != j && nodes[i].1 != nodes[j].1 && d(i, j) <= t2;
    // Is `j` the preferred partner of `i` inside j's study?
    let preferred = |i: usize, j: usize| {
        (0..m).filter(|&w| nodes[w].1 == nodes[j].1 && edge(i, w)).all(|w| {
            w == j || d(i, j) < d(i, w) || (d(i, j) == d(i, w) && nodes[j].0[0] < nodes[w].0[0])
        })
    };
    let mut adj = vec![Vec::new(); m];
    for i in 0..m {
        for j in 0..m {
            if edge(i, j) && preferred(i, j) && preferred(j, i) {
                adj[i].push(j);
            }
        }
    }
    let mut comp = vec![usize::MAX; m];
    let mut groups = Vec::new();
    for s in 0..m {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = groups.len();
        let mut ids = Vec::new();
        while let Some(u) = stack.pop() {
            ids.extend(nodes[u].0.iter().copied());
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = groups.len();
                    stack.push(v);
                }
            }
        }
        ids.sort_unstable();
        groups.push(ids);
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<MatchNode>, MatchingConfig) {
    let n = rng.random_range(1..=8);
    let studies = rng.random_range(1..=4);
    let dim = rng.random_range(1..=3);
    // Integer grids make distance ties (and exact threshold hits) common.
    let grid = rng.random_bool(0.5);
    let mut ids: Vec<u64> = (1..=40).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let lesions = (0..n)
        .map(|i| MatchNode {
            lesion_id: ids[i],
            patient_id: 7,
            study_id: rng.random_range(1..=studies),
            embedding: (0..dim)
                .map(|_| {
                    if grid {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect(),
        })
        .collect();
    let cfg = if grid {
        let t1 = [0.5, 1.0, 1.5][rng.random_range(0..3)];
        MatchingConfig {
            t1,
            t2: t1 + [0.5, 1.0, 2.0, 3.0][rng.random_range(0..4)],
        }
    } else {
        let t1 = rng.random_range(0.01..0.4);
        MatchingConfig {
            t1,
            t2: t1 + rng.random_range(0.01..1.0),
        }
    };
    (lesions, cfg)
}
