use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::KnowledgeGraph;

/// Distinct undirected neighbours of every node.
pub fn adjacency(g: &KnowledgeGraph) -> Vec<Vec<usize>> {
    let n = g.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for e in &g.edges {
        let (a, b) = (g.index_of(e.src), g.index_of(e.dst));
        if let (Some(a), Some(b)) = (a, b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

fn bfs(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut q = VecDeque::from([src]);
    while let Some(v) = q.pop_front() {
        let d = dist[v].expect("queued nodes have distances");
        for &w in &adj[v] {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                q.push_back(w);
            }
        }
    }
    dist
}

/// `r / sum(d)` over the `r` other nodes reachable from each node; 0 when
/// none are. Equals `(n - 1) / sum(d)` on connected graphs.
pub fn closeness(adj: &[Vec<usize>]) -> Vec<f64> {
    (0..adj.len())
        .map(|v| {
            let (reach, total) = bfs(adj, v)
                .into_iter()
                .flatten()
                .filter(|&d| d > 0)
                .fold((0usize, 0usize), |(r, t), d| (r + 1, t + d));
            if total == 0 {
                0.0
            } else {
                reach as f64 / total as f64
            }
        })
        .collect()
}

/// Undirected PageRank; isolated nodes spread their mass uniformly.
pub fn pagerank(adj: &[Vec<usize>], damping: f64, max_iter: usize, tol: f64) -> Vec<f64> {
    let n = adj.len();
    if n == 0 {
        return Vec::new();
    }
    let inv_n = 1.0 / n as f64;
    let mut pr = vec![inv_n; n];
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&v| adj[v].is_empty()).map(|v| pr[v]).sum();
        let base = (1.0 - damping) * inv_n + damping * dangling * inv_n;
        let mut next = vec![base; n];
        for v in 0..n {
            if adj[v].is_empty() {
                continue;
            }
            let share = damping * pr[v] / adj[v].len() as f64;
            for &w in &adj[v] {
                next[w] += share;
            }
        }
        let delta: f64 = next.iter().zip(&pr).map(|(a, b)| (a - b).abs()).sum();
        pr = next;
        if delta < tol {
            break;
        }
    }
    pr
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphFeatures {
    pub degree: Vec<f64>,
    pub closeness: Vec<f64>,
    pub pagerank: Vec<f64>,
    pub node_count: usize,
    pub edge_count: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl GraphFeatures {
    pub fn mean_degree(&self) -> f64 {
        mean(&self.degree)
    }

    pub fn max_degree(&self) -> f64 {
        max(&self.degree)
    }

    pub fn mean_closeness(&self) -> f64 {
        mean(&self.closeness)
    }

    pub fn max_closeness(&self) -> f64 {
        max(&self.closeness)
    }

    pub fn mean_pagerank(&self) -> f64 {
        mean(&self.pagerank)
    }

    pub fn max_pagerank(&self) -> f64 {
        max(&self.pagerank)
    }
}

pub fn graph_features(g: &KnowledgeGraph) -> GraphFeatures {
    let adj = adjacency(g);
    GraphFeatures {
        degree: adj.iter().map(|a| a.len() as f64).collect(),
        closeness: closeness(&adj),
        pagerank: pagerank(&adj, 0.85, 100, 1e-8),
        node_count: g.nodes.len(),
        edge_count: g.edges.len(),
    }
}
