//! Node-level topology descriptors.
//!
//! Per node `i` the descriptor row is
//! `[c3, ..., c_Lmax, degree / max_degree, clustering, in_triangle]`,
//! where `c_l` counts the relevant cycles of length `l` through `i`. A cycle
//! is relevant when it is not a GF(2) sum of strictly shorter cycles; the
//! relevant cycles are exactly the union of all minimum cycle bases, so the
//! counts agree with any minimum cycle basis when that basis is unique and
//! stay permutation-equivariant when it is not.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_CYCLE_LEN: usize = 6;

pub fn descriptor_dim(max_cycle_len: usize) -> usize {
    (max_cycle_len - 2) + 3
}

pub fn topology_descriptors(a: &Tensor, max_cycle_len: usize) -> Result<Tensor> {
    if max_cycle_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "maximum cycle length must be at least 3, got {max_cycle_len}"
        )));
    }
    let n = a.rows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| a.get(i, j) != 0.0).collect())
        .collect();
    let dim = descriptor_dim(max_cycle_len);
    let mut out = Tensor::zeros(n, dim);

    let counts = relevant_cycle_counts(&adj, max_cycle_len);
    for (i, row) in counts.iter().enumerate() {
        for (l, c) in row.iter().enumerate() {
            out.set(i, l, *c as f64);
        }
    }

    let max_deg = adj.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..n {
        let deg = adj[i].len();
        let triangles = triangles_at(&adj, a, i);
        let base = max_cycle_len - 2;
        out.set(
            i,
            base,
            if max_deg == 0 {
                0.0
            } else {
                deg as f64 / max_deg as f64
            },
        );
        out.set(
            i,
            base + 1,
            if deg < 2 {
                0.0
            } else {
                2.0 * triangles as f64 / (deg * (deg - 1)) as f64
            },
        );
        out.set(i, base + 2, if triangles > 0 { 1.0 } else { 0.0 });
    }
    Ok(out)
}

fn triangles_at(adj: &[Vec<usize>], a: &Tensor, i: usize) -> usize {
    let nb = &adj[i];
    let mut t = 0;
    for (p, &u) in nb.iter().enumerate() {
        for &v in &nb[p + 1..] {
            if a.get(u, v) != 0.0 {
                t += 1;
            }
        }
    }
    t
}

struct Cycle {
    nodes: Vec<usize>,
    edges: Vec<u64>,
}

/// `counts[i][l - 3]` = number of relevant cycles of length `l` through `i`.
fn relevant_cycle_counts(adj: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut edge_index = HashMap::new();
    for (u, nb) in adj.iter().enumerate() {
        for &v in nb {
            if u < v {
                let k = edge_index.len();
                edge_index.insert((u, v), k);
            }
        }
    }
    let words = edge_index.len().div_ceil(64).max(1);

    let mut by_len: Vec<Vec<Cycle>> = (0..=max_len).map(|_| Vec::new()).collect();
    for cyc in simple_cycles_up_to(adj, max_len) {
        let mut edges = vec![0u64; words];
        for k in 0..cyc.len() {
            let (u, v) = (cyc[k], cyc[(k + 1) % cyc.len()]);
            let e = edge_index[&(u.min(v), u.max(v))];
            edges[e / 64] |= 1 << (e % 64);
        }
        by_len[cyc.len()].push(Cycle { nodes: cyc, edges });
    }

    let mut counts = vec![vec![0usize; max_len - 2]; n];
    let mut basis = Gf2Basis::new(words);
    for len in 3..=max_len {
        let cycles = &by_len[len];
        // Relevance is decided against strictly shorter cycles only, so test
        // the whole length class before inserting any of it.
        for c in cycles {
            if !basis.contains(&c.edges) {
                for &v in &c.nodes {
                    counts[v][len - 3] += 1;
                }
            }
        }
        for c in cycles {
            basis.insert(c.edges.clone());
        }
    }
    counts
}

/// Every simple cycle of length `3..=max_len`, each reported once as a node
/// sequence starting at its smallest node.
fn simple_cycles_up_to(adj: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    fn extend(
        adj: &[Vec<usize>],
        start: usize,
        max_len: usize,
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) {
        let last = *path.last().unwrap();
        for &next in &adj[last] {
            if next == start {
                // Keep one of the two orientations.
                if path.len() >= 3 && path[1] < last {
                    out.push(path.clone());
                }
            } else if next > start && !on_path[next] && path.len() < max_len {
                on_path[next] = true;
                path.push(next);
                extend(adj, start, max_len, path, on_path, out);
                path.pop();
                on_path[next] = false;
            }
        }
    }

    let mut out = Vec::new();
    let mut on_path = vec![false; adj.len()];
    for start in 0..adj.len() {
        let mut path = vec![start];
        on_path[start] = true;
        extend(adj, start, max_len, &mut path, &mut on_path, &mut out);
        on_path[start] = false;
    }
    out
}

/// Row-echelon basis over GF(2), vectors stored as bit words.
struct Gf2Basis {
    rows: Vec<(usize, Vec<u64>)>,
    words: usize,
}

impl Gf2Basis {
    fn new(words: usize) -> Self {
        Self {
            rows: Vec::new(),
            words,
        }
    }

    fn reduce(&self, mut v: Vec<u64>) -> Vec<u64> {
        for (pivot, row) in &self.rows {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for w in 0..self.words {
                    v[w] ^= row[w];
                }
            }
        }
        v
    }

    fn contains(&self, v: &[u64]) -> bool {
        self.reduce(v.to_vec()).iter().all(|w| *w == 0)
    }

    fn insert(&mut self, v: Vec<u64>) {
        let r = self.reduce(v);
        let Some(pivot) = leading_bit(&r) else { return };
        // Keep rows fully reduced on their pivots so `reduce` is one pass.
        for (_, row) in self.rows.iter_mut() {
            if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for w in 0..self.words {
                    row[w] ^= r[w];
                }
            }
        }
        self.rows.push((pivot, r));
    }
}

fn leading_bit(v: &[u64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::adjacency_from_edges;

    fn ring(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    }

    #[test]
    fn triangle_descriptors() {
        let a = adjacency_from_edges(3, &ring(3)).unwrap();
        let t = topology_descriptors(&a, 6).unwrap();
        for i in 0..3 {
            assert_eq!(t.row(i), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn path_middle_node_has_no_clustering() {
        let a = adjacency_from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let t = topology_descriptors(&a, 6).unwrap();
        assert_eq!(t.row(1), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.get(0, 4), 0.5);
    }

    #[test]
    fn hexagon_counts_one_six_cycle() {
        let a = adjacency_from_edges(6, &ring(6)).unwrap();
        let t = topology_descriptors(&a, 6).unwrap();
        for i in 0..6 {
            assert_eq!(&t.row(i)[..4], &[0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn edgeless_graph_has_zero_degree_feature() {
        let t = topology_descriptors(&Tensor::zeros(3, 3), 6).unwrap();
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn k4_triangles_are_all_relevant() {
        let edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let a = adjacency_from_edges(4, &edges).unwrap();
        let t = topology_descriptors(&a, 6).unwrap();
        // Four triangles, each node on three; the 4-cycles are sums of them.
        for i in 0..4 {
            assert_eq!(t.get(i, 0), 3.0);
            assert_eq!(t.get(i, 1), 0.0);
        }
    }

    #[test]
    fn square_with_diagonal_drops_the_perimeter() {
        let a = adjacency_from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let t = topology_descriptors(&a, 6).unwrap();
        assert_eq!(t.get(0, 0), 2.0);
        assert_eq!(t.get(1, 0), 1.0);
        assert!(t.data().chunks(7).all(|r| r[1] == 0.0));
    }

    #[test]
    fn rejects_short_cycle_limit() {
        assert!(topology_descriptors(&Tensor::zeros(2, 2), 2).is_err());
    }
}
