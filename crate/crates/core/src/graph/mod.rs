//! Graph instances, propagation matrices and batching.

mod split;
mod topology;
mod tu;

use std::ops::Range;
use std::sync::Arc;

pub use split::{make_batches, stratified_folds, BatchedGraphs, Fold};
pub use topology::{descriptor_dim, topology_descriptors, DEFAULT_MAX_CYCLE_LEN};
pub use tu::parse_tu_dataset;

use crate::autodiff::LeftLinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled graph with everything the models consume precomputed.
#[derive(Clone, Debug)]
pub struct GraphInstance {
    pub adjacency: Tensor,
    pub features: Tensor,
    pub label: usize,
    pub propagation: Tensor,
    pub descriptors: Tensor,
}

impl GraphInstance {
    pub fn new(adjacency: Tensor, features: Tensor, label: usize, max_cycle_len: usize) -> Result<Self> {
        validate_adjacency(&adjacency)?;
        if features.rows() != adjacency.rows() {
            return Err(Error::Shape {
                op: "graph features",
                lhs: adjacency.shape(),
                rhs: features.shape(),
            });
        }
        let propagation = normalize_adjacency(&adjacency);
        let descriptors = topology_descriptors(&adjacency, max_cycle_len)?;
        Ok(Self {
            adjacency,
            features,
            label,
            propagation,
            descriptors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Builds an instance from an undirected edge list.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        label: usize,
        max_cycle_len: usize,
    ) -> Result<Self> {
        let adjacency = adjacency_from_edges(num_nodes, edges)?;
        Self::new(adjacency, features, label, max_cycle_len)
    }

    /// Same graph with nodes relabelled: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes();
        let mut adjacency = Tensor::zeros(n, n);
        let mut propagation = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                adjacency.set(i, j, self.adjacency.get(perm[i], perm[j]));
                propagation.set(i, j, self.propagation.get(perm[i], perm[j]));
            }
        }
        Self {
            adjacency,
            features: self.features.permute_rows(perm),
            label: self.label,
            propagation,
            descriptors: self.descriptors.permute_rows(perm),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<GraphInstance>,
    pub num_classes: usize,
    pub num_features: usize,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

pub fn adjacency_from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = Tensor::zeros(num_nodes, num_nodes);
    for &(u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::InvalidArgument(format!(
                "edge ({u}, {v}) outside a graph with {num_nodes} nodes"
            )));
        }
        if u != v {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
    }
    Ok(a)
}

fn validate_adjacency(a: &Tensor) -> Result<()> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return Err(Error::InvalidArgument(format!("self loop at node {i}")));
        }
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!("non-binary adjacency entry {v}")));
            }
            if v != a.get(j, i) {
                return Err(Error::InvalidArgument(format!("asymmetric adjacency at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / (a.row(i).iter().sum::<f64>() + 1.0).sqrt())
        .collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let aij = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if aij != 0.0 {
                out.set(i, j, inv_sqrt[i] * aij * inv_sqrt[j]);
            }
        }
    }
    out
}

/// Block-diagonal propagation matrix of a batch, stored as its dense blocks.
#[derive(Clone, Debug)]
pub struct BlockDiagonal {
    blocks: Vec<Tensor>,
    ranges: Vec<Range<usize>>,
    size: usize,
}

impl BlockDiagonal {
    pub fn new(blocks: Vec<Tensor>) -> Self {
        let mut ranges = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for b in &blocks {
            ranges.push(start..start + b.rows());
            start += b.rows();
        }
        Self {
            blocks,
            ranges,
            size: start,
        }
    }

    pub fn single(block: Tensor) -> Self {
        Self::new(vec![block])
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.size, self.size);
        for (b, r) in self.blocks.iter().zip(&self.ranges) {
            for i in 0..b.rows() {
                for j in 0..b.cols() {
                    out.set(r.start + i, r.start + j, b.get(i, j));
                }
            }
        }
        out
    }

    fn apply_blocks(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        if x.rows() != self.size {
            return Err(Error::Shape {
                op: "block_diagonal",
                lhs: (self.size, self.size),
                rhs: x.shape(),
            });
        }
        let c = x.cols();
        let mut out = Tensor::zeros(self.size, c);
        for (b, r) in self.blocks.iter().zip(&self.ranges) {
            for i in 0..b.rows() {
                let dst = r.start + i;
                for k in 0..b.cols() {
                    let w = if transpose { b.get(k, i) } else { b.get(i, k) };
                    if w == 0.0 {
                        continue;
                    }
                    let src = x.row(r.start + k);
                    for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        Ok(out)
    }
}

impl LeftLinear for BlockDiagonal {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_blocks(x, false)
    }

    fn apply_transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_blocks(x, true)
    }
}

/// Convenience: the propagation operator of a single graph.
pub fn single_graph_propagation(g: &GraphInstance) -> Arc<BlockDiagonal> {
    Arc::new(BlockDiagonal::single(g.propagation.clone()))
}
