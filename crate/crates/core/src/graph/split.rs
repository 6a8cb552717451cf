use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BlockDiagonal, GraphInstance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified k-fold split. Each class is shuffled with `seed` and dealt
/// round-robin over the folds, continuing where the previous class stopped so
/// fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            test_sets[next].push(i);
            next = (next + 1) % k;
        }
    }

    Ok(test_sets
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; labels.len()];
            for &i in &test {
                in_test[i] = true;
            }
            let train = (0..labels.len()).filter(|i| !in_test[*i]).collect();
            Fold { train, test }
        })
        .collect())
}

/// Several graphs stacked into one block-diagonal system.
#[derive(Clone, Debug)]
pub struct BatchedGraphs {
    pub propagation: Arc<BlockDiagonal>,
    pub features: Tensor,
    pub descriptors: Tensor,
    pub ranges: Vec<Range<usize>>,
    pub labels: Vec<usize>,
    /// Dataset indices of the member graphs.
    pub indices: Vec<usize>,
}

impl BatchedGraphs {
    pub fn from_graphs(graphs: &[GraphInstance], indices: &[usize]) -> Result<Self> {
        let members: Vec<&GraphInstance> = indices.iter().map(|&i| &graphs[i]).collect();
        let propagation = Arc::new(BlockDiagonal::new(
            members.iter().map(|g| g.propagation.clone()).collect(),
        ));
        let features = Tensor::concat_rows(&members.iter().map(|g| &g.features).collect::<Vec<_>>())?;
        let descriptors =
            Tensor::concat_rows(&members.iter().map(|g| &g.descriptors).collect::<Vec<_>>())?;
        Ok(Self {
            ranges: propagation.ranges().to_vec(),
            propagation,
            features,
            descriptors,
            labels: members.iter().map(|g| g.label).collect(),
            indices: indices.to_vec(),
        })
    }

    pub fn single(graph: &GraphInstance) -> Self {
        Self::from_graphs(std::slice::from_ref(graph), &[0]).expect("single graph batch")
    }

    pub fn num_graphs(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Splits `indices` into batches of at most `batch_size` graphs. With a seed
/// the order is shuffled first; without one the given order is kept.
pub fn make_batches(
    graphs: &[GraphInstance],
    indices: &[usize],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<BatchedGraphs>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| BatchedGraphs::from_graphs(graphs, chunk))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphInstance;

    fn toy_graphs(n: usize) -> Vec<GraphInstance> {
        (0..n)
            .map(|k| {
                let nodes = 2 + k % 3;
                let edges: Vec<(usize, usize)> = (0..nodes - 1).map(|i| (i, i + 1)).collect();
                GraphInstance::from_edges(nodes, &edges, Tensor::full(nodes, 2, 1.0), k % 2, 6).unwrap()
            })
            .collect()
    }

    #[test]
    fn balanced_classes_split_evenly() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let folds = stratified_folds(&labels, 5, 42).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            let ones = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(f.test.len(), 2);
            assert_eq!(ones, 1);
        }
    }

    #[test]
    fn folds_partition_indices() {
        let labels: Vec<usize> = (0..37).map(|i| (i * 7) % 3).collect();
        let folds = stratified_folds(&labels, 4, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 37);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
    }

    #[test]
    fn folds_are_deterministic_per_seed() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        assert_eq!(
            stratified_folds(&labels, 3, 7).unwrap(),
            stratified_folds(&labels, 3, 7).unwrap()
        );
        assert_ne!(
            stratified_folds(&labels, 3, 7).unwrap(),
            stratified_folds(&labels, 3, 8).unwrap()
        );
    }

    #[test]
    fn small_class_rejected() {
        let labels = vec![0, 0, 0, 1];
        assert!(stratified_folds(&labels, 2, 0).is_err());
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }

    #[test]
    fn batch_sizes_and_block_structure() {
        let graphs = toy_graphs(5);
        let idx: Vec<usize> = (0..5).collect();
        let batches = make_batches(&graphs, &idx, 2, Some(3)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.num_graphs()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        for b in &batches {
            let dense = b.propagation.to_dense();
            for (gi, r) in b.ranges.iter().enumerate() {
                let g = &graphs[b.indices[gi]];
                for i in 0..dense.rows() {
                    for j in 0..dense.cols() {
                        let inside = r.contains(&i) && r.contains(&j);
                        if r.contains(&i) && !inside {
                            assert_eq!(dense.get(i, j), 0.0);
                        }
                        if inside {
                            let want = g.propagation.get(i - r.start, j - r.start);
                            assert_eq!(dense.get(i, j).to_bits(), want.to_bits());
                        }
                    }
                }
            }
            let total: usize = b.ranges.iter().map(|r| r.len()).sum();
            assert_eq!(total, b.num_nodes());
        }
    }
}
