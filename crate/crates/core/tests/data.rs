use std::path::PathBuf;

use qignn::graph::{make_batches, normalize_adjacency, parse_tu_dataset, stratified_folds, DEFAULT_MAX_CYCLE_LEN};
use qignn::lipschitz::spectral_norm;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn mutag_shape_and_labels() {
    let ds = parse_tu_dataset(&data_dir(), "MUTAG", DEFAULT_MAX_CYCLE_LEN).unwrap();
    assert_eq!(ds.len(), 188);
    assert_eq!(ds.num_classes, 2);
    assert_eq!(ds.num_features, 7);
    let positives = ds.labels().iter().filter(|&&y| y == 1).count();
    assert_eq!(positives, 125);
    let nodes: usize = ds.graphs.iter().map(|g| g.num_nodes()).sum();
    assert_eq!(nodes, 3371);
    for g in &ds.graphs {
        for r in 0..g.num_nodes() {
            assert_eq!(g.features.row(r).iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn mutag_propagation_is_normalized() {
    let ds = parse_tu_dataset(&data_dir(), "MUTAG", DEFAULT_MAX_CYCLE_LEN).unwrap();
    for g in &ds.graphs {
        assert_eq!(g.propagation, normalize_adjacency(&g.adjacency));
        assert!(spectral_norm(&g.propagation, 500, 1e-14) <= 1.0 + 1e-12);
        assert_eq!(g.propagation, g.propagation.transpose());
    }
}

#[test]
fn mutag_folds_are_stratified() {
    let ds = parse_tu_dataset(&data_dir(), "MUTAG", DEFAULT_MAX_CYCLE_LEN).unwrap();
    let labels = ds.labels();
    let folds = stratified_folds(&labels, 10, 42).unwrap();
    let mut seen = vec![0; ds.len()];
    for f in &folds {
        assert!(f.test.len() == 18 || f.test.len() == 19);
        let pos = f.test.iter().filter(|&&i| labels[i] == 1).count();
        assert!((12..=13).contains(&pos), "{pos}");
        for &i in &f.test {
            seen[i] += 1;
        }
        assert_eq!(f.train.len() + f.test.len(), ds.len());
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn mutag_batches_keep_per_graph_blocks() {
    let ds = parse_tu_dataset(&data_dir(), "MUTAG", DEFAULT_MAX_CYCLE_LEN).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batches = make_batches(&ds.graphs, &idx, 32, Some(7)).unwrap();
    assert_eq!(batches.len(), 6);
    for b in &batches {
        for (k, &gi) in b.indices.iter().enumerate() {
            assert_eq!(b.propagation.blocks()[k], ds.graphs[gi].propagation);
            assert_eq!(b.labels[k], ds.graphs[gi].label);
            let r = &b.ranges[k];
            assert_eq!(b.descriptors.slice_rows(r.start, r.end).unwrap(), ds.graphs[gi].descriptors);
        }
    }
}

#[test]
fn other_tu_datasets_are_reported_missing() {
    assert!(parse_tu_dataset(&data_dir(), "NCI1", DEFAULT_MAX_CYCLE_LEN).is_err());
}
