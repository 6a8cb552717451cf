//! Reader for the TU Dortmund flat-file graph classification format.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Dataset, GraphInstance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads `<root>/<name>_*.txt` (also accepting `<root>/<name>/<name>_*.txt`).
///
/// Node labels become a one-hot block, node attributes (when present) are
/// appended after it, edges are symmetrized and graph labels are remapped to
/// `0..C` in sorted order.
pub fn parse_tu_dataset(root: &Path, name: &str, max_cycle_len: usize) -> Result<Dataset> {
    let dir = if root.join(format!("{name}_A.txt")).exists() {
        root.to_path_buf()
    } else {
        root.join(name)
    };
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));

    let indicator: Vec<usize> = read_lines(&file("graph_indicator"), true)?
        .into_iter()
        .map(|(line, s)| parse_int(&file("graph_indicator"), line, &s))
        .collect::<Result<_>>()?;
    let graph_labels: Vec<i64> = read_lines(&file("graph_labels"), true)?
        .into_iter()
        .map(|(line, s)| {
            s.trim()
                .parse::<i64>()
                .map_err(|e| parse_err(&file("graph_labels"), line, e))
        })
        .collect::<Result<_>>()?;
    let edges: Vec<(usize, usize)> = read_lines(&file("A"), true)?
        .into_iter()
        .map(|(line, s)| {
            let mut it = s.split(',');
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse {
                    file: file("A"),
                    line,
                    msg: format!("expected 'i, j', got '{s}'"),
                });
            };
            Ok((parse_int(&file("A"), line, a)?, parse_int(&file("A"), line, b)?))
        })
        .collect::<Result<_>>()?;

    let node_labels: Option<Vec<i64>> = match read_lines(&file("node_labels"), false)? {
        lines if lines.is_empty() => None,
        lines => Some(
            lines
                .into_iter()
                .map(|(line, s)| {
                    s.trim()
                        .parse::<i64>()
                        .map_err(|e| parse_err(&file("node_labels"), line, e))
                })
                .collect::<Result<_>>()?,
        ),
    };
    let node_attrs: Option<Vec<Vec<f64>>> = match read_lines(&file("node_attributes"), false)? {
        lines if lines.is_empty() => None,
        lines => Some(
            lines
                .into_iter()
                .map(|(line, s)| {
                    s.split(',')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|e| parse_err(&file("node_attributes"), line, e))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?,
        ),
    };

    let num_nodes = indicator.len();
    let num_graphs = graph_labels.len();
    if let Some(l) = &node_labels {
        check_len(&file("node_labels"), l.len(), num_nodes)?;
    }
    if let Some(a) = &node_attrs {
        check_len(&file("node_attributes"), a.len(), num_nodes)?;
    }

    // Global node id (0-based) -> (graph, local index).
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    let mut local = vec![0usize; num_nodes];
    for (node, &g) in indicator.iter().enumerate() {
        if g == 0 || g > num_graphs {
            return Err(Error::Parse {
                file: file("graph_indicator"),
                line: node + 1,
                msg: format!("graph id {g} outside 1..={num_graphs}"),
            });
        }
        local[node] = members[g - 1].len();
        members[g - 1].push(node);
    }

    let mut graph_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (k, &(u, v)) in edges.iter().enumerate() {
        for x in [u, v] {
            if x == 0 || x > num_nodes {
                return Err(Error::Parse {
                    file: file("A"),
                    line: k + 1,
                    msg: format!("edge references unknown node {x}"),
                });
            }
        }
        let (gu, gv) = (indicator[u - 1], indicator[v - 1]);
        if gu != gv {
            return Err(Error::Parse {
                file: file("A"),
                line: k + 1,
                msg: format!("edge ({u}, {v}) crosses graphs {gu} and {gv}"),
            });
        }
        graph_edges[gu - 1].push((local[u - 1], local[v - 1]));
    }

    let label_values: Vec<i64> = graph_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let node_label_values: Vec<i64> = node_labels
        .as_ref()
        .map(|l| l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
        .unwrap_or_default();
    let attr_dim = node_attrs.as_ref().map_or(0, |a| a.first().map_or(0, Vec::len));
    let num_features = node_label_values.len() + attr_dim;
    if num_features == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset {name} has neither node labels nor node attributes"
        )));
    }

    let graphs = members
        .par_iter()
        .zip(graph_edges.par_iter())
        .zip(graph_labels.par_iter())
        .map(|((nodes, edges), label)| {
            let mut x = Tensor::zeros(nodes.len(), num_features);
            for (i, &node) in nodes.iter().enumerate() {
                if let Some(l) = &node_labels {
                    let k = node_label_values.binary_search(&l[node]).expect("label indexed");
                    x.set(i, k, 1.0);
                }
                if let Some(a) = &node_attrs {
                    if a[node].len() != attr_dim {
                        return Err(Error::Parse {
                            file: file("node_attributes"),
                            line: node + 1,
                            msg: format!("expected {attr_dim} attributes, got {}", a[node].len()),
                        });
                    }
                    for (k, v) in a[node].iter().enumerate() {
                        x.set(i, node_label_values.len() + k, *v);
                    }
                }
            }
            let y = label_values.binary_search(label).expect("label indexed");
            GraphInstance::from_edges(nodes.len(), edges, x, y, max_cycle_len)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: label_values.len(),
        num_features,
    })
}

fn read_lines(path: &PathBuf, required: bool) -> Result<Vec<(usize, String)>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return if required {
                Err(Error::MissingFile(path.clone()))
            } else {
                Ok(Vec::new())
            };
        }
        Err(e) => return Err(e.into()),
    };
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_int(file: &Path, line: usize, s: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|e| parse_err(file, line, e))
}

fn parse_err(file: &Path, line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

fn check_len(file: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            line: got,
            msg: format!("expected {want} lines, found {got}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_fixture(dir: &Path) {
        // Graph 1: triangle on nodes 1..3; graph 2: single edge on nodes 4..5.
        fs::write(dir.join("TOY_A.txt"), "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n").unwrap();
        fs::write(dir.join("TOY_graph_indicator.txt"), "1\n1\n1\n2\n2\n").unwrap();
        fs::write(dir.join("TOY_graph_labels.txt"), "-1\n1\n").unwrap();
        fs::write(dir.join("TOY_node_labels.txt"), "0\n2\n0\n2\n2\n").unwrap();
    }

    #[test]
    fn parses_two_graph_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let ds = parse_tu_dataset(tmp.path(), "TOY", 6).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.num_features, 2);
        assert_eq!(ds.graphs[0].num_nodes(), 3);
        assert_eq!(ds.graphs[1].num_nodes(), 2);
        assert_eq!(ds.labels(), vec![0, 1]);
        let a = &ds.graphs[1].adjacency;
        assert_eq!(a, &a.transpose());
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(ds.graphs[0].features.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn one_directional_edges_are_symmetrized() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join("TOY_A.txt"), "1, 2\n2, 3\n4, 5\n").unwrap();
        let ds = parse_tu_dataset(tmp.path(), "TOY", 6).unwrap();
        let a = &ds.graphs[0].adjacency;
        assert_eq!(a, &a.transpose());
        assert_eq!(a.get(2, 1), 1.0);
    }

    #[test]
    fn attributes_follow_one_hot_block() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(
            tmp.path().join("TOY_node_attributes.txt"),
            "0.5, 1\n1.5, 2\n2.5, 3\n3.5, 4\n4.5, 5\n",
        )
        .unwrap();
        let ds = parse_tu_dataset(tmp.path(), "TOY", 6).unwrap();
        assert_eq!(ds.num_features, 4);
        assert_eq!(ds.graphs[1].features.row(0), &[0.0, 1.0, 3.5, 4.0]);
    }

    #[test]
    fn missing_required_file_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::remove_file(tmp.path().join("TOY_graph_labels.txt")).unwrap();
        assert!(matches!(
            parse_tu_dataset(tmp.path(), "TOY", 6),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn non_integer_id_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join("TOY_A.txt"), "1, x\n").unwrap();
        assert!(matches!(
            parse_tu_dataset(tmp.path(), "TOY", 6),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn unknown_node_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::write(tmp.path().join("TOY_A.txt"), "1, 9\n").unwrap();
        assert!(matches!(
            parse_tu_dataset(tmp.path(), "TOY", 6),
            Err(Error::Parse { .. })
        ));
    }
}
