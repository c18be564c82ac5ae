//! TUDataset text format.
//!
//! A dataset `NAME` in a directory consists of
//!
//! - `NAME_A.txt`: one `i, j` pair per line, 1-indexed global node ids;
//! - `NAME_graph_indicator.txt`: line `i` holds the graph id of node `i`;
//! - `NAME_graph_labels.txt`: one label per graph (absent for unlabeled data);
//! - `NAME_node_attributes.txt` (optional): comma-separated reals per node;
//! - `NAME_node_labels.txt` (optional): one integer per node, one-hot encoded.
//!
//! Attributes win over node labels; with neither, every node gets the constant
//! feature `1.0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Domain, Graph};
use crate::tensor::Tensor;

fn file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(path: &Path, line: usize, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<T>()
                .map_err(|_| parse_err(path, line, format!("cannot parse `{f}`")))
        })
        .collect()
}

fn parse_single<T: std::str::FromStr>(path: &Path, line: usize, text: &str) -> Result<T> {
    let fields: Vec<T> = parse_fields(path, line, text)?;
    let mut it = fields.into_iter();
    match (it.next(), it.next()) {
        (Some(v), None) => Ok(v),
        _ => Err(parse_err(path, line, "expected exactly one value")),
    }
}

/// Loads dataset `name` from `dir`.
pub fn load_tudataset(dir: &Path, name: &str) -> Result<Domain> {
    let indicator_path = file(dir, name, "graph_indicator");
    let indicator_text = read(&indicator_path)?;
    let mut node_graph = Vec::new();
    for (line, rec) in records(&indicator_text) {
        node_graph.push(parse_single::<i64>(&indicator_path, line, rec)?);
    }
    let graph_ids: Vec<i64> = node_graph
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let graph_index: BTreeMap<i64, usize> =
        graph_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let num_graphs = graph_ids.len();

    // local index of each global node within its graph
    let mut sizes = vec![0usize; num_graphs];
    let mut local = Vec::with_capacity(node_graph.len());
    let mut owner = Vec::with_capacity(node_graph.len());
    for g in &node_graph {
        let gi = graph_index[g];
        local.push(sizes[gi]);
        owner.push(gi);
        sizes[gi] += 1;
    }
    let num_nodes = node_graph.len();

    let mut adjacency: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(n, n)).collect();
    let edges_path = file(dir, name, "A");
    let edges_text = read(&edges_path)?;
    for (line, rec) in records(&edges_text) {
        let pair: Vec<usize> = parse_fields(&edges_path, line, rec)?;
        let [src, dst] = pair[..] else {
            return Err(parse_err(&edges_path, line, "expected `i, j`"));
        };
        for v in [src, dst] {
            if v == 0 || v > num_nodes {
                return Err(parse_err(
                    &edges_path,
                    line,
                    format!("node {v} outside 1..={num_nodes}"),
                ));
            }
        }
        let (a, b) = (src - 1, dst - 1);
        if owner[a] != owner[b] {
            return Err(Error::InconsistentIndicator {
                src,
                dst,
                src_graph: graph_ids[owner[a]] as usize,
                dst_graph: graph_ids[owner[b]] as usize,
            });
        }
        if a == b {
            continue;
        }
        let m = &mut adjacency[owner[a]];
        m.set(local[a], local[b], 1.0);
        m.set(local[b], local[a], 1.0);
    }

    let (node_features, feature_dim) = load_node_features(dir, name, num_nodes)?;

    let labels_path = file(dir, name, "graph_labels");
    let labels = match read_optional(&labels_path)? {
        Some(text) => {
            let mut raw = Vec::new();
            for (line, rec) in records(&text) {
                raw.push(parse_single::<i64>(&labels_path, line, rec)?);
            }
            if raw.len() != num_graphs {
                return Err(parse_err(
                    &labels_path,
                    raw.len(),
                    format!("{} labels for {num_graphs} graphs", raw.len()),
                ));
            }
            Some(raw)
        }
        None => None,
    };
    let (labels, num_classes) = match labels {
        Some(raw) => {
            let distinct: BTreeMap<i64, usize> = raw
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            let c = distinct.len();
            (raw.iter().map(|v| Some(distinct[v])).collect(), c)
        }
        None => (vec![None; num_graphs], 0),
    };

    let mut feats: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&n| Vec::with_capacity(n * feature_dim))
        .collect();
    for (node, row) in node_features.chunks(feature_dim).enumerate() {
        feats[owner[node]].extend_from_slice(row);
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (gi, (adj, f)) in adjacency.into_iter().zip(feats).enumerate() {
        let n = sizes[gi];
        graphs.push(Graph::new(
            adj,
            Tensor::from_vec(n, feature_dim, f)?,
            labels[gi],
        )?);
    }
    Domain::new(graphs, feature_dim, num_classes)
}

fn load_node_features(dir: &Path, name: &str, num_nodes: usize) -> Result<(Vec<f64>, usize)> {
    let attr_path = file(dir, name, "node_attributes");
    if let Some(text) = read_optional(&attr_path)? {
        let mut dim = None;
        let mut out = Vec::new();
        for (line, rec) in records(&text) {
            let row: Vec<f64> = parse_fields(&attr_path, line, rec)?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(parse_err(
                        &attr_path,
                        line,
                        format!("expected {d} attributes, found {}", row.len()),
                    ))
                }
                _ => {}
            }
            out.extend(row);
        }
        let dim = dim.unwrap_or(1);
        if out.len() != num_nodes * dim {
            return Err(parse_err(
                &attr_path,
                out.len() / dim,
                format!("{} attribute rows for {num_nodes} nodes", out.len() / dim),
            ));
        }
        return Ok((out, dim));
    }

    let labels_path = file(dir, name, "node_labels");
    if let Some(text) = read_optional(&labels_path)? {
        let mut raw = Vec::new();
        for (line, rec) in records(&text) {
            raw.push(parse_single::<i64>(&labels_path, line, rec)?);
        }
        if raw.len() != num_nodes {
            return Err(parse_err(
                &labels_path,
                raw.len(),
                format!("{} node labels for {num_nodes} nodes", raw.len()),
            ));
        }
        let distinct: BTreeMap<i64, usize> = raw
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        let dim = distinct.len().max(1);
        let mut out = vec![0.0; num_nodes * dim];
        for (i, v) in raw.iter().enumerate() {
            out[i * dim + distinct[v]] = 1.0;
        }
        return Ok((out, dim));
    }

    Ok((vec![1.0; num_nodes], 1))
}

/// Writes `domain` as dataset `name` into `dir` (created if missing).
///
/// Features go to `node_attributes` using shortest round-trip formatting, so a
/// reload reproduces them bit for bit. Labels are written only for labeled domains.
pub fn export_tudataset(domain: &Domain, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    let mut indicator = String::new();
    let mut attrs = String::new();
    let mut labels = String::new();
    let mut offset = 0usize;
    for (gi, g) in domain.graphs.iter().enumerate() {
        let n = g.num_nodes();
        for i in 0..n {
            for j in 0..n {
                if i != j && g.adjacency.get(i, j) > 0.0 {
                    let _ = writeln!(edges, "{}, {}", offset + i + 1, offset + j + 1);
                }
            }
            let _ = writeln!(indicator, "{}", gi + 1);
            let row: Vec<String> = g.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(attrs, "{}", row.join(", "));
        }
        if let Some(y) = g.label {
            let _ = writeln!(labels, "{y}");
        }
        offset += n;
    }
    let write = |suffix: &str, text: &str| {
        let path = file(dir, name, suffix);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("A", &edges)?;
    write("graph_indicator", &indicator)?;
    write("node_attributes", &attrs)?;
    if domain.is_labeled() {
        write("graph_labels", &labels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, name: &str, files: &[(&str, &str)]) {
        for (suffix, body) in files {
            fs::write(file(dir, name, suffix), body).unwrap();
        }
    }

    #[test]
    fn single_isolated_node() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "ONE",
            &[("A", ""), ("graph_indicator", "1\n"), ("graph_labels", "5\n")],
        );
        let d = load_tudataset(dir.path(), "ONE").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.graphs[0].num_nodes(), 1);
        assert_eq!(d.graphs[0].adjacency, Tensor::zeros(1, 1));
        assert_eq!(d.graphs[0].features, Tensor::full(1, 1, 1.0));
        assert_eq!(d.graphs[0].label, Some(0));
        assert_eq!(d.num_classes, 1);
    }

    #[test]
    fn cross_graph_edge_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "BAD",
            &[
                ("A", "1, 3\n3, 1\n"),
                ("graph_indicator", "1\n1\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
        assert!(matches!(
            load_tudataset(dir.path(), "BAD"),
            Err(Error::InconsistentIndicator {
                src: 1,
                dst: 3,
                src_graph: 1,
                dst_graph: 2
            })
        ));
    }

    #[test]
    fn parse_error_carries_line() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "P",
            &[
                ("A", "1, 2\n2, x\n"),
                ("graph_indicator", "1\n1\n"),
                ("graph_labels", "0\n"),
            ],
        );
        match load_tudataset(dir.path(), "P") {
            Err(Error::Parse { file, line, .. }) => {
                assert!(file.ends_with("P_A.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn node_labels_one_hot_and_attributes_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "NL",
            &[
                ("A", "1,2\n2,1\n"),
                ("graph_indicator", "1\n1\n"),
                ("graph_labels", "1\n"),
                ("node_labels", "7\n3\n"),
            ],
        );
        let d = load_tudataset(dir.path(), "NL").unwrap();
        assert_eq!(d.feature_dim, 2);
        assert_eq!(
            d.graphs[0].features,
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])
        );
        fs::write(file(dir.path(), "NL", "node_attributes"), "0.5\n-2\n").unwrap();
        let d = load_tudataset(dir.path(), "NL").unwrap();
        assert_eq!(d.feature_dim, 1);
        assert_eq!(d.graphs[0].features.data(), &[0.5, -2.0]);
    }

    #[test]
    fn missing_labels_give_unlabeled_domain() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "U",
            &[("A", "1, 2\n"), ("graph_indicator", "1\n1\n")],
        );
        let d = load_tudataset(dir.path(), "U").unwrap();
        assert_eq!(d.num_classes, 0);
        assert!(!d.is_labeled());
        assert_eq!(d.graphs[0].edges(), vec![(0, 1)]);
    }
}
