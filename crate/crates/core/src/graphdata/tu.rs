//! Reader for the TU graph-kernel text format.
//!
//! A dataset `DS` lives in one directory as:
//! - `DS_A.txt`: `i, j` per line, 1-based global node ids (both directions)
//! - `DS_graph_indicator.txt`: graph id (1-based) of node `i` on line `i`
//! - `DS_graph_labels.txt`: class label of graph `g` on line `g`
//! - `DS_node_labels.txt` (optional): integer label per node
//! - `DS_node_attributes.txt` (optional): comma-separated reals per node

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Graph, GraphDataset, Result};
use crate::linalg::Matrix;

/// Name of the two-graph fixture written by [`write_fixture`].
pub const FIXTURE_NAME: &str = "FIXTURE";

fn dataset_prefix(dir: &Path) -> Result<String> {
    let entries = fs::read_dir(dir).map_err(|_| DataError::MissingFile(dir.to_path_buf()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix("_A.txt").map(str::to_owned))
        .collect();
    names.sort();
    names
        .into_iter()
        .next()
        .ok_or_else(|| DataError::MissingFile(dir.join("<DS>_A.txt")))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_owned()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file_label(path),
        line,
        message: message.into(),
    }
}

fn parse_int(path: &Path, line: usize, tok: &str) -> Result<i64> {
    tok.trim()
        .parse::<i64>()
        .map_err(|_| parse_err(path, line, format!("expected integer, found {tok:?}")))
}

/// Loads the TU dataset stored in `dir`.
pub fn load_tu_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let prefix = dataset_prefix(dir)?;
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{prefix}_{suffix}.txt")) };

    let labels_path = file("graph_labels");
    let raw_labels: Vec<i64> = read_lines(&labels_path)?
        .iter()
        .map(|(ln, l)| parse_int(&labels_path, *ln, l))
        .collect::<Result<_>>()?;
    let num_graphs = raw_labels.len();

    let ind_path = file("graph_indicator");
    let indicator_lines = read_lines(&ind_path)?;
    let num_nodes = indicator_lines.len();
    // global node (0-based) -> (graph, local index)
    let mut node_home = Vec::with_capacity(num_nodes);
    let mut graph_sizes = vec![0usize; num_graphs];
    for (ln, l) in &indicator_lines {
        let g = parse_int(&ind_path, *ln, l)?;
        if g < 1 || g as usize > num_graphs {
            return Err(parse_err(
                &ind_path,
                *ln,
                format!("graph id {g} outside 1..={num_graphs} (graph_labels has {num_graphs} lines)"),
            ));
        }
        let g = g as usize - 1;
        node_home.push((g, graph_sizes[g]));
        graph_sizes[g] += 1;
    }
    if let Some(empty) = graph_sizes.iter().position(|&s| s == 0) {
        return Err(DataError::InvalidGraph(format!(
            "graph {} has no nodes in {}",
            empty + 1,
            file_label(&ind_path)
        )));
    }

    let a_path = file("A");
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (ln, l) in read_lines(&a_path)? {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(&a_path, ln, format!("expected `i, j`, found {l:?}")));
        };
        let endpoint = |tok: &str| -> Result<usize> {
            let v = parse_int(&a_path, ln, tok)?;
            if v < 1 || v as usize > num_nodes {
                return Err(DataError::IndexOutOfRange {
                    file: file_label(&a_path),
                    line: ln,
                    index: v.max(0) as usize,
                    limit: num_nodes,
                });
            }
            Ok(v as usize - 1)
        };
        let (i, j) = (endpoint(a)?, endpoint(b)?);
        let (gi, li) = node_home[i];
        let (gj, lj) = node_home[j];
        if gi != gj {
            return Err(parse_err(
                &a_path,
                ln,
                format!("edge joins graphs {} and {}", gi + 1, gj + 1),
            ));
        }
        edges[gi].push((li, lj));
    }

    let features = node_features(&file("node_attributes"), &file("node_labels"), num_nodes)?;

    // Dense 0-based graph labels.
    let distinct: BTreeSet<i64> = raw_labels.iter().copied().collect();
    let remap = |v: i64| distinct.iter().position(|&d| d == v).unwrap();
    let dim = features.cols();
    let mut per_graph: Vec<Matrix> = graph_sizes.iter().map(|&n| Matrix::zeros(n, dim)).collect();
    for (node, &(g, local)) in node_home.iter().enumerate() {
        per_graph[g].row_mut(local).copy_from_slice(features.row(node));
    }
    let graphs = per_graph
        .into_iter()
        .zip(edges)
        .enumerate()
        .map(|(g, (f, e))| Graph::new(graph_sizes[g], e, f, remap(raw_labels[g])))
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(prefix, graphs, distinct.len(), dim)
}

fn node_features(attr_path: &Path, label_path: &Path, num_nodes: usize) -> Result<Matrix> {
    if attr_path.exists() {
        let lines = read_lines(attr_path)?;
        if lines.len() != num_nodes {
            return Err(parse_err(
                attr_path,
                lines.len(),
                format!("{} attribute rows for {num_nodes} nodes", lines.len()),
            ));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_nodes);
        for (ln, l) in &lines {
            let row = l
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(attr_path, *ln, format!("bad attribute {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(parse_err(attr_path, *ln, "ragged attribute rows"));
                }
            }
            rows.push(row);
        }
        let dim = rows[0].len();
        return Ok(Matrix::from_vec(num_nodes, dim, rows.concat()));
    }
    if label_path.exists() {
        let lines = read_lines(label_path)?;
        if lines.len() != num_nodes {
            return Err(parse_err(
                label_path,
                lines.len(),
                format!("{} node labels for {num_nodes} nodes", lines.len()),
            ));
        }
        let labels = lines
            .iter()
            .map(|(ln, l)| {
                let v = parse_int(label_path, *ln, l)?;
                usize::try_from(v).map_err(|_| parse_err(label_path, *ln, "negative node label"))
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = labels.iter().max().map_or(1, |m| m + 1);
        let mut f = Matrix::zeros(num_nodes, dim);
        for (i, &l) in labels.iter().enumerate() {
            f.set(i, l, 1.0);
        }
        return Ok(f);
    }
    Ok(Matrix::from_vec(num_nodes, 1, vec![1.0; num_nodes]))
}

/// Writes a two-graph dataset (a triangle labelled 1 and a single edge
/// labelled 2) into `dir`.
pub fn write_fixture(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let write = |suffix: &str, body: &str| fs::write(dir.join(format!("{FIXTURE_NAME}_{suffix}.txt")), body);
    write("A", "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n")?;
    write("graph_indicator", "1\n1\n1\n2\n2\n")?;
    write("graph_labels", "1\n2\n")?;
    write("node_labels", "0\n1\n0\n1\n1\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ds(dir: &Path, a: &str, ind: &str, labels: &str) {
        fs::write(dir.join("T_A.txt"), a).unwrap();
        fs::write(dir.join("T_graph_indicator.txt"), ind).unwrap();
        fs::write(dir.join("T_graph_labels.txt"), labels).unwrap();
    }

    #[test]
    fn fixture_loads() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path()).unwrap();
        let d = load_tu_dataset(tmp.path()).unwrap();
        assert_eq!(d.name, FIXTURE_NAME);
        assert_eq!(d.len(), 2);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.feature_dim, 2);
        assert_eq!(d.graphs[0].num_nodes(), 3);
        assert_eq!(d.graphs[1].num_nodes(), 2);
        assert_eq!(d.graphs[0].edges().len(), 3);
        assert_eq!(d.graphs[1].edges().len(), 1);
        assert_eq!(d.graphs[0].label(), 0);
        assert_eq!(d.graphs[1].label(), 1);
        assert_eq!(d.graphs[1].features().row(0), &[0.0, 1.0]);
    }

    #[test]
    fn edgeless_single_node_graph() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "", "1\n", "0\n");
        let d = load_tu_dataset(tmp.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.graphs[0].edges().len(), 0);
        assert_eq!(d.feature_dim, 1);
    }

    #[test]
    fn indicator_beyond_labels_is_parse_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "", "1\n2\n3\n", "0\n1\n");
        let err = load_tu_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn dangling_edge_endpoint() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "1, 2\n2, 9\n", "1\n1\n", "0\n");
        let err = load_tu_dataset(tmp.path()).unwrap_err();
        assert!(
            matches!(err, DataError::IndexOutOfRange { line: 2, index: 9, .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_files() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tu_dataset(tmp.path()),
            Err(DataError::MissingFile(_))
        ));
        fs::write(tmp.path().join("T_A.txt"), "").unwrap();
        assert!(matches!(
            load_tu_dataset(tmp.path()),
            Err(DataError::MissingFile(_))
        ));
    }

    #[test]
    fn garbage_line_reports_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "1, 2\nx, 1\n", "1\n1\n", "0\n");
        let err = load_tu_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_graph_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "", "1\n1\n", "0\n1\n");
        assert!(matches!(
            load_tu_dataset(tmp.path()),
            Err(DataError::InvalidGraph(_))
        ));
    }

    #[test]
    fn attributes_take_precedence() {
        let tmp = tempfile::tempdir().unwrap();
        write_ds(tmp.path(), "1, 2\n2, 1\n", "1\n1\n", "5\n");
        fs::write(tmp.path().join("T_node_attributes.txt"), "0.5, 1\n-2, 3.25\n").unwrap();
        fs::write(tmp.path().join("T_node_labels.txt"), "0\n7\n").unwrap();
        let d = load_tu_dataset(tmp.path()).unwrap();
        assert_eq!(d.feature_dim, 2);
        assert_eq!(d.graphs[0].features().row(1), &[-2.0, 3.25]);
        assert_eq!(d.graphs[0].label(), 0);
    }
}
