//! Plain-text dataset directories.
//!
//! ```text
//! edges.txt     one undirected edge per line: two 0-based node indices
//! features.csv  one row per node, comma-separated reals
//! labels.txt    one integer label per line
//! splits.json   {"train": [...], "val": [...], "test": [...]}
//! ```
//!
//! Blank lines and lines starting with `#` in the text files are ignored.
//! Duplicate edges (in either orientation) and self-loops are rejected.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeData};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn load_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| load_err(path, 0, e.to_string()))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_features(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(path, 0, e.to_string()))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            load_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if cols.is_some_and(|c| c != record.len()) {
            return Err(load_err(
                path,
                line,
                format!("expected {} values, found {}", cols.unwrap(), record.len()),
            ));
        }
        cols = Some(record.len());
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| load_err(path, line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(load_err(path, line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Tensor::from_vec(rows, cols.unwrap_or(0), data)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read(path)?;
    content_lines(&text)
        .map(|(n, l)| {
            l.parse()
                .map_err(|_| load_err(path, n, format!("not a non-negative integer label: {l:?}")))
        })
        .collect()
}

fn read_edges(path: &Path, num_nodes: usize) -> Result<Graph> {
    let text = read(path)?;
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for (n, line) in content_lines(&text) {
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(load_err(path, n, "expected two node indices"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| load_err(path, n, format!("not a node index: {s:?}")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a >= num_nodes || b >= num_nodes {
            return Err(load_err(path, n, format!("node index out of range for {num_nodes} nodes")));
        }
        if a == b {
            return Err(load_err(path, n, format!("self-loop on node {a}")));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(load_err(path, n, format!("duplicate edge ({a}, {b})")));
        }
        edges.push((a, b));
    }
    Graph::new(num_nodes, edges)
}

/// Loads and validates a dataset directory. The number of classes is one
/// more than the largest label.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Graph, NodeData)> {
    let dir = dir.as_ref();
    let features_path = dir.join(FEATURES_FILE);
    let features = read_features(&features_path)?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = read_labels(&labels_path)?;
    if labels.len() != features.rows() {
        return Err(load_err(
            &labels_path,
            0,
            format!("{} labels but {} feature rows", labels.len(), features.rows()),
        ));
    }
    let graph = read_edges(&dir.join(EDGES_FILE), labels.len())?;
    let splits_path = dir.join(SPLITS_FILE);
    let splits: Splits =
        serde_json::from_str(&read(&splits_path)?).map_err(|e| load_err(&splits_path, e.line(), e.to_string()))?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = NodeData {
        features,
        labels,
        num_classes,
        train_idx: splits.train,
        val_idx: splits.val,
        test_idx: splits.test,
    };
    data.validate().map_err(|e| load_err(&splits_path, 0, e.to_string()))?;
    Ok((graph, data))
}

fn create(path: PathBuf) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes `graph` and `data` in the directory format, creating `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, graph: &Graph, data: &NodeData) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut w = create(dir.join(EDGES_FILE))?;
    for (i, j) in graph.edges() {
        writeln!(w, "{i} {j}")?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join(FEATURES_FILE))?;
    for r in 0..data.features.rows() {
        w.write_record(data.features.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;

    let mut w = create(dir.join(LABELS_FILE))?;
    for y in &data.labels {
        writeln!(w, "{y}")?;
    }
    w.flush()?;

    let splits = Splits {
        train: data.train_idx.clone(),
        val: data.val_idx.clone(),
        test: data.test_idx.clone(),
    };
    fs::write(dir.join(SPLITS_FILE), serde_json::to_string(&splits)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};

    fn write_dir(edges: &str, features: &str, labels: &str, splits: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(EDGES_FILE), edges).unwrap();
        fs::write(dir.path().join(FEATURES_FILE), features).unwrap();
        fs::write(dir.path().join(LABELS_FILE), labels).unwrap();
        fs::write(dir.path().join(SPLITS_FILE), splits).unwrap();
        dir
    }

    const SPLITS: &str = r#"{"train": [0], "val": [1], "test": [2]}"#;

    #[test]
    fn round_trip_through_directory() {
        let (g, d) = generate_sbm(&SbmSpec {
            num_nodes: 30,
            num_classes: 3,
            p_intra: 0.3,
            p_inter: 0.05,
            feature_dim: 4,
            feature_noise: 0.7,
            seed: 1,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &g, &d).unwrap();
        let (g2, d2) = load_dataset(dir.path()).unwrap();
        assert_eq!(g2, g);
        assert_eq!(d2, d);
    }

    #[test]
    fn loads_minimal_dataset_with_comments() {
        let dir = write_dir("# path\n0 1\n\n1 2\n", "1,0\n0, 1\n1,1\n", "0\n1\n1\n", SPLITS);
        let (g, d) = load_dataset(dir.path()).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.features.get(1, 1), 1.0);
    }

    fn load_error(dir: &tempfile::TempDir) -> (String, usize) {
        match load_dataset(dir.path()) {
            Err(Error::Load { path, line, .. }) => (path.file_name().unwrap().to_string_lossy().into_owned(), line),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_file_and_line() {
        let feats = "1,0\n0,1\n1,1\n";
        let labels = "0\n1\n1\n";
        let dup = write_dir("0 1\n1 2\n1 0\n", feats, labels, SPLITS);
        assert_eq!(load_error(&dup), (EDGES_FILE.into(), 3));
        let self_loop = write_dir("0 1\n2 2\n", feats, labels, SPLITS);
        assert_eq!(load_error(&self_loop), (EDGES_FILE.into(), 2));
        let range = write_dir("0 5\n", feats, labels, SPLITS);
        assert_eq!(load_error(&range), (EDGES_FILE.into(), 1));
        let junk = write_dir("0 1 2\n", feats, labels, SPLITS);
        assert_eq!(load_error(&junk), (EDGES_FILE.into(), 1));
        let ragged = write_dir("0 1\n", "1,0\n0\n1,1\n", labels, SPLITS);
        assert_eq!(load_error(&ragged), (FEATURES_FILE.into(), 2));
        let nan = write_dir("0 1\n", "1,0\n0,x\n1,1\n", labels, SPLITS);
        assert_eq!(load_error(&nan), (FEATURES_FILE.into(), 2));
        let bad_label = write_dir("0 1\n", feats, "0\n-1\n1\n", SPLITS);
        assert_eq!(load_error(&bad_label), (LABELS_FILE.into(), 2));
        let overlap = write_dir("0 1\n", feats, labels, r#"{"train": [0], "val": [0], "test": [2]}"#);
        assert_eq!(load_error(&overlap).0, SPLITS_FILE);
        let missing = write_dir("0 1\n", feats, labels, r#"{"train": [0]}"#);
        assert_eq!(load_error(&missing).0, SPLITS_FILE);
    }
}
