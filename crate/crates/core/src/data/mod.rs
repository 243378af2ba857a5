//! Portable on-disk dataset format, splits, and embedding export.
//!
//! A dataset directory holds `meta.json`, `edges.tsv`, `features.csv` and
//! `labels.tsv`. An optional `splits.json` pins the train/val/test split and
//! an optional `node_map.tsv` records original node ids after re-indexing.

pub mod raw;
pub mod synth;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge, Edge, Graph, UNLABELED};
use crate::rng;

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const NODE_MAP_FILE: &str = "node_map.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_features: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Meta {
    pub fn describe(graph: &Graph, name: &str) -> Meta {
        Meta {
            name: name.to_string(),
            num_nodes: graph.num_nodes(),
            num_edges: graph.num_edges(),
            num_features: graph.num_features(),
            num_classes: graph.num_classes(),
            provenance: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitMasks {
    pub fn num_nodes(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Test nodes that carry a label; unlabeled nodes are parked in test.
    pub fn labeled_test(&self, graph: &Graph) -> Vec<usize> {
        self.test.iter().copied().filter(|&v| graph.label(v).is_some()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub splits: SplitMasks,
    pub name: String,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl DatasetBundle {
    /// Loads a dataset directory; a missing `splits.json` is replaced by a
    /// split drawn from `seed`.
    pub fn load(dir: &Path, seed: u64) -> Result<DatasetBundle> {
        let (graph, meta) = load_with_meta(dir)?;
        let split_path = dir.join(SPLITS_FILE);
        let splits = if split_path.exists() {
            let s = load_splits(&split_path)?;
            validate_splits(&graph, &s).map_err(|msg| Error::Format {
                path: split_path.clone(),
                msg,
            })?;
            s
        } else {
            make_split(&graph, (0.1, 0.1, 0.8), seed)?
        };
        Ok(DatasetBundle {
            graph,
            splits,
            name: meta.name,
            provenance: meta.provenance,
        })
    }

    pub fn from_graph(graph: Graph, name: &str, seed: u64) -> Result<DatasetBundle> {
        let splits = make_split(&graph, (0.1, 0.1, 0.8), seed)?;
        Ok(DatasetBundle {
            graph,
            splits,
            name: name.to_string(),
            provenance: BTreeMap::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = Meta::describe(&self.graph, &self.name);
        meta.provenance = self.provenance.clone();
        save_with_meta(&self.graph, &meta, dir)?;
        save_splits(&self.splits, &dir.join(SPLITS_FILE))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} from `{tok}`")))
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Loads the portable format and checks every count against `meta.json`.
pub fn load_dataset(dir: &Path) -> Result<Graph> {
    load_with_meta(dir).map(|(g, _)| g)
}

pub fn load_with_meta(dir: &Path) -> Result<(Graph, Meta)> {
    let meta = read_meta(dir)?;
    let n = meta.num_nodes;

    let fpath = dir.join(FEATURES_FILE);
    let mut data = Vec::with_capacity(n * meta.num_features);
    let mut rows = 0usize;
    for (ln, line) in open_lines(&fpath)? {
        let line = line.map_err(|e| Error::io(&fpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = parse_num(&fpath, ln, tok, "feature value")?;
            if !v.is_finite() {
                return Err(parse_err(&fpath, ln, "non-finite feature value"));
            }
            data.push(v);
        }
        if data.len() - before != meta.num_features {
            return Err(parse_err(
                &fpath,
                ln,
                format!("expected {} columns, found {}", meta.num_features, data.len() - before),
            ));
        }
        rows += 1;
        if rows > n {
            return Err(parse_err(&fpath, ln, format!("more feature rows than the {n} declared nodes")));
        }
    }
    if rows != n {
        return Err(Error::Format {
            path: fpath,
            msg: format!("meta declares {n} nodes but found {rows} feature rows"),
        });
    }
    let features = Array2::from_shape_vec((n, meta.num_features), data).expect("feature buffer size");

    let epath = dir.join(EDGES_FILE);
    let mut edges = std::collections::BTreeSet::new();
    for (ln, line) in open_lines(&epath)? {
        let line = line.map_err(|e| Error::io(&epath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&epath, ln, "expected two tab-separated node ids"));
        };
        let u: usize = parse_num(&epath, ln, a, "node id")?;
        let v: usize = parse_num(&epath, ln, b, "node id")?;
        if u >= n || v >= n {
            return Err(parse_err(&epath, ln, format!("node id out of range for {n} nodes")));
        }
        if u == v {
            return Err(parse_err(&epath, ln, format!("self-loop on node {u}")));
        }
        if !edges.insert(edge(u, v)) {
            return Err(parse_err(&epath, ln, format!("duplicate edge {{{u}, {v}}}")));
        }
    }
    if edges.len() != meta.num_edges {
        return Err(Error::Format {
            path: epath,
            msg: format!("meta declares {} edges but found {}", meta.num_edges, edges.len()),
        });
    }

    let lpath = dir.join(LABELS_FILE);
    let mut labels = vec![UNLABELED; n];
    let mut seen = vec![false; n];
    for (ln, line) in open_lines(&lpath)? {
        let line = line.map_err(|e| Error::io(&lpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&lpath, ln, "expected node id and label id"));
        };
        let node: usize = parse_num(&lpath, ln, a, "node id")?;
        let label: i64 = parse_num(&lpath, ln, b, "label id")?;
        if node >= n {
            return Err(parse_err(&lpath, ln, format!("node id {node} out of range")));
        }
        if seen[node] {
            return Err(parse_err(&lpath, ln, format!("node {node} labeled twice")));
        }
        if label != UNLABELED && (label < 0 || label as usize >= meta.num_classes) {
            return Err(parse_err(&lpath, ln, format!("label {label} outside 0..{}", meta.num_classes)));
        }
        seen[node] = true;
        labels[node] = label;
    }

    let graph = Graph::new(features, edges, labels, meta.num_classes)?;
    Ok((graph, meta))
}

pub fn save_dataset(graph: &Graph, name: &str, dir: &Path) -> Result<()> {
    save_with_meta(graph, &Meta::describe(graph, name), dir)
}

pub fn save_with_meta(graph: &Graph, meta: &Meta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = meta.clone();
    meta.num_nodes = graph.num_nodes();
    meta.num_edges = graph.num_edges();
    meta.num_features = graph.num_features();
    meta.num_classes = graph.num_classes();
    write_json(&dir.join(META_FILE), &meta)?;

    let epath = dir.join(EDGES_FILE);
    let mut w = create(&epath)?;
    for &(u, v) in graph.edges() {
        writeln!(w, "{u}\t{v}").map_err(|e| Error::io(&epath, e))?;
    }
    w.flush().map_err(|e| Error::io(&epath, e))?;

    let fpath = dir.join(FEATURES_FILE);
    let mut w = create(&fpath)?;
    let mut buf = String::new();
    for row in graph.features().rows() {
        buf.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                buf.push(',');
            }
            // `Display` for f64 is the shortest string that round-trips exactly.
            buf.push_str(&v.to_string());
        }
        buf.push('\n');
        w.write_all(buf.as_bytes()).map_err(|e| Error::io(&fpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&fpath, e))?;

    let lpath = dir.join(LABELS_FILE);
    let mut w = create(&lpath)?;
    for (i, l) in graph.labels().iter().enumerate() {
        writeln!(w, "{i}\t{l}").map_err(|e| Error::io(&lpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&lpath, e))
}

pub fn save_perturbed_graph(
    graph: &Graph,
    name: &str,
    provenance: BTreeMap<String, serde_json::Value>,
    dir: &Path,
) -> Result<()> {
    let mut meta = Meta::describe(graph, name);
    meta.provenance = provenance;
    save_with_meta(graph, &meta, dir)
}

pub fn load_perturbed_graph(dir: &Path) -> Result<Graph> {
    load_dataset(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Random split of labeled nodes: `⌊r₁·n⌋` train, `⌊r₂·n⌋` val, the rest
/// (plus every unlabeled node) test.
pub fn make_split(graph: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<SplitMasks> {
    let (r1, r2, r3) = ratios;
    if !(r1 > 0.0 && r2 > 0.0 && r3 > 0.0) || ((r1 + r2 + r3) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got ({r1}, {r2}, {r3})"
        )));
    }
    let n = graph.num_nodes();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cannot split a graph with {n} nodes")));
    }
    let mut labeled: Vec<usize> = (0..n).filter(|&v| graph.label(v).is_some()).collect();
    let unlabeled = (0..n).filter(|&v| graph.label(v).is_none());
    let m = labeled.len();
    let n_train = (r1 * m as f64).floor() as usize;
    let n_val = (r2 * m as f64).floor() as usize;
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument(format!(
            "{m} labeled nodes give an empty train or validation split"
        )));
    }
    let mut r = rng::stream(seed, rng::SPLIT);
    labeled.shuffle(&mut r);
    let mut train = labeled[..n_train].to_vec();
    let mut val = labeled[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = labeled[n_train + n_val..].iter().copied().chain(unlabeled).collect();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks { train, val, test })
}

fn validate_splits(graph: &Graph, s: &SplitMasks) -> std::result::Result<(), String> {
    let n = graph.num_nodes();
    let mut seen = vec![false; n];
    for (set, name) in [(&s.train, "train"), (&s.val, "val"), (&s.test, "test")] {
        for &v in set {
            if v >= n {
                return Err(format!("{name} node {v} out of range"));
            }
            if seen[v] {
                return Err(format!("node {v} appears in more than one split"));
            }
            seen[v] = true;
            if name != "test" && graph.label(v).is_none() {
                return Err(format!("{name} node {v} is unlabeled"));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err("splits do not cover every node".into());
    }
    Ok(())
}

pub fn save_splits(splits: &SplitMasks, path: &Path) -> Result<()> {
    write_json(path, splits)
}

pub fn load_splits(path: &Path) -> Result<SplitMasks> {
    read_json(path)
}

/// One node id per line.
pub fn write_node_list(nodes: &[usize], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for v in nodes {
        writeln!(w, "{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_node_list(path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (ln, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_num(path, ln, &line, "node id")?);
    }
    Ok(out)
}

/// Writes `node,label,z0,...` rows for nodes `0..n`.
pub fn export_embeddings(z: ArrayView2<'_, f64>, labels: &[i64], path: &Path) -> Result<()> {
    let ids: Vec<usize> = (0..z.nrows()).collect();
    export_embeddings_with_ids(&ids, z, labels, path)
}

pub fn export_embeddings_with_ids(
    ids: &[usize],
    z: ArrayView2<'_, f64>,
    labels: &[i64],
    path: &Path,
) -> Result<()> {
    if z.nrows() != labels.len() || ids.len() != labels.len() {
        return Err(Error::shape(
            "export_embeddings",
            format!("{} rows", labels.len()),
            format!("{} embedding rows and {} ids", z.nrows(), ids.len()),
        ));
    }
    let mut w = create(path)?;
    let mut header = String::from("node,label");
    for j in 0..z.ncols() {
        header.push_str(&format!(",z{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for ((id, label), row) in ids.iter().zip(labels).zip(z.rows()) {
        let mut line = format!("{id},{label}");
        for v in row {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Embeddings {
    pub ids: Vec<usize>,
    pub labels: Vec<i64>,
    pub z: Array2<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let mut lines = open_lines(path)?;
    let Some((_, header)) = lines.next() else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "missing header".into(),
        });
    };
    let header = header.map_err(|e| Error::io(path, e))?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(parse_err(path, 1, "header needs node and label columns"));
    }
    let dim = cols - 2;
    let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (ln, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != cols {
            return Err(parse_err(path, ln, format!("expected {cols} columns, found {}", toks.len())));
        }
        ids.push(parse_num(path, ln, toks[0], "node id")?);
        labels.push(parse_num(path, ln, toks[1], "label")?);
        for t in &toks[2..] {
            data.push(parse_num::<f64>(path, ln, t, "embedding value")?);
        }
    }
    let z = Array2::from_shape_vec((ids.len(), dim), data).expect("embedding buffer size");
    Ok(Embeddings { ids, labels, z })
}

/// Writes the original-id map produced by re-indexing: line `i` holds the
/// source id of node `i`.
pub fn write_node_map(map: &[usize], path: &Path) -> Result<()> {
    write_node_list(map, path)
}

/// Sorted edge list, handy for diffing two graphs.
pub fn edge_diff(a: &Graph, b: &Graph) -> (Vec<Edge>, Vec<Edge>) {
    let added = b.edges().difference(a.edges()).copied().collect();
    let removed = a.edges().difference(b.edges()).copied().collect();
    (added, removed)
}

pub fn output_root() -> Option<PathBuf> {
    std::env::var_os("IDEA_OUTPUT_ROOT").map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeSet;

    fn toy() -> Graph {
        let x = array![[0.5, -1.0], [1.0e-17, 3.0], [2.0, 0.125], [0.0, 1.0 / 3.0]];
        let edges: BTreeSet<_> = [(0, 1), (1, 2), (2, 3)].into_iter().collect();
        Graph::new(x, edges, vec![0, 1, 1, -1], 2).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = toy();
        save_dataset(&g, "toy", dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, g);
        assert_eq!(read_meta(dir.path()).unwrap().num_edges, 3);
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), "toy", dir.path()).unwrap();
        let mut meta = read_meta(dir.path()).unwrap();
        meta.num_nodes = 5;
        write_json(&dir.path().join(META_FILE), &meta).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("5 nodes but found 4"), "{err}");
    }

    #[test]
    fn self_loop_row_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), "toy", dir.path()).unwrap();
        let p = dir.path().join(EDGES_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("2\t2\n");
        fs::write(&p, text).unwrap();
        let mut meta = read_meta(dir.path()).unwrap();
        meta.num_edges = 4;
        write_json(&dir.path().join(META_FILE), &meta).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn edge_row_order_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), "toy", dir.path()).unwrap();
        fs::write(dir.path().join(EDGES_FILE), "3\t2\n1\t0\n1\t2\n").unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), toy());
    }

    #[test]
    fn malformed_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), "toy", dir.path()).unwrap();
        fs::write(dir.path().join(FEATURES_FILE), "0,1\n1,x\n0,0\n1,1\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("features.csv:2"), "{err}");
    }

    #[test]
    fn missing_file_variant() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), "toy", dir.path()).unwrap();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    fn path_graph(n: usize) -> Graph {
        let edges: BTreeSet<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::new(Array2::zeros((n, 1)), edges, (0..n as i64).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = make_split(&path_graph(2485), (0.1, 0.1, 0.8), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (248, 248, 1989));
        let s = make_split(&path_graph(10), (0.1, 0.1, 0.8), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 8));
        assert_eq!(make_split(&path_graph(10), (0.1, 0.1, 0.8), 0).unwrap(), s);
        assert!(make_split(&path_graph(2), (0.1, 0.1, 0.8), 0).is_err());
    }

    #[test]
    fn unlabeled_nodes_go_to_test() {
        let s = make_split(&toy(), (0.34, 0.34, 0.32), 1).unwrap();
        assert!(s.test.contains(&3));
        assert_eq!(s.num_nodes(), 4);
        assert!(!s.labeled_test(&toy()).contains(&3));
    }

    #[test]
    fn embeddings_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        export_embeddings(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].view(), &[0, 1, 0], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        let e = read_embeddings(&p).unwrap();
        assert_eq!(e.z[[2, 1]], 6.0);

        export_embeddings(Array2::<f64>::zeros((0, 2)).view(), &[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert!(export_embeddings(array![[1.0]].view(), &[0, 1], &p).is_err());
    }
}
