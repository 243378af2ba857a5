//! Raw citation-network readers feeding `prepare-data`.
//!
//! Two layouts are recognised: the LINQS distribution (`<name>.content` with
//! `id word... class` rows and `<name>.cites` with `cited citing` rows) and a
//! directory already in the portable format but not yet reduced to its
//! largest connected component.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{load_with_meta, parse_err, DatasetBundle, META_FILE};
use crate::error::{Error, Result};
use crate::graph::{edge, largest_connected_component_with_map, Graph};

#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: String,
    pub graph: Graph,
    /// Source identifier of every node, in node order.
    pub node_ids: Vec<String>,
    pub class_names: Vec<String>,
    pub dropped_citations: usize,
}

fn find_with_ext(dir: &Path, ext: &str) -> Result<Option<PathBuf>> {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    hits.sort();
    Ok(hits.into_iter().next())
}

pub fn read_raw(dir: &Path) -> Result<RawDataset> {
    if dir.join(META_FILE).exists() {
        let (graph, meta) = load_with_meta(dir)?;
        let node_ids = (0..graph.num_nodes()).map(|i| i.to_string()).collect();
        let class_names = (0..graph.num_classes()).map(|k| k.to_string()).collect();
        return Ok(RawDataset {
            name: meta.name,
            graph,
            node_ids,
            class_names,
            dropped_citations: 0,
        });
    }
    let content = find_with_ext(dir, "content")?.ok_or_else(|| Error::MissingFile(dir.join("*.content")))?;
    let cites = find_with_ext(dir, "cites")?.ok_or_else(|| Error::MissingFile(dir.join("*.cites")))?;
    read_linqs(&content, &cites)
}

pub fn read_linqs(content: &Path, cites: &Path) -> Result<RawDataset> {
    let text = fs::read_to_string(content).map_err(|e| Error::io(content, e))?;
    let mut node_ids = Vec::new();
    let mut index = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut class_of = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(content, ln, "expected `id features... class`"));
        }
        let feats = &toks[1..toks.len() - 1];
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(content, ln, format!("expected {w} feature columns, found {}", feats.len())))
            }
            _ => {}
        }
        let row = feats
            .iter()
            .map(|t| super::parse_num::<f64>(content, ln, t, "feature value"))
            .collect::<Result<Vec<_>>>()?;
        let id = toks[0].to_string();
        if index.insert(id.clone(), node_ids.len()).is_some() {
            return Err(parse_err(content, ln, format!("duplicate node id `{id}`")));
        }
        node_ids.push(id);
        rows.push(row);
        class_of.push(toks[toks.len() - 1].to_string());
    }
    let n = node_ids.len();
    let d = width.unwrap_or(0);
    if n == 0 {
        return Err(Error::Format {
            path: content.to_path_buf(),
            msg: "no nodes".into(),
        });
    }
    let class_names: Vec<String> = class_of.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let class_index: BTreeMap<&str, i64> = class_names
        .iter()
        .enumerate()
        .map(|(k, c)| (c.as_str(), k as i64))
        .collect();
    let labels = class_of.iter().map(|c| class_index[c.as_str()]).collect();
    let features = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("content rows");

    let text = fs::read_to_string(cites).map_err(|e| Error::io(cites, e))?;
    let mut edges = BTreeSet::new();
    let mut dropped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(cites, i + 1, "expected `cited citing`"));
        }
        match (index.get(toks[0]), index.get(toks[1])) {
            (Some(&u), Some(&v)) if u != v => {
                edges.insert(edge(u, v));
            }
            _ => dropped += 1,
        }
    }
    let name = content
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let graph = Graph::new(features, edges, labels, class_names.len())?;
    Ok(RawDataset {
        name,
        graph,
        node_ids,
        class_names,
        dropped_citations: dropped,
    })
}

/// Reduces a raw dataset to its largest connected component and draws a split.
/// Returns the bundle and the new→source id map.
pub fn prepare(raw: &RawDataset, seed: u64) -> Result<(DatasetBundle, Vec<String>)> {
    let (lcc, map) = largest_connected_component_with_map(&raw.graph);
    let mut bundle = DatasetBundle::from_graph(lcc, &raw.name, seed)?;
    let ids: Vec<String> = map.iter().map(|&i| raw.node_ids[i].clone()).collect();
    let prov = &mut bundle.provenance;
    prov.insert("source_nodes".into(), raw.graph.num_nodes().into());
    prov.insert("source_edges".into(), raw.graph.num_edges().into());
    prov.insert("dropped_citations".into(), raw.dropped_citations.into());
    prov.insert("split_seed".into(), seed.into());
    prov.insert("classes".into(), raw.class_names.clone().into());
    Ok((bundle, ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linqs_layout() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("tiny.content"),
            "p1\t1\t0\tB\np2\t0\t1\tA\np3\t1\t1\tB\np9\t0\t0\tA\np4\t0\t0\tA\n",
        )
        .unwrap();
        fs::write(dir.path().join("tiny.cites"), "p1\tp2\np2\tp1\np2\tp3\np3\tp3\npx\tp1\np9\tp4\n").unwrap();
        let raw = read_raw(dir.path()).unwrap();
        assert_eq!(raw.graph.num_nodes(), 5);
        assert_eq!(raw.graph.num_edges(), 3);
        assert_eq!(raw.dropped_citations, 2);
        assert_eq!(raw.class_names, vec!["A", "B"]);
        assert_eq!(raw.graph.labels(), &[1, 0, 1, 0, 0]);

    }

    #[test]
    fn prepare_keeps_largest_component() {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::new();
        let mut cites = String::from("x0\tx1\n");
        for i in 0..20 {
            content.push_str(&format!("n{i}\t{}\t{}\n", i % 2, if i % 3 == 0 { "A" } else { "B" }));
            if i > 0 {
                cites.push_str(&format!("n{}\tn{i}\n", i - 1));
            }
        }
        content.push_str("x0\t1\tA\nx1\t0\tB\n");
        fs::write(dir.path().join("c.content"), content).unwrap();
        fs::write(dir.path().join("c.cites"), cites).unwrap();
        let raw = read_raw(dir.path()).unwrap();
        let (bundle, ids) = prepare(&raw, 0).unwrap();
        assert_eq!(bundle.graph.num_nodes(), 20);
        assert_eq!(bundle.graph.num_edges(), 19);
        assert_eq!(ids[19], "n19");
        assert_eq!(bundle.splits.train.len(), 2);
    }

    #[test]
    fn missing_cites_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.content"), "p1\t1\tA\n").unwrap();
        assert!(matches!(read_raw(dir.path()), Err(Error::MissingFile(_))));
    }
}
