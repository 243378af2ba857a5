//! Citation-network surrogates: a degree-corrected stochastic block model
//! with bag-of-words features drawn from per-class topics.
//!
//! The presets reproduce the node, edge, feature and class counts of the
//! largest connected components of Cora and Citeseer, so everything that
//! depends only on those counts (split sizes, budgets, runtime) matches the
//! real benchmarks. Accuracy levels are calibrated, not inherited.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Pareto, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge, Graph};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_features: usize,
    /// Relative class sizes; the length is the class count.
    pub class_weights: Vec<f64>,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    /// Mean number of distinct active words per node.
    pub words_per_node: f64,
    /// Words reserved for each class topic.
    pub topic_size: usize,
    /// Probability that a word is drawn from the node's class topic.
    pub topic_prob: f64,
    /// Probability that a node writes about a random other class instead.
    pub topic_confusion: f64,
    /// Pareto shape of the degree propensities; smaller is more skewed.
    pub degree_shape: f64,
}

impl SynthSpec {
    pub fn cora() -> SynthSpec {
        SynthSpec {
            name: "cora-surrogate".into(),
            num_nodes: 2485,
            num_edges: 5069,
            num_features: 1433,
            // Case_Based, Genetic_Algorithms, Neural_Networks, Probabilistic_Methods,
            // Reinforcement_Learning, Rule_Learning, Theory
            class_weights: vec![298.0, 418.0, 818.0, 426.0, 217.0, 180.0, 351.0],
            homophily: 0.81,
            words_per_node: 18.0,
            topic_size: 60,
            topic_prob: 0.2,
            topic_confusion: 0.2,
            degree_shape: 2.5,
        }
    }

    pub fn citeseer() -> SynthSpec {
        SynthSpec {
            name: "citeseer-surrogate".into(),
            num_nodes: 2110,
            num_edges: 3668,
            num_features: 3703,
            class_weights: vec![249.0, 590.0, 701.0, 668.0, 596.0, 508.0],
            homophily: 0.74,
            words_per_node: 32.0,
            topic_size: 120,
            topic_prob: 0.3,
            topic_confusion: 0.1,
            degree_shape: 2.5,
        }
    }

    /// Small graph for fast tests.
    pub fn toy(num_nodes: usize, num_classes: usize) -> SynthSpec {
        SynthSpec {
            name: "toy".into(),
            num_nodes,
            num_edges: num_nodes * 2,
            num_features: 8 * num_classes,
            class_weights: vec![1.0; num_classes],
            homophily: 0.8,
            words_per_node: 5.0,
            topic_size: 4,
            topic_prob: 0.5,
            topic_confusion: 0.1,
            degree_shape: 2.5,
        }
    }

    pub fn preset(name: &str) -> Result<SynthSpec> {
        match name {
            "cora" => Ok(SynthSpec::cora()),
            "citeseer" => Ok(SynthSpec::citeseer()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown surrogate preset `{name}` (expected cora or citeseer)"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.class_weights.len();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if k < 2 || self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("need at least two classes with positive weights".into());
        }
        if self.num_nodes < k {
            return bad(format!("{} nodes cannot host {k} classes", self.num_nodes));
        }
        let max_edges = self.num_nodes * (self.num_nodes - 1) / 2;
        if self.num_edges + 1 < self.num_nodes || self.num_edges > max_edges / 2 {
            return bad(format!(
                "edge count {} must be between {} and {}",
                self.num_edges,
                self.num_nodes - 1,
                max_edges / 2
            ));
        }
        if self.topic_size * k > self.num_features || self.topic_size == 0 {
            return bad("class topics do not fit in the vocabulary".into());
        }
        for (name, p) in [
            ("homophily", self.homophily),
            ("topic_prob", self.topic_prob),
            ("topic_confusion", self.topic_confusion),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.words_per_node >= 1.0) || !(self.degree_shape > 1.0) {
            return bad("words_per_node must be ≥ 1 and degree_shape > 1".into());
        }
        Ok(())
    }
}

fn class_sizes(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(1)).collect();
    // Hand out the remainder by largest fractional part, lowest index first.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut i = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[order[i % order.len()]] += 1;
        i += 1;
    }
    while sizes.iter().sum::<usize>() > n {
        let big = (0..sizes.len()).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).unwrap();
        sizes[big] -= 1;
    }
    sizes
}

/// Generates a connected surrogate graph with exactly the requested counts.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut r = rng::stream(seed, "synth");
    let n = spec.num_nodes;
    let k = spec.class_weights.len();

    let mut labels: Vec<usize> = class_sizes(&spec.class_weights, n)
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
        .collect();
    labels.shuffle(&mut r);

    let pareto = Pareto::new(1.0, spec.degree_shape).expect("pareto parameters");
    let theta: Vec<f64> = (0..n).map(|_| pareto.sample(&mut r).min(50.0)).collect();
    let members: Vec<Vec<usize>> = (0..k).map(|c| (0..n).filter(|&v| labels[v] == c).collect()).collect();

    let mut edges = BTreeSet::new();
    // Random spanning tree: node `order[i]` attaches to an earlier node.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut placed_by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut placed: Vec<usize> = Vec::with_capacity(n);
    for &v in &order {
        if !placed.is_empty() {
            let same = &placed_by_class[labels[v]];
            let pool = if !same.is_empty() && r.random_bool(spec.homophily) {
                same
            } else {
                &placed
            };
            let w = WeightedIndex::new(pool.iter().map(|&u| theta[u])).expect("positive weights");
            edges.insert(edge(v, pool[w.sample(&mut r)]));
        }
        placed_by_class[labels[v]].push(v);
        placed.push(v);
    }

    let all = WeightedIndex::new(&theta).expect("positive weights");
    let per_class: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&u| theta[u])).expect("positive weights"))
        .collect();
    while edges.len() < spec.num_edges {
        let u = all.sample(&mut r);
        let v = if r.random_bool(spec.homophily) {
            members[labels[u]][per_class[labels[u]].sample(&mut r)]
        } else {
            let mut v = all.sample(&mut r);
            while labels[v] == labels[u] {
                v = all.sample(&mut r);
            }
            v
        };
        if u != v {
            edges.insert(edge(u, v));
        }
    }

    let d = spec.num_features;
    let mut vocab: Vec<usize> = (0..d).collect();
    vocab.shuffle(&mut r);
    let topics: Vec<&[usize]> = (0..k).map(|c| &vocab[c * spec.topic_size..(c + 1) * spec.topic_size]).collect();
    let background = WeightedIndex::new((0..d).map(|j| 1.0 / (j as f64 + 10.0).powf(0.8))).expect("zipf weights");
    let length = Poisson::new(spec.words_per_node - 1.0).ok();
    let mut x = Array2::<f64>::zeros((n, d));
    for v in 0..n {
        let mut topic = labels[v];
        if r.random_bool(spec.topic_confusion) {
            topic = (topic + r.random_range(1..k)) % k;
        }
        let words = 1 + length.as_ref().map_or(0, |p| p.sample(&mut r) as usize);
        let mut active = 0;
        let mut tries = 0;
        while active < words.min(d) && tries < 20 * words {
            tries += 1;
            let j = if r.random_bool(spec.topic_prob) {
                topics[topic][r.random_range(0..spec.topic_size)]
            } else {
                vocab[background.sample(&mut r)]
            };
            if x[[v, j]] == 0.0 {
                x[[v, j]] = 1.0;
                active += 1;
            }
        }
    }

    let labels = labels.into_iter().map(|c| c as i64).collect();
    Graph::new(x, edges, labels, k)
}

/// Fraction of edges joining same-class endpoints.
pub fn edge_homophily(graph: &Graph) -> f64 {
    if graph.num_edges() == 0 {
        return 0.0;
    }
    let same = graph
        .edges()
        .iter()
        .filter(|&&(u, v)| graph.label(u).is_some() && graph.label(u) == graph.label(v))
        .count();
    same as f64 / graph.num_edges() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::largest_connected_component;

    #[test]
    fn cora_preset_counts() {
        let g = generate(&SynthSpec::cora(), 0).unwrap();
        assert_eq!(g.num_nodes(), 2485);
        assert_eq!(g.num_edges(), 5069);
        assert_eq!(g.num_features(), 1433);
        assert_eq!(g.num_classes(), 7);
        assert_eq!(largest_connected_component(&g).num_nodes(), 2485);
        let h = edge_homophily(&g);
        assert!((0.75..0.87).contains(&h), "homophily {h}");
        let words = g.features().sum() / 2485.0;
        assert!((15.0..21.0).contains(&words), "words per node {words}");
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec::toy(40, 3);
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        assert_ne!(generate(&spec, 3).unwrap(), generate(&spec, 4).unwrap());
    }

    #[test]
    fn class_sizes_sum_exactly() {
        assert_eq!(class_sizes(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(class_sizes(&SynthSpec::cora().class_weights, 2485).iter().sum::<usize>(), 2485);
    }
}
