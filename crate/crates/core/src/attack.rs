//! Adversarial example generators.
//!
//! Training-time generators (feature ascent on training nodes and sampled
//! structure edits) feed the inner maximization of the trainer. Evaluation
//! attacks act on target nodes: feature PGD, greedy edge flips, node
//! injection, plus uniform random poisoning.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::baseline::Gcn;
use crate::error::{Error, Result};
use crate::graph::{apply_edge_edits, edge, Edge, EdgeEdit, Graph, UNLABELED};
use crate::losses::ce_tape;
use crate::nn::{
    argmax_rows, encoder_forward, linear, weighted_context, GraphInput, IdeaModel, PropContext, Propagation,
    WeightedPairs,
};
use crate::sparse::Csr;
use crate::tape::{softmax_rows, Tape, Var};

/// Anything that maps a graph to class logits and can be differentiated
/// with respect to its input.
pub trait Victim {
    /// Deterministic logits for every node. `track` binds the parameters as
    /// trainable leaves so that intermediate gradients exist.
    fn logits(&self, tape: &mut Tape, input: &GraphInput, ctx: &PropContext, delta: Option<Var>, track: bool) -> Var;

    fn predict(&self, graph: &Graph) -> Array2<f64> {
        let input = GraphInput::from_graph(graph);
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, &input, &input.context(), None, false);
        softmax_rows(tape.value(logits))
    }
}

impl Victim for IdeaModel {
    fn logits(&self, tape: &mut Tape, input: &GraphInput, ctx: &PropContext, delta: Option<Var>, track: bool) -> Var {
        let bound = self.bind(tape, track, false);
        let (mu, _) = encoder_forward(tape, &bound.encoder, input, ctx, delta, None);
        linear(tape, bound.classifier, mu)
    }
}

impl Victim for Gcn {
    fn logits(&self, tape: &mut Tape, input: &GraphInput, ctx: &PropContext, delta: Option<Var>, track: bool) -> Var {
        self.forward(tape, input, ctx, delta, track, None).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// L∞ radius per feature entry.
    pub feature_eps: f64,
    pub feature_steps: usize,
    pub feature_step_size: f64,
    /// Maximum number of edge edits.
    pub edge_budget: usize,
    pub inject_nodes: usize,
    pub inject_edges_per_node: usize,
}

/// Sign-step size for `steps` projected steps inside a radius `eps` ball.
pub fn pgd_step_size(eps: f64, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        (2.5 * eps / steps as f64).min(eps)
    }
}

/// `(min, max)` over all entries of the feature matrix.
pub fn feature_range(graph: &Graph) -> (f64, f64) {
    let x = graph.features();
    if x.is_empty() {
        return (0.0, 0.0);
    }
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl AttackBudget {
    pub fn none() -> AttackBudget {
        AttackBudget {
            feature_eps: 0.0,
            feature_steps: 0,
            feature_step_size: 0.0,
            edge_budget: 0,
            inject_nodes: 0,
            inject_edges_per_node: 0,
        }
    }

    /// Few cheap feature steps at 1% of the feature range plus
    /// `⌊edge_rate·|E|⌋` sampled structure edits.
    pub fn training(graph: &Graph, edge_rate: f64) -> AttackBudget {
        let (lo, hi) = feature_range(graph);
        let eps = 0.01 * (hi - lo);
        AttackBudget {
            feature_eps: eps,
            feature_steps: 3,
            feature_step_size: pgd_step_size(eps, 3),
            edge_budget: (edge_rate * graph.num_edges() as f64).floor() as usize,
            inject_nodes: 0,
            inject_edges_per_node: 0,
        }
    }

    /// 20% conventions: feature radius 0.2 of the range, `⌊0.2·|E|⌋` edge
    /// flips, `⌊0.2·|targets|⌋` injected nodes with average-degree wiring.
    pub fn evaluation(graph: &Graph, num_targets: usize) -> AttackBudget {
        let (lo, hi) = feature_range(graph);
        let eps = 0.01 * (hi - lo);
        let n = graph.num_nodes().max(1);
        AttackBudget {
            feature_eps: eps,
            feature_steps: 20,
            feature_step_size: pgd_step_size(eps, 20),
            edge_budget: (0.2 * graph.num_edges() as f64).floor() as usize,
            inject_nodes: (0.2 * num_targets as f64).floor() as usize,
            inject_edges_per_node: (2.0 * graph.num_edges() as f64 / n as f64).ceil() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.feature_eps) || !ok(self.feature_step_size) {
            return Err(Error::InvalidArgument(format!("budget radii must be finite and nonnegative: {self:?}")));
        }
        if self.feature_step_size > self.feature_eps {
            return Err(Error::InvalidArgument(format!(
                "feature step {} exceeds radius {}",
                self.feature_step_size, self.feature_eps
            )));
        }
        Ok(())
    }
}

/// Nodes whose loss an attack maximizes, with the labels it assumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub nodes: Rc<Vec<usize>>,
    pub labels: Rc<Vec<usize>>,
}

impl Objective {
    pub fn new(nodes: Vec<usize>, labels: Vec<usize>) -> Result<Objective> {
        if nodes.len() != labels.len() {
            return Err(Error::shape("objective", nodes.len(), labels.len()));
        }
        Ok(Objective {
            nodes: Rc::new(nodes),
            labels: Rc::new(labels),
        })
    }

    pub fn true_labels(graph: &Graph, nodes: &[usize]) -> Result<Objective> {
        let labels = nodes
            .iter()
            .map(|&v| graph.label(v).ok_or_else(|| Error::InvalidArgument(format!("node {v} has no label"))))
            .collect::<Result<Vec<_>>>()?;
        Objective::new(nodes.to_vec(), labels)
    }

    /// True labels for nodes in `known`, the victim's prediction elsewhere.
    pub fn pseudo(victim: &dyn Victim, graph: &Graph, nodes: &[usize], known: &[usize]) -> Objective {
        let pred = argmax_rows(&victim.predict(graph));
        let known: HashSet<usize> = known.iter().copied().collect();
        let labels = nodes
            .iter()
            .map(|&v| match graph.label(v) {
                Some(y) if known.contains(&v) => y,
                _ => pred[v],
            })
            .collect();
        Objective {
            nodes: Rc::new(nodes.to_vec()),
            labels: Rc::new(labels),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mean clamped cross-entropy over the objective nodes.
    pub fn loss(&self, tape: &mut Tape, logits: Var) -> Var {
        let picked = tape.gather_rows(logits, self.nodes.clone());
        let ce = ce_tape(tape, picked, self.labels.clone());
        tape.mean(ce)
    }
}

/// Objective loss of `victim` on `graph`.
pub fn attack_loss(victim: &dyn Victim, graph: &Graph, obj: &Objective) -> f64 {
    let input = GraphInput::from_graph(graph);
    loss_on(victim, &input, obj)
}

fn loss_on(victim: &dyn Victim, input: &GraphInput, obj: &Objective) -> f64 {
    let mut tape = Tape::new();
    let logits = victim.logits(&mut tape, input, &input.context(), None, false);
    let l = obj.loss(&mut tape, logits);
    tape.scalar(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub attack: String,
    pub budget: AttackBudget,
    pub seed: Option<u64>,
    pub targets: Vec<usize>,
    pub edits: Vec<EdgeEdit>,
    /// Original rows whose features changed.
    pub feature_rows: Vec<usize>,
    pub injected: usize,
    /// Objective loss per step (feature attacks), per candidate (sampled
    /// structure edits) or per flip (greedy edge flips).
    pub losses: Vec<f64>,
    pub monotone_violations: usize,
}

impl Provenance {
    fn new(attack: &str, budget: AttackBudget, targets: &[usize]) -> Provenance {
        Provenance {
            attack: attack.to_string(),
            budget,
            seed: None,
            targets: targets.to_vec(),
            edits: Vec::new(),
            feature_rows: Vec::new(),
            injected: 0,
            losses: Vec::new(),
            monotone_violations: 0,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbedGraph {
    pub graph: Graph,
    pub provenance: Provenance,
}

impl PerturbedGraph {
    fn identity(graph: &Graph, attack: &str, budget: AttackBudget, targets: &[usize]) -> PerturbedGraph {
        PerturbedGraph {
            graph: graph.clone(),
            provenance: Provenance::new(attack, budget, targets),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> PerturbedGraph {
        self.provenance.seed = Some(seed);
        self
    }

    pub fn save(&self, name: &str, dir: &Path) -> Result<()> {
        crate::data::save_perturbed_graph(&self.graph, name, self.provenance.to_map(), dir)
    }
}

struct Pgd<'a> {
    rows: &'a [usize],
    eps: f64,
    steps: usize,
    step: f64,
    /// Box on `x + δ`.
    bounds: Option<(f64, f64)>,
    keep_best: bool,
}

struct PgdResult {
    delta: Array2<f64>,
    trace: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-gradient ascent on the rows `spec.rows` of the features of `base`.
fn pgd(victim: &dyn Victim, base: &GraphInput, graph: &Graph, obj: &Objective, ctx: &PropContext, spec: &Pgd<'_>) -> PgdResult {
    let rows = Rc::new(spec.rows.to_vec());
    let input = GraphInput {
        delta_rows: Some(rows.clone()),
        ..base.clone()
    };
    let x = graph.features();
    let d = graph.num_features();
    let mut delta = Array2::<f64>::zeros((rows.len(), d));
    let mut trace = Vec::with_capacity(spec.steps + 1);
    let mut best = (f64::NEG_INFINITY, delta.clone());
    for it in 0..=spec.steps {
        let mut tape = Tape::new();
        let dv = tape.param(delta.clone());
        let logits = victim.logits(&mut tape, &input, ctx, Some(dv), false);
        let loss = obj.loss(&mut tape, logits);
        let l = tape.scalar(loss);
        trace.push(l);
        if l > best.0 {
            best = (l, delta.clone());
        }
        if it == spec.steps {
            break;
        }
        let mut grads = tape.backward(loss);
        let g = grads.take_or_zeros(dv, delta.dim());
        ndarray::Zip::from(&mut delta).and(&g).for_each(|d, &g| {
            *d = (*d + spec.step * sign(g)).clamp(-spec.eps, spec.eps);
        });
        if let Some((lo, hi)) = spec.bounds {
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    let xv = x[[r, j]];
                    delta[[i, j]] = (xv + delta[[i, j]]).clamp(lo, hi) - xv;
                }
            }
        }
    }
    let delta = if spec.keep_best { best.1 } else { delta };
    PgdResult { delta, trace }
}

fn apply_delta(graph: &Graph, rows: &[usize], delta: &Array2<f64>) -> Result<Graph> {
    let mut x = graph.features().clone();
    for (i, &r) in rows.iter().enumerate() {
        let mut row = x.row_mut(r);
        row += &delta.row(i);
    }
    graph.with_features(x)
}

fn count_decreases(trace: &[f64]) -> usize {
    trace.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Feature ascent on the objective nodes' own rows (training-time).
pub fn feature_attack_train(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    subset: &Objective,
) -> Result<PerturbedGraph> {
    feature_attack_rows(victim, graph, budget, subset, &subset.nodes)
}

/// Training feature attack whose perturbation may touch `rows`, a superset
/// of the objective nodes such as their receptive field.
pub fn feature_attack_rows(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    subset: &Objective,
    rows: &[usize],
) -> Result<PerturbedGraph> {
    budget.validate()?;
    let mut rows: Vec<usize> = rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut out = PerturbedGraph::identity(graph, "feature_train", *budget, &rows);
    if budget.feature_steps == 0 || budget.feature_eps == 0.0 || rows.is_empty() {
        return Ok(out);
    }
    let base = GraphInput::from_graph(graph);
    let spec = Pgd {
        rows: &rows,
        eps: budget.feature_eps,
        steps: budget.feature_steps,
        step: budget.feature_step_size,
        bounds: None,
        keep_best: false,
    };
    let r = pgd(victim, &base, graph, subset, &base.context(), &spec);
    out.graph = apply_delta(graph, &rows, &r.delta)?;
    out.provenance.monotone_violations = count_decreases(&r.trace);
    out.provenance.losses = r.trace;
    out.provenance.feature_rows = rows;
    Ok(out)
}

/// Up to `count` distinct random pair flips, half additions and half
/// removals in expectation.
pub fn random_flips(graph: &Graph, count: usize, rng: &mut impl rand::Rng) -> Vec<EdgeEdit> {
    let n = graph.num_nodes();
    let max_pairs = n * n.saturating_sub(1) / 2;
    let count = count.min(max_pairs);
    let mut removable: Vec<Edge> = graph.edges().iter().copied().collect();
    let mut absent_left = max_pairs - graph.num_edges();
    let mut touched: HashSet<Edge> = HashSet::new();
    let mut edits = Vec::with_capacity(count);
    while edits.len() < count {
        let remove = (rng.random_bool(0.5) && !removable.is_empty()) || absent_left == 0;
        if remove {
            let e = removable.swap_remove(rng.random_range(0..removable.len()));
            touched.insert(e);
            edits.push(EdgeEdit::remove(e.0, e.1));
            continue;
        }
        let mut pick = None;
        for _ in 0..64 {
            let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
            let e = edge(u, v);
            if u != v && !graph.has_edge(u, v) && !touched.contains(&e) {
                pick = Some(e);
                break;
            }
        }
        let e = match pick {
            Some(e) => e,
            None => {
                let free: Vec<Edge> = (0..n)
                    .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                    .filter(|&(u, v)| !graph.has_edge(u, v) && !touched.contains(&(u, v)))
                    .collect();
                free[rng.random_range(0..free.len())]
            }
        };
        touched.insert(e);
        absent_left -= 1;
        edits.push(EdgeEdit::add(e.0, e.1));
    }
    edits
}

/// `views` independent random edit sets of `edge_budget` flips each.
pub fn sample_edit_sets(graph: &Graph, budget: &AttackBudget, views: usize, rng: &mut impl rand::Rng) -> Vec<Vec<EdgeEdit>> {
    (0..views).map(|_| random_flips(graph, budget.edge_budget, rng)).collect()
}

/// Sampled worst-case structure view: the candidate edit set with the
/// largest objective loss.
pub fn structure_attack_train(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    subset: &Objective,
    views: usize,
    rng: &mut impl rand::Rng,
) -> Result<PerturbedGraph> {
    let mut out = PerturbedGraph::identity(graph, "structure_train", *budget, &subset.nodes);
    if budget.edge_budget == 0 || views == 0 {
        return Ok(out);
    }
    let base = GraphInput::from_graph(graph);
    let mut best: Option<(f64, Vec<EdgeEdit>, Graph)> = None;
    for edits in sample_edit_sets(graph, budget, views, rng) {
        let g = apply_edge_edits(graph, &edits)?;
        let l = loss_on(victim, &base.with_graph_structure(&g), subset);
        out.provenance.losses.push(l);
        if best.as_ref().is_none_or(|b| l > b.0) {
            best = Some((l, edits, g));
        }
    }
    let (_, edits, g) = best.expect("at least one view");
    out.graph = g;
    out.provenance.edits = edits;
    Ok(out)
}

pub fn with_neighbors(graph: &Graph, nodes: &[usize]) -> Vec<usize> {
    let mut set: BTreeSet<usize> = nodes.iter().copied().collect();
    for &v in nodes {
        set.extend(graph.neighbors(v).iter().copied());
    }
    set.into_iter().collect()
}

/// Test-time feature PGD on the targets and their 1-hop neighbors; the
/// best iterate is kept.
pub fn evasion_feature_pgd(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    targets: &Objective,
) -> Result<PerturbedGraph> {
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    budget.validate()?;
    let mut out = PerturbedGraph::identity(graph, "feature_pgd", *budget, &targets.nodes);
    if budget.feature_steps == 0 || budget.feature_eps == 0.0 {
        return Ok(out);
    }
    let rows = with_neighbors(graph, &targets.nodes);
    let base = GraphInput::from_graph(graph);
    let spec = Pgd {
        rows: &rows,
        eps: budget.feature_eps,
        steps: budget.feature_steps,
        step: budget.feature_step_size,
        bounds: None,
        keep_best: true,
    };
    let r = pgd(victim, &base, graph, targets, &base.context(), &spec);
    out.graph = apply_delta(graph, &rows, &r.delta)?;
    out.provenance.monotone_violations = count_decreases(&r.trace);
    out.provenance.losses = r.trace;
    out.provenance.feature_rows = rows;
    Ok(out)
}

/// Exactly evaluated candidates per greedy round.
const FLIP_SHORTLIST: usize = 8;

/// First-order loss change of flipping each `(target, v)` pair, from the
/// gradient with respect to the dense adjacency (degree normalization
/// included). Returns a `|targets| × n` matrix.
fn flip_scores(victim: &dyn Victim, input: &GraphInput, graph: &Graph, obj: &Objective, targets: &[usize]) -> Array2<f64> {
    let adj = match &input.prop {
        Propagation::Fixed(m) => m.clone(),
        Propagation::Weighted { .. } => unreachable!("flip scores use a fixed adjacency"),
    };
    let log = Rc::new(RefCell::new(Vec::new()));
    let ctx = PropContext::Logged(adj.clone(), log.clone());
    let mut tape = Tape::new();
    let logits = victim.logits(&mut tape, input, &ctx, None, true);
    let loss = obj.loss(&mut tape, logits);
    let grads = tape.backward(loss);
    let n = graph.num_nodes();
    // (M_l, G_l): input of each propagation and the gradient at its output.
    let layers: Vec<(Array2<f64>, Array2<f64>)> = log
        .borrow()
        .iter()
        .filter_map(|&(i, o)| grads.get(o).map(|g| (tape.value(i).clone(), g.clone())))
        .collect();

    let dt: Array1<f64> = (0..n).map(|v| graph.degree(v) as f64 + 1.0).collect();
    // ∂L/∂d̃_k through every normalized entry of row and column k.
    let mut dd = Array1::<f64>::zeros(n);
    for k in 0..n {
        let mut acc = 0.0;
        for (j, a) in adj.row(k) {
            let mut s = 0.0;
            for (m, g) in &layers {
                s += g.row(k).dot(&m.row(j)) + g.row(j).dot(&m.row(k));
            }
            acc += s * a;
        }
        dd[k] = -acc / (2.0 * dt[k]);
    }
    let mut b = Array2::<f64>::zeros((targets.len(), n));
    for (m, g) in &layers {
        let gt = g.select(Axis(0), targets);
        let mt = m.select(Axis(0), targets);
        b += &gt.dot(&m.t());
        b += &mt.dot(&g.t());
    }
    for (i, &t) in targets.iter().enumerate() {
        for v in 0..n {
            let grad = b[[i, v]] / (dt[t] * dt[v]).sqrt() + dd[t] + dd[v];
            let dir = if graph.has_edge(t, v) { -1.0 } else { 1.0 };
            b[[i, v]] = grad * dir;
        }
    }
    b
}

/// Greedy test-time edge flips incident to the targets. Each round ranks
/// all incident flips by the adjacency-gradient estimate, evaluates the
/// best few exactly and applies the one with the largest loss. Removals
/// that would isolate a node are skipped.
pub fn evasion_edge_flip_greedy(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    targets: &Objective,
) -> Result<PerturbedGraph> {
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    let mut out = PerturbedGraph::identity(graph, "edge_flip", *budget, &targets.nodes);
    let n = graph.num_nodes();
    let mut tset: Vec<usize> = targets.nodes.to_vec();
    tset.sort_unstable();
    tset.dedup();
    let nt = tset.len();
    let possible = nt * (n - 1) - nt * (nt - 1) / 2;
    let limit = budget.edge_budget.min(possible);
    if limit == 0 {
        return Ok(out);
    }
    let base = GraphInput::from_graph(graph);
    let mut current = graph.clone();
    let mut flipped: HashSet<Edge> = HashSet::new();
    while out.provenance.edits.len() < limit {
        let input = base.with_graph_structure(&current);
        let scores = flip_scores(victim, &input, &current, targets, &tset);
        let mut cands: Vec<(f64, Edge)> = Vec::new();
        for (i, &t) in tset.iter().enumerate() {
            for v in 0..n {
                let e = edge(t, v);
                if v == t || flipped.contains(&e) || (tset.binary_search(&v).is_ok() && v < t) {
                    continue;
                }
                if current.has_edge(t, v) && (current.degree(t) == 1 || current.degree(v) == 1) {
                    continue;
                }
                cands.push((scores[[i, v]], e));
            }
        }
        if cands.is_empty() {
            break;
        }
        let k = FLIP_SHORTLIST.min(cands.len());
        let by_score = |a: &(f64, Edge), b: &(f64, Edge)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < cands.len() {
            cands.select_nth_unstable_by(k - 1, by_score);
            cands.truncate(k);
        }
        cands.sort_by(by_score);
        let mut best: Option<(f64, EdgeEdit, Graph)> = None;
        for &(_, (u, v)) in &cands {
            let e = EdgeEdit::flip(&current, u, v);
            let g = apply_edge_edits(&current, &[e])?;
            let l = loss_on(victim, &base.with_graph_structure(&g), targets);
            if best.as_ref().is_none_or(|b| l > b.0) {
                best = Some((l, e, g));
            }
        }
        let (l, e, g) = best.expect("nonempty shortlist");
        flipped.insert(e.pair);
        out.provenance.edits.push(e);
        out.provenance.losses.push(l);
        current = g;
    }
    out.graph = current;
    Ok(out)
}

/// For each injected node, the original nodes it may connect to: its share
/// of the targets plus their neighbors, padded with random nodes when
/// smaller than the wiring budget.
fn injection_pools(graph: &Graph, targets: &[usize], k: usize, per_node: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let n = graph.num_nodes();
    let mut order = targets.to_vec();
    order.shuffle(rng);
    let mut shares: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &t) in order.iter().enumerate() {
        shares[i % k].push(t);
    }
    for (j, s) in shares.iter_mut().enumerate() {
        if s.is_empty() {
            s.push(order[j % order.len()]);
        }
    }
    shares
        .into_iter()
        .map(|s| {
            let mut pool = with_neighbors(graph, &s);
            let want = per_node.min(n);
            let mut have: HashSet<usize> = pool.iter().copied().collect();
            while pool.len() < want {
                let v = rng.random_range(0..n);
                if have.insert(v) {
                    pool.push(v);
                }
            }
            pool
        })
        .collect()
}

fn copy_random_rows(graph: &Graph, k: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let n = graph.num_nodes();
    let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    graph.features().select(Axis(0), &rows)
}

fn injection_checks(graph: &Graph, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= graph.num_nodes()) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    Ok(())
}

/// Appends `inject_nodes` nodes, wires each to `inject_edges_per_node`
/// nodes of its pool by the gradient of the objective with respect to a
/// candidate edge weight, then optimizes their features by sign steps
/// inside the clean feature range.
pub fn node_injection_attack(
    victim: &dyn Victim,
    graph: &Graph,
    budget: &AttackBudget,
    targets: &Objective,
    rng: &mut impl rand::Rng,
) -> Result<PerturbedGraph> {
    let mut out = PerturbedGraph::identity(graph, "node_inject", *budget, &targets.nodes);
    let k = budget.inject_nodes;
    if k == 0 {
        return Ok(out);
    }
    injection_checks(graph, &targets.nodes)?;
    let n = graph.num_nodes();
    let (lo, hi) = feature_range(graph);
    let pools = injection_pools(graph, &targets.nodes, k, budget.inject_edges_per_node, rng);
    let init = copy_random_rows(graph, k, rng);
    let bare = graph.with_appended_nodes(init.view(), &vec![UNLABELED; k], std::iter::empty())?;

    let mut pairs = WeightedPairs {
        u: graph.edges().iter().map(|e| e.0).collect(),
        v: graph.edges().iter().map(|e| e.1).collect(),
    };
    let m = pairs.u.len();
    for (j, pool) in pools.iter().enumerate() {
        for &v in pool {
            pairs.u.push(n + j);
            pairs.v.push(v);
        }
    }
    let mut w0 = Array2::<f64>::zeros((pairs.u.len(), 1));
    w0.slice_mut(ndarray::s![..m, ..]).fill(1.0);
    let input = GraphInput {
        x: Rc::new(Csr::from_dense(bare.features().view())),
        prop: Propagation::Weighted {
            pairs: Rc::new(pairs.clone()),
            n: n + k,
        },
        delta_rows: None,
        num_nodes: n + k,
    };
    let mut tape = Tape::new();
    let w = tape.param(w0);
    let ctx = weighted_context(&mut tape, &pairs, n + k, w);
    let logits = victim.logits(&mut tape, &input, &ctx, None, false);
    let loss = targets.loss(&mut tape, logits);
    let mut grads = tape.backward(loss);
    let gw = grads.take_or_zeros(w, (pairs.u.len(), 1));

    let mut new_edges = Vec::new();
    let mut offset = m;
    for (j, pool) in pools.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = pool.iter().enumerate().map(|(i, &v)| (gw[[offset + i, 0]], v)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let take = budget.inject_edges_per_node.min(scored.len());
        new_edges.extend(scored[..take].iter().map(|&(_, v)| edge(n + j, v)));
        offset += pool.len();
    }
    let wired = graph.with_appended_nodes(init.view(), &vec![UNLABELED; k], new_edges.iter().copied())?;
    out.provenance.edits = new_edges.iter().map(|&(u, v)| EdgeEdit::add(u, v)).collect();
    out.provenance.injected = k;

    if budget.feature_steps > 0 && hi > lo {
        let rows: Vec<usize> = (n..n + k).collect();
        let base = GraphInput::from_graph(&wired);
        let spec = Pgd {
            rows: &rows,
            eps: f64::INFINITY,
            steps: budget.feature_steps,
            step: pgd_step_size(hi - lo, budget.feature_steps),
            bounds: Some((lo, hi)),
            keep_best: true,
        };
        let r = pgd(victim, &base, &wired, targets, &base.context(), &spec);
        out.graph = apply_delta(&wired, &rows, &r.delta)?;
        out.provenance.losses = r.trace;
    } else {
        out.graph = wired;
    }
    Ok(out)
}

/// Injection with the same budget but random wiring within the pools and
/// copied features: the reference that gradient-guided injection must beat.
pub fn random_injection(graph: &Graph, budget: &AttackBudget, targets: &[usize], rng: &mut impl rand::Rng) -> Result<PerturbedGraph> {
    let mut out = PerturbedGraph::identity(graph, "random_inject", *budget, targets);
    let k = budget.inject_nodes;
    if k == 0 {
        return Ok(out);
    }
    injection_checks(graph, targets)?;
    let n = graph.num_nodes();
    let pools = injection_pools(graph, targets, k, budget.inject_edges_per_node, rng);
    let feats = copy_random_rows(graph, k, rng);
    let mut new_edges = Vec::new();
    for (j, pool) in pools.iter().enumerate() {
        let take = budget.inject_edges_per_node.min(pool.len());
        new_edges.extend(pool.choose_multiple(rng, take).map(|&v| edge(n + j, v)));
    }
    out.graph = graph.with_appended_nodes(feats.view(), &vec![UNLABELED; k], new_edges.iter().copied())?;
    out.provenance.edits = new_edges.iter().map(|&(u, v)| EdgeEdit::add(u, v)).collect();
    out.provenance.injected = k;
    Ok(out)
}

/// `⌊flip_rate·|E|⌋` uniformly random pair flips.
pub fn random_poison(graph: &Graph, flip_rate: f64, rng: &mut impl rand::Rng) -> Result<PerturbedGraph> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::InvalidArgument(format!("flip rate {flip_rate} outside [0, 1]")));
    }
    let count = (flip_rate * graph.num_edges() as f64).floor() as usize;
    let mut budget = AttackBudget::none();
    budget.edge_budget = count;
    let edits = random_flips(graph, count, rng);
    budget.edge_budget = edits.len();
    let mut out = PerturbedGraph::identity(graph, "random_poison", budget, &[]);
    out.graph = apply_edge_edits(graph, &edits)?;
    out.provenance.edits = edits;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub max_feature_change: f64,
    pub edge_edits: usize,
    pub injected_nodes: usize,
    pub max_injected_degree: usize,
}

const AUDIT_TOL: f64 = 1e-9;

/// Measures how far `p` deviates from `source` and checks it against the
/// budget recorded in its provenance.
pub fn audit(source: &Graph, p: &PerturbedGraph) -> Result<AuditReport> {
    let b = &p.provenance.budget;
    let g = &p.graph;
    let n = source.num_nodes();
    if g.num_nodes() < n || g.num_features() != source.num_features() {
        return Err(Error::InvalidArgument("perturbed graph drops nodes or features".into()));
    }
    let injected = g.num_nodes() - n;
    let orig = g.features().slice(ndarray::s![..n, ..]);
    let max_feature_change = orig
        .iter()
        .zip(source.features().iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let old: &BTreeSet<Edge> = source.edges();
    let new_orig: BTreeSet<Edge> = g.edges().iter().copied().filter(|&(u, v)| u < n && v < n).collect();
    let edge_edits = old.symmetric_difference(&new_orig).count();
    let max_injected_degree = (n..g.num_nodes()).map(|v| g.degree(v)).max().unwrap_or(0);

    let report = AuditReport {
        max_feature_change,
        edge_edits,
        injected_nodes: injected,
        max_injected_degree,
    };
    let fail = |what: String| Err(Error::InvalidArgument(format!("budget exceeded: {what}")));
    if max_feature_change > b.feature_eps + AUDIT_TOL {
        return fail(format!("feature change {max_feature_change} > {}", b.feature_eps));
    }
    if edge_edits > b.edge_budget {
        return fail(format!("{edge_edits} edge edits > {}", b.edge_budget));
    }
    if injected > b.inject_nodes {
        return fail(format!("{injected} injected nodes > {}", b.inject_nodes));
    }
    if max_injected_degree > b.inject_edges_per_node {
        return fail(format!("injected degree {max_injected_degree} > {}", b.inject_edges_per_node));
    }
    if injected > 0 {
        let (lo, hi) = feature_range(source);
        let rows = g.features().slice(ndarray::s![n.., ..]);
        if rows.iter().any(|&v| v < lo - AUDIT_TOL || v > hi + AUDIT_TOL) {
            return fail(format!("injected features outside [{lo}, {hi}]"));
        }
    }
    Ok(report)
}
