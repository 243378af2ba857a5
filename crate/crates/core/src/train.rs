//! Alternating optimization: model step, attacker step, domain-learner step.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_loss, feature_attack_rows, structure_attack_train, with_neighbors, Objective};
use crate::baseline::accuracy;
use crate::config::TrainConfig;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::{sample_neighbor, Graph};
use crate::losses::{ce_tape, domain_diversity_tape, hinged_invariance_tape, invariance_tape, LossBreakdown};
use crate::nn::{
    assign_domains, domain_classifier_logits, domain_learner_logits, encoder_forward, linear,
    reparameterize, standard_normal, Dropout, GraphInput, IdeaModel,
};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::tape::{softmax_rows, Tape, Var};

/// A graph together with the tensors a forward pass needs.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph: Graph,
    pub input: GraphInput,
}

impl PreparedGraph {
    pub fn new(graph: Graph) -> PreparedGraph {
        let input = GraphInput::from_graph(&graph);
        PreparedGraph { graph, input }
    }
}

/// The current worst-case training perturbation and its L_P when cached.
#[derive(Debug, Clone)]
pub struct CachedAttack {
    pub graph: PreparedGraph,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub predictive: f64,
    pub node_invariance: f64,
    pub structure_invariance: f64,
    pub domain: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: IdeaModel,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_model: IdeaModel,
    pub rng: Rng,
    pub opt_model: Adam,
    pub opt_learner: Adam,
    pub cache: Option<CachedAttack>,
    /// Fixed random domain per (view, node) when the domain learner is off.
    pub fixed_domains: Option<Vec<usize>>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(graph: &Graph, config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let model = IdeaModel::new(config.arch(graph), &mut rng::stream(config.seed, rng::INIT))?;
        let opt_model = Adam::for_params(config.lr, config.weight_decay, &model.model_params());
        let opt_learner = Adam::for_params(config.lr_domain, config.weight_decay, &model.learner_params());
        let fixed_domains = if config.learn_domains {
            None
        } else {
            let mut r = rng::stream(config.seed, rng::DOMAINS);
            Some((0..2 * graph.num_nodes()).map(|_| r.random_range(0..config.num_domains)).collect())
        };
        Ok(TrainState {
            best_model: model.clone(),
            model,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            rng: rng::stream(config.seed, rng::TRAIN),
            opt_model,
            opt_learner,
            cache: None,
            fixed_domains,
            history: Vec::new(),
        })
    }
}

fn labels_of(graph: &Graph, nodes: &[usize]) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|&v| graph.label(v).ok_or_else(|| Error::InvalidArgument(format!("batch node {v} has no label"))))
        .collect()
}

/// `batch_size` training nodes without replacement, or all of them.
pub fn sample_batch(train: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    if batch_size == 0 || batch_size >= train.len() {
        return train.to_vec();
    }
    let mut b: Vec<usize> = sample(rng, train.len(), batch_size).into_iter().map(|i| train[i]).collect();
    b.sort_unstable();
    b
}

/// Builds the current training perturbation against the frozen model:
/// sampled structure edits first, then feature ascent on the edited graph.
pub fn generate_training_attack(
    model: &IdeaModel,
    graph: &Graph,
    batch: &[usize],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Graph, f64)> {
    let obj = Objective::true_labels(graph, batch)?;
    let budget = config.budget(graph);
    let edited = structure_attack_train(model, graph, &budget, &obj, config.attack_views, rng)?;
    let rows = with_neighbors(&edited.graph, batch);
    let attacked = feature_attack_rows(model, &edited.graph, &budget, &obj, &rows)?;
    let loss = attack_loss(model, &attacked.graph, &obj);
    Ok((attacked.graph, loss))
}

struct Heads {
    ce_g: Var,
    ce_gd: Var,
}

fn heads(tape: &mut Tape, model: &crate::nn::BoundModel, z: Var, hard: &Array2<f64>, labels: &Rc<Vec<usize>>) -> Heads {
    let lg = linear(tape, model.classifier, z);
    let ce_g = ce_tape(tape, lg, labels.clone());
    let lgd = domain_classifier_logits(tape, model.classifier, model.domain_classifier, z, hard);
    let ce_gd = ce_tape(tape, lgd, labels.clone());
    Heads { ce_g, ce_gd }
}

/// One gradient step on h, g and g_d with s frozen.
pub fn update_model_step(
    state: &mut TrainState,
    clean: &PreparedGraph,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let graph = &clean.graph;
    let y = labels_of(graph, batch)?;
    let nbrs: Vec<usize> = batch
        .iter()
        .map(|&v| sample_neighbor(graph, v, &mut state.rng))
        .collect::<Result<_>>()?;
    if state.cache.is_none() {
        let (g, loss) = generate_training_attack(&state.model, graph, batch, config, &mut state.rng)?;
        state.cache = Some(CachedAttack {
            graph: PreparedGraph::new(g),
            loss,
        });
    }
    let pert = &state.cache.as_ref().expect("cache filled above").graph;

    let n = graph.num_nodes();
    let dz = config.latent;
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, true, false);
    let encode = |tape: &mut Tape, input: &GraphInput, rng: &mut Rng| {
        let ctx = input.context();
        let mut d = Dropout { p: config.dropout, rng };
        let (mu, sigma) = encoder_forward(tape, &bound.encoder, input, &ctx, None, Some(&mut d));
        let noise = standard_normal((n, dz), d.rng);
        reparameterize(tape, mu, sigma, &noise)
    };
    let z_clean = encode(&mut tape, &clean.input, &mut state.rng);
    let z_pert = encode(&mut tape, &pert.input, &mut state.rng);

    let b = Rc::new(batch.to_vec());
    let k = Rc::new(nbrs);
    let parts = [
        tape.gather_rows(z_clean, b.clone()),
        tape.gather_rows(z_pert, b.clone()),
    ];
    let z_nodes = tape.concat_rows(&parts);
    let nbr_parts = [tape.gather_rows(z_clean, k.clone()), tape.gather_rows(z_pert, k.clone())];
    let z_nbrs = tape.concat_rows(&nbr_parts);
    let y2: Rc<Vec<usize>> = Rc::new(y.iter().chain(&y).copied().collect());

    let hard = match &state.fixed_domains {
        Some(fixed) => {
            let idx: Vec<usize> = batch.iter().map(|&v| fixed[v]).chain(batch.iter().map(|&v| fixed[n + v])).collect();
            crate::nn::one_hot(&idx, config.num_domains)
        }
        None => assign_domains(&state.model.domain_learner, tape.value(z_nodes))?.hard,
    };

    let y1 = Rc::new(y);
    let lp_logits = linear(&mut tape, bound.classifier, parts[1]);
    let lp_ce = ce_tape(&mut tape, lp_logits, y1);
    let l_p = tape.mean(lp_ce);

    let node = heads(&mut tape, &bound, z_nodes, &hard, &y2);
    let nbr = heads(&mut tape, &bound, z_nbrs, &hard, &y2);
    let inv = if config.invariance_hinge { hinged_invariance_tape } else { invariance_tape };
    let l_i = inv(&mut tape, node.ce_g, node.ce_gd, config.alpha);
    let l_e = inv(&mut tape, nbr.ce_g, nbr.ce_gd, config.alpha);

    let w_i = if config.use_li { 1.0 } else { 0.0 };
    let w_e = if config.use_le { 1.0 } else { 0.0 };
    let li_w = tape.scale(l_i, w_i);
    let le_w = tape.scale(l_e, w_e);
    let sum = tape.add(l_p, li_w);
    let total = tape.add(sum, le_w);
    // g_d follows the likelihood of its own predictions.
    let gd_node = tape.mean(node.ce_gd);
    let gd_nbr = tape.mean(nbr.ce_gd);
    let gd_node = tape.scale(gd_node, w_i);
    let gd_nbr = tape.scale(gd_nbr, w_e);
    let gd_loss = tape.add(gd_node, gd_nbr);

    let out = LossBreakdown {
        predictive: tape.scalar(l_p),
        node_invariance: w_i * tape.scalar(l_i),
        structure_invariance: w_e * tape.scalar(l_e),
        total: tape.scalar(total),
        alpha: config.alpha,
    };
    if !out.total.is_finite() {
        return Ok(out);
    }
    let vars = bound.model_vars();
    let shapes: Vec<(usize, usize)> = state.model.model_params().iter().map(|p| p.dim()).collect();
    let mut main = tape.backward(total);
    let mut own = tape.backward(gd_loss);
    let gd_vars = bound.domain_classifier.vars();
    let grads: Vec<Array2<f64>> = vars
        .iter()
        .zip(&shapes)
        .map(|(&v, &s)| {
            if gd_vars.contains(&v) {
                own.take_or_zeros(v, s)
            } else {
                main.take_or_zeros(v, s)
            }
        })
        .collect();
    state.opt_model.step(state.model.model_params_mut(), &grads);
    Ok(out)
}

/// Refreshes the cached perturbation against the frozen model, keeping
/// whichever of (new, previous, clean) has the largest L_P.
pub fn update_attacker_step(
    state: &mut TrainState,
    clean: &PreparedGraph,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<f64> {
    let graph = &clean.graph;
    let obj = Objective::true_labels(graph, batch)?;
    let (fresh, fresh_loss) = generate_training_attack(&state.model, graph, batch, config, &mut state.rng)?;
    let clean_loss = attack_loss(&state.model, graph, &obj);
    let prev = state
        .cache
        .take()
        .map(|c| {
            let l = attack_loss(&state.model, &c.graph.graph, &obj);
            (c.graph, l)
        });
    let mut best = (PreparedGraph::new(fresh), fresh_loss);
    if let Some((g, l)) = prev {
        if l > best.1 {
            best = (g, l);
        }
    }
    if clean_loss > best.1 {
        best = (clean.clone(), clean_loss);
    }
    let loss = best.1;
    state.cache = Some(CachedAttack { graph: best.0, loss });
    Ok(loss)
}

/// One gradient step on s minimizing L_D with h and g frozen.
pub fn update_domain_learner_step(
    state: &mut TrainState,
    clean: &PreparedGraph,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<f64> {
    if config.num_domains < 2 {
        return Err(Error::InvalidArgument("need at least 2 attack domains".into()));
    }
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let graph = &clean.graph;
    let y = labels_of(graph, batch)?;
    let n = graph.num_nodes();
    let dz = config.latent;
    let model = &state.model;
    let mut zs = Vec::new();
    let views: Vec<&GraphInput> = match &state.cache {
        Some(c) => vec![&clean.input, &c.graph.input],
        None => vec![&clean.input],
    };
    for input in views {
        let mut t = Tape::new();
        let bm = model.bind(&mut t, false, false);
        let (mu, sigma) = encoder_forward(&mut t, &bm.encoder, input, &input.context(), None, None);
        let noise = standard_normal((n, dz), &mut state.rng);
        let z = &t.value(mu).select(Axis(0), batch) + &(&noise.select(Axis(0), batch) * &t.value(sigma).select(Axis(0), batch));
        zs.push(z);
    }
    let views = zs.len();
    let z = ndarray::concatenate(Axis(0), &zs.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("same width");
    let labels: Vec<i64> = (0..views).flat_map(|_| y.iter().map(|&c| c as i64)).collect();
    let probs = softmax_rows(&model.classifier.apply(&z));
    let residual = crate::losses::true_class_residual(&probs, &labels);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false, true);
    let zv = tape.constant(z);
    let rv = tape.constant(residual);
    let logits = domain_learner_logits(&mut tape, bound.learner, zv);
    let soft = tape.softmax(logits);
    let l_d = domain_diversity_tape(&mut tape, zv, rv, soft);
    let value = tape.scalar(l_d);
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = tape.backward(l_d);
    let g: Vec<Array2<f64>> = bound
        .learner_vars()
        .iter()
        .zip(model.learner_params())
        .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
        .collect();
    state.opt_learner.step(state.model.learner_params_mut(), &g);
    Ok(value)
}

/// Deterministic-mode accuracy of `model` on `nodes` of `graph`.
pub fn model_accuracy(model: &IdeaModel, graph: &Graph, nodes: &[usize]) -> Result<f64> {
    accuracy(&model.predict_proba(graph), graph, nodes)
}

/// Consecutive non-finite losses tolerated before aborting.
const MAX_NON_FINITE: usize = 3;

/// Full training loop with early stopping on clean validation accuracy. `on_improve`
/// runs after every new best validation accuracy.
pub fn fit_with(
    data: &DatasetBundle,
    config: &TrainConfig,
    on_improve: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(&data.graph, config)?;
    let clean = PreparedGraph::new(data.graph.clone());
    let train = &data.splits.train;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut non_finite = 0usize;
    let mut since = 0usize;
    for epoch in 1..=config.epochs {
        let batch = sample_batch(train, config.batch_size, &mut state.rng);
        let losses = update_model_step(&mut state, &clean, &batch, config)?;
        if losses.total.is_finite() {
            non_finite = 0;
        } else {
            non_finite += 1;
            if non_finite >= MAX_NON_FINITE {
                return Err(Error::NonFinite {
                    what: format!("training loss for {MAX_NON_FINITE} consecutive steps (epoch {epoch}): {losses:?}"),
                });
            }
        }
        let batch = sample_batch(train, config.batch_size, &mut state.rng);
        update_attacker_step(&mut state, &clean, &batch, config)?;
        let l_d = if config.learn_domains {
            let batch = sample_batch(train, config.batch_size, &mut state.rng);
            update_domain_learner_step(&mut state, &clean, &batch, config)?
        } else {
            0.0
        };
        state.epoch = epoch;
        let val_acc = if data.splits.val.is_empty() {
            0.0
        } else {
            model_accuracy(&state.model, &data.graph, &data.splits.val)?
        };
        state.history.push(EpochMetrics {
            epoch,
            predictive: losses.predictive,
            node_invariance: losses.node_invariance,
            structure_invariance: losses.structure_invariance,
            domain: l_d,
            val_acc,
        });
        if val_acc > state.best_val {
            state.best_val = val_acc;
            state.best_epoch = epoch;
            state.best_model = state.model.clone();
            since = 0;
            on_improve(&state)?;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    Ok(state)
}

pub fn fit(data: &DatasetBundle, config: &TrainConfig) -> Result<TrainState> {
    fit_with(data, config, &mut |_| Ok(()))
}

/// Metrics as CSV with header `epoch,L_P,L_I,L_E,L_D,val_acc`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,L_P,L_I,L_E,L_D,val_acc\n");
    for m in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.predictive, m.node_invariance, m.structure_invariance, m.domain, m.val_acc
        ));
    }
    s
}

/// Worst relative error between analytic and central-difference gradients
/// of each objective term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub predictive: f64,
    pub node_invariance: f64,
    pub structure_invariance: f64,
    pub domain: f64,
}

impl GradientReport {
    pub fn max(&self) -> f64 {
        [self.predictive, self.node_invariance, self.structure_invariance, self.domain]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Checks the gradients of L_P, L_I and L_E with respect to h, g and g_d and
/// of L_D with respect to s, at a random initialization with noise, the
/// training attack, neighbour samples and domain codes frozen.
pub fn loss_gradient_check(
    graph: &Graph,
    batch: &[usize],
    config: &TrainConfig,
    seed: u64,
    step: f64,
) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut r = rng::stream(seed, "gradient_check");
    let mut model = IdeaModel::new(config.arch(graph), &mut r)?;
    // a zero offset would leave g_d's own weights untested
    model.domain_classifier = crate::nn::Linear::glorot(config.num_domains, graph.num_classes(), &mut r);
    let (pert, _) = generate_training_attack(&model, graph, batch, config, &mut r)?;
    let clean_in = GraphInput::from_graph(graph);
    let pert_in = GraphInput::from_graph(&pert);
    let n = graph.num_nodes();
    let y = labels_of(graph, batch)?;
    let nbrs: Vec<usize> = batch.iter().map(|&v| sample_neighbor(graph, v, &mut r)).collect::<Result<_>>()?;
    let noise = [standard_normal((n, config.latent), &mut r), standard_normal((n, config.latent), &mut r)];
    let idx: Vec<usize> = (0..2 * batch.len()).map(|_| r.random_range(0..config.num_domains)).collect();
    let hard = crate::nn::one_hot(&idx, config.num_domains);
    let b = Rc::new(batch.to_vec());
    let k = Rc::new(nbrs);
    let y1 = Rc::new(y.clone());
    let y2: Rc<Vec<usize>> = Rc::new(y.iter().chain(&y).copied().collect());
    let inv = if config.invariance_hinge { hinged_invariance_tape } else { invariance_tape };
    let learner_consts = |tape: &mut Tape| -> Vec<Var> {
        model.learner_params().into_iter().map(|p| tape.constant(p.clone())).collect()
    };
    // encodes both views, returns (z_clean, z_pert) and the binding
    let encode = |tape: &mut Tape, vars: &[Var]| -> (Var, Var, crate::nn::BoundModel) {
        let lv = learner_consts(tape);
        let bound = crate::nn::BoundModel::from_vars(vars, &lv).expect("model var count");
        let mut zs = Vec::with_capacity(2);
        for (input, eps) in [(&clean_in, &noise[0]), (&pert_in, &noise[1])] {
            let (mu, sigma) = encoder_forward(tape, &bound.encoder, input, &input.context(), None, None);
            zs.push(reparameterize(tape, mu, sigma, eps));
        }
        (zs[0], zs[1], bound)
    };
    let params: Vec<Array2<f64>> = model.model_params().into_iter().cloned().collect();
    let check = |build: &dyn Fn(&mut Tape, &[Var]) -> Var, ps: &[Array2<f64>], r: &mut Rng| {
        crate::nn::gradient_check(ps, step, GRAD_CHECK_ENTRIES, GRAD_CHECK_FLOOR, r, build)
    };

    let predictive = check(
        &|tape, vars| {
            let (_, zp, bound) = encode(tape, vars);
            let rows = tape.gather_rows(zp, b.clone());
            let logits = linear(tape, bound.classifier, rows);
            let ce = ce_tape(tape, logits, y1.clone());
            tape.mean(ce)
        },
        &params,
        &mut r,
    )?;
    let invariance = |tape: &mut Tape, vars: &[Var], neighbours: bool| {
        let (zc, zp, bound) = encode(tape, vars);
        let ids = if neighbours { k.clone() } else { b.clone() };
        let parts = [tape.gather_rows(zc, ids.clone()), tape.gather_rows(zp, ids)];
        let z = tape.concat_rows(&parts);
        let h = heads(tape, &bound, z, &hard, &y2);
        inv(tape, h.ce_g, h.ce_gd, config.alpha)
    };
    let node_invariance = check(&|t, v| invariance(t, v, false), &params, &mut r)?;
    let structure_invariance = check(&|t, v| invariance(t, v, true), &params, &mut r)?;

    // L_D sees z and the residual as constants
    let mut t = Tape::new();
    let bm = model.bind(&mut t, false, false);
    let mut zs = Vec::new();
    for (input, eps) in [(&clean_in, &noise[0]), (&pert_in, &noise[1])] {
        let (mu, sigma) = encoder_forward(&mut t, &bm.encoder, input, &input.context(), None, None);
        let z = reparameterize(&mut t, mu, sigma, eps);
        zs.push(t.value(z).select(Axis(0), batch));
    }
    let z = ndarray::concatenate(Axis(0), &[zs[0].view(), zs[1].view()]).expect("same width");
    let labels: Vec<i64> = y.iter().chain(&y).map(|&c| c as i64).collect();
    let residual = crate::losses::true_class_residual(&softmax_rows(&model.classifier.apply(&z)), &labels);
    let learner: Vec<Array2<f64>> = model.learner_params().into_iter().cloned().collect();
    let domain = check(
        &|tape, vars| {
            let zv = tape.constant(z.clone());
            let rv = tape.constant(residual.clone());
            let s = (
                crate::nn::BoundLinear { w: vars[0], b: vars[1] },
                crate::nn::BoundLinear { w: vars[2], b: vars[3] },
            );
            let logits = domain_learner_logits(tape, s, zv);
            let soft = tape.softmax(logits);
            domain_diversity_tape(tape, zv, rv, soft)
        },
        &learner,
        &mut r,
    )?;
    Ok(GradientReport {
        predictive,
        node_invariance,
        structure_invariance,
        domain,
    })
}

/// Coordinates probed per parameter matrix.
const GRAD_CHECK_ENTRIES: usize = 24;
/// Gradients below this magnitude are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};

    fn toy(n: usize, seed: u64) -> DatasetBundle {
        let g = generate(&SynthSpec::toy(n, 3), seed).unwrap();
        DatasetBundle::from_graph(g, "toy", seed).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: 16,
            latent: 8,
            domain_hidden: 8,
            num_domains: 3,
            epochs: 30,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn model_step_is_deterministic() {
        let data = toy(60, 1);
        let c = small_config();
        let clean = PreparedGraph::new(data.graph.clone());
        let run = || {
            let mut s = TrainState::new(&data.graph, &c).unwrap();
            let l = update_model_step(&mut s, &clean, &data.splits.train, &c).unwrap();
            (l, s.model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!((a.total - (a.predictive + a.node_invariance + a.structure_invariance)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        let data = toy(40, 2);
        let c = small_config();
        let clean = PreparedGraph::new(data.graph.clone());
        let mut s = TrainState::new(&data.graph, &c).unwrap();
        assert!(update_model_step(&mut s, &clean, &[], &c).is_err());
    }

    #[test]
    fn alpha_zero_with_cloned_gd_matches_lp() {
        // g_d = [g; 0] makes L(g_d) = L(g) on every sample, so with α = 0 and
        // a clean cache L_I equals the mean CE over clean and perturbed
        // samples, which here are the same graph.
        let data = toy(40, 3);
        let mut c = small_config();
        c.alpha = 0.0;
        c.dropout = 0.0;
        c.attack_feature_frac = 0.0;
        c.attack_edge_rate = 0.0;
        let clean = PreparedGraph::new(data.graph.clone());
        let mut s = TrainState::new(&data.graph, &c).unwrap();
        s.model.domain_classifier.w.fill(0.0);
        s.model.domain_classifier.b.fill(0.0);
        s.model.encoder.sigma.b.fill(-1e3); // σ ≈ 0: samples equal means
        let l = update_model_step(&mut s, &clean, &data.splits.train, &c).unwrap();
        assert!((l.node_invariance - l.predictive).abs() < 1e-9, "{l:?}");
    }

    #[test]
    fn attacker_cache_never_below_clean_or_previous() {
        let data = toy(60, 4);
        let mut c = small_config();
        c.attack_feature_frac = 0.05;
        let clean = PreparedGraph::new(data.graph.clone());
        let mut s = TrainState::new(&data.graph, &c).unwrap();
        let obj = Objective::true_labels(&data.graph, &data.splits.train).unwrap();
        let clean_loss = attack_loss(&s.model, &data.graph, &obj);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..4 {
            let l = update_attacker_step(&mut s, &clean, &data.splits.train, &c).unwrap();
            assert!(l >= clean_loss && l >= prev);
            prev = l;
        }
        let mut off = small_config();
        off.attack_feature_frac = 0.0;
        off.attack_edge_rate = 0.0;
        let mut s = TrainState::new(&data.graph, &off).unwrap();
        update_attacker_step(&mut s, &clean, &data.splits.train, &off).unwrap();
        let g = &s.cache.unwrap().graph.graph;
        assert_eq!(g.edges(), data.graph.edges());
        assert_eq!(g.features(), data.graph.features());
    }

    #[test]
    fn predictive_loss_halves_on_toy() {
        let data = toy(20, 5);
        let mut c = small_config();
        c.dropout = 0.0;
        let clean = PreparedGraph::new(data.graph.clone());
        let mut s = TrainState::new(&data.graph, &c).unwrap();
        let first = update_model_step(&mut s, &clean, &data.splits.train, &c).unwrap().predictive;
        let mut last = first;
        for _ in 1..200 {
            last = update_model_step(&mut s, &clean, &data.splits.train, &c).unwrap().predictive;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn domain_learner_descends() {
        let data = toy(60, 6);
        let c = small_config();
        let clean = PreparedGraph::new(data.graph.clone());
        let mut s = TrainState::new(&data.graph, &c).unwrap();
        for _ in 0..20 {
            update_model_step(&mut s, &clean, &data.splits.train, &c).unwrap();
        }
        let mut s2 = s.clone();
        let first = update_domain_learner_step(&mut s, &clean, &data.splits.train, &c).unwrap();
        let mut last = first;
        for _ in 1..50 {
            last = update_domain_learner_step(&mut s, &clean, &data.splits.train, &c).unwrap();
        }
        assert!(last <= first, "{first} -> {last}");
        update_domain_learner_step(&mut s2, &clean, &data.splits.train, &c).unwrap();
        let mut s3 = s2.clone();
        update_domain_learner_step(&mut s2, &clean, &data.splits.train, &c).unwrap();
        update_domain_learner_step(&mut s3, &clean, &data.splits.train, &c).unwrap();
        assert_eq!(s2.model, s3.model);
    }

    #[test]
    fn fit_is_deterministic_and_zero_epochs_is_init() {
        let data = toy(80, 7);
        let mut c = small_config();
        c.epochs = 0;
        let s = fit(&data, &c).unwrap();
        let init = TrainState::new(&data.graph, &c).unwrap();
        assert_eq!(s.model, init.model);
        c.epochs = 15;
        let a = fit(&data, &c).unwrap();
        let b = fit(&data, &c).unwrap();
        assert_eq!(a.best_val, b.best_val);
        assert_eq!(a.best_model, b.best_model);
        assert_eq!(a.history.len(), 15);
        assert!(metrics_csv(&a.history).starts_with("epoch,L_P,L_I,L_E,L_D,val_acc\n"));
    }

    #[test]
    fn fit_leaves_dataset_untouched() {
        let data = toy(60, 8);
        let before = data.graph.clone();
        let mut c = small_config();
        c.epochs = 3;
        fit(&data, &c).unwrap();
        assert_eq!(data.graph, before);
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let g = generate(&SynthSpec::toy(12, 3), 5).unwrap();
        let config = TrainConfig {
            alpha: 3.0,
            ..small_config()
        };
        let batch: Vec<usize> = (0..12).filter(|&v| g.label(v).is_some()).take(6).collect();
        for hinge in [true, false] {
            let c = TrainConfig {
                invariance_hinge: hinge,
                ..config.clone()
            };
            let rep = loss_gradient_check(&g, &batch, &c, 1, 1e-5).unwrap();
            assert!(rep.max() <= 1e-4, "{rep:?}");
        }
    }
}
