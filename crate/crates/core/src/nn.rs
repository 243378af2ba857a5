//! Encoder h, classifier g, domain classifier g_d and domain learner s.
//!
//! Parameters live in plain arrays; forward passes are recorded on a
//! [`Tape`] so the same code serves training, attacks and gradient checks.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::sparse::Csr;
use crate::tape::{softmax_rows, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    /// `1 × out`
    pub b: Array2<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..=a)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    /// `x·W + b` without a tape.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub num_features: usize,
    pub hidden: usize,
    pub latent: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub domain_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: Linear,
    pub conv2: Linear,
    pub mu: Linear,
    pub sigma: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainLearnerParams {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdeaModel {
    pub arch: Arch,
    pub encoder: EncoderParams,
    /// g: latent → classes
    pub classifier: Linear,
    /// g_d = g(z) + offset(domain): per-domain class offsets over g's logits
    pub domain_classifier: Linear,
    pub domain_learner: DomainLearnerParams,
}

/// Initial σ ≈ 0.1 so early samples stay close to the mean.
const SIGMA_BIAS_INIT: f64 = -2.252_168_7;

impl IdeaModel {
    pub fn new(arch: Arch, rng: &mut impl rand::Rng) -> Result<IdeaModel> {
        if arch.num_domains < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 attack domains, got {}",
                arch.num_domains
            )));
        }
        if arch.num_features == 0 || arch.hidden == 0 || arch.latent == 0 || arch.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {arch:?}")));
        }
        let mut sigma = Linear::glorot(arch.hidden, arch.latent, rng);
        sigma.b.fill(SIGMA_BIAS_INIT);
        Ok(IdeaModel {
            arch,
            encoder: EncoderParams {
                conv1: Linear::glorot(arch.num_features, arch.hidden, rng),
                conv2: Linear::glorot(arch.hidden, arch.hidden, rng),
                mu: Linear::glorot(arch.hidden, arch.latent, rng),
                sigma,
            },
            classifier: Linear::glorot(arch.latent, arch.num_classes, rng),
            domain_classifier: Linear::zeros(arch.num_domains, arch.num_classes),
            domain_learner: DomainLearnerParams {
                l1: Linear::glorot(arch.latent, arch.domain_hidden, rng),
                l2: Linear::glorot(arch.domain_hidden, arch.num_domains, rng),
            },
        })
    }

    /// Parameters of h, g and g_d in a fixed order.
    pub fn model_params(&self) -> Vec<&Array2<f64>> {
        let e = &self.encoder;
        vec![
            &e.conv1.w,
            &e.conv1.b,
            &e.conv2.w,
            &e.conv2.b,
            &e.mu.w,
            &e.mu.b,
            &e.sigma.w,
            &e.sigma.b,
            &self.classifier.w,
            &self.classifier.b,
            &self.domain_classifier.w,
            &self.domain_classifier.b,
        ]
    }

    pub fn model_params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let e = &mut self.encoder;
        vec![
            &mut e.conv1.w,
            &mut e.conv1.b,
            &mut e.conv2.w,
            &mut e.conv2.b,
            &mut e.mu.w,
            &mut e.mu.b,
            &mut e.sigma.w,
            &mut e.sigma.b,
            &mut self.classifier.w,
            &mut self.classifier.b,
            &mut self.domain_classifier.w,
            &mut self.domain_classifier.b,
        ]
    }

    pub fn learner_params(&self) -> Vec<&Array2<f64>> {
        let s = &self.domain_learner;
        vec![&s.l1.w, &s.l1.b, &s.l2.w, &s.l2.b]
    }

    pub fn learner_params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let s = &mut self.domain_learner;
        vec![&mut s.l1.w, &mut s.l1.b, &mut s.l2.w, &mut s.l2.b]
    }

    /// Model parameters followed by learner parameters.
    pub fn all_params(&self) -> Vec<&Array2<f64>> {
        let mut v = self.model_params();
        v.extend(self.learner_params());
        v
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let IdeaModel {
            encoder,
            classifier,
            domain_classifier,
            domain_learner,
            ..
        } = self;
        vec![
            &mut encoder.conv1.w,
            &mut encoder.conv1.b,
            &mut encoder.conv2.w,
            &mut encoder.conv2.b,
            &mut encoder.mu.w,
            &mut encoder.mu.b,
            &mut encoder.sigma.w,
            &mut encoder.sigma.b,
            &mut classifier.w,
            &mut classifier.b,
            &mut domain_classifier.w,
            &mut domain_classifier.b,
            &mut domain_learner.l1.w,
            &mut domain_learner.l1.b,
            &mut domain_learner.l2.w,
            &mut domain_learner.l2.b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.all_params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Deterministic predictions (`z = μ`) for every node of `graph`.
    pub fn predict_proba(&self, graph: &Graph) -> Array2<f64> {
        let input = GraphInput::from_graph(graph);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let ctx = input.context();
        let (mu, _) = encoder_forward(&mut tape, &bound.encoder, &input, &ctx, None, None);
        let logits = linear(&mut tape, bound.classifier, mu);
        softmax_rows(tape.value(logits))
    }

    /// Deterministic latent means for every node.
    pub fn embed(&self, graph: &Graph) -> Array2<f64> {
        let input = GraphInput::from_graph(graph);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let ctx = input.context();
        let (mu, _) = encoder_forward(&mut tape, &bound.encoder, &input, &ctx, None, None);
        tape.value(mu).clone()
    }

    pub fn bind(&self, tape: &mut Tape, train_model: bool, train_learner: bool) -> BoundModel {
        let e = &self.encoder;
        BoundModel {
            encoder: BoundEncoder {
                conv1: BoundLinear::bind(tape, &e.conv1, train_model),
                conv2: BoundLinear::bind(tape, &e.conv2, train_model),
                mu: BoundLinear::bind(tape, &e.mu, train_model),
                sigma: BoundLinear::bind(tape, &e.sigma, train_model),
            },
            classifier: BoundLinear::bind(tape, &self.classifier, train_model),
            domain_classifier: BoundLinear::bind(tape, &self.domain_classifier, train_model),
            learner: (
                BoundLinear::bind(tape, &self.domain_learner.l1, train_learner),
                BoundLinear::bind(tape, &self.domain_learner.l2, train_learner),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn bind(tape: &mut Tape, lin: &Linear, trainable: bool) -> BoundLinear {
        let (w, b) = if trainable {
            (tape.param(lin.w.clone()), tape.param(lin.b.clone()))
        } else {
            (tape.constant(lin.w.clone()), tape.constant(lin.b.clone()))
        };
        BoundLinear { w, b }
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub conv1: BoundLinear,
    pub conv2: BoundLinear,
    pub mu: BoundLinear,
    pub sigma: BoundLinear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub classifier: BoundLinear,
    pub domain_classifier: BoundLinear,
    pub learner: (BoundLinear, BoundLinear),
}

impl BoundModel {
    /// Same order as [`IdeaModel::model_params`].
    pub fn model_vars(&self) -> Vec<Var> {
        let e = &self.encoder;
        [e.conv1, e.conv2, e.mu, e.sigma, self.classifier, self.domain_classifier]
            .iter()
            .flat_map(|l| l.vars())
            .collect()
    }

    pub fn learner_vars(&self) -> Vec<Var> {
        [self.learner.0, self.learner.1].iter().flat_map(|l| l.vars()).collect()
    }

    /// Rebuilds the binding from variables in [`BoundModel::model_vars`]
    /// and [`BoundModel::learner_vars`] order.
    pub fn from_vars(model: &[Var], learner: &[Var]) -> Result<BoundModel> {
        if model.len() != 12 || learner.len() != 4 {
            return Err(Error::shape("BoundModel::from_vars", "12 model and 4 learner vars", format!("{} and {}", model.len(), learner.len())));
        }
        let l = |v: &[Var], i: usize| BoundLinear { w: v[2 * i], b: v[2 * i + 1] };
        Ok(BoundModel {
            encoder: BoundEncoder {
                conv1: l(model, 0),
                conv2: l(model, 1),
                mu: l(model, 2),
                sigma: l(model, 3),
            },
            classifier: l(model, 4),
            domain_classifier: l(model, 5),
            learner: (l(learner, 0), l(learner, 1)),
        })
    }
}

pub fn linear(tape: &mut Tape, lin: BoundLinear, x: Var) -> Var {
    let h = tape.matmul(x, lin.w);
    tape.add(h, lin.b)
}

/// Edge list whose weights are tape variables, so structure gradients exist.
#[derive(Debug, Clone)]
pub struct WeightedPairs {
    pub u: Vec<usize>,
    pub v: Vec<usize>,
}

/// How messages flow between nodes.
#[derive(Debug, Clone)]
pub enum Propagation {
    /// Fixed normalized adjacency.
    Fixed(Rc<Csr>),
    /// Pairs with per-pair weights supplied at forward time.
    Weighted { pairs: Rc<WeightedPairs>, n: usize },
}

/// Node features plus propagation for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub x: Rc<Csr>,
    pub prop: Propagation,
    /// Dense feature rows added on top of `x`: `(rows, Δ)`.
    pub delta_rows: Option<Rc<Vec<usize>>>,
    pub num_nodes: usize,
}

impl GraphInput {
    pub fn from_graph(graph: &Graph) -> GraphInput {
        GraphInput {
            x: Rc::new(Csr::from_dense(graph.features().view())),
            prop: Propagation::Fixed(Rc::new(normalize_adjacency(graph).matrix().clone())),
            delta_rows: None,
            num_nodes: graph.num_nodes(),
        }
    }

    /// Same features, adjacency of `graph`.
    pub fn with_graph_structure(&self, graph: &Graph) -> GraphInput {
        GraphInput {
            prop: Propagation::Fixed(Rc::new(normalize_adjacency(graph).matrix().clone())),
            ..self.clone()
        }
    }

    pub fn context(&self) -> PropContext {
        match &self.prop {
            Propagation::Fixed(m) => PropContext::Fixed(m.clone()),
            Propagation::Weighted { .. } => panic!("weighted propagation needs weights; use weighted_context"),
        }
    }
}

/// Per-forward normalisation state.
#[derive(Debug, Clone)]
pub enum PropContext {
    Fixed(Rc<Csr>),
    /// Fixed adjacency that records every `(input, output)` pair it propagates.
    Logged(Rc<Csr>, Rc<RefCell<Vec<(Var, Var)>>>),
    Weighted {
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        coef: Var,
        self_coef: Var,
        n: usize,
    },
}

/// Symmetric normalisation of `A + I` where `A` has weight `w[p]` on pair `p`.
pub fn weighted_context(tape: &mut Tape, pairs: &WeightedPairs, n: usize, w: Var) -> PropContext {
    let both_w = tape.concat_rows(&[w, w]);
    let ends: Rc<Vec<usize>> = Rc::new(pairs.u.iter().chain(&pairs.v).copied().collect());
    let others: Rc<Vec<usize>> = Rc::new(pairs.v.iter().chain(&pairs.u).copied().collect());
    let deg = tape.scatter_add_rows(both_w, ends.clone(), n);
    let deg = tape.add_scalar(deg, 1.0);
    let root = tape.sqrt(deg);
    let one = tape.scalar_constant(1.0);
    let dinv = tape.div(one, root);
    let du = tape.gather_rows(dinv, ends.clone());
    let dv = tape.gather_rows(dinv, others.clone());
    let c = tape.mul(both_w, du);
    let coef = tape.mul(c, dv);
    let self_coef = tape.div(one, deg);
    PropContext::Weighted {
        src: others,
        dst: ends,
        coef,
        self_coef,
        n,
    }
}

pub fn propagate(tape: &mut Tape, ctx: &PropContext, h: Var) -> Var {
    match ctx {
        PropContext::Fixed(m) => tape.spmm(m.clone(), h),
        PropContext::Logged(m, log) => {
            let out = tape.spmm(m.clone(), h);
            log.borrow_mut().push((h, out));
            out
        }
        PropContext::Weighted {
            src,
            dst,
            coef,
            self_coef,
            n,
        } => {
            let msgs = tape.gather_rows(h, src.clone());
            let msgs = tape.mul(msgs, *coef);
            let agg = tape.scatter_add_rows(msgs, dst.clone(), *n);
            let own = tape.mul(h, *self_coef);
            tape.add(agg, own)
        }
    }
}

/// Inverted-dropout mask (`1/(1-p)` on kept entries).
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl rand::Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Dropout configuration for one forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut crate::rng::Rng,
}

/// Trunk and heads; returns `(μ, σ)`.
pub fn encoder_forward(
    tape: &mut Tape,
    enc: &BoundEncoder,
    input: &GraphInput,
    ctx: &PropContext,
    delta: Option<Var>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Var, Var) {
    let delta = match (&input.delta_rows, delta) {
        (Some(rows), Some(d)) => Some((rows.clone(), d)),
        (None, None) => None,
        _ => panic!("delta rows and delta values must be given together"),
    };
    let xw = tape.input_matmul(input.x.clone(), enc.conv1.w, delta);
    let h = propagate(tape, ctx, xw);
    let h = tape.add(h, enc.conv1.b);
    let mut h = tape.relu(h);
    if let Some(d) = dropout.as_deref_mut() {
        if d.p > 0.0 {
            let mask = tape.constant(dropout_mask(tape.shape(h), d.p, d.rng));
            h = tape.mul(h, mask);
        }
    }
    let hw = tape.matmul(h, enc.conv2.w);
    let h = propagate(tape, ctx, hw);
    let h = tape.add(h, enc.conv2.b);
    let h = tape.relu(h);
    let mu = linear(tape, enc.mu, h);
    let s = linear(tape, enc.sigma, h);
    let sigma = tape.softplus(s);
    (mu, sigma)
}

/// `z = μ + ε ⊙ σ`.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, noise: &Array2<f64>) -> Var {
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(eps, sigma);
    tape.add(mu, scaled)
}

pub fn standard_normal(shape: (usize, usize), rng: &mut impl rand::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Logits of g_d: g's logits shifted by the domain's class offset.
pub fn domain_classifier_logits(tape: &mut Tape, g: BoundLinear, offset: BoundLinear, z: Var, hard: &Array2<f64>) -> Var {
    let base = linear(tape, g, z);
    let d = tape.constant(hard.clone());
    let shift = linear(tape, offset, d);
    tape.add(base, shift)
}

/// Domain logits of s.
pub fn domain_learner_logits(tape: &mut Tape, s: (BoundLinear, BoundLinear), z: Var) -> Var {
    let h = linear(tape, s.0, z);
    let h = tape.relu(h);
    linear(tape, s.1, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainAssignment {
    pub soft: Array2<f64>,
    pub hard: Array2<f64>,
}

impl DomainAssignment {
    pub fn from_soft(soft: Array2<f64>) -> DomainAssignment {
        let hard = one_hot_argmax(&soft);
        DomainAssignment { soft, hard }
    }

    pub fn num_domains(&self) -> usize {
        self.soft.ncols()
    }

    pub fn hard_index(&self) -> Vec<usize> {
        self.hard
            .rows()
            .into_iter()
            .map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

/// One-hot rows at the first maximum.
pub fn one_hot_argmax(m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    for (i, row) in m.rows().into_iter().enumerate() {
        out[[i, argmax(row.iter().copied())]] = 1.0;
    }
    out
}

pub fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

pub fn one_hot(indices: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), k));
    for (i, &c) in indices.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}

/// Encodes every node of `graph`; `noise = None` draws standard normals.
pub fn encode(
    p: &EncoderParams,
    adj: &crate::graph::NormalizedAdjacency,
    features: &Array2<f64>,
    noise: Option<&Array2<f64>>,
    rng: &mut impl rand::Rng,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let n = features.nrows();
    if adj.matrix().rows() != n {
        return Err(Error::shape("encode", format!("{n}×{n} adjacency"), adj.matrix().rows()));
    }
    if features.ncols() != p.conv1.fan_in() {
        return Err(Error::shape("encode", format!("{} features", p.conv1.fan_in()), features.ncols()));
    }
    let dz = p.mu.fan_out();
    let noise = match noise {
        Some(e) if e.dim() != (n, dz) => return Err(Error::shape("encode noise", format!("({n}, {dz})"), format!("{:?}", e.dim()))),
        Some(e) => e.clone(),
        None => standard_normal((n, dz), rng),
    };
    let input = GraphInput {
        x: Rc::new(Csr::from_dense(features.view())),
        prop: Propagation::Fixed(Rc::new(adj.matrix().clone())),
        delta_rows: None,
        num_nodes: n,
    };
    let mut tape = Tape::new();
    let enc = BoundEncoder {
        conv1: BoundLinear::bind(&mut tape, &p.conv1, false),
        conv2: BoundLinear::bind(&mut tape, &p.conv2, false),
        mu: BoundLinear::bind(&mut tape, &p.mu, false),
        sigma: BoundLinear::bind(&mut tape, &p.sigma, false),
    };
    let ctx = input.context();
    let (mu, sigma) = encoder_forward(&mut tape, &enc, &input, &ctx, None, None);
    let mu = tape.value(mu).clone();
    let sigma = tape.value(sigma).clone();
    let z = &mu + &(&noise * &sigma);
    Ok((z, mu, sigma))
}

pub fn classify(p: &Linear, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != p.fan_in() {
        return Err(Error::shape("classify", format!("{} columns", p.fan_in()), z.ncols()));
    }
    Ok(softmax_rows(&p.apply(z)))
}

pub fn classify_with_domain(
    g: &Linear,
    offset: &Linear,
    z: &Array2<f64>,
    d: &DomainAssignment,
) -> Result<Array2<f64>> {
    if z.nrows() != d.hard.nrows() {
        return Err(Error::shape("classify_with_domain", format!("{} rows", z.nrows()), d.hard.nrows()));
    }
    if z.ncols() != g.fan_in() || d.num_domains() != offset.fan_in() || g.fan_out() != offset.fan_out() {
        return Err(Error::shape(
            "classify_with_domain",
            format!("{} latent and {} domain columns", g.fan_in(), offset.fan_in()),
            format!("{} and {}", z.ncols(), d.num_domains()),
        ));
    }
    Ok(softmax_rows(&(g.apply(z) + offset.apply(&d.hard))))
}

pub fn assign_domains(p: &DomainLearnerParams, z: &Array2<f64>) -> Result<DomainAssignment> {
    if z.ncols() != p.l1.fan_in() {
        return Err(Error::shape("assign_domains", format!("{} columns", p.l1.fan_in()), z.ncols()));
    }
    let h = p.l1.apply(z).mapv(|v| v.max(0.0));
    Ok(DomainAssignment::from_soft(softmax_rows(&p.l2.apply(&h))))
}

/// Central-difference check of the gradient that `build` records on a tape.
///
/// `build` receives the tape and one parameter leaf per entry of `params`
/// and returns a scalar loss. At most `max_entries` coordinates per
/// parameter are probed (all of them if the parameter is smaller). Relative
/// error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(
    params: &[Array2<f64>],
    step: f64,
    max_entries: usize,
    floor: f64,
    rng: &mut impl rand::Rng,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "loss in gradient check".into() })
        }
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite { what: "loss in gradient check".into() });
    }
    let mut grads = tape.backward(loss);
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let len = p.len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, max_entries).into_vec()
        };
        for flat in picks {
            let idx = (flat / p.ncols(), flat % p.ncols());
            let orig = p[idx];
            probe[pi][idx] = orig + step;
            let up = eval(&probe)?;
            probe[pi][idx] = orig - step;
            let down = eval(&probe)?;
            probe[pi][idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Column means, used by summary statistics.
pub fn column_means(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}
