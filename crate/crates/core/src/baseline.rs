//! Plain two-layer graph convolution network: the undefended reference model
//! and the surrogate that evaluation attacks are crafted on.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::ce_tape;
use crate::nn::{argmax_rows, propagate, BoundLinear, Dropout, GraphInput, Linear, PropContext};
use crate::optim::Adam;
use crate::rng;
use crate::tape::{softmax_rows, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Gcn {
    pub conv1: Linear,
    pub conv2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden: 64,
            dropout: 0.5,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            patience: 50,
        }
    }
}

impl Gcn {
    pub fn new(num_features: usize, hidden: usize, num_classes: usize, rng: &mut impl rand::Rng) -> Gcn {
        Gcn {
            conv1: Linear::glorot(num_features, hidden, rng),
            conv2: Linear::glorot(hidden, num_classes, rng),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.conv1.w, &self.conv1.b, &self.conv2.w, &self.conv2.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.conv1.w, &mut self.conv1.b, &mut self.conv2.w, &mut self.conv2.b]
    }

    /// Logits for every node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &GraphInput,
        ctx: &PropContext,
        delta: Option<Var>,
        trainable: bool,
        dropout: Option<&mut Dropout<'_>>,
    ) -> (Var, [BoundLinear; 2]) {
        let c1 = BoundLinear::bind(tape, &self.conv1, trainable);
        let c2 = BoundLinear::bind(tape, &self.conv2, trainable);
        let delta = match (&input.delta_rows, delta) {
            (Some(rows), Some(d)) => Some((rows.clone(), d)),
            (None, None) => None,
            _ => panic!("delta rows and delta values must be given together"),
        };
        let xw = tape.input_matmul(input.x.clone(), c1.w, delta);
        let h = propagate(tape, ctx, xw);
        let h = tape.add(h, c1.b);
        let mut h = tape.relu(h);
        if let Some(d) = dropout {
            if d.p > 0.0 {
                let mask = tape.constant(crate::nn::dropout_mask(tape.shape(h), d.p, d.rng));
                h = tape.mul(h, mask);
            }
        }
        let hw = tape.matmul(h, c2.w);
        let out = propagate(tape, ctx, hw);
        let logits = tape.add(out, c2.b);
        (logits, [c1, c2])
    }

    pub fn predict_proba(&self, graph: &Graph) -> Array2<f64> {
        let input = GraphInput::from_graph(graph);
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, &input, &input.context(), None, false, None);
        softmax_rows(tape.value(logits))
    }
}

/// Fraction of `nodes` whose argmax under `probs` matches the label.
pub fn accuracy(probs: &Array2<f64>, graph: &Graph, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Empty("node set"));
    }
    let pred = argmax_rows(probs);
    let mut hits = 0usize;
    for &v in nodes {
        let y = graph
            .label(v)
            .ok_or_else(|| Error::InvalidArgument(format!("node {v} has no label")))?;
        hits += usize::from(pred[v] == y);
    }
    Ok(hits as f64 / nodes.len() as f64)
}

/// Trains on `data.splits.train` with early stopping on validation accuracy
/// and returns the best-validation parameters.
pub fn train_gcn(data: &DatasetBundle, config: &GcnConfig, seed: u64) -> Result<Gcn> {
    train_gcn_on(&data.graph, &data.splits.train, &data.splits.val, config, seed)
}

pub fn train_gcn_on(graph: &Graph, train: &[usize], val: &[usize], config: &GcnConfig, seed: u64) -> Result<Gcn> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut init = rng::stream(seed, rng::INIT);
    let mut model = Gcn::new(graph.num_features(), config.hidden, graph.num_classes(), &mut init);
    let mut drop_rng = rng::stream(seed, rng::TRAIN);
    let mut opt = Adam::for_params(config.lr, config.weight_decay, &model.params());
    let input = GraphInput::from_graph(graph);
    let ctx = input.context();
    let idx = Rc::new(train.to_vec());
    let labels = Rc::new(
        train
            .iter()
            .map(|&v| graph.label(v).ok_or_else(|| Error::InvalidArgument(format!("training node {v} has no label"))))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut since = 0usize;
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let mut d = Dropout {
            p: config.dropout,
            rng: &mut drop_rng,
        };
        let (logits, bound) = model.forward(&mut tape, &input, &ctx, None, true, Some(&mut d));
        let picked = tape.gather_rows(logits, idx.clone());
        let ce = ce_tape(&mut tape, picked, labels.clone());
        let loss = tape.mean(ce);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite { what: "GCN training loss".into() });
        }
        let mut grads = tape.backward(loss);
        let g: Vec<Array2<f64>> = bound
            .iter()
            .flat_map(|b| b.vars())
            .zip(model.params())
            .map(|(v, p)| grads.take_or_zeros(v, p.dim()))
            .collect();
        opt.step(model.params_mut(), &g);

        if val.is_empty() {
            best = (0.0, model.clone());
            continue;
        }
        let acc = accuracy(&model.predict_proba(graph), graph, val)?;
        if acc > best.0 {
            best = (acc, model.clone());
            since = 0;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};

    #[test]
    fn learns_toy_graph() {
        let g = generate(&SynthSpec::toy(200, 3), 1).unwrap();
        let data = DatasetBundle::from_graph(g, "toy", 1).unwrap();
        let m = train_gcn(&data, &GcnConfig::default(), 1).unwrap();
        let acc = accuracy(&m.predict_proba(&data.graph), &data.graph, &data.splits.test).unwrap();
        assert!(acc > 0.6, "{acc}");
        let again = train_gcn(&data, &GcnConfig::default(), 1).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn accuracy_rejects_empty() {
        let g = generate(&SynthSpec::toy(20, 2), 1).unwrap();
        let p = Array2::zeros((20, 2));
        assert!(accuracy(&p, &g, &[]).is_err());
    }
}
