//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; scalars are `1×1`. Nodes are appended in
//! evaluation order, so the reverse pass walks the tape backwards. Binary
//! element-wise ops broadcast an operand whose extent along an axis is 1.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Constant sparse matrix times a variable.
    SpMM(Rc<Csr>, Var),
    /// `X·W + scatter(rows, Δ)·W` with constant sparse `X`.
    InputMatMul {
        x: Rc<Csr>,
        w: Var,
        delta: Option<(Rc<Vec<usize>>, Var)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    /// Sum over rows, giving `1×c`.
    SumRows(Var),
    /// Sum over columns, giving `n×1`.
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    LogSoftmax(Var),
    Softmax(Var),
    /// `out[i] = x[i, idx[i]]`, giving `n×1`.
    Pick(Var, Rc<Vec<usize>>),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let a = a.broadcast(shape).expect("broadcast lhs");
    let b = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn spmm(&mut self, m: Rc<Csr>, b: Var) -> Var {
        let value = m.matmul(self.value(b).view());
        let ng = self.ng(b);
        self.push(value, Op::SpMM(m, b), ng)
    }

    /// `X·W`, plus `Δ·W` added onto `rows` when a dense perturbation is given.
    pub fn input_matmul(&mut self, x: Rc<Csr>, w: Var, delta: Option<(Rc<Vec<usize>>, Var)>) -> Var {
        let wv = self.value(w);
        let mut value = x.matmul(wv.view());
        let mut ng = self.ng(w);
        if let Some((rows, d)) = &delta {
            let dw = self.value(*d).dot(wv);
            for (i, &r) in rows.iter().enumerate() {
                value.row_mut(r).scaled_add(1.0, &dw.row(i));
            }
            ng |= self.ng(*d);
        }
        self.push(value, Op::InputMatMul { x, w, delta }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    /// `out[idx[i]] += a[i]` into an `n_out`-row matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, n_out: usize) -> Var {
        let av = self.value(a);
        let mut value = Array2::zeros((n_out, av.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(r).scaled_add(1.0, &av.row(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterAddRows(a, idx), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn pick(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), idx.len(), "pick index length");
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| av[[i, idx[i]]]);
        let ng = self.ng(a);
        self.push(value, Op::Pick(a, idx), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, contrib: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::SpMM(m, b) => acc(*b, m.t_matmul(g.view())),
            Op::InputMatMul { x, w, delta } => {
                let wv = val(*w);
                if self.ng(*w) {
                    let mut gw = x.t_matmul(g.view());
                    if let Some((rows, d)) = delta {
                        let g_rows = g.select(Axis(0), rows);
                        gw += &val(*d).t().dot(&g_rows);
                    }
                    acc(*w, gw);
                }
                if let Some((rows, d)) = delta {
                    if self.ng(*d) {
                        let g_rows = g.select(Axis(0), rows);
                        acc(*d, g_rows.dot(&wv.t()));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(g.clone(), val(*a).dim()));
                acc(*b, reduce_to(g.clone(), val(*b).dim()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g.clone(), val(*a).dim()));
                acc(*b, reduce_to(-g, val(*b).dim()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, reduce_to(binary(g, val(*b), |x, y| x * y), val(*a).dim()));
                }
                if self.ng(*b) {
                    acc(*b, reduce_to(binary(g, val(*a), |x, y| x * y), val(*b).dim()));
                }
            }
            Op::Div(a, b) => {
                if self.ng(*a) {
                    acc(*a, reduce_to(binary(g, val(*b), |x, y| x / y), val(*a).dim()));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out/b
                    let t = binary(&binary(g, &node.value, |x, y| x * y), val(*b), |x, y| -x / y);
                    acc(*b, reduce_to(t, val(*b).dim()));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, Zip::from(g).and(val(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 })),
            Op::Softplus(a) => acc(*a, Zip::from(g).and(val(*a)).map_collect(|&g, &x| g * sigmoid(x))),
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Ln(a) => acc(*a, g / val(*a)),
            Op::Sqrt(a) => acc(*a, Zip::from(g).and(&node.value).map_collect(|&g, &y| g * 0.5 / y)),
            Op::Square(a) => acc(*a, Zip::from(g).and(val(*a)).map_collect(|&g, &x| 2.0 * g * x)),
            Op::ClampMin(a, floor) => acc(
                *a,
                Zip::from(g).and(val(*a)).map_collect(|&g, &x| if x > *floor { g } else { 0.0 }),
            ),
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SumRows(a) => {
                let shape = val(*a).dim();
                acc(*a, g.broadcast(shape).expect("sum_rows grad").to_owned());
            }
            Op::SumCols(a) => {
                let shape = val(*a).dim();
                acc(*a, g.broadcast(shape).expect("sum_cols grad").to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    acc(p, g.slice(ndarray::s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).ncols();
                    acc(p, g.slice(ndarray::s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut out = Array2::zeros(val(*a).dim());
                for (i, &r) in idx.iter().enumerate() {
                    out.row_mut(r).scaled_add(1.0, &g.row(i));
                }
                acc(*a, out);
            }
            Op::ScatterAddRows(a, idx) => acc(*a, g.select(Axis(0), idx)),
            Op::LogSoftmax(a) => {
                // g - softmax * rowsum(g)
                let p = node.value.mapv(f64::exp);
                let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(&p * &rs));
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let dot = (g * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, p * &(g - &dot));
            }
            Op::Pick(a, idx) => {
                let mut out = Array2::zeros(val(*a).dim());
                for (i, &c) in idx.iter().enumerate() {
                    out[[i, c]] = g[[i, 0]];
                }
                acc(*a, out);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `build` at `x0` against the tape gradient.
    fn check(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let loss = build(&mut t, x);
        let g = t.backward(loss).get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[[i, j]] += delta;
                    let mut t = Tape::new();
                    let x = t.param(xp);
                    let l = build(&mut t, x);
                    t.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[[i, j]];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let x0 = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]];
        check(x0.clone(), |t, x| {
            let b = t.constant(array![[0.5, -0.25, 2.0]]);
            let y = t.mul(x, b);
            let c = t.constant(array![[1.5], [-0.5]]);
            let y = t.add(y, c);
            let y = t.softplus(y);
            let y = t.square(y);
            t.sum(y)
        });
        check(x0.clone(), |t, x| {
            let s = t.sum_rows(x);
            let e = t.exp(s);
            let y = t.div(x, e);
            let y2 = t.sum_cols(y);
            let y2 = t.square(y2);
            t.sum(y2)
        });
        check(x0.mapv(f64::abs) + 0.1, |t, x| {
            let r = t.sqrt(x);
            let l = t.ln(x);
            let y = t.sub(r, l);
            let k = t.sum(x);
            let y = t.div(y, k);
            t.sum(y)
        });
    }

    #[test]
    fn matrix_and_indexing_grads() {
        let x0 = array![[0.3, -1.2], [1.1, 0.4], [-0.6, 0.9]];
        let w = array![[0.2, -0.3, 0.5], [0.7, 0.1, -0.4]];
        check(x0.clone(), move |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let ls = t.log_softmax(y);
            let p = t.pick(ls, Rc::new(vec![0, 2, 1]));
            t.sum(p)
        });
        check(x0.clone(), |t, x| {
            let g = t.gather_rows(x, Rc::new(vec![2, 0, 2]));
            let s = t.scatter_add_rows(g, Rc::new(vec![1, 1, 0]), 4);
            let sm = t.softmax(s);
            let c = t.constant(Array2::from_shape_fn((4, 2), |(i, j)| (i + 2 * j) as f64));
            let y = t.mul(sm, c);
            let yt = t.transpose(y);
            let cat = t.concat_rows(&[yt, yt]);
            let cat2 = t.concat_cols(&[cat, cat]);
            let y = t.relu(cat2);
            t.sum(y)
        });
    }

    #[test]
    fn sparse_input_grads() {
        let xd = array![[1.0, 0.0, 2.0], [0.0, 3.0, 0.0]];
        let x = Rc::new(Csr::from_dense(xd.view()));
        let w0 = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]];
        let adj = Rc::new(Csr::from_dense(array![[0.5, 0.5], [0.5, 0.5]].view()));
        check(w0.clone(), {
            let x = x.clone();
            move |t, w| {
                let d = t.constant(array![[0.1, -0.2, 0.3]]);
                let h = t.input_matmul(x.clone(), w, Some((Rc::new(vec![1]), d)));
                let h = t.spmm(adj.clone(), h);
                let h = t.square(h);
                t.sum(h)
            }
        });
        check(array![[0.1, -0.2, 0.3]], move |t, d| {
            let wv = t.constant(w0.clone());
            let h = t.input_matmul(x.clone(), wv, Some((Rc::new(vec![1]), d)));
            let h = t.square(h);
            t.sum(h)
        });
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[-5.0, 1.0]]);
        let y = t.clamp_min(x, 0.0);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 1.0]]);
    }
}
