//! Adam with L2 weight decay folded into the gradient.

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, weight_decay: f64, params: &[&Array2<f64>]) -> Adam {
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        Adam::new(lr, weight_decay, &shapes)
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = array![[1.0, -2.0]];
        let mut opt = Adam::new(0.1, 0.0, &[(1, 2)]);
        opt.step(vec![&mut p], &[array![[3.0, -0.5]]]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = array![[5.0, -3.0]];
        let mut opt = Adam::new(0.05, 0.0, &[(1, 2)]);
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p}");
    }
}
