//! Exact conditional mutual information on small discrete joints and the
//! variational estimator built from q(y|z) and q_d(y|z,d).

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p(y, d, z)` over finite supports, stored `y`-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub ny: usize,
    pub nd: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(ny: usize, nd: usize, nz: usize, p: Vec<f64>) -> Result<DiscreteJoint> {
        if ny == 0 || nd == 0 || nz == 0 || p.len() != ny * nd * nz {
            return Err(Error::shape("joint", ny * nd * nz, p.len()));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("joint has a negative or non-finite entry".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("joint sums to {total}, not 1")));
        }
        Ok(DiscreteJoint { ny, nd, nz, p })
    }

    /// Dirichlet(`concentration`) draw over all cells.
    pub fn random(ny: usize, nd: usize, nz: usize, concentration: f64, rng: &mut impl rand::Rng) -> DiscreteJoint {
        let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
        let mut p: Vec<f64> = (0..ny * nd * nz).map(|_| gamma.sample(rng).max(1e-300)).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        // Renormalise once more so the sum is within rounding of 1.
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        DiscreteJoint { ny, nd, nz, p }
    }

    pub fn at(&self, y: usize, d: usize, z: usize) -> f64 {
        self.p[(y * self.nd + d) * self.nz + z]
    }

    pub fn p_z(&self, z: usize) -> f64 {
        (0..self.ny).flat_map(|y| (0..self.nd).map(move |d| (y, d))).map(|(y, d)| self.at(y, d, z)).sum()
    }

    pub fn p_yz(&self, y: usize, z: usize) -> f64 {
        (0..self.nd).map(|d| self.at(y, d, z)).sum()
    }

    pub fn p_dz(&self, d: usize, z: usize) -> f64 {
        (0..self.ny).map(|y| self.at(y, d, z)).sum()
    }
}

/// `I(Y; D | Z)` in nats, by enumeration.
pub fn cmi_exact(j: &DiscreteJoint) -> f64 {
    let mut total = 0.0;
    for z in 0..j.nz {
        let pz = j.p_z(z);
        for y in 0..j.ny {
            let pyz = j.p_yz(y, z);
            for d in 0..j.nd {
                let p = j.at(y, d, z);
                if p > 0.0 {
                    total += p * (p * pz / (pyz * j.p_dz(d, z))).ln();
                }
            }
        }
    }
    total.max(0.0)
}

/// Softmax-parameterised tables for q(y|z) and q_d(y|z,d).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalTables {
    /// `[z][y]` logits
    pub q: Vec<Vec<f64>>,
    /// `[z][d][y]` logits
    pub qd: Vec<Vec<Vec<f64>>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl VariationalTables {
    pub fn uniform(j: &DiscreteJoint) -> VariationalTables {
        VariationalTables {
            q: vec![vec![0.0; j.ny]; j.nz],
            qd: vec![vec![vec![0.0; j.ny]; j.nd]; j.nz],
        }
    }

    pub fn q_prob(&self, z: usize) -> Vec<f64> {
        softmax(&self.q[z])
    }

    pub fn qd_prob(&self, z: usize, d: usize) -> Vec<f64> {
        softmax(&self.qd[z][d])
    }
}

/// Gradient descent on the expected negative log-likelihood of both tables.
pub fn fit_variational(j: &DiscreteJoint, steps: usize, lr: f64) -> VariationalTables {
    let mut t = VariationalTables::uniform(j);
    for _ in 0..steps {
        for z in 0..j.nz {
            let q = t.q_prob(z);
            let pz = j.p_z(z);
            for y in 0..j.ny {
                t.q[z][y] -= lr * (pz * q[y] - j.p_yz(y, z));
            }
            for d in 0..j.nd {
                let qd = t.qd_prob(z, d);
                let pdz = j.p_dz(d, z);
                for y in 0..j.ny {
                    t.qd[z][d][y] -= lr * (pdz * qd[y] - j.at(y, d, z));
                }
            }
        }
    }
    t
}

/// `Î = E_p[ln q_d(y|z,d) − ln q(y|z)]`.
pub fn cmi_estimate(j: &DiscreteJoint, t: &VariationalTables) -> f64 {
    let mut total = 0.0;
    for z in 0..j.nz {
        let q = t.q_prob(z);
        for d in 0..j.nd {
            let qd = t.qd_prob(z, d);
            for y in 0..j.ny {
                let p = j.at(y, d, z);
                if p > 0.0 {
                    total += p * (qd[y].ln() - q[y].ln());
                }
            }
        }
    }
    total
}

/// `E_{p(z)} KL[p(y|z) ‖ q(y|z)]`.
pub fn kl_q(j: &DiscreteJoint, t: &VariationalTables) -> f64 {
    let mut total = 0.0;
    for z in 0..j.nz {
        let pz = j.p_z(z);
        let q = t.q_prob(z);
        for (y, qy) in q.iter().enumerate() {
            let p = j.p_yz(y, z);
            if p > 0.0 {
                total += p * ((p / pz) / qy).ln();
            }
        }
    }
    total
}

/// `E_{p(z,d)} KL[p(y|z,d) ‖ q_d(y|z,d)]`.
pub fn kl_qd(j: &DiscreteJoint, t: &VariationalTables) -> f64 {
    let mut total = 0.0;
    for z in 0..j.nz {
        for d in 0..j.nd {
            let pdz = j.p_dz(d, z);
            let qd = t.qd_prob(z, d);
            for (y, qy) in qd.iter().enumerate() {
                let p = j.at(y, d, z);
                if p > 0.0 {
                    total += p * ((p / pdz) / qy).ln();
                }
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCase {
    pub sizes: (usize, usize, usize),
    pub steps: usize,
    pub cmi: f64,
    pub estimate: f64,
    pub kl_q: f64,
    pub kl_qd: f64,
    /// `kl_qd` at or below the qualifying threshold.
    pub qualifies: bool,
    /// `estimate ≥ cmi − slack`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub cases: Vec<BoundCase>,
    pub kl_threshold: f64,
    pub slack: f64,
    pub qualifying: usize,
    pub qualifying_passed: usize,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.qualifying > 0 && self.qualifying == self.qualifying_passed
    }
}

/// Fits the tables on `num_joints` random joints with supports of size 2–4
/// and checks `Î ≥ I − slack` wherever the q_d fit reaches `kl_threshold`.
/// Fitting budgets vary across joints so that not every fit converges.
pub fn check_upper_bound(num_joints: usize, seed: u64, kl_threshold: f64, slack: f64) -> BoundReport {
    let mut r = crate::rng::stream(seed, "cmi");
    let mut cases = Vec::with_capacity(num_joints);
    for i in 0..num_joints {
        let ny = r.random_range(2..=4);
        let nd = r.random_range(2..=4);
        let nz = r.random_range(2..=4);
        let conc = [0.3, 1.0, 3.0][i % 3];
        let joint = DiscreteJoint::random(ny, nd, nz, conc, &mut r);
        let steps = 10usize << (i % 7);
        let t = fit_variational(&joint, steps, 4.0);
        let cmi = cmi_exact(&joint);
        let estimate = cmi_estimate(&joint, &t);
        let kd = kl_qd(&joint, &t);
        cases.push(BoundCase {
            sizes: (ny, nd, nz),
            steps,
            cmi,
            estimate,
            kl_q: kl_q(&joint, &t),
            kl_qd: kd,
            qualifies: kd <= kl_threshold,
            holds: estimate >= cmi - slack,
        });
    }
    let qualifying = cases.iter().filter(|c| c.qualifies).count();
    let qualifying_passed = cases.iter().filter(|c| c.qualifies && c.holds).count();
    BoundReport {
        cases,
        kl_threshold,
        slack,
        qualifying,
        qualifying_passed,
    }
}
