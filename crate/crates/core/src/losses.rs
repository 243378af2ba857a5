//! Predictive, invariance and domain-diversity losses.
//!
//! Each loss has an array form, used for reporting and tests, and a tape
//! form used for training. Both clamp probabilities at [`PROB_FLOOR`].

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const PROB_FLOOR: f64 = 1e-12;
/// Domains with less total soft weight than this are ignored by L_D.
pub const DOMAIN_WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub predictive: f64,
    pub node_invariance: f64,
    pub structure_invariance: f64,
    pub total: f64,
    pub alpha: f64,
}

pub fn total_loss(predictive: f64, node_invariance: f64, structure_invariance: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        predictive,
        node_invariance,
        structure_invariance,
        total: predictive + node_invariance + structure_invariance,
        alpha,
    }
}

fn check_subset(probs: &Array2<f64>, labels: &[i64], subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Empty("loss subset"));
    }
    if labels.len() != probs.nrows() {
        return Err(Error::shape("loss", format!("{} labels", probs.nrows()), labels.len()));
    }
    for &i in subset {
        let Some(&y) = labels.get(i) else {
            return Err(Error::InvalidArgument(format!("subset node {i} outside {} rows", labels.len())));
        };
        if y < 0 || y as usize >= probs.ncols() {
            return Err(Error::InvalidArgument(format!(
                "label {y} of node {i} outside 0..{}",
                probs.ncols()
            )));
        }
    }
    Ok(())
}

/// `−ln max(p_{i,Y_i}, floor)` for each node in `subset`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[i64], subset: &[usize]) -> Result<Array1<f64>> {
    check_subset(probs, labels, subset)?;
    Ok(subset
        .iter()
        .map(|&i| -probs[[i, labels[i] as usize]].max(PROB_FLOOR).ln())
        .collect())
}

pub fn predictive_loss(probs: &Array2<f64>, labels: &[i64], subset: &[usize]) -> Result<f64> {
    Ok(cross_entropy(probs, labels, subset)?.mean().expect("non-empty"))
}

/// Mean of `L(g_d) + α·[L(g) − L(g_d)]` over `subset`.
pub fn node_invariance_loss(
    probs_g: &Array2<f64>,
    probs_gd: &Array2<f64>,
    labels: &[i64],
    subset: &[usize],
    alpha: f64,
) -> Result<f64> {
    if probs_g.dim() != probs_gd.dim() {
        return Err(Error::shape(
            "node_invariance_loss",
            format!("{:?}", probs_g.dim()),
            format!("{:?}", probs_gd.dim()),
        ));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let lg = cross_entropy(probs_g, labels, subset)?;
    let lgd = cross_entropy(probs_gd, labels, subset)?;
    Ok(invariance_from_ce(lg.view(), lgd.view(), alpha))
}

/// Row `i` of each matrix must be computed from node `i`'s sampled
/// neighbour (with node `i`'s domain); the label is node `i`'s.
pub fn structure_invariance_loss(
    probs_g_nbr: &Array2<f64>,
    probs_gd_nbr: &Array2<f64>,
    labels: &[i64],
    subset: &[usize],
    alpha: f64,
) -> Result<f64> {
    node_invariance_loss(probs_g_nbr, probs_gd_nbr, labels, subset, alpha)
}

pub fn invariance_from_ce(lg: ArrayView1<'_, f64>, lgd: ArrayView1<'_, f64>, alpha: f64) -> f64 {
    let n = lg.len() as f64;
    lg.iter().zip(lgd).map(|(g, d)| d + alpha * (g - d)).sum::<f64>() / n
}

/// Pearson correlation; a constant argument gives 0.
pub fn pearson_correlation(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("pearson_correlation", u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(Error::InvalidArgument("pearson correlation needs at least 2 points".into()));
    }
    Ok(pearson_unchecked(u, v))
}

fn pearson_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu <= CONSTANT_EPS * CONSTANT_EPS || svv <= CONSTANT_EPS * CONSTANT_EPS {
        return 0.0;
    }
    (suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0)
}

/// Centered norms below this count as constant vectors.
const CONSTANT_EPS: f64 = 1e-12;

/// L_D: Σ over ordered domain pairs `D ≠ D′` of `PCC(r^D, ρ^{D′})`.
///
/// `r^D` is the soft-weighted mean of `z_i·(p_{i,Y_i} − 1)` and `ρ^{D′}` the
/// soft-weighted mean of `z_i`.
pub fn domain_diversity_loss(
    z: &Array2<f64>,
    probs_g: &Array2<f64>,
    labels: &[i64],
    soft: &Array2<f64>,
) -> Result<f64> {
    let subset: Vec<usize> = (0..z.nrows()).collect();
    check_subset(probs_g, labels, &subset)?;
    if soft.nrows() != z.nrows() || probs_g.nrows() != z.nrows() {
        return Err(Error::shape(
            "domain_diversity_loss",
            format!("{} rows", z.nrows()),
            format!("{} soft rows, {} prob rows", soft.nrows(), probs_g.nrows()),
        ));
    }
    if soft.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "domain diversity needs at least 2 domains, got {}",
            soft.ncols()
        )));
    }
    let residual = true_class_residual(probs_g, labels);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let rv = tape.constant(residual);
    let sv = tape.constant(soft.clone());
    let l = domain_diversity_tape(&mut tape, zv, rv, sv);
    Ok(tape.scalar(l))
}

/// `p_{i,Y_i} − 1` as an `n × 1` column.
pub fn true_class_residual(probs: &Array2<f64>, labels: &[i64]) -> Array2<f64> {
    Array2::from_shape_fn((probs.nrows(), 1), |(i, _)| probs[[i, labels[i] as usize]] - 1.0)
}

/// Per-sample clamped cross-entropy from logits, as an `n × 1` column.
pub fn ce_tape(tape: &mut Tape, logits: Var, labels: Rc<Vec<usize>>) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, labels);
    let clamped = tape.clamp_min(picked, PROB_FLOOR.ln());
    tape.neg(clamped)
}

/// Mean of `ce_gd + α·(ce_g − ce_gd)`.
pub fn invariance_tape(tape: &mut Tape, ce_g: Var, ce_gd: Var, alpha: f64) -> Var {
    let diff = tape.sub(ce_g, ce_gd);
    let scaled = tape.scale(diff, alpha);
    let per = tape.add(ce_gd, scaled);
    tape.mean(per)
}

/// Mean of `ce_gd + α·max(0, ce_g − ce_gd)`. A negative gap means g_d is
/// worse than g, so the conditional mutual information estimate is vacuous
/// there and the encoder gets no push from it.
pub fn hinged_invariance_tape(tape: &mut Tape, ce_g: Var, ce_gd: Var, alpha: f64) -> Var {
    let diff = tape.sub(ce_g, ce_gd);
    let gap = tape.relu(diff);
    let scaled = tape.scale(gap, alpha);
    let per = tape.add(ce_gd, scaled);
    tape.mean(per)
}

/// Tape form of L_D. `residual` is `n × 1`, `soft` is `n × |D|`.
pub fn domain_diversity_tape(tape: &mut Tape, z: Var, residual: Var, soft: Var) -> Var {
    let k = tape.shape(soft).1;
    let dz = tape.shape(z).1;
    let weights = tape.sum_rows(soft); // 1 × K
    let valid: Vec<bool> = tape.value(weights).iter().map(|&w| w >= DOMAIN_WEIGHT_FLOOR).collect();

    let soft_t = tape.transpose(soft); // K × n
    let wt = tape.transpose(weights); // K × 1
    let wt = tape.clamp_min(wt, DOMAIN_WEIGHT_FLOOR);
    let zr = tape.mul(z, residual);
    let r_sum = tape.matmul(soft_t, zr);
    let r = tape.div(r_sum, wt); // K × dz
    let p_sum = tape.matmul(soft_t, z);
    let rho = tape.div(p_sum, wt); // K × dz

    let center = |tape: &mut Tape, m: Var| {
        let s = tape.sum_cols(m);
        let mean = tape.scale(s, 1.0 / dz as f64);
        tape.sub(m, mean)
    };
    let rc = center(tape, r);
    let pc = center(tape, rho);
    let norm = |tape: &mut Tape, m: Var| {
        let sq = tape.square(m);
        let s = tape.sum_cols(sq);
        tape.sqrt(s)
    };
    let rn_raw = norm(tape, rc);
    let pn_raw = norm(tape, pc);
    let nonconst = |v: &Array2<f64>| -> Vec<bool> { v.iter().map(|&x| x > CONSTANT_EPS).collect() };
    let r_ok = nonconst(tape.value(rn_raw));
    let p_ok = nonconst(tape.value(pn_raw));
    let rn = tape.clamp_min(rn_raw, CONSTANT_EPS);
    let pn = tape.clamp_min(pn_raw, CONSTANT_EPS);

    let pct = tape.transpose(pc);
    let cov = tape.matmul(rc, pct); // K × K
    let pnt = tape.transpose(pn);
    let denom = tape.matmul(rn, pnt);
    let corr = tape.div(cov, denom);
    let mask = Array2::from_shape_fn((k, k), |(a, b)| {
        if a != b && valid[a] && valid[b] && r_ok[a] && p_ok[b] {
            1.0
        } else {
            0.0
        }
    });
    let mask = tape.constant(mask);
    let masked = tape.mul(corr, mask);
    tape.sum(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn predictive_examples() {
        let onehot = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(predictive_loss(&onehot, &[0, 1], &[0, 1]).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 7), 1.0 / 7.0);
        assert_abs_diff_eq!(predictive_loss(&uniform, &[0, 3, 6], &[0, 1, 2]).unwrap(), 7f64.ln(), epsilon = 1e-12);
        let p = array![[0.5, 0.5], [0.75, 0.25]];
        assert_abs_diff_eq!(predictive_loss(&p, &[0, 1], &[0, 1]).unwrap(), 1.039_720_770_839_917_9, epsilon = 1e-12);
        assert!(predictive_loss(&p, &[0, 1], &[]).is_err());
        assert!(predictive_loss(&p, &[0, 2], &[1]).is_err());
        assert!(predictive_loss(&p, &[0, -1], &[1]).is_err());
    }

    #[test]
    fn confident_wrong_prediction_is_finite() {
        let p = array![[1.0, 0.0]];
        let l = predictive_loss(&p, &[1], &[0]).unwrap();
        assert_abs_diff_eq!(l, -(1e-12f64).ln(), epsilon = 1e-9);
    }

    /// Probability rows whose true-class entry gives the requested loss.
    fn rows_with_loss(losses: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((losses.len(), 2), |(i, j)| {
            let p = (-losses[i]).exp();
            if j == 0 {
                p
            } else {
                1.0 - p
            }
        })
    }

    #[test]
    fn node_invariance_examples() {
        let g = rows_with_loss(&[0.8, 0.8]);
        let gd = rows_with_loss(&[0.5, 0.5]);
        let labels = [0, 0];
        let v = node_invariance_loss(&g, &gd, &labels, &[0, 1], 100.0).unwrap();
        assert_abs_diff_eq!(v, 30.5, epsilon = 1e-9);
        let same = node_invariance_loss(&gd, &gd, &labels, &[0, 1], 100.0).unwrap();
        assert_abs_diff_eq!(same, 0.5, epsilon = 1e-12);
        let a0 = node_invariance_loss(&g, &gd, &labels, &[0, 1], 0.0).unwrap();
        assert_abs_diff_eq!(a0, 0.5, epsilon = 1e-12);
        assert!(node_invariance_loss(&g, &gd, &labels, &[0], -1.0).is_err());
    }

    #[test]
    fn structure_invariance_examples() {
        let one = rows_with_loss(&[1.0]);
        assert_abs_diff_eq!(structure_invariance_loss(&one, &one, &[0], &[0], 25.0).unwrap(), 1.0, epsilon = 1e-12);
        let g = rows_with_loss(&[0.9]);
        let gd = rows_with_loss(&[0.2]);
        assert_abs_diff_eq!(structure_invariance_loss(&g, &gd, &[0], &[0], 10.0).unwrap(), 7.2, epsilon = 1e-9);
    }

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(),
            9.0 / (2.0 * 21f64.sqrt()),
            epsilon = 1e-14
        );
        assert_eq!(pearson_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 4.0]).unwrap(), 0.0);
        assert!(pearson_correlation(&[1.0], &[1.0]).is_err());
        assert!(pearson_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn total_is_sum() {
        let b = total_loss(1.0, 2.0, 3.0, 100.0);
        assert_eq!(b.total, 6.0);
    }

    #[test]
    fn diversity_single_domain_is_zero() {
        let z = array![[0.1, 0.5, -0.2], [0.3, -0.1, 0.4], [0.0, 0.2, 0.2], [-0.5, 0.1, 0.3]];
        let probs = array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]];
        let soft = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert_eq!(domain_diversity_loss(&z, &probs, &[0, 1, 0, 1], &soft).unwrap(), 0.0);
        assert!(domain_diversity_loss(&z, &probs, &[0, 1, 0, 1], &array![[1.0], [1.0], [1.0], [1.0]]).is_err());
    }

    #[test]
    fn diversity_soft_fixture() {
        // Reference value from an independent numpy evaluation.
        let z = array![[0.1, 0.5, -0.2], [0.3, -0.1, 0.4], [0.0, 0.2, 0.2], [-0.5, 0.1, 0.3]];
        let probs = array![[0.7, 0.2, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]];
        let soft = array![[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.1, 0.9]];
        let got = domain_diversity_loss(&z, &probs, &[0, 1, 2, 1], &soft).unwrap();
        assert_abs_diff_eq!(got, -0.233_714_201_793_640_83, epsilon = 1e-12);
    }

    /// Hard memberships evaluated by hand: with hard memberships r and ρ
    /// are plain means over each domain's rows.
    #[test]
    fn diversity_matches_direct_pearson() {
        let z = array![[0.1, 0.5, -0.2], [0.3, -0.1, 0.4], [0.0, 0.2, 0.2], [-0.5, 0.1, 0.3]];
        let probs = array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]];
        let labels = [0, 1, 0, 1];
        let soft = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let res: Vec<f64> = (0..4).map(|i| probs[[i, labels[i] as usize]] - 1.0).collect();
        let mean_rows = |rows: &[usize], scale: bool| -> Vec<f64> {
            (0..3)
                .map(|j| {
                    rows.iter().map(|&i| z[[i, j]] * if scale { res[i] } else { 1.0 }).sum::<f64>() / rows.len() as f64
                })
                .collect()
        };
        let (a, b) = ([0, 1], [2, 3]);
        let expect = pearson_unchecked(&mean_rows(&a, true), &mean_rows(&b, false))
            + pearson_unchecked(&mean_rows(&b, true), &mean_rows(&a, false));
        let got = domain_diversity_loss(&z, &probs, &labels, &soft).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }
}
