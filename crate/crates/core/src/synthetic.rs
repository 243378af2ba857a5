//! Linear structural causal model with several attack domains, and the
//! linear form of the invariant objective solved on it.
//!
//! Samples follow `y = Cγ + ε` and `ρ = ψ·[C; N]` where the non-causal part
//! `N = A_D·C + c_D·y + b_D + noise` depends on the domain. Because N reads
//! `y`, least squares on ρ leans on it and its risk moves from domain to
//! domain. The invariant fit penalizes, per domain, the residual-weighted
//! mean `E_D[z·(z − y)]` of the output `z = wᵀρ` and the mean residual.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Parameters of the non-causal generator in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// `d_n × d_c`
    pub a: DMatrix<f64>,
    /// Anti-causal loading on `y`, length `d_n`.
    pub c: DVector<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScm {
    pub gamma: DVector<f64>,
    pub noise_std: f64,
    /// `d_r × (d_c + d_n)`
    pub psi: DMatrix<f64>,
    pub nuisance_noise: f64,
    pub domains: Vec<DomainShift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub causal_dim: usize,
    pub nuisance_dim: usize,
    pub noise_std: f64,
    pub nuisance_noise: f64,
    pub shift_scale: f64,
    pub anti_causal_scale: f64,
    pub offset_scale: f64,
    pub num_domains: usize,
}

impl Default for ScmSpec {
    fn default() -> Self {
        ScmSpec {
            causal_dim: 3,
            nuisance_dim: 3,
            noise_std: 0.5,
            nuisance_noise: 0.5,
            shift_scale: 0.5,
            anti_causal_scale: 2.0,
            offset_scale: 1.0,
            num_domains: 10,
        }
    }
}

fn normal_matrix(r: usize, c: usize, scale: f64, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vector(n: usize, scale: f64, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

impl LinearScm {
    /// Random instance: Gaussian γ and ψ, and `num_domains` random shifts.
    pub fn random(spec: &ScmSpec, seed: u64) -> Result<LinearScm> {
        let mut r = rng::stream(seed, "scm");
        let d = spec.causal_dim + spec.nuisance_dim;
        let gamma = normal_vector(spec.causal_dim, 1.0, &mut r);
        let psi = normal_matrix(d, d, 1.0, &mut r);
        let domains = (0..spec.num_domains)
            .map(|_| DomainShift {
                a: normal_matrix(spec.nuisance_dim, spec.causal_dim, spec.shift_scale, &mut r),
                c: normal_vector(spec.nuisance_dim, spec.anti_causal_scale, &mut r),
                b: normal_vector(spec.nuisance_dim, spec.offset_scale, &mut r),
            })
            .collect();
        let scm = LinearScm {
            gamma,
            noise_std: spec.noise_std,
            psi,
            nuisance_noise: spec.nuisance_noise,
            domains,
        };
        scm.validate()?;
        Ok(scm)
    }

    pub fn causal_dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn nuisance_dim(&self) -> usize {
        self.psi.ncols() - self.causal_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let dc = self.causal_dim();
        if dc == 0 || self.psi.ncols() < dc {
            return Err(Error::InvalidArgument(format!(
                "degenerate SCM: {} causal dims, ψ has {} columns",
                dc,
                self.psi.ncols()
            )));
        }
        if !(self.noise_std >= 0.0 && self.nuisance_noise >= 0.0) {
            return Err(Error::InvalidArgument("noise scales must be nonnegative".into()));
        }
        if self.repr_dim() < dc {
            return Err(Error::InvalidArgument(format!("d_r = {} < d_c = {dc}", self.repr_dim())));
        }
        let block = self.psi.columns(0, dc).into_owned();
        if block.rank(1e-10) < dc {
            return Err(Error::InvalidArgument("ψ restricted to C is not injective".into()));
        }
        let dn = self.nuisance_dim();
        for (i, s) in self.domains.iter().enumerate() {
            if s.a.shape() != (dn, dc) || s.c.len() != dn || s.b.len() != dn {
                return Err(Error::InvalidArgument(format!("domain {i} shift has wrong shape")));
            }
        }
        Ok(())
    }

    /// Weights of the ground-truth defender: `wᵀρ = Cγ` for every sample.
    /// Requires ψ to be square.
    pub fn ground_truth(&self) -> Result<DVector<f64>> {
        let target = self.stacked_target();
        let lu = self.psi.transpose().lu();
        lu.solve(&target)
            .ok_or_else(|| Error::InvalidArgument("ψ is singular; ground truth is not unique".into()))
    }

    fn stacked_target(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.psi.ncols());
        t.rows_mut(0, self.causal_dim()).copy_from(&self.gamma);
        t
    }

    /// `u = ψᵀw`: the weights in `(C, N)` coordinates.
    pub fn latent_weights(&self, w: &DVector<f64>) -> DVector<f64> {
        self.psi.transpose() * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub domain: usize,
    /// `m × d_r`
    pub rho: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Latent causal factors, kept for diagnostics.
    pub c: DMatrix<f64>,
}

impl DomainSample {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn generate_domain_data(scm: &LinearScm, domain: usize, m: usize, rng: &mut Rng) -> Result<DomainSample> {
    scm.validate()?;
    let dr = scm.repr_dim();
    if m < dr + 1 {
        return Err(Error::InvalidArgument(format!("need at least {} samples, got {m}", dr + 1)));
    }
    let shift = scm
        .domains
        .get(domain)
        .ok_or_else(|| Error::InvalidArgument(format!("domain {domain} out of range")))?;
    let dc = scm.causal_dim();
    let dn = scm.nuisance_dim();
    let c = normal_matrix(m, dc, 1.0, rng);
    let eps = normal_vector(m, scm.noise_std, rng);
    let y = &c * &scm.gamma + eps;
    let mut latent = DMatrix::zeros(m, dc + dn);
    latent.columns_mut(0, dc).copy_from(&c);
    if dn > 0 {
        let noise = normal_matrix(m, dn, scm.nuisance_noise, rng);
        let mut n = &c * shift.a.transpose() + &y * shift.c.transpose() + noise;
        for mut row in n.row_iter_mut() {
            row += shift.b.transpose();
        }
        latent.columns_mut(dc, dn).copy_from(&n);
    }
    let rho = latent * scm.psi.transpose();
    Ok(DomainSample { domain, rho, y, c })
}

/// One sample per listed domain, drawn from a single stream.
pub fn generate_domains(scm: &LinearScm, domains: &[usize], m: usize, seed: u64) -> Result<Vec<DomainSample>> {
    let mut r = rng::stream(seed, "scm_samples");
    domains.iter().map(|&d| generate_domain_data(scm, d, m, &mut r)).collect()
}

/// First and second moments of one domain.
#[derive(Debug, Clone)]
struct Moments {
    s: DMatrix<f64>,
    m: DVector<f64>,
    yy: f64,
    mu: DVector<f64>,
    ybar: f64,
}

impl Moments {
    fn of(d: &DomainSample) -> Moments {
        let n = d.len() as f64;
        let ones = DVector::from_element(d.len(), 1.0);
        Moments {
            s: d.rho.transpose() * &d.rho / n,
            m: d.rho.transpose() * &d.y / n,
            yy: d.y.dot(&d.y) / n,
            mu: d.rho.transpose() * &ones / n,
            ybar: d.y.sum() / n,
        }
    }

    fn risk(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.s * w)) - 2.0 * w.dot(&self.m) + self.yy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Weight of the invariance penalty.
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: 30.0,
            max_iter: 500,
            tol: 1e-12,
        }
    }
}

/// Pooled least squares over all samples.
pub fn fit_erm(samples: &[DomainSample]) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("domain samples"));
    }
    let mom: Vec<Moments> = samples.iter().map(Moments::of).collect();
    let total: f64 = samples.iter().map(|s| s.len() as f64).sum();
    let dr = samples[0].rho.ncols();
    let mut s = DMatrix::zeros(dr, dr);
    let mut m = DVector::zeros(dr);
    for (mo, d) in mom.iter().zip(samples) {
        let p = d.len() as f64 / total;
        s += &mo.s * p;
        m += &mo.m * p;
    }
    s.lu()
        .solve(&m)
        .ok_or_else(|| Error::InvalidArgument("pooled second-moment matrix is singular".into()))
}

struct Objective<'a> {
    mom: &'a [Moments],
    weights: Vec<f64>,
    lambda: f64,
}

impl Objective<'_> {
    fn value(&self, w: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (mo, p) in self.mom.iter().zip(&self.weights) {
            f += p * mo.risk(w);
            let q = w.dot(&(&mo.s * w)) - w.dot(&mo.m);
            let l = w.dot(&mo.mu) - mo.ybar;
            f += self.lambda * (q * q + l * l);
        }
        f
    }

    fn grad_hess(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = w.len();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (mo, p) in self.mom.iter().zip(&self.weights) {
            let sw = &mo.s * w;
            g += (&sw - &mo.m) * (2.0 * p);
            h += &mo.s * (2.0 * p);
            let q = w.dot(&sw) - w.dot(&mo.m);
            let dq = &sw * 2.0 - &mo.m;
            let l = w.dot(&mo.mu) - mo.ybar;
            g += (&dq * q + &mo.mu * l) * (2.0 * self.lambda);
            h += (&dq * dq.transpose() + &mo.s * (2.0 * q) + &mo.mu * mo.mu.transpose()) * (2.0 * self.lambda);
        }
        (g, h)
    }
}

/// Minimizes pooled risk plus `λ·Σ_D (E_D[z(z−y)]² + E_D[z−y]²)` with a
/// damped Newton method started from the least-squares solution.
pub fn fit_invariant_defender(samples: &[DomainSample], config: &FitConfig) -> Result<DVector<f64>> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "invariant fit needs at least 2 training domains, got {}",
            samples.len()
        )));
    }
    if !(config.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be ≥ 0, got {}", config.lambda)));
    }
    let mom: Vec<Moments> = samples.iter().map(Moments::of).collect();
    let total: f64 = samples.iter().map(|s| s.len() as f64).sum();
    let obj = Objective {
        mom: &mom,
        weights: samples.iter().map(|s| s.len() as f64 / total).collect(),
        lambda: config.lambda,
    };
    let mut w = fit_erm(samples)?;
    let mut f = obj.value(&w);
    let mut damping = 1e-6;
    let n = w.len();
    for _ in 0..config.max_iter {
        let (g, h) = obj.grad_hess(&w);
        if g.amax() < config.tol {
            break;
        }
        let mut moved = false;
        while damping < 1e12 {
            let a = &h + DMatrix::identity(n, n) * damping;
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let cand = &w + &step;
            let fc = obj.value(&cand);
            if fc < f {
                let small = step.amax() < 1e-15 * (1.0 + w.amax());
                w = cand;
                f = fc;
                damping = (damping / 10.0).max(1e-12);
                moved = !small;
                break;
            }
            damping *= 10.0;
        }
        if !moved {
            break;
        }
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "invariant defender weights".into(),
        });
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenderReport {
    pub domains: Vec<usize>,
    pub risks: Vec<f64>,
    pub mean_risk: f64,
    /// Population standard deviation of the per-domain risks.
    pub spread: f64,
    pub range: f64,
    /// L∞ distance of `ψᵀw` to `[γ; 0]`.
    pub distance: f64,
    pub causal_error: f64,
    pub noncausal_norm: f64,
}

pub fn domain_risk(w: &DVector<f64>, d: &DomainSample) -> f64 {
    let r = &d.rho * w - &d.y;
    r.dot(&r) / d.len() as f64
}

pub fn verify_invariant_defender(w: &DVector<f64>, scm: &LinearScm, held_out: &[DomainSample]) -> DefenderReport {
    let risks: Vec<f64> = held_out.iter().map(|d| domain_risk(w, d)).collect();
    let k = risks.len().max(1) as f64;
    let mean_risk = risks.iter().sum::<f64>() / k;
    let spread = (risks.iter().map(|r| (r - mean_risk).powi(2)).sum::<f64>() / k).sqrt();
    let range = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - risks.iter().cloned().fold(f64::INFINITY, f64::min);
    let u = scm.latent_weights(w);
    let dc = scm.causal_dim();
    let causal_error = (u.rows(0, dc) - &scm.gamma).amax();
    let rest = u.rows(dc, u.len() - dc);
    let noncausal_norm = rest.norm();
    DefenderReport {
        domains: held_out.iter().map(|d| d.domain).collect(),
        risks,
        mean_risk,
        spread,
        range: if range.is_finite() { range } else { 0.0 },
        distance: causal_error.max(rest.amax()),
        causal_error,
        noncausal_norm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub scm: ScmSpec,
    pub fit: FitConfig,
    pub train_domains: usize,
    pub samples_per_domain: usize,
    pub seed: u64,
    pub max_distance: f64,
    pub max_spread_ratio: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            scm: ScmSpec::default(),
            fit: FitConfig::default(),
            train_domains: 5,
            samples_per_domain: 10_000,
            seed: 0,
            max_distance: 0.05,
            max_spread_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub invariant: DefenderReport,
    pub erm: DefenderReport,
    pub ground_truth: DefenderReport,
    pub invariant_weights: Vec<f64>,
    pub erm_weights: Vec<f64>,
    pub training_risk: f64,
    pub spread_ratio: f64,
    pub recovers_weights: bool,
    pub spread_ok: bool,
    pub passed: bool,
}

/// Fits both defenders on the first `train_domains` domains and evaluates
/// them on the rest.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    if config.train_domains < 2 || config.train_domains >= config.scm.num_domains {
        return Err(Error::InvalidArgument(format!(
            "need 2 ≤ train domains < {} total, got {}",
            config.scm.num_domains, config.train_domains
        )));
    }
    let scm = LinearScm::random(&config.scm, config.seed)?;
    let train_ids: Vec<usize> = (0..config.train_domains).collect();
    let held_ids: Vec<usize> = (config.train_domains..config.scm.num_domains).collect();
    let train = generate_domains(&scm, &train_ids, config.samples_per_domain, config.seed)?;
    let held = generate_domains(&scm, &held_ids, config.samples_per_domain, rng::sub_seed(config.seed, "held_out"))?;
    let w = fit_invariant_defender(&train, &config.fit)?;
    let e = fit_erm(&train)?;
    let truth = scm.ground_truth()?;
    let invariant = verify_invariant_defender(&w, &scm, &held);
    let erm = verify_invariant_defender(&e, &scm, &held);
    let ground_truth = verify_invariant_defender(&truth, &scm, &held);
    let training_risk = train.iter().map(|d| domain_risk(&w, d)).sum::<f64>() / train.len() as f64;
    let spread_ratio = invariant.spread / erm.spread;
    let recovers_weights = invariant.distance <= config.max_distance;
    let spread_ok = spread_ratio <= config.max_spread_ratio;
    Ok(SuiteReport {
        config: config.clone(),
        invariant,
        erm,
        ground_truth,
        invariant_weights: w.iter().copied().collect(),
        erm_weights: e.iter().copied().collect(),
        training_risk,
        spread_ratio,
        recovers_weights,
        spread_ok,
        passed: recovers_weights && spread_ok,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
