//! Post-fit estimators: observed information through the score recursion,
//! importance-sampling marginal log-likelihood, and adaptive Gauss-Hermite
//! quadrature for one-dimensional latent variables.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, log_sum_exp};
use crate::model::{
    complete_data_loglik, grad_latent, grad_params_into, BlockKind, LatentModel, LatentState,
    ModelKind, ParamVector, Prepared,
};
use crate::rng::{self, Purpose};

const OBS_CHUNK: usize = 128;

/// Symmetric p x p information estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMatrix {
    pub p: usize,
    /// Row-major p x p.
    pub matrix: Vec<f64>,
    pub iterations_averaged: usize,
}

impl InfoMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.p + b]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for a in 0..self.p {
            for b in 0..a {
                m = m.max((self.get(a, b) - self.get(b, a)).abs());
            }
        }
        m
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.p, self.p, &self.matrix);
        let sym = (&m + m.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    /// Symmetric within 1e-12 and PSD down to an eigenvalue of -1e-8.
    pub fn check(&self) -> Result<()> {
        let asym = self.max_asymmetry();
        if asym > 1e-12 {
            return Err(Error::invalid(format!(
                "information matrix asymmetric by {asym:e}"
            )));
        }
        let ev = self.min_eigenvalue();
        if ev < -1e-8 {
            return Err(Error::invalid(format!(
                "information matrix has eigenvalue {ev:e}"
            )));
        }
        Ok(())
    }

    pub fn frobenius_distance(&self, other: &[f64]) -> f64 {
        self.matrix
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn frobenius_norm(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `(1/N) sum_i s_i s_i^T` for the given per-observation scores.
fn mean_outer(scores: &[Vec<f64>], p: usize) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = scores
        .par_chunks(OBS_CHUNK)
        .map(|chunk| {
            let mut m = vec![0.0; p * p];
            for s in chunk {
                for a in 0..p {
                    let sa = s[a];
                    if sa == 0.0 {
                        continue;
                    }
                    for b in 0..=a {
                        m[a * p + b] += sa * s[b];
                    }
                }
            }
            m
        })
        .collect();
    let mut m = vec![0.0; p * p];
    for part in parts {
        for (x, y) in m.iter_mut().zip(&part) {
            *x += y;
        }
    }
    let n = scores.len().max(1) as f64;
    for a in 0..p {
        for b in 0..=a {
            let v = m[a * p + b] / n;
            m[a * p + b] = v;
            m[b * p + a] = v;
        }
    }
    m
}

/// Streaming form of the information recursion
/// `I <- I + gamma (I~ - I)`, averaged over every pushed iteration. The
/// recursion is initialised at the first pushed `I~`.
#[derive(Debug, Clone)]
pub struct InfoAccumulator {
    p: usize,
    current: Vec<f64>,
    sum: Vec<f64>,
    count: usize,
}

impl InfoAccumulator {
    pub fn new(p: usize) -> Self {
        InfoAccumulator {
            p,
            current: vec![0.0; p * p],
            sum: vec![0.0; p * p],
            count: 0,
        }
    }

    pub fn push_matrix(&mut self, tilde: &[f64], gamma: f64) {
        let g = if self.count == 0 { 1.0 } else { gamma };
        for ((c, t), s) in self.current.iter_mut().zip(tilde).zip(self.sum.iter_mut()) {
            *c += g * (t - *c);
            *s += *c;
        }
        self.count += 1;
    }

    /// Scores at `(beta, xi_i)` for every observation, then one recursion step.
    pub fn push_scores<M: LatentModel + ?Sized>(
        &mut self,
        model: &M,
        prep: &Prepared<'_>,
        xi: &LatentState,
        gamma: f64,
    ) {
        let scores = all_scores(model, prep, xi);
        let tilde = mean_outer(&scores, self.p);
        self.push_matrix(&tilde, gamma);
    }

    pub fn finish(&self) -> Result<InfoMatrix> {
        if self.count == 0 {
            return Err(Error::invalid(
                "no iterations after burn-in for the information estimate",
            ));
        }
        Ok(InfoMatrix {
            p: self.p,
            matrix: self.sum.iter().map(|s| s / self.count as f64).collect(),
            iterations_averaged: self.count,
        })
    }
}

fn all_scores<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    xi: &LatentState,
) -> Vec<Vec<f64>> {
    let p = model.n_params();
    (0..model.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut s = vec![0.0; p];
            grad_params_into(model, prep, i, xi.row(i), &mut s);
            s
        })
        .collect()
}

/// Observed information from a trace of `(beta^(t), xi^(t+1))` pairs, using
/// the iterations after `burn_in` with `gamma_t = t^(-exponent)`.
pub fn observed_information<M: LatentModel + ?Sized>(
    model: &M,
    trace: &[(ParamVector, LatentState)],
    burn_in: usize,
    exponent: f64,
) -> Result<InfoMatrix> {
    if trace.len() <= burn_in {
        return Err(Error::invalid("trace is not longer than the burn-in"));
    }
    let mut acc = InfoAccumulator::new(model.n_params());
    for (t, (beta, xi)) in trace.iter().enumerate().skip(burn_in) {
        let prep = Prepared::new(beta)?;
        let gamma = ((t + 1) as f64).powf(-exponent);
        acc.push_scores(model, &prep, xi, gamma);
    }
    acc.finish()
}

/// Per-observation Gaussian importance densities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDensity {
    pub k: usize,
    /// N x K means.
    pub means: Vec<f64>,
    /// N lower Cholesky factors, K x K each.
    pub chols: Vec<f64>,
    /// `log det` of each covariance.
    pub log_dets: Vec<f64>,
    pub inflation: f64,
}

impl ImportanceDensity {
    pub fn n_obs(&self) -> usize {
        self.log_dets.len()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.k..(i + 1) * self.k]
    }

    pub fn chol(&self, i: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.chols[i * kk..(i + 1) * kk]
    }

    pub fn covariance(&self, i: usize) -> Vec<f64> {
        linalg::lower_gram(self.chol(i), self.k)
    }
}

pub const MIN_IS_SAMPLES: usize = 10;
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Moment-matched Gaussian per observation with the covariance diagonal
/// multiplied by `inflation`, regularised by flooring eigenvalues at 1e-8.
pub fn fit_importance_density(
    samples: &[LatentState],
    inflation: f64,
) -> Result<ImportanceDensity> {
    if samples.len() < MIN_IS_SAMPLES {
        return Err(Error::invalid(format!(
            "importance density needs at least {MIN_IS_SAMPLES} latent samples, got {}",
            samples.len()
        )));
    }
    if !(inflation >= 1.0) {
        return Err(Error::invalid("tail inflation must be at least 1"));
    }
    let (n, k) = (samples[0].n_obs(), samples[0].dim());
    if samples.iter().any(|s| s.n_obs() != n || s.dim() != k) {
        return Err(Error::invalid("latent samples have inconsistent shapes"));
    }
    let t = samples.len() as f64;
    let fitted: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut mean = vec![0.0; k];
            for s in samples {
                for (m, v) in mean.iter_mut().zip(s.row(i)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= t;
            }
            let mut cov = DMatrix::<f64>::zeros(k, k);
            for s in samples {
                let d = DVector::from_iterator(k, s.row(i).iter().zip(&mean).map(|(v, m)| v - m));
                cov += &d * d.transpose();
            }
            cov /= t - 1.0;
            for d in 0..k {
                cov[(d, d)] *= inflation;
            }
            let eig = SymmetricEigen::new(cov);
            let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
            let reg =
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            let reg = (&reg + reg.transpose()) * 0.5;
            let log_det = vals.iter().map(|v| v.ln()).sum::<f64>();
            let chol = nalgebra::Cholesky::new(reg.clone())
                .map(|c| c.l())
                .unwrap_or_else(|| DMatrix::from_diagonal(&vals.map(f64::sqrt)));
            let mut l = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..=a {
                    l[a * k + b] = chol[(a, b)];
                }
            }
            (mean, l, log_det)
        })
        .collect();
    let mut density = ImportanceDensity {
        k,
        means: Vec::with_capacity(n * k),
        chols: Vec::with_capacity(n * k * k),
        log_dets: Vec::with_capacity(n),
        inflation,
    };
    for (m, l, ld) in fitted {
        density.means.extend(m);
        density.chols.extend(l);
        density.log_dets.push(ld);
    }
    Ok(density)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMarginal {
    pub total: f64,
    pub per_obs: Vec<f64>,
    /// Effective sample size `(sum w)^2 / sum w^2` per observation.
    pub ess: Vec<f64>,
    /// Largest normalised weight per observation.
    pub max_weight: Vec<f64>,
    pub draws: usize,
}

impl LogMarginal {
    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_ess(&self) -> f64 {
        self.ess.iter().sum::<f64>() / self.ess.len().max(1) as f64
    }
}

/// Self-normalised importance-sampling estimate of
/// `sum_i log integral f_i(Y_i | xi, beta) pi(xi | beta) dxi`.
pub fn is_log_marginal<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    density: &ImportanceDensity,
    draws: usize,
    seed: u64,
) -> Result<LogMarginal> {
    if draws == 0 {
        return Err(Error::invalid(
            "importance sampling needs at least one draw",
        ));
    }
    let k = model.latent_dim();
    if density.k != k || density.n_obs() != model.n_obs() {
        return Err(Error::invalid(
            "importance density does not match the dataset",
        ));
    }
    let prep = Prepared::new(beta)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let per: Vec<Result<(f64, f64, f64)>> = (0..model.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Importance, i as u64, 0);
            let mean = density.mean(i);
            let chol = density.chol(i);
            let mut eps = vec![0.0; k];
            let mut xi = vec![0.0; k];
            let mut lw = Vec::with_capacity(draws);
            let mut lwf = Vec::with_capacity(draws);
            for _ in 0..draws {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut r);
                }
                linalg::lower_mat_vec(chol, &eps, &mut xi);
                for (x, m) in xi.iter_mut().zip(mean) {
                    *x += m;
                }
                let log_q = -0.5 * (k as f64 * ln2pi + density.log_dets[i] + linalg::dot(&eps, &eps));
                let w = prep.prior_logpdf(&xi) - log_q;
                lw.push(w);
                lwf.push(w + model.data_loglik(prep.values(), i, &xi));
            }
            let norm = log_sum_exp(&lw);
            if !norm.is_finite() {
                return Err(Error::invalid(format!(
                    "observation {i}: all importance weights vanished; the importance density does not cover the prior"
                )));
            }
            let est = log_sum_exp(&lwf) - norm;
            let sq: Vec<f64> = lw.iter().map(|w| 2.0 * w).collect();
            let ess = (2.0 * norm - log_sum_exp(&sq)).exp();
            let max_w = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((est, ess, (max_w - norm).exp()))
        })
        .collect();
    let mut out = LogMarginal {
        total: 0.0,
        per_obs: Vec::with_capacity(model.n_obs()),
        ess: Vec::with_capacity(model.n_obs()),
        max_weight: Vec::with_capacity(model.n_obs()),
        draws,
    };
    for r in per {
        let (e, ess, mw) = r?;
        out.per_obs.push(e);
        out.ess.push(ess);
        out.max_weight.push(mw);
    }
    out.total = out.per_obs.iter().sum();
    Ok(out)
}

/// Gauss-Hermite nodes and weights for the weight function `exp(-x^2)`,
/// by Newton iteration on the orthonormal Hermite recurrence. Nodes ascend.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = (j + 1) as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    (x, w)
}

fn require_1d<M: LatentModel + ?Sized>(model: &M) -> Result<()> {
    if model.latent_dim() != 1 {
        return Err(Error::invalid(format!(
            "quadrature requires K = 1, got K = {}",
            model.latent_dim()
        )));
    }
    Ok(())
}

/// Mode and curvature scale of the 1-D integrand `log f_i(Y_i, xi | beta)`.
fn mode_and_scale<M: LatentModel + ?Sized>(model: &M, prep: &Prepared<'_>, i: usize) -> (f64, f64) {
    let g = |x: f64| {
        grad_latent(model, prep, i, &[x])
            .map(|v| v[0])
            .unwrap_or(f64::NAN)
    };
    let curv = |x: f64| {
        let h = 1e-4 * x.abs().max(1.0);
        (g(x + h) - g(x - h)) / (2.0 * h)
    };
    let mut x = 0.0f64;
    for _ in 0..50 {
        let gx = g(x);
        let c = curv(x);
        if !(c > 0.0) || !gx.is_finite() {
            break;
        }
        let step = (gx / c).clamp(-1.0, 1.0);
        x -= step;
        if step.abs() < 1e-10 {
            break;
        }
    }
    let c = curv(x);
    let scale = if c > 0.0 && c.is_finite() {
        1.0 / c.sqrt()
    } else {
        1.0
    };
    (x, scale)
}

struct Rule {
    nodes: Vec<f64>,
    log_w: Vec<f64>,
}

fn rule(n: usize) -> Rule {
    let (x, w) = gauss_hermite(n);
    // weights times exp(x^2) for the change of variables, in logs
    let log_w = x.iter().zip(&w).map(|(x, w)| w.ln() + x * x).collect();
    Rule { nodes: x, log_w }
}

/// Adaptive nodes `xi_k` and log integrand values for observation `i`.
fn adapted<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    r: &Rule,
) -> (Vec<f64>, Vec<f64>, f64) {
    let (m, s) = mode_and_scale(model, prep, i);
    let root2s = std::f64::consts::SQRT_2 * s;
    let xs: Vec<f64> = r.nodes.iter().map(|x| m + root2s * x).collect();
    let terms: Vec<f64> = xs
        .iter()
        .zip(&r.log_w)
        .map(|(x, lw)| {
            lw + complete_data_loglik(model, prep, i, &[*x]).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    (xs, terms, root2s.ln())
}

/// Marginal log-likelihood by adaptive Gauss-Hermite quadrature with
/// `nodes` points per observation (K = 1 only).
pub fn quadrature_loglik_1d<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    nodes: usize,
) -> Result<f64> {
    Ok(quadrature_per_obs_1d(model, beta, nodes)?.iter().sum())
}

pub fn quadrature_per_obs_1d<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    nodes: usize,
) -> Result<Vec<f64>> {
    require_1d(model)?;
    let prep = Prepared::new(beta)?;
    let r = rule(nodes);
    Ok((0..model.n_obs())
        .into_par_iter()
        .map(|i| {
            let (_, terms, log_jac) = adapted(model, &prep, i, &r);
            log_jac + log_sum_exp(&terms)
        })
        .collect())
}

/// Posterior-expected scores `E[d/dbeta log f_i | Y_i]` by adaptive
/// quadrature: the exact per-observation gradients of the marginal
/// log-likelihood (K = 1 only).
pub fn quadrature_scores_1d<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    nodes: usize,
) -> Result<Vec<Vec<f64>>> {
    require_1d(model)?;
    let prep = Prepared::new(beta)?;
    let r = rule(nodes);
    let p = model.n_params();
    Ok((0..model.n_obs())
        .into_par_iter()
        .map(|i| {
            let (xs, terms, _) = adapted(model, &prep, i, &r);
            let norm = log_sum_exp(&terms);
            let mut s = vec![0.0; p];
            let mut tmp = vec![0.0; p];
            for (x, t) in xs.iter().zip(&terms) {
                let w = (t - norm).exp();
                if w == 0.0 {
                    continue;
                }
                tmp.fill(0.0);
                grad_params_into(model, &prep, i, &[*x], &mut tmp);
                for (a, b) in s.iter_mut().zip(&tmp) {
                    *a += w * b;
                }
            }
            s
        })
        .collect())
}

/// `(1/N) sum_i s_i s_i^T` with quadrature-exact scores.
pub fn quadrature_outer_product_info<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    nodes: usize,
) -> Result<Vec<f64>> {
    let scores = quadrature_scores_1d(model, beta, nodes)?;
    Ok(mean_outer(&scores, model.n_params()))
}

/// Coordinates optimised by [`mmle_1d`]: everything except the M2PL
/// Cholesky block, which is fixed at 1 when K = 1.
fn free_coords(beta: &ParamVector) -> Vec<usize> {
    let layout = beta.layout();
    let fixed = if layout.kind() == ModelKind::M2pl {
        layout.range(BlockKind::Chol)
    } else {
        None
    };
    (0..beta.len())
        .filter(|q| fixed.as_ref().is_none_or(|r| !r.contains(q)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MmleResult {
    pub beta: ParamVector,
    pub loglik: f64,
    pub iterations: usize,
    pub max_abs_grad: f64,
}

/// Direct maximisation of the quadrature marginal log-likelihood by damped
/// Newton steps (Hessian from central differences of the exact gradient)
/// with backtracking (K = 1 only).
pub fn mmle_1d<M: LatentModel + ?Sized>(
    model: &M,
    start: &ParamVector,
    nodes: usize,
) -> Result<MmleResult> {
    require_1d(model)?;
    let mut beta = crate::model::project(start)?;
    let free = free_coords(&beta);
    let f = free.len();
    let grad = |b: &ParamVector| -> Result<Vec<f64>> {
        let scores = quadrature_scores_1d(model, b, nodes)?;
        let mut g = vec![0.0; f];
        for chunk in scores.chunks(OBS_CHUNK) {
            for s in chunk {
                for (gq, &q) in g.iter_mut().zip(&free) {
                    *gq += s[q];
                }
            }
        }
        Ok(g)
    };
    let shift = |b: &ParamVector, dir: &[f64], t: f64| -> Result<ParamVector> {
        let mut v = b.values().to_vec();
        for (d, &q) in dir.iter().zip(&free) {
            v[q] += t * d;
        }
        b.with_values(v)
    };
    let mut ll = quadrature_loglik_1d(model, &beta, nodes)?;
    let mut g = grad(&beta)?;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it;
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < 1e-7 {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(f, f);
        for c in 0..f {
            let h = 1e-5 * beta.values()[free[c]].abs().max(1.0);
            let mut e = vec![0.0; f];
            e[c] = 1.0;
            let gp = grad(&shift(&beta, &e, h)?)?;
            let gm = grad(&shift(&beta, &e, -h)?)?;
            for r in 0..f {
                hess[(r, c)] = -(gp[r] - gm[r]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let gv = DVector::from_column_slice(&g);
        let dir: Vec<f64> = match nalgebra::Cholesky::new(hess) {
            Some(ch) => ch.solve(&gv).iter().copied().collect(),
            None => g.iter().map(|v| v / ll.abs().max(1.0)).collect(),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = shift(&beta, &dir, t)?;
            if let Ok(cl) = quadrature_loglik_1d(model, &cand, nodes) {
                if cl >= ll - 1e-12 * ll.abs() {
                    beta = cand;
                    ll = cl;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        g = grad(&beta)?;
    }
    let max_abs_grad = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(MmleResult {
        beta,
        loglik: ll,
        iterations,
        max_abs_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CholFactor, M2plData, M2plModel};
    use rand::Rng;

    fn k1_m2pl(n: usize, j: usize, seed: u64) -> (M2plModel, ParamVector) {
        let mut r = rng::stream(seed, Purpose::Misc, 0, 0);
        let y = (0..n * j).map(|_| r.random_range(0..2u8)).collect();
        let m = M2plModel::new(M2plData::new(n, j, 1, y, vec![1; j]).unwrap());
        let mut beta = ParamVector::zeros(m.layout().clone());
        for q in 0..j {
            beta.values_mut()[q] = r.random_range(-1.0..1.0);
            beta.values_mut()[j + q] = r.random_range(0.5..1.5);
        }
        beta.set_chol(&CholFactor::identity(1));
        (m, beta)
    }

    #[test]
    fn hermite_rule_integrates_polynomials() {
        let (x, w) = gauss_hermite(20);
        let pi = std::f64::consts::PI;
        assert!((w.iter().sum::<f64>() - pi.sqrt()).abs() < 1e-13);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - pi.sqrt() / 2.0).abs() < 1e-13);
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 3.0 * pi.sqrt() / 4.0).abs() < 1e-12);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        let (x61, w61) = gauss_hermite(61);
        assert!((w61.iter().sum::<f64>() - pi.sqrt()).abs() < 1e-12);
        assert_eq!(x61[30], 0.0);
    }

    #[test]
    fn zero_loadings_give_bernoulli_half() {
        let (m, mut beta) = k1_m2pl(30, 5, 1);
        for v in &mut beta.values_mut()[..10] {
            *v = 0.0;
        }
        let ll = quadrature_loglik_1d(&m, &beta, 61).unwrap();
        let want = 30.0 * 5.0 * 0.5f64.ln();
        assert!((ll - want).abs() < 1e-10);
    }

    #[test]
    fn node_counts_agree() {
        let (m, beta) = k1_m2pl(100, 10, 2);
        let a = quadrature_loglik_1d(&m, &beta, 41).unwrap();
        let b = quadrature_loglik_1d(&m, &beta, 61).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn quadrature_scores_match_gradient_of_loglik() {
        let (m, beta) = k1_m2pl(40, 4, 3);
        let s = quadrature_scores_1d(&m, &beta, 61).unwrap();
        let total: Vec<f64> = (0..beta.len())
            .map(|q| s.iter().map(|v| v[q]).sum())
            .collect();
        for q in 0..8 {
            let h = 1e-5;
            let mut up = beta.values().to_vec();
            up[q] += h;
            let mut dn = beta.values().to_vec();
            dn[q] -= h;
            let fu = quadrature_loglik_1d(&m, &beta.with_values(up).unwrap(), 61).unwrap();
            let fd = quadrature_loglik_1d(&m, &beta.with_values(dn).unwrap(), 61).unwrap();
            let num = (fu - fd) / (2.0 * h);
            assert!(
                (num - total[q]).abs() < 1e-6 * num.abs().max(1.0),
                "{q}: {num} vs {}",
                total[q]
            );
        }
    }

    #[test]
    fn quadrature_rejects_k2() {
        let m = M2plModel::new(M2plData::new(1, 1, 2, vec![1], vec![1, 1]).unwrap());
        let mut beta = ParamVector::zeros(m.layout().clone());
        beta.set_chol(&CholFactor::identity(2));
        assert!(quadrature_loglik_1d(&m, &beta, 21).is_err());
    }

    #[test]
    fn constant_scores_give_outer_product() {
        let s = vec![vec![1.0, -2.0, 0.5]; 7];
        let m = mean_outer(&s, 3);
        let mut acc = InfoAccumulator::new(3);
        for t in 1..=20 {
            acc.push_matrix(&m, (t as f64).powf(-0.51));
        }
        let info = acc.finish().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert!((info.get(a, b) - s[0][a] * s[0][b]).abs() < 1e-14);
            }
        }
        info.check().unwrap();
        let zero = mean_outer(&vec![vec![0.0; 3]; 4], 3);
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(InfoAccumulator::new(2).finish().is_err());
    }

    #[test]
    fn degenerate_cloud_gets_floor() {
        let snaps: Vec<LatentState> = (0..12)
            .map(|_| LatentState::from_rows(1, 2, vec![0.7, -0.2]).unwrap())
            .collect();
        let d = fit_importance_density(&snaps, 2.0).unwrap();
        assert!((d.mean(0)[0] - 0.7).abs() < 1e-15 && (d.mean(0)[1] + 0.2).abs() < 1e-15);
        let c = d.covariance(0);
        assert!((c[0] - EIGEN_FLOOR).abs() < 1e-20 && (c[3] - EIGEN_FLOOR).abs() < 1e-20);
        assert!(c[1].abs() < 1e-20);
        assert!(fit_importance_density(&snaps[..5], 2.0).is_err());
    }

    #[test]
    fn fitted_moments_match_source() {
        // draws from N((1, -1), [[1, 0.5], [0.5, 2]])
        let t = 4000;
        let l = [1.0, 0.0, 0.5, (2.0f64 - 0.25).sqrt()];
        let mut r = rng::stream(9, Purpose::Misc, 0, 0);
        let snaps: Vec<LatentState> = (0..t)
            .map(|_| {
                let e: [f64; 2] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
                let x = vec![1.0 + l[0] * e[0], -1.0 + l[2] * e[0] + l[3] * e[1]];
                LatentState::from_rows(1, 2, x).unwrap()
            })
            .collect();
        let d = fit_importance_density(&snaps, 1.0).unwrap();
        let se_mean = (2.0f64 / t as f64).sqrt();
        assert!((d.mean(0)[0] - 1.0).abs() < 3.0 * se_mean);
        assert!((d.mean(0)[1] + 1.0).abs() < 3.0 * se_mean);
        let c = d.covariance(0);
        // SE of a sample variance is sigma^2 sqrt(2 / (T - 1))
        let se = |v: f64| v * (2.0 / (t as f64 - 1.0)).sqrt();
        assert!((c[0] - 1.0).abs() < 3.0 * se(1.0));
        assert!((c[3] - 2.0).abs() < 3.0 * se(2.0));
        // SE of a covariance: sqrt((s11 s22 + s12^2) / (T - 1))
        assert!((c[1] - 0.5).abs() < 3.0 * ((2.0f64 + 0.25) / (t as f64 - 1.0)).sqrt());
        let d2 = fit_importance_density(&snaps, 2.0).unwrap();
        assert!((d2.covariance(0)[0] - 2.0 * c[0]).abs() < 1e-9);
    }

    #[test]
    fn prior_as_density_gives_plain_mean() {
        let (m, beta) = k1_m2pl(3, 4, 4);
        let density = ImportanceDensity {
            k: 1,
            means: vec![0.0; 3],
            chols: vec![1.0; 3],
            log_dets: vec![0.0; 3],
            inflation: 1.0,
        };
        let out = is_log_marginal(&m, &beta, &density, 200, 5).unwrap();
        // replay the same draws
        let prep = Prepared::new(&beta).unwrap();
        for i in 0..3 {
            let mut r = rng::stream(5, Purpose::Importance, i as u64, 0);
            let lf: Vec<f64> = (0..200)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    m.data_loglik(prep.values(), i, &[e])
                })
                .collect();
            let want = log_sum_exp(&lf) - 200f64.ln();
            assert!((out.per_obs[i] - want).abs() < 1e-12);
            assert!((out.ess[i] - 200.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_integrand_is_exact() {
        let (m, mut beta) = k1_m2pl(2, 3, 6);
        for v in &mut beta.values_mut()[..6] {
            *v = 0.0;
        }
        let density = ImportanceDensity {
            k: 1,
            means: vec![0.3, -0.4],
            chols: vec![0.7, 1.3],
            log_dets: vec![(0.49f64).ln(), (1.69f64).ln()],
            inflation: 1.0,
        };
        let out = is_log_marginal(&m, &beta, &density, 7, 1).unwrap();
        for v in out.per_obs {
            assert!((v - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }
}
