//! Per-observation MCMC kernels: Metropolis-adjusted Langevin (MALA) and
//! random-walk Metropolis-Hastings, plus a parallel sweep over a subset of
//! observations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_joint_and_potential_grad, LatentModel, LatentState, Prepared};
use crate::rng::{self, Purpose, StreamRng};

/// Largest admissible Langevin drift norm `|h grad U|`.
pub const MAX_DRIFT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Mala,
    Rwmh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// MALA Euler-Maruyama step.
    pub h: f64,
    /// RWMH proposal variance per coordinate.
    pub sigma2: f64,
    /// Kernel applications per selected observation.
    #[serde(default = "one")]
    pub inner_steps: usize,
}

fn one() -> usize {
    1
}

impl SamplerConfig {
    pub fn mala(h: f64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Mala,
            h,
            sigma2: 0.3,
            inner_steps: 1,
        }
    }

    pub fn rwmh(sigma2: f64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Rwmh,
            h: 0.1,
            sigma2,
            inner_steps: 1,
        }
    }

    /// The step parameter consulted by this kind (`h` or `sigma2`).
    pub fn step(&self) -> f64 {
        match self.kind {
            SamplerKind::Mala => self.h,
            SamplerKind::Rwmh => self.sigma2,
        }
    }

    pub fn with_step(mut self, v: f64) -> Self {
        match self.kind {
            SamplerKind::Mala => self.h = v,
            SamplerKind::Rwmh => self.sigma2 = v,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.step();
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!(
                "sampler step must be positive, got {v}"
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutcome {
    pub new_xi: Vec<f64>,
    pub accepted: bool,
    /// `min(0, log acceptance ratio)`.
    pub log_alpha: f64,
}

/// `log q_h(to | from)` for the Langevin proposal, given `grad U(from)`.
pub fn log_q_h(to: &[f64], from: &[f64], grad_u_from: &[f64], h: f64) -> f64 {
    let k = to.len() as f64;
    -0.5 * k * (4.0 * std::f64::consts::PI * h).ln() - mala_quad(to, from, grad_u_from, h)
}

/// `|to - (from - h g)|^2 / (4h)`.
#[inline]
fn mala_quad(to: &[f64], from: &[f64], g: &[f64], h: f64) -> f64 {
    to.iter()
        .zip(from)
        .zip(g)
        .map(|((t, f), gk)| {
            let d = t - f + h * gk;
            d * d
        })
        .sum::<f64>()
        / (4.0 * h)
}

fn draw_normals(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

fn non_finite(i: usize, what: &str) -> Error {
    Error::diverged(format!(
        "observation {i}: non-finite {what}; reduce the sampler step size"
    ))
}

/// Scratch buffers reused across kernel calls on one worker.
struct Scratch {
    prop: Vec<f64>,
    z: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        Scratch {
            prop: vec![0.0; k],
            z: vec![0.0; k],
            g0: vec![0.0; k],
            g1: vec![0.0; k],
        }
    }
}

/// One MALA step in place. Returns `(accepted, log_alpha)`.
fn mala_in_place<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &mut [f64],
    h: f64,
    rng: &mut StreamRng,
    s: &mut Scratch,
) -> Result<(bool, f64)> {
    draw_normals(rng, &mut s.z);
    let u: f64 = rng.random();

    let lj0 = log_joint_and_potential_grad(model, prep, i, xi, &mut s.g0);
    let drift = h * s.g0.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !drift.is_finite() || !lj0.is_finite() {
        return Err(non_finite(i, "potential gradient"));
    }
    if drift > MAX_DRIFT {
        return Err(Error::diverged(format!(
            "observation {i}: Langevin drift {drift:e} exceeds {MAX_DRIFT:e}; reduce h"
        )));
    }
    let scale = (2.0 * h).sqrt();
    for (((p, x), g), z) in s.prop.iter_mut().zip(xi.iter()).zip(&s.g0).zip(&s.z) {
        *p = x - h * g + scale * z;
    }
    let lj1 = log_joint_and_potential_grad(model, prep, i, &s.prop, &mut s.g1);
    if !lj1.is_finite() || s.g1.iter().any(|g| !g.is_finite()) {
        return Err(non_finite(i, "proposal density"));
    }
    // the normalising constants of q_h cancel
    let fwd = mala_quad(&s.prop, xi, &s.g0, h);
    let rev = mala_quad(xi, &s.prop, &s.g1, h);
    let delta = (lj1 - rev) - (lj0 - fwd);
    if delta.is_nan() {
        return Err(non_finite(i, "acceptance ratio"));
    }
    let log_alpha = delta.min(0.0);
    let accepted = u < log_alpha.exp();
    if accepted {
        xi.copy_from_slice(&s.prop);
    }
    Ok((accepted, log_alpha))
}

fn log_joint<M: LatentModel + ?Sized>(model: &M, prep: &Prepared<'_>, i: usize, xi: &[f64]) -> f64 {
    model.data_loglik(prep.values(), i, xi) + prep.prior_logpdf(xi)
}

/// One random-walk MH step in place. Returns `(accepted, log_alpha)`.
fn rwmh_in_place<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &mut [f64],
    sigma2: f64,
    rng: &mut StreamRng,
    s: &mut Scratch,
) -> Result<(bool, f64)> {
    draw_normals(rng, &mut s.z);
    let u: f64 = rng.random();
    let sd = sigma2.sqrt();
    for ((p, x), z) in s.prop.iter_mut().zip(xi.iter()).zip(&s.z) {
        *p = x + sd * z;
    }
    let lj0 = log_joint(model, prep, i, xi);
    let lj1 = log_joint(model, prep, i, &s.prop);
    if !lj0.is_finite() || !lj1.is_finite() {
        return Err(non_finite(i, "complete-data log-likelihood"));
    }
    let log_alpha = (lj1 - lj0).min(0.0);
    let accepted = u < log_alpha.exp();
    if accepted {
        xi.copy_from_slice(&s.prop);
    }
    Ok((accepted, log_alpha))
}

fn check_input(xi: &[f64], k: usize, i: usize) -> Result<()> {
    if xi.len() != k {
        return Err(Error::invalid(format!(
            "latent vector has length {}, expected {k}",
            xi.len()
        )));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLatent { obs: i });
    }
    Ok(())
}

/// One MALA step for observation `i`. Consumes K standard normals then one
/// uniform from `rng`.
pub fn mala_step<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
    h: f64,
    rng: &mut StreamRng,
) -> Result<KernelOutcome> {
    if !(h > 0.0) {
        return Err(Error::invalid("MALA step h must be positive"));
    }
    check_input(xi, prep.latent_dim(), i)?;
    let mut new_xi = xi.to_vec();
    let mut s = Scratch::new(xi.len());
    let (accepted, log_alpha) = mala_in_place(model, prep, i, &mut new_xi, h, rng, &mut s)?;
    Ok(KernelOutcome {
        new_xi,
        accepted,
        log_alpha,
    })
}

/// One random-walk MH step for observation `i`. Consumes K standard normals
/// then one uniform from `rng`.
pub fn rwmh_step<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
    sigma2: f64,
    rng: &mut StreamRng,
) -> Result<KernelOutcome> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("random-walk variance must be positive"));
    }
    check_input(xi, prep.latent_dim(), i)?;
    let mut new_xi = xi.to_vec();
    let mut s = Scratch::new(xi.len());
    let (accepted, log_alpha) = rwmh_in_place(model, prep, i, &mut new_xi, sigma2, rng, &mut s)?;
    Ok(KernelOutcome {
        new_xi,
        accepted,
        log_alpha,
    })
}

/// Accepted and proposed move counts of one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub accepted: usize,
    pub proposed: usize,
}

impl SweepStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Applies `config.inner_steps` kernel steps to every listed observation
/// (indices must be distinct); other rows are untouched. Observation `i` at
/// sweep `iteration` draws from its own substream, so the result does not
/// depend on the number of workers.
pub fn sweep<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    xi: &mut LatentState,
    indices: &[usize],
    config: &SamplerConfig,
    seed: u64,
    iteration: u64,
) -> Result<SweepStats> {
    config.validate()?;
    let k = xi.dim();
    if k != prep.latent_dim() || xi.n_obs() != model.n_obs() {
        return Err(Error::invalid("latent state does not match the dataset"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= xi.n_obs()) {
        return Err(Error::invalid(format!(
            "observation index {bad} out of range"
        )));
    }
    let current: &LatentState = xi;
    let updates: Vec<(Vec<f64>, usize)> = indices
        .par_iter()
        .map_init(
            || Scratch::new(k),
            |s, &i| {
                let mut row = current.row(i).to_vec();
                let mut r = rng::stream(seed, Purpose::Kernel, iteration, i as u64);
                let mut acc = 0;
                for _ in 0..config.inner_steps {
                    let (a, _) = match config.kind {
                        SamplerKind::Mala => {
                            mala_in_place(model, prep, i, &mut row, config.h, &mut r, s)?
                        }
                        SamplerKind::Rwmh => {
                            rwmh_in_place(model, prep, i, &mut row, config.sigma2, &mut r, s)?
                        }
                    };
                    acc += usize::from(a);
                }
                Ok((row, acc))
            },
        )
        .collect::<Result<_>>()?;
    let mut stats = SweepStats {
        accepted: 0,
        proposed: indices.len() * config.inner_steps,
    };
    for (&i, (row, acc)) in indices.iter().zip(updates) {
        xi.row_mut(i).copy_from_slice(&row);
        stats.accepted += acc;
    }
    Ok(stats)
}
