//! Latent variable models: the shared interface, the Gaussian latent prior,
//! and the two concrete models (multilevel logistic regression and the
//! confirmatory M2PL).
//!
//! A model only supplies the conditional data term `log P(Y_i | xi_i, beta)`
//! and its derivatives. The Gaussian prior `N(mu, L L^T)` (with `mu = 0` when
//! the layout has no mean block) is handled here once for both models.

mod m2pl;
mod multilevel;
mod params;
pub mod simulate;

use std::sync::Arc;

pub use m2pl::{M2plData, M2plModel};
pub use multilevel::{MultilevelData, MultilevelModel};
pub use params::{
    sigma_from_chol, tri_index, tri_len, BlockKind, CholFactor, Layout, ModelKind, ParamFile,
    ParamVector,
};

use crate::error::{Error, Result};
use crate::linalg;

/// Smallest admissible `|l_kk|` before the latent covariance counts as singular.
pub const SINGULAR_DIAG: f64 = 1e-12;
/// Smallest Cholesky row norm the projection will rescale.
pub const DEGENERATE_ROW_NORM: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// N x K matrix of per-observation latent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl LatentState {
    pub fn zeros(n: usize, k: usize) -> Self {
        LatentState {
            n,
            k,
            data: vec![0.0; n * k],
        }
    }

    pub fn from_rows(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::invalid(format!(
                "latent state needs {} entries, got {}",
                n * k,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent {
                obs: pos / k.max(1),
            });
        }
        Ok(LatentState { n, k, data })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.k.max(1))
    }
}

/// The interface every latent variable model implements: the conditional
/// Bernoulli data term and its derivatives.
///
/// All `*_into` methods accumulate into their output buffer.
pub trait LatentModel: Sync + Send {
    fn layout(&self) -> &Arc<Layout>;

    fn n_obs(&self) -> usize;

    fn kind(&self) -> ModelKind {
        self.layout().kind()
    }

    fn latent_dim(&self) -> usize {
        self.layout().latent_dim()
    }

    fn n_params(&self) -> usize {
        self.layout().len()
    }

    /// `log P(Y_i | xi, beta)`.
    fn data_loglik(&self, beta: &[f64], i: usize, xi: &[f64]) -> f64;

    /// `log P(Y_i | xi, beta)`; adds `d/dxi` of it to `grad`.
    fn data_loglik_grad_latent_into(
        &self,
        beta: &[f64],
        i: usize,
        xi: &[f64],
        grad: &mut [f64],
    ) -> f64;

    /// Adds `d/dbeta log P(Y_i | xi, beta)` to `out`.
    fn data_grad_params_into(&self, beta: &[f64], i: usize, xi: &[f64], out: &mut [f64]);

    /// Adds the diagonal of `-d2/dbeta2 log P(Y_i | xi, beta)` to `out`.
    fn data_neg_hess_diag_into(&self, beta: &[f64], i: usize, xi: &[f64], out: &mut [f64]);
}

/// Per-iteration cache of everything derived from the covariance block:
/// `L`, `L^{-1}`, `Sigma^{-1}` and `log det Sigma`. Built once per parameter
/// update and shared read-only by all per-observation evaluations.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub beta: &'a ParamVector,
    k: usize,
    mean: Option<Vec<f64>>,
    chol: Vec<f64>,
    chol_inv: Vec<f64>,
    precision: Vec<f64>,
    log_det: f64,
}

impl<'a> Prepared<'a> {
    pub fn new(beta: &'a ParamVector) -> Result<Self> {
        let layout = beta.layout();
        let k = layout.latent_dim();
        let l = beta.chol();
        for d in 0..k {
            let v = l.get(d, d);
            if !(v.abs() >= SINGULAR_DIAG) {
                return Err(Error::SingularCovariance { index: d, value: v });
            }
        }
        let chol = l.dense().to_vec();
        let chol_inv = linalg::lower_inverse(&chol, k);
        let precision = linalg::lower_transpose_gram(&chol_inv, k);
        let log_det = 2.0 * (0..k).map(|d| chol[d * k + d].abs().ln()).sum::<f64>();
        let mean = layout
            .range(BlockKind::Mu)
            .map(|r| beta.values()[r].to_vec());
        Ok(Prepared {
            beta,
            k,
            mean,
            chol,
            chol_inv,
            precision,
            log_det,
        })
    }

    pub fn values(&self) -> &[f64] {
        self.beta.values()
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.log_det
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    fn residual(&self, xi: &[f64], r: &mut [f64]) {
        match &self.mean {
            Some(m) => {
                for ((o, x), mu) in r.iter_mut().zip(xi).zip(m) {
                    *o = x - mu;
                }
            }
            None => r.copy_from_slice(xi),
        }
    }

    /// Gaussian log-density `log phi(xi | mu, Sigma)`.
    pub fn prior_logpdf(&self, xi: &[f64]) -> f64 {
        with_scratch(self.k, |r, z, _| {
            let quad = self.whiten_into(xi, r, z, None);
            -0.5 * (self.k as f64 * LN_2PI + self.log_det + quad)
        })
    }

    /// Writes `z = L^{-1}(xi - mu)` and optionally `v = Sigma^{-1}(xi - mu)`;
    /// returns `|z|^2`.
    fn whiten_into(&self, xi: &[f64], r: &mut [f64], z: &mut [f64], v: Option<&mut [f64]>) -> f64 {
        self.residual(xi, r);
        linalg::lower_mat_vec(&self.chol_inv, r, z);
        if let Some(v) = v {
            linalg::lower_transpose_mat_vec(&self.chol_inv, z, v);
        }
        linalg::dot(z, z)
    }

    /// Draws `xi ~ N(mu, Sigma)` from standard normals `eps`.
    pub fn prior_transform(&self, eps: &[f64], out: &mut [f64]) {
        linalg::lower_mat_vec(&self.chol, eps, out);
        if let Some(m) = &self.mean {
            for (o, mu) in out.iter_mut().zip(m) {
                *o += mu;
            }
        }
    }
}

/// Runs `f` with three zeroed K-length scratch buffers, on the stack when small.
#[inline]
fn with_scratch<R>(k: usize, f: impl FnOnce(&mut [f64], &mut [f64], &mut [f64]) -> R) -> R {
    const STACK: usize = 32;
    if k <= STACK {
        let mut buf = [0.0f64; 3 * STACK];
        let (r, rest) = buf.split_at_mut(k);
        let (z, rest) = rest.split_at_mut(k);
        f(r, z, &mut rest[..k])
    } else {
        let mut buf = vec![0.0f64; 3 * k];
        let (r, rest) = buf.split_at_mut(k);
        let (z, v) = rest.split_at_mut(k);
        f(r, z, v)
    }
}

fn check_latent(i: usize, xi: &[f64], k: usize) -> Result<()> {
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

/// `log f_i(Y_i, xi_i | beta)`: Bernoulli data term plus Gaussian prior.
pub fn complete_data_loglik<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
) -> Result<f64> {
    check_latent(i, xi, model.latent_dim())?;
    Ok(model.data_loglik(prep.values(), i, xi) + prep.prior_logpdf(xi))
}

/// Returns `log f_i(Y_i, xi | beta)` and writes the potential gradient
/// `grad_u = -d/dxi log f_i` into `grad_u`. Unchecked hot path used by the
/// samplers.
pub fn log_joint_and_potential_grad<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
    grad_u: &mut [f64],
) -> f64 {
    let k = prep.k;
    grad_u.fill(0.0);
    let data = model.data_loglik_grad_latent_into(prep.values(), i, xi, grad_u);
    // grad_u holds +d/dxi of the data term; the prior adds Sigma^{-1}(xi - mu)
    let quad = with_scratch(k, |r, z, v| {
        let quad = prep.whiten_into(xi, r, z, Some(&mut *v));
        for (g, vk) in grad_u.iter_mut().zip(v.iter()) {
            *g = vk - *g;
        }
        quad
    });
    data - 0.5 * (k as f64 * LN_2PI + prep.log_det + quad)
}

/// Potential gradient `grad U_i = -d/dxi log f_i(Y_i, xi | beta)`.
pub fn grad_latent<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
) -> Result<Vec<f64>> {
    check_latent(i, xi, model.latent_dim())?;
    let mut g = vec![0.0; xi.len()];
    log_joint_and_potential_grad(model, prep, i, xi, &mut g);
    Ok(g)
}

/// Adds `d/dbeta log f_i(Y_i, xi | beta)` to `out`.
pub fn grad_params_into<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
    out: &mut [f64],
) {
    model.data_grad_params_into(prep.values(), i, xi, out);
    let layout = prep.beta.layout();
    let k = prep.k;
    with_scratch(k, |r, z, v| {
        prep.whiten_into(xi, r, z, Some(&mut *v));
        if let Some(rng) = layout.range(BlockKind::Mu) {
            for (o, vk) in out[rng].iter_mut().zip(v.iter()) {
                *o += vk;
            }
        }
        // d/dl_ab log phi = v_a z_b - [a == b] / l_aa
        let chol = &mut out[layout.chol_range()];
        for a in 0..k {
            for b in 0..=a {
                let mut g = v[a] * z[b];
                if a == b {
                    g -= 1.0 / prep.chol[a * k + a];
                }
                chol[tri_index(a, b)] += g;
            }
        }
    });
}

/// Per-observation score `d/dbeta log f_i(Y_i, xi | beta)`.
pub fn grad_params<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
) -> Result<Vec<f64>> {
    check_latent(i, xi, model.latent_dim())?;
    let mut out = vec![0.0; model.n_params()];
    grad_params_into(model, prep, i, xi, &mut out);
    Ok(out)
}

/// Adds the diagonal of `-d2/dbeta2 log f_i(Y_i, xi | beta)` to `out`.
pub fn neg_hess_diag_into<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    i: usize,
    xi: &[f64],
    out: &mut [f64],
) {
    model.data_neg_hess_diag_into(prep.values(), i, xi, out);
    let layout = prep.beta.layout();
    let k = prep.k;
    with_scratch(k, |r, z, v| {
        prep.whiten_into(xi, r, z, Some(&mut *v));
        if let Some(rng) = layout.range(BlockKind::Mu) {
            for (d, o) in out[rng].iter_mut().enumerate() {
                *o += prep.precision[d * k + d];
            }
        }
        let chol = &mut out[layout.chol_range()];
        for a in 0..k {
            let prec_aa = prep.precision[a * k + a];
            for b in 0..a {
                chol[tri_index(a, b)] += z[b] * z[b] * prec_aa;
            }
            let l = prep.chol[a * k + a];
            chol[tri_index(a, a)] += -1.0 / (l * l) + 2.0 * v[a] * z[a] / l + z[a] * z[a] * prec_aa;
        }
    });
}

/// Projection onto the parameter space. For the M2PL every Cholesky row is
/// rescaled to unit Euclidean norm (so `diag(Sigma) = 1`); all other blocks,
/// and the whole multilevel vector, pass through unchanged.
///
/// With a diagonal metric whose entries are equal within each Cholesky row
/// this row normalisation is the exact metric projection.
pub fn project(beta: &ParamVector) -> Result<ParamVector> {
    let mut out = beta.clone();
    project_in_place(&mut out)?;
    Ok(out)
}

pub fn project_in_place(beta: &mut ParamVector) -> Result<()> {
    if beta.layout().kind() != ModelKind::M2pl {
        return Ok(());
    }
    let k = beta.layout().latent_dim();
    let chol = beta.block_mut(BlockKind::Chol);
    for row in 0..k {
        let entries = &mut chol[tri_index(row, 0)..=tri_index(row, row)];
        let norm = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_ROW_NORM) {
            return Err(Error::DegenerateCholeskyRow { row, norm });
        }
        if norm != 1.0 {
            for v in entries.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(())
}

/// Negative complete-data log-likelihood summed over all observations.
pub fn total_neg_complete_loglik<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    xi: &LatentState,
) -> Result<f64> {
    use rayon::prelude::*;
    let prep = Prepared::new(beta)?;
    let chunk = 256;
    let parts: Vec<f64> = (0..model.n_obs())
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            idx.iter()
                .map(|&i| {
                    model.data_loglik(prep.values(), i, xi.row(i)) + prep.prior_logpdf(xi.row(i))
                })
                .sum::<f64>()
        })
        .collect();
    Ok(-parts.iter().sum::<f64>())
}

/// A loaded dataset; dispatches to the concrete model.
#[derive(Debug, Clone)]
pub enum Dataset {
    Multilevel(MultilevelModel),
    M2pl(M2plModel),
}

impl Dataset {
    pub fn model(&self) -> &dyn LatentModel {
        match self {
            Dataset::Multilevel(m) => m,
            Dataset::M2pl(m) => m,
        }
    }

    pub fn as_m2pl(&self) -> Option<&M2plModel> {
        match self {
            Dataset::M2pl(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_multilevel(&self) -> Option<&MultilevelModel> {
        match self {
            Dataset::Multilevel(m) => Some(m),
            _ => None,
        }
    }
}

impl LatentModel for Dataset {
    fn layout(&self) -> &Arc<Layout> {
        self.model().layout()
    }
    fn n_obs(&self) -> usize {
        self.model().n_obs()
    }
    fn data_loglik(&self, beta: &[f64], i: usize, xi: &[f64]) -> f64 {
        match self {
            Dataset::Multilevel(m) => m.data_loglik(beta, i, xi),
            Dataset::M2pl(m) => m.data_loglik(beta, i, xi),
        }
    }
    fn data_loglik_grad_latent_into(
        &self,
        beta: &[f64],
        i: usize,
        xi: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        match self {
            Dataset::Multilevel(m) => m.data_loglik_grad_latent_into(beta, i, xi, grad),
            Dataset::M2pl(m) => m.data_loglik_grad_latent_into(beta, i, xi, grad),
        }
    }
    fn data_grad_params_into(&self, beta: &[f64], i: usize, xi: &[f64], out: &mut [f64]) {
        match self {
            Dataset::Multilevel(m) => m.data_grad_params_into(beta, i, xi, out),
            Dataset::M2pl(m) => m.data_grad_params_into(beta, i, xi, out),
        }
    }
    fn data_neg_hess_diag_into(&self, beta: &[f64], i: usize, xi: &[f64], out: &mut [f64]) {
        match self {
            Dataset::Multilevel(m) => m.data_neg_hess_diag_into(beta, i, xi, out),
            Dataset::M2pl(m) => m.data_neg_hess_diag_into(beta, i, xi, out),
        }
    }
}
