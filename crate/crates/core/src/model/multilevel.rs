//! Two-level logistic regression with random intercept and slopes:
//! `P(Y_ij = 1 | xi_i) = logistic(x_ij^T xi_i)`, `xi_i ~ N(mu, L L^T)`.

use std::sync::Arc;

use super::{LatentModel, Layout};
use crate::error::{Error, Result};
use crate::linalg::{bernoulli_logit_logpmf, dot, logistic};

/// Ragged level-1 responses grouped by level-2 unit, stored CSR-style.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelData {
    k: usize,
    /// Row offsets into `y` / `x`, length N + 1.
    offsets: Vec<usize>,
    y: Vec<u8>,
    /// Covariates, one K-row per level-1 unit; column 0 is the intercept.
    x: Vec<f64>,
    ids: Vec<String>,
}

impl MultilevelData {
    /// Build from per-unit groups of `(y, x_row)` pairs.
    pub fn new(
        k: usize,
        ids: Vec<String>,
        offsets: Vec<usize>,
        y: Vec<u8>,
        x: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("multilevel model needs K >= 1"));
        }
        if offsets.first() != Some(&0) || offsets.last() != Some(&y.len()) {
            return Err(Error::invalid("group offsets do not span the responses"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "every level-2 unit needs at least one response",
            ));
        }
        if ids.len() + 1 != offsets.len() {
            return Err(Error::invalid("one id per level-2 unit is required"));
        }
        if x.len() != y.len() * k {
            return Err(Error::invalid(format!(
                "covariate matrix has {} entries, expected {}",
                x.len(),
                y.len() * k
            )));
        }
        if let Some(pos) = y.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!("response {pos} is not 0/1")));
        }
        for (row, xr) in x.chunks(k).enumerate() {
            if xr[0] != 1.0 {
                return Err(Error::invalid(format!(
                    "level-1 row {row}: first covariate must be the constant 1"
                )));
            }
            if xr.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "level-1 row {row}: non-finite covariate"
                )));
            }
        }
        Ok(MultilevelData {
            k,
            offsets,
            y,
            x,
            ids,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn group_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Responses and covariate rows for level-2 unit `i`.
    pub fn group(&self, i: usize) -> (&[u8], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.y[a..b], &self.x[a * self.k..b * self.k])
    }
}

#[derive(Debug, Clone)]
pub struct MultilevelModel {
    data: MultilevelData,
    layout: Arc<Layout>,
}

impl MultilevelModel {
    pub fn new(data: MultilevelData) -> Self {
        let layout = Arc::new(Layout::multilevel(data.latent_dim()));
        MultilevelModel { data, layout }
    }

    pub fn data(&self) -> &MultilevelData {
        &self.data
    }
}

impl LatentModel for MultilevelModel {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn n_obs(&self) -> usize {
        self.data.n_obs()
    }

    fn data_loglik(&self, _beta: &[f64], i: usize, xi: &[f64]) -> f64 {
        let (y, x) = self.data.group(i);
        y.iter()
            .zip(x.chunks(self.data.k))
            .map(|(&yj, xj)| bernoulli_logit_logpmf(yj, dot(xj, xi)))
            .sum()
    }

    fn data_loglik_grad_latent_into(
        &self,
        _beta: &[f64],
        i: usize,
        xi: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        let (y, x) = self.data.group(i);
        let mut ll = 0.0;
        for (&yj, xj) in y.iter().zip(x.chunks(self.data.k)) {
            let eta = dot(xj, xi);
            ll += bernoulli_logit_logpmf(yj, eta);
            let resid = yj as f64 - logistic(eta);
            for (g, xv) in grad.iter_mut().zip(xj) {
                *g += resid * xv;
            }
        }
        ll
    }

    // mu and L enter only through the Gaussian prior
    fn data_grad_params_into(&self, _beta: &[f64], _i: usize, _xi: &[f64], _out: &mut [f64]) {}

    fn data_neg_hess_diag_into(&self, _beta: &[f64], _i: usize, _xi: &[f64], _out: &mut [f64]) {}
}
