//! Confirmatory multidimensional two-parameter logistic model:
//! `P(Y_ij = 1 | xi_i) = logistic(d_j + sum_k a_jk xi_ik)` with `a_jk` free
//! only where `q_jk = 1`, and `xi_i ~ N(0, L L^T)` with unit-norm rows of `L`.

use std::sync::Arc;

use super::{LatentModel, Layout};
use crate::error::{Error, Result};
use crate::linalg::{bernoulli_logit_logpmf, logistic};

#[derive(Debug, Clone, PartialEq)]
pub struct M2plData {
    n: usize,
    j: usize,
    k: usize,
    /// N x J responses, row-major.
    y: Vec<u8>,
    /// J x K indicator matrix, row-major.
    q: Vec<u8>,
}

impl M2plData {
    pub fn new(n: usize, j: usize, k: usize, y: Vec<u8>, q: Vec<u8>) -> Result<Self> {
        if n == 0 || j == 0 || k == 0 {
            return Err(Error::invalid("M2PL data needs N, J, K >= 1"));
        }
        if y.len() != n * j {
            return Err(Error::invalid(format!(
                "response matrix has {} entries, expected {n} x {j}",
                y.len()
            )));
        }
        if q.len() != j * k {
            return Err(Error::invalid(format!(
                "Q-matrix has {} entries, expected {j} x {k}",
                q.len()
            )));
        }
        if let Some(pos) = y.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "response ({}, {}) is not 0/1",
                pos / j,
                pos % j
            )));
        }
        if q.iter().any(|&v| v > 1) {
            return Err(Error::invalid("Q-matrix entries must be 0/1"));
        }
        for (item, row) in q.chunks(k).enumerate() {
            if row.iter().all(|&v| v == 0) {
                return Err(Error::invalid(format!(
                    "Q-matrix row {item} measures no factor"
                )));
            }
        }
        Ok(M2plData { n, j, k, y, q })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_items(&self) -> usize {
        self.j
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn responses(&self, i: usize) -> &[u8] {
        &self.y[i * self.j..(i + 1) * self.j]
    }

    pub fn q(&self) -> &[u8] {
        &self.q
    }

    pub fn q_entry(&self, item: usize, factor: usize) -> bool {
        self.q[item * self.k + factor] == 1
    }

    /// Items answered identically by all respondents.
    pub fn degenerate_items(&self) -> Vec<usize> {
        (0..self.j)
            .filter(|&item| {
                let first = self.y[item];
                (0..self.n).all(|i| self.y[i * self.j + item] == first)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct M2plModel {
    data: M2plData,
    layout: Arc<Layout>,
    /// `item_start[j]..item_start[j + 1]` indexes `load_factor` for item j;
    /// the same position offset by `J` is the flat parameter index of `a_jk`.
    item_start: Vec<usize>,
    load_factor: Vec<usize>,
}

impl M2plModel {
    pub fn new(data: M2plData) -> Self {
        let (j, k) = (data.j, data.k);
        let mut item_start = Vec::with_capacity(j + 1);
        let mut load_factor = Vec::new();
        for item in 0..j {
            item_start.push(load_factor.len());
            for f in 0..k {
                if data.q_entry(item, f) {
                    load_factor.push(f);
                }
            }
        }
        item_start.push(load_factor.len());
        let layout = Arc::new(Layout::m2pl(j, load_factor.len(), k));
        M2plModel {
            data,
            layout,
            item_start,
            load_factor,
        }
    }

    pub fn data(&self) -> &M2plData {
        &self.data
    }

    pub fn n_loadings(&self) -> usize {
        self.load_factor.len()
    }

    /// `(factor, position within the loading block)` pairs for item `j`.
    pub fn item_loadings(&self, item: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.item_start[item]..self.item_start[item + 1]).map(move |p| (self.load_factor[p], p))
    }

    /// Dense J x K loading matrix from a parameter slice.
    pub fn loading_matrix(&self, beta: &[f64]) -> Vec<f64> {
        let (j, k) = (self.data.j, self.data.k);
        let mut out = vec![0.0; j * k];
        for item in 0..j {
            for (f, p) in self.item_loadings(item) {
                out[item * k + f] = beta[j + p];
            }
        }
        out
    }

    #[inline]
    fn eta(&self, beta: &[f64], item: usize, xi: &[f64]) -> f64 {
        let j = self.data.j;
        let mut eta = beta[item];
        for p in self.item_start[item]..self.item_start[item + 1] {
            eta += beta[j + p] * xi[self.load_factor[p]];
        }
        eta
    }
}

impl LatentModel for M2plModel {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn n_obs(&self) -> usize {
        self.data.n
    }

    fn data_loglik(&self, beta: &[f64], i: usize, xi: &[f64]) -> f64 {
        self.data
            .responses(i)
            .iter()
            .enumerate()
            .map(|(item, &y)| bernoulli_logit_logpmf(y, self.eta(beta, item, xi)))
            .sum()
    }

    fn data_loglik_grad_latent_into(
        &self,
        beta: &[f64],
        i: usize,
        xi: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        let j = self.data.j;
        let mut ll = 0.0;
        for (item, &y) in self.data.responses(i).iter().enumerate() {
            let eta = self.eta(beta, item, xi);
            ll += bernoulli_logit_logpmf(y, eta);
            let resid = y as f64 - logistic(eta);
            for p in self.item_start[item]..self.item_start[item + 1] {
                grad[self.load_factor[p]] += resid * beta[j + p];
            }
        }
        ll
    }

    fn data_grad_params_into(&self, beta: &[f64], i: usize, xi: &[f64], out: &mut [f64]) {
        let j = self.data.j;
        for (item, &y) in self.data.responses(i).iter().enumerate() {
            let resid = y as f64 - logistic(self.eta(beta, item, xi));
            out[item] += resid;
            for p in self.item_start[item]..self.item_start[item + 1] {
                out[j + p] += resid * xi[self.load_factor[p]];
            }
        }
    }

    fn data_neg_hess_diag_into(&self, beta: &[f64], _i: usize, xi: &[f64], out: &mut [f64]) {
        let j = self.data.j;
        for item in 0..j {
            let prob = logistic(self.eta(beta, item, xi));
            let w = prob * (1.0 - prob);
            out[item] += w;
            for p in self.item_start[item]..self.item_start[item + 1] {
                let x = xi[self.load_factor[p]];
                out[j + p] += w * x * x;
            }
        }
    }
}
