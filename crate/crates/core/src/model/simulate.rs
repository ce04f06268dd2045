//! Simulation designs, data generation, Q-matrix construction and initial
//! values.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    project_in_place, BlockKind, CholFactor, Dataset, LatentModel, LatentState, M2plData,
    M2plModel, MultilevelData, MultilevelModel, ParamVector,
};
use crate::error::{Error, Result};
use crate::linalg::{self, logistic};
use crate::rng::{self, Purpose};

/// True random-effect means of the multilevel designs (K = 5 and K = 10).
pub const MULTILEVEL_MEAN_K5: [f64; 5] = [0.300, 1.060, 0.950, 0.129, 0.826];
pub const MULTILEVEL_MEAN_K10: [f64; 10] = [
    0.300, 1.060, 0.950, 0.129, 0.826, 0.857, 0.193, 0.809, 0.844, 0.301,
];

/// How the M2PL indicator matrix is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "rows")]
pub enum QDesign {
    /// Three stacked identity blocks, three copies of every two-factor
    /// pattern, then distinct three-factor patterns drawn at random to fill
    /// the remaining rows.
    Standard,
    /// Every item measures every factor.
    Full,
    /// Item `j` measures factor `j mod K` only.
    Simple,
    /// Explicit J x K matrix.
    Matrix(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum SimSetting {
    Multilevel {
        n_obs: usize,
        /// Level-1 units per level-2 unit.
        n_level1: usize,
        latent_dim: usize,
        /// True mean; when absent the intercept is 0.3 and the slopes are
        /// drawn from Uniform(0.1, 1.1).
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default = "default_ml_diag")]
        sigma_diag: f64,
        #[serde(default = "default_ml_off")]
        sigma_offdiag: f64,
        #[serde(default = "default_cov_corr")]
        covariate_corr: f64,
    },
    M2pl {
        n_obs: usize,
        n_items: usize,
        latent_dim: usize,
        q: QDesign,
        #[serde(default = "default_d_range")]
        d_range: (f64, f64),
        #[serde(default = "default_a_range")]
        a_range: (f64, f64),
        #[serde(default = "default_m2pl_off")]
        sigma_offdiag: f64,
    },
}

fn default_ml_diag() -> f64 {
    0.1
}
fn default_ml_off() -> f64 {
    0.05
}
fn default_cov_corr() -> f64 {
    0.25
}
fn default_d_range() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_a_range() -> (f64, f64) {
    (0.5, 1.5)
}
fn default_m2pl_off() -> f64 {
    0.5
}

pub const SETTING_NAMES: [&str; 4] = ["multilevel-k5", "multilevel-k10", "m2pl-k5", "m2pl-k10"];

impl SimSetting {
    /// The four built-in designs: `multilevel-k5`, `multilevel-k10`,
    /// `m2pl-k5`, `m2pl-k10` (all with N = 10,000).
    pub fn named(name: &str) -> Option<Self> {
        let ml = |j, k, mean: &[f64]| SimSetting::Multilevel {
            n_obs: 10_000,
            n_level1: j,
            latent_dim: k,
            mean: Some(mean.to_vec()),
            sigma_diag: 0.1,
            sigma_offdiag: 0.05,
            covariate_corr: 0.25,
        };
        let m2 = |j, k| SimSetting::M2pl {
            n_obs: 10_000,
            n_items: j,
            latent_dim: k,
            q: QDesign::Standard,
            d_range: default_d_range(),
            a_range: default_a_range(),
            sigma_offdiag: 0.5,
        };
        match name {
            "multilevel-k5" => Some(ml(10, 5, &MULTILEVEL_MEAN_K5)),
            "multilevel-k10" => Some(ml(20, 10, &MULTILEVEL_MEAN_K10)),
            "m2pl-k5" => Some(m2(50, 5)),
            "m2pl-k10" => Some(m2(200, 10)),
            _ => None,
        }
    }

    pub fn n_obs(&self) -> usize {
        match self {
            SimSetting::Multilevel { n_obs, .. } | SimSetting::M2pl { n_obs, .. } => *n_obs,
        }
    }

    pub fn with_n_obs(mut self, n: usize) -> Self {
        match &mut self {
            SimSetting::Multilevel { n_obs, .. } | SimSetting::M2pl { n_obs, .. } => *n_obs = n,
        }
        self
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            SimSetting::Multilevel { latent_dim, .. } | SimSetting::M2pl { latent_dim, .. } => {
                *latent_dim
            }
        }
    }
}

fn equicorrelated(k: usize, diag: f64, off: f64) -> Vec<f64> {
    let mut s = vec![off; k * k];
    for d in 0..k {
        s[d * k + d] = diag;
    }
    s
}

fn draw_normals<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

fn binomial(n: usize, r: usize) -> usize {
    if r > n {
        return 0;
    }
    (0..r).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `r`-subsets of `0..k` in lexicographic order.
fn combinations(k: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for v in start..k {
            cur.push(v);
            rec(v + 1, k, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::with_capacity(binomial(k, r));
    rec(0, k, r, &mut Vec::new(), &mut out);
    out
}

/// Builds the J x K indicator matrix (row-major).
pub fn build_q(design: &QDesign, n_items: usize, k: usize, seed: u64) -> Result<Vec<u8>> {
    let q = match design {
        QDesign::Full => vec![1u8; n_items * k],
        QDesign::Simple => {
            let mut q = vec![0u8; n_items * k];
            for j in 0..n_items {
                q[j * k + j % k] = 1;
            }
            q
        }
        QDesign::Matrix(rows) => {
            if rows.len() != n_items || rows.iter().any(|r| r.len() != k) {
                return Err(Error::invalid(format!("Q-matrix must be {n_items} x {k}")));
            }
            rows.iter().flatten().copied().collect()
        }
        QDesign::Standard => {
            let pairs = combinations(k, 2);
            let triples = combinations(k, 3);
            let fixed = 3 * k + 3 * pairs.len();
            if n_items < fixed || n_items - fixed > triples.len() {
                return Err(Error::invalid(format!(
                    "standard Q design with K={k} needs between {fixed} and {} items, got {n_items}",
                    fixed + triples.len()
                )));
            }
            let mut q = Vec::with_capacity(n_items * k);
            let mut push = |factors: &[usize]| {
                let mut row = vec![0u8; k];
                for &f in factors {
                    row[f] = 1;
                }
                q.extend_from_slice(&row);
            };
            for _ in 0..3 {
                for f in 0..k {
                    push(&[f]);
                }
            }
            for _ in 0..3 {
                for p in &pairs {
                    push(p);
                }
            }
            let mut rng = rng::stream(seed, Purpose::Simulate, 1, 0);
            let mut chosen = sample_indices(&mut rng, triples.len(), n_items - fixed).into_vec();
            chosen.sort_unstable();
            for c in chosen {
                push(&triples[c]);
            }
            q
        }
    };
    Ok(q)
}

/// Generates a dataset, its true parameters and true latent variables.
/// Identical `(setting, seed)` gives bit-identical output.
pub fn simulate_dataset(
    setting: &SimSetting,
    seed: u64,
) -> Result<(Dataset, ParamVector, LatentState)> {
    match setting {
        SimSetting::Multilevel {
            n_obs,
            n_level1,
            latent_dim,
            mean,
            sigma_diag,
            sigma_offdiag,
            covariate_corr,
        } => simulate_multilevel(
            *n_obs,
            *n_level1,
            *latent_dim,
            mean.as_deref(),
            *sigma_diag,
            *sigma_offdiag,
            *covariate_corr,
            seed,
        ),
        SimSetting::M2pl {
            n_obs,
            n_items,
            latent_dim,
            q,
            d_range,
            a_range,
            sigma_offdiag,
        } => simulate_m2pl(
            *n_obs,
            *n_items,
            *latent_dim,
            q,
            *d_range,
            *a_range,
            *sigma_offdiag,
            seed,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_multilevel(
    n: usize,
    j: usize,
    k: usize,
    mean: Option<&[f64]>,
    sigma_diag: f64,
    sigma_off: f64,
    cov_corr: f64,
    seed: u64,
) -> Result<(Dataset, ParamVector, LatentState)> {
    if n == 0 || j == 0 || k == 0 {
        return Err(Error::invalid("multilevel setting needs N, J, K >= 1"));
    }
    let mut prng = rng::stream(seed, Purpose::Simulate, 0, 0);
    let mu: Vec<f64> = match mean {
        Some(m) if m.len() == k => m.to_vec(),
        Some(m) => {
            return Err(Error::invalid(format!(
                "mean vector has length {}, expected K={k}",
                m.len()
            )))
        }
        None => std::iter::once(0.3)
            .chain((1..k).map(|_| prng.random_range(0.1..1.1)))
            .collect(),
    };
    let sigma = equicorrelated(k, sigma_diag, sigma_off);
    let l = CholFactor::from_covariance(k, &sigma)?;
    let model_layout = super::Layout::multilevel(k);
    let mut beta = ParamVector::zeros(std::sync::Arc::new(model_layout));
    beta.block_mut(BlockKind::Mu).copy_from_slice(&mu);
    beta.set_chol(&l);

    // covariate correlation among the K-1 slopes
    let kc = k - 1;
    let cov_chol = if kc > 0 {
        linalg::cholesky(&equicorrelated(kc, 1.0, cov_corr), kc)
            .ok_or_else(|| Error::invalid("covariate correlation is not positive definite"))?
    } else {
        Vec::new()
    };

    let mut xi = vec![0.0; n * k];
    let mut y = Vec::with_capacity(n * j);
    let mut x = Vec::with_capacity(n * j * k);
    let mut eps = vec![0.0; k.max(kc)];
    let mut tmp = vec![0.0; kc];
    for i in 0..n {
        let mut r = rng::stream(seed, Purpose::Simulate, 2, i as u64);
        draw_normals(&mut r, &mut eps[..k]);
        let row = &mut xi[i * k..(i + 1) * k];
        linalg::lower_mat_vec(l.dense(), &eps[..k], row);
        for (v, m) in row.iter_mut().zip(&mu) {
            *v += m;
        }
        for _ in 0..j {
            x.push(1.0);
            if kc > 0 {
                draw_normals(&mut r, &mut eps[..kc]);
                linalg::lower_mat_vec(&cov_chol, &eps[..kc], &mut tmp);
                x.extend_from_slice(&tmp);
            }
            let xr = &x[x.len() - k..];
            let p = logistic(linalg::dot(xr, row));
            y.push(u8::from(r.random::<f64>() < p));
        }
    }
    let offsets = (0..=n).map(|i| i * j).collect();
    let ids = (0..n).map(|i| (i + 1).to_string()).collect();
    let data = MultilevelData::new(k, ids, offsets, y, x)?;
    let model = MultilevelModel::new(data);
    // reuse the model's layout so parameter vectors share one Arc
    let beta = ParamVector::new(model.layout().clone(), beta.into_values())?;
    Ok((
        Dataset::Multilevel(model),
        beta,
        LatentState::from_rows(n, k, xi)?,
    ))
}

#[allow(clippy::too_many_arguments)]
fn simulate_m2pl(
    n: usize,
    j: usize,
    k: usize,
    design: &QDesign,
    d_range: (f64, f64),
    a_range: (f64, f64),
    sigma_off: f64,
    seed: u64,
) -> Result<(Dataset, ParamVector, LatentState)> {
    if n == 0 || j == 0 || k == 0 {
        return Err(Error::invalid("M2PL setting needs N, J, K >= 1"));
    }
    let q = build_q(design, j, k, seed)?;
    let sigma = equicorrelated(k, 1.0, sigma_off);
    let l = CholFactor::from_covariance(k, &sigma)?;

    let mut xi = vec![0.0; n * k];
    let mut eps = vec![0.0; k];
    for i in 0..n {
        let mut r = rng::stream(seed, Purpose::Simulate, 2, i as u64);
        draw_normals(&mut r, &mut eps);
        linalg::lower_mat_vec(l.dense(), &eps, &mut xi[i * k..(i + 1) * k]);
    }

    // placeholder responses let the model derive the layout
    let proto = M2plModel::new(M2plData::new(1, j, k, vec![0; j], q.clone())?);
    let mut prng = rng::stream(seed, Purpose::Simulate, 0, 0);
    let mut beta = ParamVector::zeros(proto.layout().clone());
    for d in beta.block_mut(BlockKind::D) {
        *d = prng.random_range(d_range.0..d_range.1);
    }
    for a in beta.block_mut(BlockKind::A) {
        *a = prng.random_range(a_range.0..a_range.1);
    }
    beta.set_chol(&l);

    let mut y = vec![0u8; n * j];
    for i in 0..n {
        let mut r = rng::stream(seed, Purpose::Simulate, 3, i as u64);
        let row = &xi[i * k..(i + 1) * k];
        for item in 0..j {
            let mut eta = beta.values()[item];
            for (f, p) in proto.item_loadings(item) {
                eta += beta.values()[j + p] * row[f];
            }
            y[i * j + item] = u8::from(r.random::<f64>() < logistic(eta));
        }
    }
    let model = M2plModel::new(M2plData::new(n, j, k, y, q)?);
    let beta = ParamVector::new(model.layout().clone(), beta.into_values())?;
    Ok((
        Dataset::M2pl(model),
        beta,
        LatentState::from_rows(n, k, xi)?,
    ))
}

/// Source of starting values.
#[derive(Debug, Clone, Copy)]
pub enum InitMode<'a> {
    /// Random draws from distributions that differ from the generating ones,
    /// with latent signs matched to the true latent values (nonzero truths
    /// only).
    Simulation { true_xi: &'a LatentState },
    /// Standardised per-factor sum scores (M2PL only).
    SumScore,
}

pub fn initial_values(
    dataset: &Dataset,
    seed: u64,
    mode: InitMode<'_>,
) -> Result<(ParamVector, LatentState)> {
    let layout = dataset.layout().clone();
    let (n, k) = (dataset.n_obs(), dataset.latent_dim());
    match mode {
        InitMode::Simulation { true_xi } => {
            if true_xi.n_obs() != n || true_xi.dim() != k {
                return Err(Error::invalid(
                    "true latent values do not match the dataset",
                ));
            }
            let mut prng = rng::stream(seed, Purpose::Init, 0, 0);
            let mut beta = ParamVector::zeros(layout);
            let latent_var = match dataset {
                Dataset::Multilevel(_) => {
                    for m in beta.block_mut(BlockKind::Mu) {
                        *m = prng.random_range(0.0..1.5);
                    }
                    0.5
                }
                Dataset::M2pl(_) => {
                    for d in beta.block_mut(BlockKind::D) {
                        *d = StandardNormal.sample(&mut prng);
                    }
                    for a in beta.block_mut(BlockKind::A) {
                        *a = prng.random_range(0.0..2.0);
                    }
                    5.0
                }
            };
            beta.set_chol(&CholFactor::identity(k));
            let sd = f64::sqrt(latent_var);
            let mut xi = vec![0.0; n * k];
            for i in 0..n {
                let mut r = rng::stream(seed, Purpose::Init, 1, i as u64);
                let truth = true_xi.row(i);
                for (d, v) in xi[i * k..(i + 1) * k].iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let draw = sd * z;
                    *v = if truth[d] > 0.0 {
                        draw.abs()
                    } else if truth[d] < 0.0 {
                        -draw.abs()
                    } else {
                        draw
                    };
                }
            }
            Ok((beta, LatentState::from_rows(n, k, xi)?))
        }
        InitMode::SumScore => {
            let model = dataset.as_m2pl().ok_or_else(|| {
                Error::invalid("sum-score initialisation requires an M2PL dataset")
            })?;
            sum_score_init(model)
        }
    }
}

fn sum_score_init(model: &M2plModel) -> Result<(ParamVector, LatentState)> {
    let data = model.data();
    let (n, j, k) = (data.n_obs(), data.n_items(), data.latent_dim());
    for f in 0..k {
        if !(0..j).any(|item| data.q_entry(item, f)) {
            return Err(Error::invalid(format!("factor {f} is measured by no item")));
        }
    }
    let mut xi = vec![0.0; n * k];
    for i in 0..n {
        let y = data.responses(i);
        for item in 0..j {
            if y[item] == 1 {
                for f in 0..k {
                    if data.q_entry(item, f) {
                        xi[i * k + f] += 1.0;
                    }
                }
            }
        }
    }
    for f in 0..k {
        let mean = (0..n).map(|i| xi[i * k + f]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (xi[i * k + f] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 {
            for i in 0..n {
                xi[i * k + f] = (xi[i * k + f] - mean) / sd;
            }
        } else {
            log::warn!("factor {f} has constant sum scores; starting its latent values at 0");
            for i in 0..n {
                xi[i * k + f] = 0.0;
            }
        }
    }
    // correlation of the standardised scores (constant factors -> 0)
    let mut corr = vec![0.0; k * k];
    for a in 0..k {
        corr[a * k + a] = 1.0;
        for b in 0..a {
            let c = (0..n).map(|i| xi[i * k + a] * xi[i * k + b]).sum::<f64>() / n as f64;
            corr[a * k + b] = c;
            corr[b * k + a] = c;
        }
    }
    let l = shrink_to_pd(&corr, k)?;

    let mut beta = ParamVector::zeros(model.layout().clone());
    for a in beta.block_mut(BlockKind::A) {
        *a = 1.0;
    }
    beta.set_chol(&l);
    project_in_place(&mut beta)?;
    Ok((beta, LatentState::from_rows(n, k, xi)?))
}

/// Cholesky factor of `(1 - lambda) C + lambda I` for the smallest lambda on
/// a 0.01 grid that makes the matrix positive definite.
fn shrink_to_pd(c: &[f64], k: usize) -> Result<CholFactor> {
    for step in 0..=100 {
        let lambda = step as f64 / 100.0;
        let m: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let diag = if idx / k == idx % k { 1.0 } else { 0.0 };
                (1.0 - lambda) * v + lambda * diag
            })
            .collect();
        if let Some(l) = linalg::cholesky(&m, k) {
            // keep a margin away from singularity
            if (0..k).all(|d| l[d * k + d] > 1e-3) {
                return CholFactor::from_dense(k, l);
            }
        }
    }
    Err(Error::invalid(
        "could not regularise the starting correlation matrix",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_q_shapes() {
        let q5 = build_q(&QDesign::Standard, 50, 5, 1).unwrap();
        assert_eq!(q5.len(), 50 * 5);
        let q10 = build_q(&QDesign::Standard, 200, 10, 1).unwrap();
        let row_sums: Vec<usize> = q10
            .chunks(10)
            .map(|r| r.iter().map(|&v| v as usize).sum())
            .collect();
        assert_eq!(row_sums.iter().filter(|&&s| s == 1).count(), 30);
        assert_eq!(row_sums.iter().filter(|&&s| s == 2).count(), 135);
        assert_eq!(row_sums.iter().filter(|&&s| s == 3).count(), 35);
        // three-factor rows are distinct
        let mut triples: Vec<&[u8]> = q10
            .chunks(10)
            .filter(|r| r.iter().filter(|&&v| v == 1).count() == 3)
            .collect();
        triples.sort();
        triples.dedup();
        assert_eq!(triples.len(), 35);
        assert!(build_q(&QDesign::Standard, 30, 5, 1).is_err());
    }

    #[test]
    fn multilevel_truth_matches_design() {
        let s = SimSetting::named("multilevel-k5").unwrap().with_n_obs(50);
        let (ds, beta, xi) = simulate_dataset(&s, 3).unwrap();
        assert_eq!(beta.block(BlockKind::Mu), &MULTILEVEL_MEAN_K5);
        let sigma = beta.sigma();
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { 0.1 } else { 0.05 };
                assert!((sigma[a * 5 + b] - want).abs() < 1e-12);
            }
        }
        assert_eq!(ds.n_obs(), 50);
        assert_eq!(xi.dim(), 5);
        let m = ds.as_multilevel().unwrap();
        assert!((0..50).all(|i| m.data().group_len(i) == 10));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = SimSetting::named("m2pl-k5").unwrap().with_n_obs(40);
        let (a, ba, xa) = simulate_dataset(&s, 11).unwrap();
        let (b, bb, xb) = simulate_dataset(&s, 11).unwrap();
        assert_eq!(a.as_m2pl().unwrap().data(), b.as_m2pl().unwrap().data());
        assert_eq!(ba, bb);
        assert_eq!(xa, xb);
        let (c, _, _) = simulate_dataset(&s, 12).unwrap();
        assert_ne!(a.as_m2pl().unwrap().data(), c.as_m2pl().unwrap().data());
    }

    #[test]
    fn m2pl_truth_ranges() {
        let s = SimSetting::named("m2pl-k5").unwrap().with_n_obs(10);
        let (_, beta, _) = simulate_dataset(&s, 5).unwrap();
        assert!(beta
            .block(BlockKind::D)
            .iter()
            .all(|d| (-1.0..1.0).contains(d)));
        assert!(beta
            .block(BlockKind::A)
            .iter()
            .all(|a| (0.5..1.5).contains(a)));
        let sigma = beta.sigma();
        for a in 0..5 {
            assert!((sigma[a * 5 + a] - 1.0).abs() < 1e-12);
            for b in 0..a {
                assert!((sigma[a * 5 + b] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulation_init_rules() {
        for name in ["multilevel-k5", "m2pl-k5"] {
            let s = SimSetting::named(name).unwrap().with_n_obs(200);
            let (ds, _, xi_true) = simulate_dataset(&s, 9).unwrap();
            let (beta0, xi0) =
                initial_values(&ds, 4, InitMode::Simulation { true_xi: &xi_true }).unwrap();
            assert_eq!(beta0.chol(), CholFactor::identity(5));
            for (a, b) in xi0.as_slice().iter().zip(xi_true.as_slice()) {
                assert!(a * b >= 0.0);
            }
            if name.starts_with("m2pl") {
                assert!(beta0
                    .block(BlockKind::A)
                    .iter()
                    .all(|a| (0.0..=2.0).contains(a)));
            } else {
                assert!(beta0
                    .block(BlockKind::Mu)
                    .iter()
                    .all(|m| (0.0..1.5).contains(m)));
            }
        }
    }

    #[test]
    fn sumscore_init() {
        let s = SimSetting::named("m2pl-k5").unwrap().with_n_obs(300);
        let (ds, _, _) = simulate_dataset(&s, 2).unwrap();
        let (beta0, xi0) = initial_values(&ds, 0, InitMode::SumScore).unwrap();
        assert!(beta0.block(BlockKind::D).iter().all(|&d| d == 0.0));
        assert!(beta0.block(BlockKind::A).iter().all(|&a| a == 1.0));
        let sigma = beta0.sigma();
        for f in 0..5 {
            assert!((sigma[f * 5 + f] - 1.0).abs() < 1e-10);
            let col: Vec<f64> = xi0.rows().map(|r| r[f]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-10);
        }
        // positively correlated factors give positive starting correlations
        assert!(sigma[1 * 5] > 0.0);

        let ml = SimSetting::named("multilevel-k5").unwrap().with_n_obs(20);
        let (mds, _, _) = simulate_dataset(&ml, 2).unwrap();
        assert!(initial_values(&mds, 0, InitMode::SumScore).is_err());
    }

    #[test]
    fn sumscore_rejects_unmeasured_factor() {
        // factor 1 has no items
        let data = M2plData::new(3, 2, 2, vec![0, 1, 1, 0, 1, 1], vec![1, 0, 1, 0]).unwrap();
        let ds = Dataset::M2pl(M2plModel::new(data));
        assert!(initial_values(&ds, 0, InitMode::SumScore).is_err());
    }
}
