//! Stochastic-approximation outer loop: fullbatch / minibatch stochastic
//! gradients, plain and diagonal quasi-Newton proximal updates, the step
//! schedule, Polyak-Ruppert averaging and the DIFF_MAX stopping rule.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::{index::sample as sample_indices, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::InfoAccumulator;
use crate::model::{
    grad_params_into, neg_hess_diag_into, project_in_place, BlockKind, LatentModel, LatentState,
    ModelKind, ParamVector, Prepared,
};
use crate::rng::{self, Purpose};
use crate::sampler::{sweep, SamplerConfig, SamplerKind};

/// Observations per parallel work unit in gradient sums. Fixed so that the
/// floating-point reduction order never depends on the worker count.
pub const GRAD_CHUNK: usize = 128;

/// Lower bound on the quasi-Newton diagonal.
pub const QN_FLOOR: f64 = 1e-2;

/// The eight sampler x batch x QN combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "somala")]
    Somala,
    #[serde(rename = "somh")]
    Somh,
    #[serde(rename = "d-somala")]
    DSomala,
    #[serde(rename = "d-somh")]
    DSomh,
    #[serde(rename = "qn-somala")]
    QnSomala,
    #[serde(rename = "qn-somh")]
    QnSomh,
    #[serde(rename = "qn-d-somala")]
    QnDSomala,
    #[serde(rename = "qn-d-somh")]
    QnDSomh,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Somala,
        Algorithm::Somh,
        Algorithm::DSomala,
        Algorithm::DSomh,
        Algorithm::QnSomala,
        Algorithm::QnSomh,
        Algorithm::QnDSomala,
        Algorithm::QnDSomh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Somala => "somala",
            Algorithm::Somh => "somh",
            Algorithm::DSomala => "d-somala",
            Algorithm::DSomh => "d-somh",
            Algorithm::QnSomala => "qn-somala",
            Algorithm::QnSomh => "qn-somh",
            Algorithm::QnDSomala => "qn-d-somala",
            Algorithm::QnDSomh => "qn-d-somh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
    }

    pub fn sampler_kind(self) -> SamplerKind {
        match self {
            Algorithm::Somala | Algorithm::DSomala | Algorithm::QnSomala | Algorithm::QnDSomala => {
                SamplerKind::Mala
            }
            _ => SamplerKind::Rwmh,
        }
    }

    pub fn minibatch(self) -> bool {
        matches!(
            self,
            Algorithm::DSomala | Algorithm::DSomh | Algorithm::QnDSomala | Algorithm::QnDSomh
        )
    }

    pub fn qn(self) -> bool {
        matches!(
            self,
            Algorithm::QnSomala | Algorithm::QnSomh | Algorithm::QnDSomala | Algorithm::QnDSomh
        )
    }

    pub fn from_parts(kind: SamplerKind, minibatch: bool, qn: bool) -> Self {
        Self::ALL
            .into_iter()
            .find(|a| a.sampler_kind() == kind && a.minibatch() == minibatch && a.qn() == qn)
            .expect("every combination is named")
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Epochs per averaging window.
    pub window: usize,
    pub threshold: f64,
    pub consecutive: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            window: 50,
            threshold: 0.05,
            consecutive: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinibatchMode {
    /// A fresh uniform draw without replacement for every update.
    Random,
    /// Shuffle once per epoch and walk through consecutive blocks.
    Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Analytic,
    /// Central differences of the per-observation score.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub sampler: SamplerConfig,
    /// Minibatch size; `None` or `Some(N)` selects the fullbatch gradient.
    pub batch_size: Option<usize>,
    pub qn: bool,
    pub gamma_exponent: f64,
    /// Constant multiplier on the step schedule.
    pub gamma_scale: f64,
    /// Constant diagonal of `D` when the quasi-Newton update is off;
    /// `None` uses N, i.e. ascent along the per-observation mean gradient.
    pub base_scale: Option<f64>,
    pub block_rescale: BTreeMap<BlockKind, f64>,
    /// Polyak-Ruppert averaging covers every update after this many epochs.
    pub averaging_start_epoch: usize,
    pub stop: Option<StopRule>,
    pub max_epochs: usize,
    pub seed: u64,
    pub minibatch_mode: MinibatchMode,
    pub hessian: HessianMode,
    /// Accumulate the observed information after `averaging_start_epoch`.
    pub information: bool,
    /// Keep at most this many latent snapshots after averaging starts.
    pub retain_latents: usize,
}

impl OptimizerConfig {
    /// Defaults for `algo` on a model of the given kind: averaging after
    /// 1,000 (multilevel) or 500 (M2PL) epochs, and the multilevel covariance
    /// block step rescaled by 0.05 for minibatch variants.
    pub fn new(algo: Algorithm, model: ModelKind, step: f64, batch_size: usize) -> Self {
        let sampler = match algo.sampler_kind() {
            SamplerKind::Mala => SamplerConfig::mala(step),
            SamplerKind::Rwmh => SamplerConfig::rwmh(step),
        };
        let mut block_rescale = BTreeMap::new();
        if model == ModelKind::Multilevel && algo.minibatch() {
            block_rescale.insert(BlockKind::Chol, 0.05);
        }
        OptimizerConfig {
            sampler,
            batch_size: algo.minibatch().then_some(batch_size),
            qn: algo.qn(),
            gamma_exponent: 0.51,
            gamma_scale: 1.0,
            base_scale: None,
            block_rescale,
            averaging_start_epoch: match model {
                ModelKind::Multilevel => 1000,
                ModelKind::M2pl => 500,
            },
            stop: Some(StopRule::default()),
            max_epochs: 2000,
            seed: 0,
            minibatch_mode: MinibatchMode::Random,
            hessian: HessianMode::Analytic,
            information: false,
            retain_latents: 0,
        }
    }

    pub fn algorithm(&self, n_obs: usize) -> Algorithm {
        let mini = self.batch_size.is_some_and(|n| n < n_obs);
        Algorithm::from_parts(self.sampler.kind, mini, self.qn)
    }

    pub fn effective_batch(&self, n_obs: usize) -> usize {
        self.batch_size.unwrap_or(n_obs).min(n_obs)
    }

    pub fn validate(&self, n_obs: usize) -> Result<()> {
        self.sampler.validate()?;
        if let Some(n) = self.batch_size {
            if n == 0 || n > n_obs {
                return Err(Error::invalid(format!(
                    "batch size must lie in [1, {n_obs}], got {n}"
                )));
            }
        }
        if !(self.gamma_exponent > 0.5 && self.gamma_exponent <= 1.0) {
            return Err(Error::invalid("gamma exponent must lie in (0.5, 1]"));
        }
        if !(self.gamma_scale >= 0.0 && self.gamma_scale.is_finite()) {
            return Err(Error::invalid("gamma scale must be non-negative"));
        }
        if let Some(c) = self.base_scale {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("base scale must be positive"));
            }
        }
        if let Some((b, v)) = self.block_rescale.iter().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::invalid(format!(
                "rescale factor for {b} must be positive, got {v}"
            )));
        }
        if let Some(s) = &self.stop {
            if s.window == 0 || s.consecutive == 0 || !(s.threshold > 0.0) {
                return Err(Error::invalid("stop rule fields must be positive"));
            }
        }
        Ok(())
    }

    /// Per-coordinate rescale factors.
    pub fn rescale_vector(&self, beta: &ParamVector) -> Vec<f64> {
        let mut out = vec![1.0; beta.len()];
        for (b, r) in beta.layout().blocks() {
            if let Some(f) = self.block_rescale.get(&b) {
                out[r].fill(*f);
            }
        }
        out
    }
}

/// Diagonal of the quasi-Newton metric `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNState {
    pub d: Vec<f64>,
}

impl QNState {
    pub fn identity(p: usize) -> Self {
        QNState { d: vec![1.0; p] }
    }

    pub fn constant(p: usize, c: f64) -> Self {
        QNState { d: vec![c; p] }
    }
}

/// `gamma = t_eff^(-exponent)` with `t_eff = ceil(counter / floor(N / n))`.
pub fn step_schedule(counter: u64, n: usize, n_obs: usize, exponent: f64) -> f64 {
    assert!(counter >= 1 && n >= 1);
    let per_epoch = (n_obs / n).max(1) as u64;
    let t_eff = counter.div_ceil(per_epoch);
    (t_eff as f64).powf(-exponent)
}

/// Score and (optionally) negative Hessian diagonal summed over `batch`, in a
/// worker-count-independent order.
fn batch_sums<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    xi: &LatentState,
    batch: &[usize],
    hessian: Option<HessianMode>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let p = model.n_params();
    let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; p];
            let mut h = hessian.map(|_| vec![0.0; p]);
            for &i in chunk {
                grad_params_into(model, prep, i, xi.row(i), &mut g);
                match (hessian, h.as_mut()) {
                    (Some(HessianMode::Analytic), Some(h)) => {
                        neg_hess_diag_into(model, prep, i, xi.row(i), h)
                    }
                    (Some(HessianMode::FiniteDifference), Some(h)) => {
                        fd_neg_hess_diag_into(model, prep.beta, i, xi.row(i), h)
                    }
                    _ => {}
                }
            }
            (g, h)
        })
        .collect();
    let mut g = vec![0.0; p];
    let mut h = hessian.map(|_| vec![0.0; p]);
    for (pg, ph) in parts {
        for (a, b) in g.iter_mut().zip(&pg) {
            *a += b;
        }
        if let (Some(h), Some(ph)) = (h.as_mut(), ph) {
            for (a, b) in h.iter_mut().zip(&ph) {
                *a += b;
            }
        }
    }
    (g, h)
}

fn fd_neg_hess_diag_into<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    i: usize,
    xi: &[f64],
    out: &mut [f64],
) {
    let p = beta.len();
    let mut vals = beta.values().to_vec();
    let mut up = vec![0.0; p];
    let mut dn = vec![0.0; p];
    for q in 0..p {
        let eps = 1e-5 * vals[q].abs().max(1.0);
        let orig = vals[q];
        vals[q] = orig + eps;
        up.fill(0.0);
        let ok_up = score_at(model, beta, &vals, i, xi, &mut up);
        vals[q] = orig - eps;
        dn.fill(0.0);
        let ok_dn = score_at(model, beta, &vals, i, xi, &mut dn);
        vals[q] = orig;
        if ok_up && ok_dn {
            out[q] -= (up[q] - dn[q]) / (2.0 * eps);
        }
    }
}

fn score_at<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    vals: &[f64],
    i: usize,
    xi: &[f64],
    out: &mut [f64],
) -> bool {
    let Ok(pv) = beta.with_values(vals.to_vec()) else {
        return false;
    };
    let Ok(prep) = Prepared::new(&pv) else {
        return false;
    };
    grad_params_into(model, &prep, i, xi, out);
    true
}

/// `(N / n) sum_{i in S} d/dbeta log f_i(Y_i, xi_i | beta)`.
pub fn minibatch_sg<M: LatentModel + ?Sized>(
    model: &M,
    beta: &ParamVector,
    xi: &LatentState,
    batch: &[usize],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    let prep = Prepared::new(beta)?;
    Ok(minibatch_sg_prepared(model, &prep, xi, batch))
}

fn minibatch_sg_prepared<M: LatentModel + ?Sized>(
    model: &M,
    prep: &Prepared<'_>,
    xi: &LatentState,
    batch: &[usize],
) -> Vec<f64> {
    let (mut g, _) = batch_sums(model, prep, xi, batch, None);
    let scale = model.n_obs() as f64 / batch.len() as f64;
    if scale != 1.0 {
        for v in &mut g {
            *v *= scale;
        }
    }
    g
}

/// `project(beta + gamma D^{-1} (rescale .* grad))`.
pub fn sg_update(
    beta: &ParamVector,
    grad: &[f64],
    gamma: f64,
    qn: &QNState,
    rescale: &[f64],
) -> Result<ParamVector> {
    let p = beta.len();
    if grad.len() != p || qn.d.len() != p || rescale.len() != p {
        return Err(Error::LayoutMismatch(
            "update vectors do not match the parameter length".into(),
        ));
    }
    let mut out = beta.clone();
    for (q, v) in out.values_mut().iter_mut().enumerate() {
        *v += gamma * (rescale[q] * grad[q]) / qn.d[q];
    }
    if !out.is_finite() {
        return Err(Error::diverged(
            "parameter update produced non-finite values",
        ));
    }
    project_in_place(&mut out)?;
    Ok(out)
}

/// Stochastic-approximation recursion `d' = max(d + gamma (h - d), floor)`
/// on the diagonal, where `h` is the (N/n)-scaled negative complete-data
/// Hessian diagonal summed over the batch. For the M2PL the entries within
/// each Cholesky row are pooled to their mean so the row-normalising
/// projection stays exact under the metric.
pub fn qn_update<M: LatentModel + ?Sized>(
    state: &QNState,
    model: &M,
    beta: &ParamVector,
    xi: &LatentState,
    batch: &[usize],
    gamma: f64,
    mode: HessianMode,
) -> Result<QNState> {
    if batch.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    let prep = Prepared::new(beta)?;
    let (_, h) = batch_sums(model, &prep, xi, batch, Some(mode));
    let mut h = h.expect("hessian requested");
    let scale = model.n_obs() as f64 / batch.len() as f64;
    for v in &mut h {
        *v *= scale;
    }
    Ok(qn_recursion(state, &h, gamma, beta))
}

fn qn_recursion(state: &QNState, h: &[f64], gamma: f64, beta: &ParamVector) -> QNState {
    let mut d: Vec<f64> = state
        .d
        .iter()
        .zip(h)
        .map(|(d, h)| (d + gamma * (h - d)).max(QN_FLOOR))
        .collect();
    if beta.layout().kind() == ModelKind::M2pl {
        let r = beta.layout().chol_range();
        let k = beta.layout().latent_dim();
        for row in 0..k {
            let a = r.start + crate::model::tri_index(row, 0);
            let b = r.start + crate::model::tri_index(row, row) + 1;
            let mean = d[a..b].iter().sum::<f64>() / (b - a) as f64;
            d[a..b].fill(mean);
        }
    }
    QNState { d }
}

pub fn diff_max(prev: &[f64], cur: &[f64]) -> f64 {
    prev.iter()
        .zip(cur)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// DIFF_MAX over a sequence of window averages. The first window is
/// compared with `beta0`. Returns every value and the 1-based window index at
/// which the rule fires, if it does.
pub fn diff_max_monitor(
    beta0: &[f64],
    windows: &[Vec<f64>],
    rule: &StopRule,
) -> (Vec<f64>, Option<usize>) {
    let mut values = Vec::with_capacity(windows.len());
    let mut below = 0;
    let mut fired = None;
    let mut prev = beta0;
    for (m, w) in windows.iter().enumerate() {
        let v = diff_max(prev, w);
        values.push(v);
        below = if v < rule.threshold { below + 1 } else { 0 };
        if fired.is_none() && below >= rule.consecutive {
            fired = Some(m + 1);
        }
        prev = w;
    }
    (values, fired)
}

/// Streaming form of [`diff_max_monitor`] fed with epoch-end iterates.
#[derive(Debug, Clone)]
pub struct DiffMaxMonitor {
    rule: StopRule,
    prev: Vec<f64>,
    sum: Vec<f64>,
    count: usize,
    below: usize,
    pub trace: Vec<f64>,
}

impl DiffMaxMonitor {
    pub fn new(rule: StopRule, beta0: &[f64]) -> Self {
        DiffMaxMonitor {
            rule,
            prev: beta0.to_vec(),
            sum: vec![0.0; beta0.len()],
            count: 0,
            below: 0,
            trace: Vec::new(),
        }
    }

    /// Adds one epoch; returns `Some((value, fired))` when a window closes.
    pub fn push(&mut self, beta: &[f64]) -> Option<(f64, bool)> {
        for (s, b) in self.sum.iter_mut().zip(beta) {
            *s += b;
        }
        self.count += 1;
        if self.count < self.rule.window {
            return None;
        }
        let avg: Vec<f64> = self.sum.iter().map(|s| s / self.count as f64).collect();
        let v = diff_max(&self.prev, &avg);
        self.trace.push(v);
        self.below = if v < self.rule.threshold {
            self.below + 1
        } else {
            0
        };
        self.prev = avg;
        self.sum.fill(0.0);
        self.count = 0;
        Some((v, self.below >= self.rule.consecutive))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Wall-clock seconds since the start of the run.
    pub seconds: f64,
    pub beta: Vec<f64>,
    /// Polyak-Ruppert average, once averaging has started.
    pub beta_avg: Option<Vec<f64>>,
    /// Mean acceptance rate over the epoch.
    pub acceptance: f64,
}

impl Checkpoint {
    /// The iterate used for error reporting: the average when available.
    pub fn estimate(&self) -> &[f64] {
        self.beta_avg.as_deref().unwrap_or(&self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    MaxEpochs,
    DiffMax { window: usize },
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub config: OptimizerConfig,
    pub beta_init: ParamVector,
    pub beta_final: ParamVector,
    pub beta_pr: ParamVector,
    pub averaged_updates: u64,
    pub xi_final: LatentState,
    pub checkpoints: Vec<Checkpoint>,
    pub stop_reason: StopReason,
    pub diff_max_trace: Vec<f64>,
    pub information: Option<crate::estimators::InfoMatrix>,
    /// Latent snapshots after averaging started (thinned).
    pub retained: Vec<LatentState>,
    /// A Cholesky diagonal entry changed sign during the run.
    pub sign_flip: bool,
    pub epochs: usize,
    pub updates: u64,
    pub mean_acceptance: f64,
}

/// Observer notified after every parameter update.
pub struct UpdateEvent<'a> {
    pub epoch: usize,
    pub update: u64,
    pub beta: &'a ParamVector,
    pub xi: &'a LatentState,
    /// Last update of the epoch.
    pub epoch_end: bool,
}

pub fn run<M: LatentModel + ?Sized>(
    model: &M,
    init_beta: &ParamVector,
    init_xi: &LatentState,
    config: &OptimizerConfig,
) -> Result<FitResult> {
    run_with_observer(model, init_beta, init_xi, config, &mut |_| {})
}

/// Bounded store of latent snapshots: when full, every other snapshot is
/// dropped and the stride doubles.
struct Retainer {
    cap: usize,
    stride: usize,
    seen: usize,
    kept: Vec<LatentState>,
}

impl Retainer {
    fn push(&mut self, xi: &LatentState) {
        if self.cap == 0 {
            return;
        }
        if self.seen % self.stride == 0 && self.kept.len() == self.cap {
            let mut keep = false;
            self.kept.retain(|_| {
                keep = !keep;
                keep
            });
            self.stride *= 2;
        }
        if self.seen % self.stride == 0 {
            self.kept.push(xi.clone());
        }
        self.seen += 1;
    }
}

pub fn run_with_observer<M: LatentModel + ?Sized>(
    model: &M,
    init_beta: &ParamVector,
    init_xi: &LatentState,
    config: &OptimizerConfig,
    observer: &mut dyn FnMut(UpdateEvent<'_>),
) -> Result<FitResult> {
    let n_obs = model.n_obs();
    config.validate(n_obs)?;
    if !init_beta.same_layout(&ParamVector::zeros(model.layout().clone())) {
        return Err(Error::LayoutMismatch(
            "initial parameters do not match the dataset".into(),
        ));
    }
    if init_xi.n_obs() != n_obs || init_xi.dim() != model.latent_dim() {
        return Err(Error::invalid(
            "initial latent values do not match the dataset",
        ));
    }
    let k = model.latent_dim();
    let p = model.n_params();
    let n = config.effective_batch(n_obs);
    let per_epoch = (n_obs / n).max(1);
    let algorithm = config.algorithm(n_obs);

    let mut beta = init_beta.clone();
    project_in_place(&mut beta)?;
    let init_signs: Vec<bool> = {
        let l = beta.chol();
        (0..k).map(|d| l.get(d, d) > 0.0).collect()
    };
    if init_signs.iter().any(|s| !s) {
        log::warn!("initial Cholesky factor has a non-positive diagonal entry");
    }
    let mut xi = init_xi.clone();
    let rescale = config.rescale_vector(&beta);
    let mut qn = if config.qn {
        QNState::identity(p)
    } else {
        QNState::constant(p, config.base_scale.unwrap_or(n_obs as f64))
    };
    let started = Instant::now();
    let mut checkpoints = vec![Checkpoint {
        epoch: 0,
        seconds: 0.0,
        beta: beta.values().to_vec(),
        beta_avg: None,
        acceptance: 0.0,
    }];
    let mut monitor = config.stop.map(|r| DiffMaxMonitor::new(r, beta.values()));
    let mut pr_sum = vec![0.0; p];
    let mut averaged_updates = 0u64;
    let mut info = config.information.then(|| InfoAccumulator::new(p));
    let mut retainer = Retainer {
        cap: config.retain_latents,
        stride: 1,
        seen: 0,
        kept: Vec::new(),
    };
    let mut sign_flip = false;
    let mut counter = 0u64;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut total_acc = 0usize;
    let mut total_prop = 0usize;
    let all: Vec<usize> = (0..n_obs).collect();

    let diverged = |e: Error, checkpoints: &[Checkpoint]| -> Error {
        let is_numeric = matches!(
            e,
            Error::Divergence { .. }
                | Error::SingularCovariance { .. }
                | Error::DegenerateCholeskyRow { .. }
                | Error::NonFiniteLatent { .. }
        );
        if is_numeric {
            let last = checkpoints
                .iter()
                .rev()
                .find(|c| c.beta.iter().all(|v| v.is_finite()))
                .cloned()
                .map(Box::new);
            Error::Divergence {
                message: e.to_string(),
                last_checkpoint: last,
            }
        } else {
            e
        }
    };

    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        let averaging = epoch > config.averaging_start_epoch;
        let mut epoch_acc = 0usize;
        let mut epoch_prop = 0usize;
        let partition: Option<Vec<usize>> =
            (config.minibatch_mode == MinibatchMode::Partition && n < n_obs).then(|| {
                let mut perm = all.clone();
                perm.shuffle(&mut rng::stream(
                    config.seed,
                    Purpose::Minibatch,
                    epoch as u64,
                    1,
                ));
                perm
            });
        for s in 0..per_epoch {
            counter += 1;
            let batch: Vec<usize> = if n == n_obs {
                all.clone()
            } else if let Some(perm) = &partition {
                let mut b = perm[s * n..(s + 1) * n].to_vec();
                b.sort_unstable();
                b
            } else {
                let mut r = rng::stream(config.seed, Purpose::Minibatch, counter, 0);
                let mut b = sample_indices(&mut r, n_obs, n).into_vec();
                b.sort_unstable();
                b
            };
            let gamma =
                config.gamma_scale * step_schedule(counter, n, n_obs, config.gamma_exponent);

            let step = (|| -> Result<ParamVector> {
                let prep = Prepared::new(&beta)?;
                let stats = sweep(
                    model,
                    &prep,
                    &mut xi,
                    &batch,
                    &config.sampler,
                    config.seed,
                    counter,
                )?;
                epoch_acc += stats.accepted;
                epoch_prop += stats.proposed;
                let hess = config.qn.then_some(config.hessian);
                let (mut g, h) = batch_sums(model, &prep, &xi, &batch, hess);
                let scale = n_obs as f64 / n as f64;
                if scale != 1.0 {
                    for v in &mut g {
                        *v *= scale;
                    }
                }
                if let Some(mut h) = h {
                    for v in &mut h {
                        *v *= scale;
                    }
                    qn = qn_recursion(&qn, &h, gamma, &beta);
                }
                sg_update(&beta, &g, gamma, &qn, &rescale)
            })();
            beta = step.map_err(|e| diverged(e, &checkpoints))?;

            if averaging {
                for (a, b) in pr_sum.iter_mut().zip(beta.values()) {
                    *a += b;
                }
                averaged_updates += 1;
            }
            if !sign_flip {
                let l = beta.chol();
                if (0..k).any(|d| (l.get(d, d) > 0.0) != init_signs[d]) {
                    sign_flip = true;
                    log::warn!("a Cholesky diagonal entry changed sign at epoch {epoch}");
                }
            }
            observer(UpdateEvent {
                epoch,
                update: counter,
                beta: &beta,
                xi: &xi,
                epoch_end: s + 1 == per_epoch,
            });
        }
        epochs_run = epoch;
        total_acc += epoch_acc;
        total_prop += epoch_prop;

        if averaging {
            if let Some(acc) = info.as_mut() {
                let gamma = step_schedule(epoch as u64, 1, 1, config.gamma_exponent);
                let info_seed = rng::derive_seed(config.seed, Purpose::Misc, epoch as u64, 0);
                let mut draw = xi.clone();
                let prep = Prepared::new(&beta).map_err(|e| diverged(e, &checkpoints))?;
                sweep(
                    model,
                    &prep,
                    &mut draw,
                    &all,
                    &config.sampler,
                    info_seed,
                    epoch as u64,
                )
                .map_err(|e| diverged(e, &checkpoints))?;
                acc.push_scores(model, &prep, &draw, gamma);
            }
            retainer.push(&xi);
        }

        let beta_avg = (averaged_updates > 0)
            .then(|| pr_sum.iter().map(|s| s / averaged_updates as f64).collect());
        checkpoints.push(Checkpoint {
            epoch,
            seconds: started.elapsed().as_secs_f64(),
            beta: beta.values().to_vec(),
            beta_avg,
            acceptance: if epoch_prop > 0 {
                epoch_acc as f64 / epoch_prop as f64
            } else {
                0.0
            },
        });

        if let Some(m) = monitor.as_mut() {
            if let Some((_, true)) = m.push(beta.values()) {
                stop_reason = StopReason::DiffMax {
                    window: m.trace.len(),
                };
                break;
            }
        }
    }

    let beta_pr = if averaged_updates > 0 {
        beta.with_values(pr_sum.iter().map(|s| s / averaged_updates as f64).collect())?
    } else {
        beta.clone()
    };
    Ok(FitResult {
        algorithm,
        config: config.clone(),
        beta_init: init_beta.clone(),
        beta_final: beta,
        beta_pr,
        averaged_updates,
        xi_final: xi,
        checkpoints,
        stop_reason,
        diff_max_trace: monitor.map(|m| m.trace).unwrap_or_default(),
        information: info.and_then(|a| a.finish().ok()),
        retained: retainer.kept,
        sign_flip,
        epochs: epochs_run,
        updates: counter,
        mean_acceptance: if total_prop > 0 {
            total_acc as f64 / total_prop as f64
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests;
