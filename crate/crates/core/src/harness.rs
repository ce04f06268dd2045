//! Experiment machinery: sampler step tuning, absolute-error evaluation,
//! multi-replication studies and their reports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::simulate::{initial_values, simulate_dataset, InitMode, SimSetting};
use crate::model::{
    total_neg_complete_loglik, BlockKind, LatentModel, LatentState, ModelKind, ParamVector,
};
use crate::optimizer::{run_with_observer, Algorithm, Checkpoint, OptimizerConfig};
use crate::rng::{derive_seed, Purpose};
use crate::sampler::SamplerKind;

pub const MALA_CANDIDATES: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
pub const RWMH_CANDIDATES: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub candidates: Vec<f64>,
    pub tune_epochs: usize,
    pub tail_epochs: usize,
}

impl TuneSpec {
    pub fn defaults(kind: SamplerKind, tune_epochs: usize) -> Self {
        TuneSpec {
            candidates: match kind {
                SamplerKind::Mala => MALA_CANDIDATES.to_vec(),
                SamplerKind::Rwmh => RWMH_CANDIDATES.to_vec(),
            },
            tune_epochs,
            tail_epochs: 50.min(tune_epochs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("tuning needs at least one candidate"));
        }
        if self.candidates.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::invalid("tuning candidates must be positive"));
        }
        if self.tail_epochs == 0 || self.tail_epochs > self.tune_epochs {
            return Err(Error::invalid("tail epochs must lie in [1, tune epochs]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub step: f64,
    /// Mean negative complete-data log-likelihood over the tail epochs.
    pub mean_neg_loglik: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub chosen: f64,
}

/// Runs every candidate from the same start and seed and picks the one with
/// the smallest tail-averaged negative complete-data log-likelihood; ties go
/// to the smaller step, divergent candidates are excluded.
pub fn tune<M: LatentModel + ?Sized>(
    model: &M,
    init_beta: &ParamVector,
    init_xi: &LatentState,
    base: &OptimizerConfig,
    spec: &TuneSpec,
) -> Result<TuneReport> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.candidates.len());
    for &step in &spec.candidates {
        let mut cfg = base.clone();
        cfg.sampler = cfg.sampler.with_step(step);
        cfg.max_epochs = spec.tune_epochs;
        cfg.stop = None;
        cfg.information = false;
        cfg.retain_latents = 0;
        let first_tail = spec.tune_epochs - spec.tail_epochs + 1;
        let mut tail = Vec::with_capacity(spec.tail_epochs);
        let mut eval_err = None;
        let res = run_with_observer(model, init_beta, init_xi, &cfg, &mut |ev| {
            if ev.epoch_end && ev.epoch >= first_tail && eval_err.is_none() {
                match total_neg_complete_loglik(model, ev.beta, ev.xi) {
                    Ok(v) => tail.push(v),
                    Err(e) => eval_err = Some(e),
                }
            }
        });
        let row = match (res, eval_err) {
            (Err(e), _) | (Ok(_), Some(e)) => TuneRow {
                step,
                mean_neg_loglik: None,
                error: Some(e.to_string()),
            },
            (Ok(_), None) => {
                let m = tail.iter().sum::<f64>() / tail.len() as f64;
                TuneRow {
                    step,
                    mean_neg_loglik: m.is_finite().then_some(m),
                    error: (!m.is_finite()).then(|| "non-finite objective".to_string()),
                }
            }
        };
        log::info!(
            "tune: step {step} -> {}",
            row.mean_neg_loglik
                .map_or_else(|| "failed".into(), |v| v.to_string())
        );
        rows.push(row);
    }
    let chosen = rows
        .iter()
        .filter_map(|r| r.mean_neg_loglik.map(|v| (r.step, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(s, _)| s)
        .ok_or_else(|| Error::diverged("every tuning candidate diverged"))?;
    Ok(TuneReport { rows, chosen })
}

/// Name used for a block in reports; the Cholesky block is reported on the
/// covariance scale.
pub fn block_label(b: BlockKind) -> &'static str {
    match b {
        BlockKind::Chol => "sigma",
        other => other.name(),
    }
}

/// Mean absolute error of one block. `Ok(None)` when the block carries no
/// free error term (the M2PL correlation matrix with K = 1).
pub fn ae(hat: &ParamVector, truth: &ParamVector, block: BlockKind) -> Result<Option<f64>> {
    if !hat.same_layout(truth) {
        return Err(Error::LayoutMismatch(
            "estimate and truth have different layouts".into(),
        ));
    }
    let layout = truth.layout();
    if layout.range(block).is_none() {
        return Err(Error::LayoutMismatch(format!(
            "layout has no '{block}' block"
        )));
    }
    let mean_abs = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(match block {
        BlockKind::Chol => {
            let k = layout.latent_dim();
            let (sh, st) = (hat.sigma(), truth.sigma());
            match layout.kind() {
                ModelKind::Multilevel => Some(mean_abs(&sh, &st)),
                ModelKind::M2pl if k < 2 => None,
                ModelKind::M2pl => {
                    let mut s = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            if a != b {
                                s += (sh[a * k + b] - st[a * k + b]).abs();
                            }
                        }
                    }
                    Some(s / (k * (k - 1)) as f64)
                }
            }
        }
        b => Some(mean_abs(hat.block(b), truth.block(b))),
    })
}

/// Blocks reported for a layout, in layout order.
pub fn report_blocks(truth: &ParamVector) -> Vec<BlockKind> {
    let layout = truth.layout();
    layout
        .blocks()
        .map(|(b, _)| b)
        .filter(|&b| {
            !(b == BlockKind::Chol && layout.kind() == ModelKind::M2pl && layout.latent_dim() < 2)
        })
        .collect()
}

/// AE for every reported block.
pub fn ae_all(hat: &ParamVector, truth: &ParamVector) -> Result<Vec<(BlockKind, f64)>> {
    let mut out = Vec::new();
    for b in report_blocks(truth) {
        if let Some(v) = ae(hat, truth, b)? {
            out.push((b, v));
        }
    }
    Ok(out)
}

/// Unweighted mean over blocks.
pub fn block_average(values: &[(BlockKind, f64)]) -> f64 {
    values.iter().map(|(_, v)| v).sum::<f64>() / values.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoSpec {
    pub label: String,
    pub config: OptimizerConfig,
}

impl AlgoSpec {
    pub fn new(config: OptimizerConfig, n_obs: usize) -> Self {
        let algo = config.algorithm(n_obs);
        let label = match config.batch_size {
            Some(n) if n < n_obs => format!("{algo}_{n}"),
            _ => algo.to_string(),
        };
        AlgoSpec { label, config }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSpec {
    pub setting: SimSetting,
    pub algorithms: Vec<AlgoSpec>,
    pub replications: usize,
    pub seed: u64,
}

/// AE trajectory of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub epochs: Vec<usize>,
    /// `ae[c][b]`: checkpoint `c`, block `b`.
    pub ae: Vec<Vec<f64>>,
    pub average: Vec<f64>,
    pub seconds: Vec<f64>,
    pub mean_acceptance: f64,
}

impl RunTrace {
    fn from_checkpoints(
        cps: &[Checkpoint],
        truth: &ParamVector,
        blocks: &[BlockKind],
    ) -> Result<Self> {
        let mut tr = RunTrace {
            epochs: Vec::with_capacity(cps.len()),
            ae: Vec::with_capacity(cps.len()),
            average: Vec::with_capacity(cps.len()),
            seconds: Vec::with_capacity(cps.len()),
            mean_acceptance: 0.0,
        };
        let mut acc = 0.0;
        for c in cps {
            let hat = truth.with_values(c.estimate().to_vec())?;
            let row = blocks
                .iter()
                .map(|&b| ae(&hat, truth, b).map(|v| v.unwrap_or(0.0)))
                .collect::<Result<Vec<_>>>()?;
            tr.average
                .push(row.iter().sum::<f64>() / row.len().max(1) as f64);
            tr.ae.push(row);
            tr.epochs.push(c.epoch);
            tr.seconds.push(c.seconds);
            acc += c.acceptance;
        }
        tr.mean_acceptance = if cps.len() > 1 {
            acc / (cps.len() - 1) as f64
        } else {
            0.0
        };
        Ok(tr)
    }

    /// Block-averaged AE at `epoch`, carrying the last value forward.
    pub fn average_at(&self, epoch: usize) -> f64 {
        match self.epochs.binary_search(&epoch) {
            Ok(i) => self.average[i],
            Err(0) => self.average[0],
            Err(i) => self.average[i - 1],
        }
    }

    fn block_at(&self, epoch: usize, b: usize) -> f64 {
        let i = match self.epochs.binary_search(&epoch) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        self.ae[i][b]
    }

    /// First epoch with block-averaged AE at or below `threshold`.
    pub fn first_epoch_below(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .zip(&self.average)
            .find(|(_, a)| **a <= threshold)
            .map(|(e, _)| *e)
    }

    /// Block-averaged AE at wall-clock `t` by linear interpolation.
    pub fn average_at_seconds(&self, t: f64) -> f64 {
        let s = &self.seconds;
        if t <= s[0] {
            return self.average[0];
        }
        for w in 1..s.len() {
            if t <= s[w] {
                let f = if s[w] > s[w - 1] {
                    (t - s[w - 1]) / (s[w] - s[w - 1])
                } else {
                    1.0
                };
                return self.average[w - 1] + f * (self.average[w] - self.average[w - 1]);
            }
        }
        *self.average.last().expect("trace is nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub algorithm: String,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub labels: Vec<String>,
    pub blocks: Vec<BlockKind>,
    /// Epoch grid shared by every table.
    pub epochs: Vec<usize>,
    /// `runs[a][r]`, `None` for failed runs.
    pub runs: Vec<Vec<Option<RunTrace>>>,
    /// `mae[a][b][c]`.
    pub mae: Vec<Vec<Vec<f64>>>,
    /// `mae_average[a][c]`: unweighted mean of the block MAEs.
    pub mae_average: Vec<Vec<f64>>,
    pub succeeded: Vec<usize>,
    pub failures: Vec<Failure>,
    pub replications: usize,
}

/// Seeds for replication `r`: dataset, initial values, optimiser.
pub fn replication_seeds(seed: u64, r: usize) -> (u64, u64, u64) {
    (
        derive_seed(seed, Purpose::Replicate, r as u64, 0),
        derive_seed(seed, Purpose::Replicate, r as u64, 1),
        derive_seed(seed, Purpose::Replicate, r as u64, 2),
    )
}

/// Generates `R` datasets and runs every algorithm on each from shared
/// initial values, then aggregates AE trajectories per checkpoint.
pub fn replicate(spec: &ReplicateSpec) -> Result<TrajectoryReport> {
    if spec.replications == 0 {
        return Err(Error::invalid("replicate needs R >= 1"));
    }
    if spec.algorithms.is_empty() {
        return Err(Error::invalid("replicate needs at least one algorithm"));
    }
    let n_alg = spec.algorithms.len();
    let per_rep: Vec<Result<(Vec<BlockKind>, Vec<std::result::Result<RunTrace, String>>)>> = (0
        ..spec.replications)
        .into_par_iter()
        .map(|r| {
            let (data_seed, init_seed, run_seed) = replication_seeds(spec.seed, r);
            let (ds, truth, true_xi) = simulate_dataset(&spec.setting, data_seed)?;
            let (beta0, xi0) =
                initial_values(&ds, init_seed, InitMode::Simulation { true_xi: &true_xi })?;
            let blocks = report_blocks(&truth);
            let traces = spec
                .algorithms
                .iter()
                .map(|a| {
                    let mut cfg = a.config.clone();
                    cfg.seed = run_seed;
                    run_with_observer(&ds, &beta0, &xi0, &cfg, &mut |_| {})
                        .and_then(|fit| {
                            RunTrace::from_checkpoints(&fit.checkpoints, &truth, &blocks)
                        })
                        .map_err(|e| {
                            log::warn!("replication {r}, {}: {e}", a.label);
                            e.to_string()
                        })
                })
                .collect();
            Ok((blocks, traces))
        })
        .collect();

    let mut blocks = Vec::new();
    let mut runs: Vec<Vec<Option<RunTrace>>> = vec![Vec::with_capacity(spec.replications); n_alg];
    let mut failures = Vec::new();
    for (r, rep) in per_rep.into_iter().enumerate() {
        let (b, traces) = rep?;
        blocks = b;
        for (a, t) in traces.into_iter().enumerate() {
            match t {
                Ok(t) => runs[a].push(Some(t)),
                Err(message) => {
                    failures.push(Failure {
                        algorithm: spec.algorithms[a].label.clone(),
                        replication: r,
                        message,
                    });
                    runs[a].push(None);
                }
            }
        }
    }
    let max_epoch = spec
        .algorithms
        .iter()
        .map(|a| a.config.max_epochs)
        .max()
        .unwrap_or(0);
    let epochs: Vec<usize> = (0..=max_epoch).collect();
    let nb = blocks.len();
    let mut mae = vec![vec![vec![0.0; epochs.len()]; nb]; n_alg];
    let mut mae_average = vec![vec![0.0; epochs.len()]; n_alg];
    let mut succeeded = vec![0; n_alg];
    for a in 0..n_alg {
        let ok: Vec<&RunTrace> = runs[a].iter().flatten().collect();
        succeeded[a] = ok.len();
        if ok.is_empty() {
            for row in mae[a].iter_mut() {
                row.fill(f64::NAN);
            }
            mae_average[a].fill(f64::NAN);
            continue;
        }
        let rn = ok.len() as f64;
        for (c, &e) in epochs.iter().enumerate() {
            for b in 0..nb {
                mae[a][b][c] = ok.iter().map(|t| t.block_at(e, b)).sum::<f64>() / rn;
            }
            mae_average[a][c] = (0..nb).map(|b| mae[a][b][c]).sum::<f64>() / nb.max(1) as f64;
        }
    }
    Ok(TrajectoryReport {
        labels: spec.algorithms.iter().map(|a| a.label.clone()).collect(),
        blocks,
        epochs,
        runs,
        mae,
        mae_average,
        succeeded,
        failures,
        replications: spec.replications,
    })
}

impl TrajectoryReport {
    /// MAE of the block-averaged AE over time, interpolated on wall-clock
    /// stamps: `out[a][g]` for each point of `grid` (seconds).
    pub fn time_table(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        self.runs
            .iter()
            .map(|reps| {
                let ok: Vec<&RunTrace> = reps.iter().flatten().collect();
                grid.iter()
                    .map(|&t| {
                        if ok.is_empty() {
                            f64::NAN
                        } else {
                            ok.iter().map(|r| r.average_at_seconds(t)).sum::<f64>()
                                / ok.len() as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Writes `mae_<block>.csv` and `mae_average.csv` (rows = algorithms,
    /// columns = epochs) plus `ae_runs.csv` (one row per run and epoch).
    /// Wall-clock values are never written to CSV.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header: Vec<String> = std::iter::once("algorithm".to_string())
            .chain(self.epochs.iter().map(|e| format!("epoch_{e}")))
            .collect();
        let write_table = |name: &str, rows: &[(&str, &[f64])]| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(&header)?;
            for (label, vals) in rows {
                let mut rec = vec![label.to_string()];
                rec.extend(vals.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        };
        for (b, blk) in self.blocks.iter().enumerate() {
            let rows: Vec<(&str, &[f64])> = self
                .labels
                .iter()
                .zip(&self.mae)
                .map(|(l, m)| (l.as_str(), m[b].as_slice()))
                .collect();
            write_table(&format!("mae_{}.csv", block_label(*blk)), &rows)?;
        }
        let rows: Vec<(&str, &[f64])> = self
            .labels
            .iter()
            .zip(&self.mae_average)
            .map(|(l, m)| (l.as_str(), m.as_slice()))
            .collect();
        write_table("mae_average.csv", &rows)?;

        let mut w = csv::Writer::from_path(dir.join("ae_runs.csv"))?;
        let mut h = vec![
            "algorithm".to_string(),
            "replication".to_string(),
            "epoch".to_string(),
        ];
        h.extend(self.blocks.iter().map(|b| block_label(*b).to_string()));
        h.push("average".into());
        h.push("mean_acceptance".into());
        w.write_record(&h)?;
        for (label, reps) in self.labels.iter().zip(&self.runs) {
            for (r, run) in reps.iter().enumerate() {
                let Some(run) = run else { continue };
                for (c, e) in run.epochs.iter().enumerate() {
                    let mut rec = vec![label.clone(), r.to_string(), e.to_string()];
                    rec.extend(run.ae[c].iter().map(|v| v.to_string()));
                    rec.push(run.average[c].to_string());
                    rec.push(run.mean_acceptance.to_string());
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Epoch at which each replication first reaches block-averaged AE at or
/// below `threshold`, for algorithm index `a`.
pub fn first_epochs_below(
    report: &TrajectoryReport,
    a: usize,
    threshold: f64,
) -> Vec<Option<usize>> {
    report.runs[a]
        .iter()
        .map(|r| r.as_ref().and_then(|t| t.first_epoch_below(threshold)))
        .collect()
}

/// The six-algorithm comparison set. Minibatch variants use `batch`; all
/// MALA variants share `h` and all random-walk variants share `sigma2`.
pub fn comparison_algorithms(
    kind: ModelKind,
    n_obs: usize,
    batch: usize,
    h: f64,
    sigma2: f64,
    max_epochs: usize,
) -> Vec<AlgoSpec> {
    [
        Algorithm::QnSomh,
        Algorithm::DSomala,
        Algorithm::DSomh,
        Algorithm::QnDSomala,
        Algorithm::QnDSomh,
        Algorithm::QnSomala,
    ]
    .into_iter()
    .map(|a| {
        let step = match a.sampler_kind() {
            SamplerKind::Mala => h,
            SamplerKind::Rwmh => sigma2,
        };
        let mut cfg = OptimizerConfig::new(a, kind, step, batch);
        cfg.max_epochs = max_epochs;
        cfg.stop = None;
        AlgoSpec::new(cfg, n_obs)
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{CholFactor, Layout};

    #[test]
    fn ae_examples() {
        let layout = Arc::new(Layout::multilevel(2));
        let mut t = ParamVector::zeros(layout.clone());
        t.block_mut(BlockKind::Mu).copy_from_slice(&[0.3, 1.0]);
        t.set_chol(&CholFactor::from_covariance(2, &[0.1, 0.05, 0.05, 0.1]).unwrap());
        for b in [BlockKind::Mu, BlockKind::Chol] {
            assert_eq!(ae(&t, &t, b).unwrap(), Some(0.0));
        }
        // every covariance entry off by +0.01
        let mut h = t.clone();
        h.set_chol(&CholFactor::from_covariance(2, &[0.11, 0.06, 0.06, 0.11]).unwrap());
        assert!((ae(&h, &t, BlockKind::Chol).unwrap().unwrap() - 0.01).abs() < 1e-12);

        let layout = Arc::new(Layout::m2pl(1, 2, 2));
        let mut t = ParamVector::zeros(layout.clone());
        t.set_chol(&CholFactor::from_covariance(2, &[1.0, 0.5, 0.5, 1.0]).unwrap());
        let mut h = t.clone();
        h.set_chol(&CholFactor::from_covariance(2, &[1.0, 0.6, 0.6, 1.0]).unwrap());
        assert!((ae(&h, &t, BlockKind::Chol).unwrap().unwrap() - 0.1).abs() < 1e-12);
        assert!(ae(&h, &t, BlockKind::Mu).is_err());

        let k1 = Arc::new(Layout::m2pl(3, 3, 1));
        let mut t = ParamVector::zeros(k1);
        t.set_chol(&CholFactor::identity(1));
        assert_eq!(ae(&t, &t, BlockKind::Chol).unwrap(), None);
        assert_eq!(report_blocks(&t), vec![BlockKind::D, BlockKind::A]);
    }

    #[test]
    fn block_average_is_unweighted() {
        let v = [
            (BlockKind::D, 0.1),
            (BlockKind::A, 0.2),
            (BlockKind::Chol, 0.6),
        ];
        assert!((block_average(&v) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn trace_carry_forward_and_interpolation() {
        let t = RunTrace {
            epochs: vec![0, 1, 2],
            ae: vec![vec![0.4], vec![0.2], vec![0.1]],
            average: vec![0.4, 0.2, 0.1],
            seconds: vec![0.0, 1.0, 3.0],
            mean_acceptance: 0.5,
        };
        assert_eq!(t.average_at(10), 0.1);
        assert_eq!(t.first_epoch_below(0.2), Some(1));
        assert_eq!(t.first_epoch_below(0.05), None);
        assert!((t.average_at_seconds(2.0) - 0.15).abs() < 1e-15);
        assert_eq!(t.average_at_seconds(9.0), 0.1);
    }

    #[test]
    fn tune_single_candidate_and_tie_break() {
        let setting = SimSetting::named("multilevel-k5").unwrap().with_n_obs(60);
        let (ds, _, xi) = simulate_dataset(&setting, 1).unwrap();
        let (b0, x0) = initial_values(&ds, 2, InitMode::Simulation { true_xi: &xi }).unwrap();
        let base = OptimizerConfig::new(Algorithm::DSomala, ModelKind::Multilevel, 0.1, 20);
        let one = TuneSpec {
            candidates: vec![0.05],
            tune_epochs: 3,
            tail_epochs: 2,
        };
        assert_eq!(tune(&ds, &b0, &x0, &base, &one).unwrap().chosen, 0.05);
        // identical candidates give identical trajectories; the smaller wins
        let two = TuneSpec {
            candidates: vec![0.1, 0.1 - 1e-18, 0.1],
            tune_epochs: 3,
            tail_epochs: 2,
        };
        let rep = tune(&ds, &b0, &x0, &base, &two).unwrap();
        assert_eq!(rep.rows[0].mean_neg_loglik, rep.rows[2].mean_neg_loglik);
        assert_eq!(
            rep.chosen,
            rep.rows
                .iter()
                .map(|r| r.step)
                .fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn replicate_shares_checkpoint_zero() {
        let setting = SimSetting::named("multilevel-k5").unwrap().with_n_obs(80);
        let algos: Vec<AlgoSpec> = [Algorithm::DSomala, Algorithm::DSomh, Algorithm::QnSomh]
            .into_iter()
            .map(|a| {
                let mut c = OptimizerConfig::new(a, ModelKind::Multilevel, 0.1, 20);
                c.max_epochs = 3;
                c.stop = None;
                AlgoSpec::new(c, 80)
            })
            .collect();
        let spec = ReplicateSpec {
            setting,
            algorithms: algos,
            replications: 2,
            seed: 4,
        };
        let rep = replicate(&spec).unwrap();
        assert_eq!(rep.labels, vec!["d-somala_20", "d-somh_20", "qn-somh"]);
        for a in 1..3 {
            assert_eq!(
                rep.mae_average[a][0].to_bits(),
                rep.mae_average[0][0].to_bits()
            );
        }
        assert_eq!(rep.epochs.len(), 4);
        assert!(rep.failures.is_empty());
        // R = 1 report equals the single run
        let single = ReplicateSpec {
            replications: 1,
            ..spec
        };
        let rep1 = replicate(&single).unwrap();
        let run = rep1.runs[0][0].as_ref().unwrap();
        assert_eq!(rep1.mae_average[0], run.average);
    }
}
