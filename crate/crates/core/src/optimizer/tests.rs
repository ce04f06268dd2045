use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::model::simulate::{initial_values, simulate_dataset, InitMode, QDesign, SimSetting};
use crate::model::{grad_params, project, CholFactor, Dataset, Layout};

fn small(name: &str, n: usize, seed: u64) -> (Dataset, ParamVector, LatentState) {
    let s = SimSetting::named(name).unwrap().with_n_obs(n);
    let (ds, truth, xi) = simulate_dataset(&s, seed).unwrap();
    let (b0, x0) = initial_values(&ds, seed + 1, InitMode::Simulation { true_xi: &xi }).unwrap();
    let _ = truth;
    (ds, b0, x0)
}

fn small_m2pl(n: usize, k: usize, seed: u64) -> (Dataset, ParamVector, LatentState) {
    let s = SimSetting::M2pl {
        n_obs: n,
        n_items: 8,
        latent_dim: k,
        q: QDesign::Full,
        d_range: (-1.0, 1.0),
        a_range: (0.5, 1.5),
        sigma_offdiag: 0.3,
    };
    let (ds, _, xi) = simulate_dataset(&s, seed).unwrap();
    let (b0, x0) = initial_values(&ds, seed + 1, InitMode::Simulation { true_xi: &xi }).unwrap();
    (ds, b0, x0)
}

#[test]
fn step_schedule_examples() {
    for n in [1, 7, 100] {
        assert_eq!(step_schedule(1, n, 100, 0.51), 1.0);
    }
    for c in 1..=10 {
        assert_eq!(step_schedule(c, 1000, 10_000, 0.51), 1.0);
    }
    assert_eq!(step_schedule(11, 1000, 10_000, 0.51), 2f64.powf(-0.51));
    assert_eq!(step_schedule(4, 50, 50, 0.51), 4f64.powf(-0.51));
}

#[test]
fn minibatch_sg_scaling() {
    let (ds, b, x) = small_m2pl(2, 2, 3);
    let prep = Prepared::new(&b).unwrap();
    let g1 = grad_params(&ds, &prep, 0, x.row(0)).unwrap();
    let mb = minibatch_sg(&ds, &b, &x, &[0]).unwrap();
    for (a, c) in mb.iter().zip(&g1) {
        assert_eq!(*a, 2.0 * c);
    }
    let full = minibatch_sg(&ds, &b, &x, &[0, 1]).unwrap();
    let g2 = grad_params(&ds, &prep, 1, x.row(1)).unwrap();
    for q in 0..full.len() {
        assert_eq!(full[q], g1[q] + g2[q]);
    }
    assert!(minibatch_sg(&ds, &b, &x, &[]).is_err());
}

#[test]
fn minibatch_expectation_over_all_pairs() {
    for (ds, b, x) in [small("multilevel-k5", 6, 9), small_m2pl(6, 3, 9)] {
        let full = minibatch_sg(&ds, &b, &x, &(0..6).collect::<Vec<_>>()).unwrap();
        let mut mean = vec![0.0; full.len()];
        let mut count = 0;
        for i in 0..6 {
            for j in i + 1..6 {
                let g = minibatch_sg(&ds, &b, &x, &[i, j]).unwrap();
                for (m, v) in mean.iter_mut().zip(&g) {
                    *m += v;
                }
                count += 1;
            }
        }
        assert_eq!(count, 15);
        for (m, f) in mean.iter().zip(&full) {
            assert!(
                (m / 15.0 - f).abs() <= 1e-12 * f.abs().max(1.0),
                "{m} vs {f}"
            );
        }
    }
}

#[test]
fn sg_update_trivia() {
    let layout = Arc::new(Layout::multilevel(2));
    let mut b = ParamVector::zeros(layout);
    b.values_mut().copy_from_slice(&[0.1, -0.2, 1.0, 0.3, 0.8]);
    let p = b.len();
    let g = [0.5, 0.25, -0.125, 1.0, 0.0];
    let out = sg_update(&b, &g, 1.0, &QNState::identity(p), &[1.0; 5]).unwrap();
    for q in 0..p {
        assert_eq!(out.values()[q], b.values()[q] + g[q]);
    }
    let same = sg_update(&b, &[0.0; 5], 0.7, &QNState::identity(p), &[1.0; 5]).unwrap();
    assert_eq!(same, project(&b).unwrap());
    let half = sg_update(
        &b,
        &g,
        1.0,
        &QNState::constant(p, 2.0),
        &[1.0, 1.0, 0.5, 0.5, 0.5],
    )
    .unwrap();
    assert_eq!(half.values()[0], 0.1 + 0.25);
    assert_eq!(half.values()[2], 1.0 - 0.125 * 0.25);
    assert!(sg_update(&b, &[f64::NAN; 5], 1.0, &QNState::identity(p), &[1.0; 5]).is_err());
    assert!(sg_update(&b, &g[..4], 1.0, &QNState::identity(p), &[1.0; 5]).is_err());
}

#[test]
fn sg_update_keeps_m2pl_rows_unit() {
    let (ds, b, x) = small_m2pl(30, 3, 5);
    let g = minibatch_sg(&ds, &b, &x, &(0..30).collect::<Vec<_>>()).unwrap();
    let out = sg_update(
        &b,
        &g,
        0.3,
        &QNState::constant(b.len(), 10.0),
        &vec![1.0; b.len()],
    )
    .unwrap();
    let l = out.chol();
    for r in 0..3 {
        let norm: f64 = (0..=r).map(|c| l.get(r, c).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}

#[test]
fn qn_recursion_fixed_point_and_floor() {
    let layout = Arc::new(Layout::multilevel(2));
    let b = {
        let mut b = ParamVector::zeros(layout);
        b.set_chol(&CholFactor::identity(2));
        b
    };
    let s = QNState {
        d: vec![3.0, 2.0, 1.5, 0.7, 4.0],
    };
    assert_eq!(qn_recursion(&s, &s.d.clone(), 0.4, &b), s);
    let h = [3.0, -50.0, 1.5, 0.7, 4.0];
    let out = qn_recursion(&s, &h, 0.5, &b);
    assert_eq!(out.d[1], QN_FLOOR);
    let h = [3.0, -1.0, 1.5, 0.7, 4.0];
    let out = qn_recursion(&s, &h, 0.5, &b);
    assert_eq!(out.d[1], 0.5);
}

/// Gaussian toy: `log P(Y_i | xi, beta) = -c_q (beta_q - y_iq)^2 / 2` on the
/// item intercepts, independent of `xi`. The negative Hessian is `N c_q`.
struct Quadratic {
    layout: Arc<Layout>,
    y: Vec<[f64; 2]>,
    c: [f64; 2],
}

impl LatentModel for Quadratic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }
    fn n_obs(&self) -> usize {
        self.y.len()
    }
    fn data_loglik(&self, beta: &[f64], i: usize, _xi: &[f64]) -> f64 {
        (0..2)
            .map(|q| -0.5 * self.c[q] * (beta[q] - self.y[i][q]).powi(2))
            .sum()
    }
    fn data_loglik_grad_latent_into(
        &self,
        beta: &[f64],
        i: usize,
        xi: &[f64],
        _g: &mut [f64],
    ) -> f64 {
        self.data_loglik(beta, i, xi)
    }
    fn data_grad_params_into(&self, beta: &[f64], i: usize, _xi: &[f64], out: &mut [f64]) {
        for q in 0..2 {
            out[q] -= self.c[q] * (beta[q] - self.y[i][q]);
        }
    }
    fn data_neg_hess_diag_into(&self, _beta: &[f64], _i: usize, _xi: &[f64], out: &mut [f64]) {
        for q in 0..2 {
            out[q] += self.c[q];
        }
    }
}

#[test]
fn qn_converges_on_quadratic_toy() {
    let model = Quadratic {
        layout: Arc::new(Layout::m2pl(2, 1, 1)),
        y: (0..20)
            .map(|i| [i as f64 * 0.1, -(i as f64) * 0.05])
            .collect(),
        c: [0.7, 2.5],
    };
    let mut beta = ParamVector::zeros(model.layout.clone());
    beta.set_chol(&CholFactor::identity(1));
    let xi = LatentState::zeros(20, 1);
    for mode in [HessianMode::Analytic, HessianMode::FiniteDifference] {
        let mut s = QNState::identity(beta.len());
        for t in 1..=1000u64 {
            // offset keeps the first gain below one so the recursion is exercised
            let gamma = ((t + 1) as f64).powf(-0.51);
            let batch = [(t % 20) as usize, ((t + 7) % 20) as usize];
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            batch.dedup();
            s = qn_update(&s, &model, &beta, &xi, &batch, gamma, mode).unwrap();
        }
        assert!((s.d[0] - 20.0 * 0.7).abs() < 1e-3, "{:?}", s.d);
        assert!((s.d[1] - 20.0 * 2.5).abs() < 1e-3, "{:?}", s.d);
    }
}

#[test]
fn diff_max_examples() {
    let rule = StopRule {
        window: 1,
        threshold: 0.05,
        consecutive: 3,
    };
    let beta0 = [1.0, 1.0];
    let windows = vec![vec![0.0, 0.0]; 6];
    let (vals, fired) = diff_max_monitor(&beta0, &windows, &rule);
    assert_eq!(vals[0], 1.0);
    assert!(vals[1..].iter().all(|v| *v == 0.0));
    assert_eq!(fired, Some(1 + rule.consecutive));

    let (vals, _) = diff_max_monitor(&[0.0, 0.0], &[vec![0.0, 0.0], vec![0.03, -0.07]], &rule);
    assert!((vals[1] - 0.07).abs() < 1e-15);

    let alt: Vec<Vec<f64>> = (0..40)
        .map(|m| vec![if m % 2 == 0 { 0.0 } else { 0.06 }])
        .collect();
    assert_eq!(diff_max_monitor(&[0.0], &alt, &rule).1, None);

    let mut mon = DiffMaxMonitor::new(
        StopRule {
            window: 2,
            threshold: 0.05,
            consecutive: 2,
        },
        &[1.0],
    );
    let pushes: Vec<_> = (0..8).map(|_| mon.push(&[0.0])).collect();
    assert_eq!(pushes[0], None);
    assert_eq!(pushes[1], Some((1.0, false)));
    assert_eq!(pushes[3], Some((0.0, false)));
    assert_eq!(pushes[5], Some((0.0, true)));
}

#[test]
fn zero_epochs_returns_projected_init() {
    let (ds, mut b, x) = small_m2pl(20, 2, 11);
    for v in b.block_mut(BlockKind::Chol) {
        *v *= 1.7;
    }
    let cfg = OptimizerConfig {
        max_epochs: 0,
        ..OptimizerConfig::new(Algorithm::DSomala, ModelKind::M2pl, 0.1, 5)
    };
    let fit = run(&ds, &b, &x, &cfg).unwrap();
    assert_eq!(fit.beta_final, project(&b).unwrap());
    assert!(fit.diff_max_trace.is_empty());
    assert_eq!(fit.checkpoints.len(), 1);
    assert_eq!(fit.updates, 0);
}

#[test]
fn zero_gain_freezes_parameters_but_latents_move() {
    let (ds, b, x) = small("multilevel-k5", 40, 12);
    let cfg = OptimizerConfig {
        gamma_scale: 0.0,
        max_epochs: 3,
        ..OptimizerConfig::new(Algorithm::Somala, ModelKind::Multilevel, 0.05, 40)
    };
    let fit = run(&ds, &b, &x, &cfg).unwrap();
    let start = project(&b).unwrap();
    for c in &fit.checkpoints {
        assert_eq!(c.beta, start.values());
    }
    assert_ne!(fit.xi_final, x);
    assert!(fit.mean_acceptance > 0.0);
}

#[test]
fn runs_are_reproducible_across_worker_counts() {
    let (ds, b, x) = small_m2pl(300, 3, 13);
    let mut cfg = OptimizerConfig::new(Algorithm::QnDSomala, ModelKind::M2pl, 0.1, 64);
    cfg.max_epochs = 4;
    cfg.averaging_start_epoch = 2;
    cfg.information = true;
    cfg.retain_latents = 3;
    let fit_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&ds, &b, &x, &cfg).unwrap())
    };
    let a = fit_with(1);
    let c = fit_with(4);
    assert_eq!(a.beta_final, c.beta_final);
    assert_eq!(a.beta_pr, c.beta_pr);
    assert_eq!(a.xi_final, c.xi_final);
    assert_eq!(a.information, c.information);
    assert_eq!(a.retained, c.retained);
    let strip = |f: &FitResult| -> Vec<(usize, Vec<f64>, f64)> {
        f.checkpoints
            .iter()
            .map(|c| (c.epoch, c.beta.clone(), c.acceptance))
            .collect()
    };
    assert_eq!(strip(&a), strip(&c));
    assert_eq!(a.averaged_updates, 2 * (300 / 64) as u64);
}

#[test]
fn m2pl_constraints_hold_after_every_update() {
    for algo in [Algorithm::DSomala, Algorithm::QnDSomh, Algorithm::QnSomala] {
        let (ds, b, x) = small_m2pl(120, 3, 14);
        let mut cfg = OptimizerConfig::new(algo, ModelKind::M2pl, 0.1, 30);
        if algo.sampler_kind() == SamplerKind::Rwmh {
            cfg.sampler = SamplerConfig::rwmh(0.3);
        }
        cfg.max_epochs = 3;
        let mut worst = 0.0f64;
        let mut seen = 0;
        run_with_observer(&ds, &b, &x, &cfg, &mut |ev| {
            seen += 1;
            let s = ev.beta.sigma();
            for d in 0..3 {
                worst = worst.max((s[d * 3 + d] - 1.0).abs());
            }
        })
        .unwrap();
        assert!(seen > 0);
        assert!(worst < 1e-10, "{algo}: {worst}");
    }
}

#[test]
fn algorithm_matrix_is_reachable_by_configuration() {
    for a in Algorithm::ALL {
        let cfg = OptimizerConfig::new(a, ModelKind::M2pl, 0.1, 10);
        assert_eq!(cfg.algorithm(100), a);
        assert_eq!(Algorithm::parse(a.name()), Some(a));
    }
    // a fullbatch-sized minibatch is the fullbatch algorithm
    let cfg = OptimizerConfig::new(Algorithm::QnDSomala, ModelKind::M2pl, 0.1, 100);
    assert_eq!(cfg.algorithm(100), Algorithm::QnSomala);
}

#[test]
fn divergence_carries_last_checkpoint() {
    let (ds, b, x) = small("multilevel-k5", 30, 15);
    let cfg = OptimizerConfig {
        gamma_scale: 1e300,
        base_scale: Some(1e-300),
        max_epochs: 5,
        ..OptimizerConfig::new(Algorithm::Somala, ModelKind::Multilevel, 0.05, 30)
    };
    match run(&ds, &b, &x, &cfg) {
        Err(Error::Divergence {
            last_checkpoint, ..
        }) => {
            let c = last_checkpoint.expect("checkpoint 0 is finite");
            assert!(c.beta.iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|f| f.epochs)),
    }
}

#[test]
fn config_validation() {
    let ok = OptimizerConfig::new(Algorithm::DSomala, ModelKind::M2pl, 0.1, 10);
    assert!(ok.validate(100).is_ok());
    assert!(ok.validate(5).is_err());
    let mut bad = ok.clone();
    bad.gamma_exponent = 0.5;
    assert!(bad.validate(100).is_err());
    let mut bad = ok.clone();
    bad.block_rescale.insert(BlockKind::A, 0.0);
    assert!(bad.validate(100).is_err());
    let mut bad = ok;
    bad.sampler = SamplerConfig::mala(-1.0);
    assert!(bad.validate(100).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_metric_update_is_plain_ascent(
        vals in proptest::collection::vec(-2.0f64..2.0, 2),
        grad in proptest::collection::vec(-5.0f64..5.0, 5),
        gamma in 0.0f64..2.0,
    ) {
        let layout = Arc::new(Layout::multilevel(2));
        let mut b = ParamVector::zeros(layout);
        b.values_mut()[..2].copy_from_slice(&vals);
        b.set_chol(&CholFactor::identity(2));
        let out = sg_update(&b, &grad, gamma, &QNState::identity(5), &[1.0; 5]).unwrap();
        for q in 0..5 {
            prop_assert_eq!(out.values()[q], b.values()[q] + gamma * grad[q]);
        }
    }

    #[test]
    fn schedule_is_piecewise_constant_per_epoch(c in 1u64..10_000, n in 1usize..500) {
        let big_n = 1000;
        let per = (big_n / n).max(1) as u64;
        let first = (c - 1) / per * per + 1;
        prop_assert_eq!(step_schedule(c, n, big_n, 0.51), step_schedule(first, n, big_n, 0.51));
    }
}
