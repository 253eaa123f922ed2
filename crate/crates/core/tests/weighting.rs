use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tow::dynamics::{OptimizerKind, OptimizerState};
use tow::ilqr::StartState;
use tow::metalearn::{AdaptationVariant, InnerLoopConfig, LossVector, MetaGradOrder, MetaObjective};
use tow::model::{LossKind, ModelSpec};
use tow::tasks::{sample_task_batch, ClusterFamily, EnvKind, TaskEnvironment};
use tow::weighting::{baseline_weights, tow_weights, uniform_weights, BaselineMode, TowSettings};

/// Stationarity of the barrier problem gives `uᵢ = c / (s·ℓᵢ − λ)`; find λ by
/// bisection so that the weights sum to one.
fn barrier_oracle(ell: &[f64], mode: BaselineMode, kappa: f64) -> Vec<f64> {
    let s = match mode {
        BaselineMode::Exploration => -1.0,
        BaselineMode::Exploitation => 1.0,
    };
    let c = kappa - 1.0;
    let a: Vec<f64> = ell.iter().map(|l| s * l).collect();
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let total = |lam: f64| a.iter().map(|ai| c / (ai - lam)).sum::<f64>();
    // total is increasing in λ on (−∞, amin).
    let (mut lo, mut hi) = (amin - c * ell.len() as f64 - 1.0, amin);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    a.iter().map(|ai| c / (ai - lam)).collect()
}

fn losses(v: &[f64]) -> LossVector {
    LossVector::from(DVector::from_vec(v.to_vec()))
}

#[test]
fn baselines_match_closed_form_stationarity() {
    let ell = [0.3, 1.7, 0.05, 2.4, 0.9];
    for mode in [BaselineMode::Exploration, BaselineMode::Exploitation] {
        for kappa in [1.05, 1.5, 3.0, 50.0] {
            let sol = baseline_weights(&losses(&ell), mode, kappa).unwrap();
            assert!(sol.converged, "{mode:?} κ={kappa}: {} iters, residual {:e}", sol.iterations, sol.residual);
            let expect = barrier_oracle(&ell, mode, kappa);
            for (u, e) in sol.weights.iter().zip(&expect) {
                assert!((u - e).abs() < 1e-8, "{mode:?} κ={kappa}: {u} vs {e}");
            }
        }
    }
}

#[test]
fn equal_losses_give_uniform_weights() {
    for mode in [BaselineMode::Exploration, BaselineMode::Exploitation] {
        let sol = baseline_weights(&losses(&[0.8; 6]), mode, 2.0).unwrap();
        assert!((sol.weights.clone() - DVector::from_element(6, 1.0 / 6.0)).amax() < 1e-12);
    }
}

#[test]
fn invalid_kappa_and_losses_are_rejected() {
    assert!(baseline_weights(&losses(&[1.0, 2.0]), BaselineMode::Exploration, 1.0).is_err());
    assert!(baseline_weights(&losses(&[1.0, 2.0]), BaselineMode::Exploration, f64::NAN).is_err());
    assert!(baseline_weights(&losses(&[1.0, f64::INFINITY]), BaselineMode::Exploitation, 2.0).is_err());
    assert!(baseline_weights(&losses(&[]), BaselineMode::Exploitation, 2.0).is_err());
    assert!(uniform_weights(0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn baselines_are_interior_normalized_and_ordered(
        ell in prop::collection::vec(0.0f64..10.0, 1..12),
        kappa in 1.01f64..100.0,
    ) {
        for mode in [BaselineMode::Exploration, BaselineMode::Exploitation] {
            let u = baseline_weights(&losses(&ell), mode, kappa).unwrap().weights;
            prop_assert!(u.iter().all(|&v| v > 0.0 && v < 1.0 || ell.len() == 1));
            prop_assert!((u.sum() - 1.0).abs() < 1e-9);
            for i in 0..ell.len() {
                for j in 0..ell.len() {
                    if ell[i] > ell[j] + 1e-9 {
                        match mode {
                            BaselineMode::Exploration => prop_assert!(u[i] >= u[j]),
                            BaselineMode::Exploitation => prop_assert!(u[i] <= u[j]),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_ignores_losses(m in 1usize..20) {
        let u = uniform_weights(m).unwrap();
        prop_assert!(u.iter().all(|&v| v == 1.0 / m as f64));
    }
}

fn tow_setup(seed: u64, m: usize, horizon: usize) -> (MetaObjective, StartState<OptimizerState>, Vec<tow::tasks::TaskBatch>) {
    let env = TaskEnvironment {
        kind: EnvKind::ClusterClassification {
            n_way: 2,
            families: vec![ClusterFamily {
                centers: vec![vec![1.5, 0.0], vec![0.0, 1.5], vec![-1.0, -1.0]],
            }],
        },
        family_probabilities: vec![1.0],
        m_s: 2,
        m_q: 4,
        noise_std: 0.6,
    };
    let objective = MetaObjective::new(
        ModelSpec::linear(2, 2, LossKind::CrossEntropy),
        InnerLoopConfig {
            gamma: 0.1,
            n_inner_steps: 1,
            variant: AdaptationVariant::Gradient,
        },
        MetaGradOrder::Full,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    let batches = (0..horizon).map(|_| sample_task_batch(&env, &mut rng, m).unwrap()).collect();
    let start = StartState {
        x,
        snapshot: OptimizerState::new(OptimizerKind::adam(0.05), 4),
    };
    (objective, start, batches)
}

#[test]
fn huge_prior_pins_weights_to_uniform() {
    let (obj, start, batches) = tow_setup(11, 4, 3);
    let settings = TowSettings {
        beta_u: 1e6,
        ..TowSettings::default()
    };
    let sol = tow_weights(&obj, &start, &batches, &settings).unwrap();
    for u in sol.actions() {
        assert!((u - DVector::from_element(4, 0.25)).amax() < 1e-3);
    }
}

#[test]
fn single_task_single_step_is_nonnegative() {
    let (obj, start, batches) = tow_setup(12, 1, 1);
    let sol = tow_weights(&obj, &start, &batches, &TowSettings::default()).unwrap();
    assert_eq!(sol.actions().len(), 1);
    assert!(sol.actions()[0][0] >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tow_weights_stay_within_reported_deviation(seed in any::<u64>(), beta in 0.5f64..50.0) {
        let (obj, start, batches) = tow_setup(seed, 3, 3);
        let settings = TowSettings { beta_u: beta, ..TowSettings::default() };
        let sol = tow_weights(&obj, &start, &batches, &settings).unwrap();
        let delta = sol.delta_emp();
        for u in sol.actions() {
            prop_assert!(u.iter().all(|&v| v >= 0.0));
            prop_assert!((u - DVector::from_element(3, 1.0 / 3.0)).norm() <= delta + 1e-15);
        }
    }
}
