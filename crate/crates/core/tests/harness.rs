use std::path::PathBuf;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tow::harness::{
    emit_metrics, evaluate, evaluate_tasks, metrics_rows, read_metrics, run_check, seeded_rng, train, CheckKind,
    ExperimentConfig, SeedStream, TrainLog, Trainer, METRICS_HEADER,
};
use tow::metalearn::{AdaptationVariant, InnerLoopConfig, MetaGradOrder, MetaObjective};
use tow::model::{LossKind, ModelSpec};
use tow::tasks::{sample_task, sample_task_batch, ClusterFamily, EnvKind, TaskEnvironment};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&config_path(name), &ov).unwrap()
}

fn small(overrides: &[&str]) -> ExperimentConfig {
    let mut all = vec!["training.meta_iterations=3", "evaluation.n_tasks=20"];
    all.extend_from_slice(overrides);
    load("check_linear.toml", &all)
}

#[test]
fn shipped_configs_load_and_round_trip() {
    for entry in std::fs::read_dir(config_path("")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path, &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
    }
}

#[test]
fn bad_configs_are_rejected() {
    assert!(ExperimentConfig::load(&config_path("check_linear.toml"), &["training.nonsense=1".into()]).is_err());
    assert!(ExperimentConfig::load(&config_path("check_linear.toml"), &["training.horizon=0".into()]).is_err());
    assert!(ExperimentConfig::load(&config_path("check_linear.toml"), &["weighting.strategy=\"greedy\"".into()]).is_err());
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let cfg = small(&["training.meta_iterations=0"]);
    let init = cfg.model.init_params(&mut seeded_rng(cfg.seed, SeedStream::Init));
    let out = train(&cfg).unwrap();
    assert!(out.log.records.is_empty());
    assert_eq!(out.params, init);
}

#[test]
fn uniform_sgd_matches_a_plain_training_loop() {
    let cfg = small(&[
        "weighting.strategy=\"uniform\"",
        "optimizer={type=\"sgd\",alpha=0.05}",
        "training.horizon=1",
    ]);
    let out = train(&cfg).unwrap();

    let objective = cfg.objective();
    let mut x = cfg.model.init_params(&mut seeded_rng(cfg.seed, SeedStream::Init));
    let mut eval_rng = seeded_rng(cfg.seed, SeedStream::Evaluation);
    let env = cfg.eval_environment().unwrap();
    let eval: Vec<_> = (0..cfg.evaluation.n_tasks).map(|_| sample_task(&env, &mut eval_rng).unwrap()).collect();
    let mut batch_rng = seeded_rng(cfg.seed, SeedStream::Batches);
    let m = cfg.training.batch_size;
    for rec in &out.log.records {
        let batch = sample_task_batch(&cfg.environment, &mut batch_rng, m).unwrap();
        let jac = objective.meta_loss_jacobian(&x, &batch).unwrap();
        let mut g = DVector::zeros(x.len());
        for i in 0..m {
            g += jac.row(i).transpose() / m as f64;
        }
        x -= g * 0.05;
        let s = evaluate_tasks(&objective, &x, &eval).unwrap();
        assert!((rec.val_loss - s.mean_loss).abs() <= 1e-13 * s.mean_loss);
        assert_eq!(rec.weights, vec![DVector::from_element(m, 1.0 / m as f64)]);
        assert_eq!(rec.delta_emp, 0.0);
    }
    assert!((out.params - x).amax() < 1e-13);
}

#[test]
fn training_is_deterministic() {
    for strategy in ["tow", "exploration"] {
        let cfg = small(&[&format!("weighting.strategy=\"{strategy}\"")]);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let (ra, rb) = (metrics_rows(&a.log), metrics_rows(&b.log));
        assert_eq!(ra.len(), rb.len());
        assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_as(y)));
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn stepping_a_trainer_matches_a_full_run() {
    let cfg = small(&[]);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    while !t.is_done() {
        t.run_iteration().unwrap();
    }
    let full = metrics_rows(&train(&cfg).unwrap().log);
    let stepped = metrics_rows(t.log());
    assert!(full.len() == stepped.len() && full.iter().zip(&stepped).all(|(a, b)| a.same_as(b)));
}

#[test]
fn metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    emit_metrics(&TrainLog::default(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(text.trim_end(), METRICS_HEADER.join(","));

    let cfg = small(&["training.meta_iterations=1", "training.horizon=5", "training.batch_size=5"]);
    let out = train(&cfg).unwrap();
    let rows = metrics_rows(&out.log);
    assert_eq!(rows.len(), 25);
    emit_metrics(&out.log, &path).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    assert!(rows.iter().zip(&back).all(|(a, b)| a.same_as(b)));
}

fn cluster_objective() -> (MetaObjective, TaskEnvironment) {
    let env = TaskEnvironment {
        kind: EnvKind::ClusterClassification {
            n_way: 2,
            families: vec![ClusterFamily {
                centers: vec![vec![5.0, 0.0], vec![0.0, 5.0]],
            }],
        },
        family_probabilities: vec![1.0],
        m_s: 2,
        m_q: 4,
        noise_std: 0.0,
    };
    let obj = MetaObjective::new(
        ModelSpec::linear(2, 2, LossKind::CrossEntropy),
        InnerLoopConfig {
            gamma: 0.0,
            n_inner_steps: 1,
            variant: AdaptationVariant::Prototypical,
        },
        MetaGradOrder::Full,
    );
    (obj, env)
}

#[test]
fn separable_prototypes_are_classified_perfectly() {
    let (obj, env) = cluster_objective();
    let x = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
    let s = evaluate(&obj, &x, &env, 30, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(s.mean_accuracy, Some(1.0));
    assert_eq!(s.accuracy_ci, Some(0.0));
}

#[test]
fn confidence_interval_properties() {
    let cfg = load("reference_sine.toml", &[]);
    let obj = cfg.objective();
    let x = cfg.model.init_params(&mut seeded_rng(1, SeedStream::Init));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let task = sample_task(&cfg.environment, &mut rng).unwrap();
    let same = evaluate_tasks(&obj, &x, &vec![task; 5]).unwrap();
    assert_eq!(same.loss_ci, 0.0);
    assert_eq!(same.mean_accuracy, None);

    let env = cfg.eval_environment().unwrap();
    let small = evaluate(&obj, &x, &env, 400, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let large = evaluate(&obj, &x, &env, 1600, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let ratio = large.loss_ci / small.loss_ci;
    assert!((ratio - 0.5).abs() <= 0.05, "ratio {ratio}");
    assert!(evaluate(&obj, &x, &env, 1, &mut rng).is_err());
}

#[test]
fn derivative_checks_pass_on_the_small_model() {
    let cfg = load("check_linear.toml", &[]);
    for kind in CheckKind::ALL {
        let report = run_check(&cfg, kind).unwrap();
        assert!(report.passed(), "{kind:?}: {report:?}");
    }
}

#[test]
fn derivative_checks_refuse_large_models() {
    let cfg = load("reference_sine.toml", &[]);
    assert!(matches!(run_check(&cfg, CheckKind::Gradients), Err(tow::Error::Config(_))));
    assert!(run_check(&cfg, CheckKind::Lqr).unwrap().passed());
}

#[test]
fn larger_prior_keeps_weights_closer_to_uniform() {
    let mut prev = f64::INFINITY;
    for beta in [1.0, 10.0, 100.0] {
        let cfg = small(&[&format!("tow.beta_u={beta}")]);
        let out = train(&cfg).unwrap();
        let d = out.log.records.iter().map(|r| r.delta_emp).fold(0.0, f64::max);
        assert!(d <= prev, "β={beta}: {d} > {prev}");
        prev = d;
    }
}
