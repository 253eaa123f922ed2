use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::evaluate_tasks;
use crate::dynamics::OptimizerState;
use crate::error::Result;
use crate::ilqr::{IlqrIteration, StartState};
use crate::metalearn::{weighted_rows, MetaObjective};
use crate::model::ParamVector;
use crate::tasks::{sample_task, sample_task_batch, Task, TaskBatch};
use crate::weighting::{
    baseline_weights, tow_weights_from, uniform_weights, BaselineMode, NominalActions, WeightingStrategy,
};

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Init = 0,
    Batches = 1,
    Evaluation = 2,
    Nominal = 3,
    Checks = 4,
}

pub fn seeded_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Diagnostics of one outer iteration. Quantities that do not apply to the
/// strategy, or that were not evaluated this iteration, are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub weights: Vec<DVector<f64>>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// θ₁ of the last iLQR iteration.
    pub theta1: f64,
    /// Step size accepted in the last iLQR iteration.
    pub epsilon_accepted: f64,
    /// Line-search trials summed over iLQR iterations.
    pub ls_trials: usize,
    /// `max_t ‖u_t − û_t‖₂` against the initial nominal (uniform for baselines).
    pub delta_emp: f64,
    pub wall_ms: f64,
    pub ilqr: Vec<IlqrIteration>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    /// Validation losses of the evaluated iterations, as (iteration, loss).
    pub fn loss_trace(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| !r.val_loss.is_nan())
            .map(|r| (r.iteration, r.val_loss))
            .collect()
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
}

/// Outer meta-training loop. Each iteration samples `T` batches, chooses the
/// weights, applies `T` optimizer steps and evaluates on a fixed held-out set.
pub struct Trainer {
    cfg: ExperimentConfig,
    objective: MetaObjective,
    strategy: WeightingStrategy,
    eval_tasks: Vec<Task>,
    batch_rng: ChaCha8Rng,
    nominal_rng: ChaCha8Rng,
    params: ParamVector,
    optimizer: OptimizerState,
    log: TrainLog,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.model.init_params(&mut seeded_rng(cfg.seed, SeedStream::Init));
        Self::with_params(cfg, params)
    }

    /// Starts from the given meta-parameters instead of a fresh initialization.
    pub fn with_params(cfg: ExperimentConfig, params: ParamVector) -> Result<Self> {
        cfg.validate()?;
        let objective = cfg.objective();
        objective.model.check_params(params.len())?;
        let eval_env = cfg.eval_environment()?;
        let mut eval_rng = seeded_rng(cfg.seed, SeedStream::Evaluation);
        let eval_tasks = (0..cfg.evaluation.n_tasks)
            .map(|_| sample_task(&eval_env, &mut eval_rng))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = OptimizerState::new(cfg.optimizer, params.len());
        Ok(Trainer {
            strategy: cfg.strategy(),
            objective,
            eval_tasks,
            batch_rng: seeded_rng(cfg.seed, SeedStream::Batches),
            nominal_rng: seeded_rng(cfg.seed, SeedStream::Nominal),
            params,
            optimizer,
            log: TrainLog::default(),
            cfg,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn eval_tasks(&self) -> &[Task] {
        &self.eval_tasks
    }

    pub fn is_done(&self) -> bool {
        self.log.records.len() >= self.cfg.training.meta_iterations
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            log: self.log,
            params: self.params,
            optimizer: self.optimizer,
        }
    }

    /// Runs the remaining iterations. On error the state reflects the last
    /// completed iteration.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_iteration()?;
        }
        Ok(())
    }

    pub fn run_iteration(&mut self) -> Result<&IterationRecord> {
        let started = Instant::now();
        let iteration = self.log.records.len() + 1;
        let (t_len, m) = (self.cfg.training.horizon, self.cfg.training.batch_size);
        let batches = (0..t_len)
            .map(|_| sample_task_batch(&self.cfg.environment, &mut self.batch_rng, m))
            .collect::<Result<Vec<_>>>()?;

        let mut rec = IterationRecord {
            iteration,
            weights: Vec::with_capacity(t_len),
            val_loss: f64::NAN,
            val_accuracy: f64::NAN,
            theta1: f64::NAN,
            epsilon_accepted: f64::NAN,
            ls_trials: 0,
            delta_emp: 0.0,
            wall_ms: 0.0,
            ilqr: Vec::new(),
        };

        let (x, opt) = match &self.strategy {
            WeightingStrategy::Tow(settings) => {
                let nominal = nominal_actions(&mut self.nominal_rng, &batches, settings.nominal)?;
                let start = StartState {
                    x: self.params.clone(),
                    snapshot: self.optimizer.clone(),
                };
                let sol = tow_weights_from(&self.objective, &start, &batches, settings, nominal)?;
                rec.delta_emp = sol.delta_emp();
                if let Some(last) = sol.iterations.last() {
                    rec.theta1 = last.theta1;
                    rec.epsilon_accepted = last.epsilon.unwrap_or(f64::NAN);
                }
                rec.ls_trials = sol.iterations.iter().map(|i| i.trials).sum();
                rec.ilqr = sol.iterations;
                let traj = sol.trajectory;
                let end = if settings.restart_from_x_t { t_len - 1 } else { t_len };
                rec.weights = traj.actions;
                (traj.states[end].clone(), traj.snapshots[end].clone())
            }
            strategy => {
                let mut x = self.params.clone();
                let mut opt = self.optimizer.clone();
                let uniform = uniform_weights(m)?;
                for batch in &batches {
                    let (u, next) = baseline_step(&self.objective, strategy, &x, &opt, batch)?;
                    rec.delta_emp = rec.delta_emp.max((&u - &uniform).norm());
                    rec.weights.push(u);
                    x = next.0;
                    opt = next.1;
                }
                (x, opt)
            }
        };
        self.params = x;
        self.optimizer = opt;

        if iteration % self.cfg.evaluation.every == 0 || iteration == self.cfg.training.meta_iterations {
            let s = evaluate_tasks(&self.objective, &self.params, &self.eval_tasks)?;
            rec.val_loss = s.mean_loss;
            rec.val_accuracy = s.mean_accuracy.unwrap_or(f64::NAN);
        }
        if self.cfg.metrics.wall_clock {
            rec.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        }
        log::debug!(
            "iteration {iteration}: val_loss={:.6} delta_emp={:.3e}",
            rec.val_loss,
            rec.delta_emp
        );
        self.log.records.push(rec);
        Ok(self.log.records.last().expect("just pushed"))
    }
}

fn nominal_actions(rng: &mut ChaCha8Rng, batches: &[TaskBatch], kind: NominalActions) -> Result<Vec<DVector<f64>>> {
    batches
        .iter()
        .map(|b| {
            let u = uniform_weights(b.len())?;
            Ok(match kind {
                NominalActions::Uniform => u,
                NominalActions::Random { spread } => u.map(|v| v * (1.0 + rng.gen_range(-spread..=spread))),
            })
        })
        .collect()
}

/// Weights for one batch from the current losses, then one optimizer step.
fn baseline_step(
    objective: &MetaObjective,
    strategy: &WeightingStrategy,
    x: &ParamVector,
    opt: &OptimizerState,
    batch: &TaskBatch,
) -> Result<(DVector<f64>, (ParamVector, OptimizerState))> {
    let (ell, jac) = objective.loss_and_jacobian(x, batch)?;
    let u = match *strategy {
        WeightingStrategy::Exploration { kappa } => baseline_weights(&ell, BaselineMode::Exploration, kappa)?.weights,
        WeightingStrategy::Exploitation { kappa } => baseline_weights(&ell, BaselineMode::Exploitation, kappa)?.weights,
        _ => uniform_weights(batch.len())?,
    };
    let next = opt.apply(x, &weighted_rows(&jac, &u))?;
    Ok((u, next))
}

/// Runs the configured number of iterations from a fresh initialization.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run()?;
    Ok(trainer.into_outcome())
}
