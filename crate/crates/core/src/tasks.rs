//! Synthetic few-shot task environments with a controllable family imbalance.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Value(Vec<f64>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    pub family_id: usize,
}

/// An ordered mini-batch of `M` tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub tasks: Vec<Task>,
}

impl TaskBatch {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::argument("a task batch needs at least one task"));
        }
        Ok(TaskBatch { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineFamily {
    pub amplitude: [f64; 2],
    pub phase: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterFamily {
    /// Pool of class centres; each task draws `n_way` of them.
    pub centers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvKind {
    /// `y = A·sin(x − φ)` with `A`, `φ` drawn uniformly from the family's ranges.
    SineRegression {
        families: Vec<SineFamily>,
        #[serde(default = "default_input_range")]
        input_range: [f64; 2],
    },
    /// N-way classification of isotropic Gaussian clusters.
    ClusterClassification {
        n_way: usize,
        families: Vec<ClusterFamily>,
    },
}

fn default_input_range() -> [f64; 2] {
    [-5.0, 5.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvironment {
    pub kind: EnvKind,
    pub family_probabilities: Vec<f64>,
    pub m_s: usize,
    pub m_q: usize,
    /// Observation noise for regression, cluster spread for classification.
    #[serde(default)]
    pub noise_std: f64,
}

impl TaskEnvironment {
    pub fn n_families(&self) -> usize {
        match &self.kind {
            EnvKind::SineRegression { families, .. } => families.len(),
            EnvKind::ClusterClassification { families, .. } => families.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            EnvKind::SineRegression { .. } => 1,
            EnvKind::ClusterClassification { families, .. } => families
                .first()
                .and_then(|f| f.centers.first())
                .map_or(0, Vec::len),
        }
    }

    /// Output width a predictor needs: 1 for regression, `n_way` logits otherwise.
    pub fn output_dim(&self) -> usize {
        match &self.kind {
            EnvKind::SineRegression { .. } => 1,
            EnvKind::ClusterClassification { n_way, .. } => *n_way,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, EnvKind::ClusterClassification { .. })
    }

    /// Same generator, different family mix (e.g. balanced evaluation).
    pub fn with_family_probabilities(&self, probs: Vec<f64>) -> Result<Self> {
        let env = TaskEnvironment {
            family_probabilities: probs,
            ..self.clone()
        };
        env.validate()?;
        Ok(env)
    }

    pub fn uniform_family_probabilities(&self) -> Vec<f64> {
        let n = self.n_families();
        vec![1.0 / n as f64; n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_families();
        if n == 0 {
            return Err(Error::config("environment has no task families"));
        }
        if self.family_probabilities.len() != n {
            return Err(Error::config(format!(
                "family_probabilities has {} entries for {} families",
                self.family_probabilities.len(),
                n
            )));
        }
        if self
            .family_probabilities
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(Error::config("family probabilities must be finite and >= 0"));
        }
        let total: f64 = self.family_probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "family probabilities sum to {total}, expected 1"
            )));
        }
        if self.m_s == 0 || self.m_q == 0 {
            return Err(Error::config("support and query sizes must be >= 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        match &self.kind {
            EnvKind::SineRegression {
                families,
                input_range,
            } => {
                if !(input_range[0] < input_range[1]) {
                    return Err(Error::config("sine input_range must be increasing"));
                }
                for f in families {
                    if f.amplitude[0] > f.amplitude[1] || f.phase[0] > f.phase[1] {
                        return Err(Error::config("sine family ranges must be ordered"));
                    }
                }
            }
            EnvKind::ClusterClassification { n_way, families } => {
                if *n_way < 2 {
                    return Err(Error::config("n_way must be >= 2"));
                }
                if self.m_s < *n_way {
                    return Err(Error::config("m_s must cover every class at least once"));
                }
                let dim = self.input_dim();
                if dim == 0 {
                    return Err(Error::config("cluster centres must be non-empty"));
                }
                for f in families {
                    if f.centers.len() < *n_way {
                        return Err(Error::config(format!(
                            "cluster family has {} centres, need >= n_way = {}",
                            f.centers.len(),
                            n_way
                        )));
                    }
                    if f.centers.iter().any(|c| c.len() != dim) {
                        return Err(Error::config("cluster centres differ in dimension"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits `points` into (support, query): the first `m_s` points are support.
pub fn split_support_query<T>(mut points: Vec<T>, m_s: usize, m_q: usize) -> Result<(Vec<T>, Vec<T>)> {
    if m_s + m_q != points.len() {
        return Err(Error::argument(format!(
            "cannot split {} points into {} support + {} query",
            points.len(),
            m_s,
            m_q
        )));
    }
    let query = points.split_off(m_s);
    Ok((points, query))
}

pub fn sample_task<R: Rng + ?Sized>(env: &TaskEnvironment, rng: &mut R) -> Result<Task> {
    let family = WeightedIndex::new(&env.family_probabilities)
        .map_err(|e| Error::config(format!("bad family distribution: {e}")))?
        .sample(rng);
    sample_task_from_family(env, family, rng)
}

pub fn sample_task_from_family<R: Rng + ?Sized>(
    env: &TaskEnvironment,
    family: usize,
    rng: &mut R,
) -> Result<Task> {
    let n_points = env.m_s + env.m_q;
    let points = match &env.kind {
        EnvKind::SineRegression {
            families,
            input_range,
        } => {
            let fam = families
                .get(family)
                .ok_or_else(|| Error::argument(format!("no family {family}")))?;
            let amplitude = draw_range(rng, fam.amplitude);
            let phase = draw_range(rng, fam.phase);
            let xs = Uniform::new(input_range[0], input_range[1]);
            (0..n_points)
                .map(|_| {
                    let x = xs.sample(rng);
                    let y = amplitude * (x - phase).sin() + gaussian(rng, env.noise_std);
                    Sample {
                        input: vec![x],
                        target: Target::Value(vec![y]),
                    }
                })
                .collect::<Vec<_>>()
        }
        EnvKind::ClusterClassification { n_way, families } => {
            let fam = families
                .get(family)
                .ok_or_else(|| Error::argument(format!("no family {family}")))?;
            let chosen = index::sample(rng, fam.centers.len(), *n_way).into_vec();
            // Labels cycle through the classes separately in support and query so
            // both halves stay balanced.
            let label = |k: usize| {
                if k < env.m_s {
                    k % n_way
                } else {
                    (k - env.m_s) % n_way
                }
            };
            (0..n_points)
                .map(|k| {
                    let class = label(k);
                    let center = &fam.centers[chosen[class]];
                    let input = center
                        .iter()
                        .map(|c| c + gaussian(rng, env.noise_std))
                        .collect();
                    Sample {
                        input,
                        target: Target::Class(class),
                    }
                })
                .collect::<Vec<_>>()
        }
    };
    let (support, query) = split_support_query(points, env.m_s, env.m_q)?;
    Ok(Task {
        support,
        query,
        family_id: family,
    })
}

/// Draws `m` independent tasks; deterministic given the state of `rng`.
pub fn sample_task_batch<R: Rng + ?Sized>(
    env: &TaskEnvironment,
    rng: &mut R,
    m: usize,
) -> Result<TaskBatch> {
    if m == 0 {
        return Err(Error::argument("batch size M must be >= 1"));
    }
    env.validate()?;
    let tasks = (0..m)
        .map(|_| sample_task(env, rng))
        .collect::<Result<Vec<_>>>()?;
    TaskBatch::new(tasks)
}

fn draw_range<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).map_or(0.0, |n| n.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine_env(probs: Vec<f64>, m_s: usize, m_q: usize) -> TaskEnvironment {
        let fam = SineFamily {
            amplitude: [0.1, 5.0],
            phase: [0.0, std::f64::consts::PI],
        };
        TaskEnvironment {
            kind: EnvKind::SineRegression {
                families: vec![fam; probs.len()],
                input_range: [-5.0, 5.0],
            },
            family_probabilities: probs,
            m_s,
            m_q,
            noise_std: 0.0,
        }
    }

    fn cluster_env() -> TaskEnvironment {
        TaskEnvironment {
            kind: EnvKind::ClusterClassification {
                n_way: 2,
                families: vec![ClusterFamily {
                    centers: vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]],
                }],
            },
            family_probabilities: vec![1.0],
            m_s: 4,
            m_q: 6,
            noise_std: 0.3,
        }
    }

    #[test]
    fn degenerate_family_distribution() {
        let env = sine_env(vec![1.0], 5, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_task_batch(&env, &mut rng, 3).unwrap();
        assert_eq!(batch.len(), 3);
        assert!(batch.tasks.iter().all(|t| t.family_id == 0));
    }

    #[test]
    fn support_and_query_sizes() {
        let env = sine_env(vec![0.5, 0.5], 5, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for task in sample_task_batch(&env, &mut rng, 8).unwrap().tasks {
            assert_eq!(task.support.len(), 5);
            assert_eq!(task.query.len(), 15);
        }
    }

    #[test]
    fn balanced_family_counts_within_three_sigma() {
        let env = sine_env(vec![0.5, 0.5], 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_task_batch(&env, &mut rng, 10_000).unwrap();
        let zeros = batch.tasks.iter().filter(|t| t.family_id == 0).count() as f64;
        // Binomial(10_000, 0.5): mean 5000, sigma 50.
        assert!((zeros - 5000.0).abs() <= 150.0, "count {zeros}");
    }

    #[test]
    fn split_examples() {
        let (s, q) = split_support_query(vec![1, 2, 3, 4], 2, 2).unwrap();
        assert_eq!((s, q), (vec![1, 2], vec![3, 4]));
        let (s, q) = split_support_query((0..20).collect::<Vec<_>>(), 5, 15).unwrap();
        assert_eq!((s.len(), q.len()), (5, 15));
        assert!(matches!(
            split_support_query(vec![1, 2, 3], 2, 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn empty_family_set_is_config_error() {
        let mut env = sine_env(vec![], 1, 1);
        env.family_probabilities.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_task_batch(&env, &mut rng, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unnormalised_probabilities_rejected() {
        let env = sine_env(vec![0.5, 0.6], 1, 1);
        assert!(env.validate().is_err());
    }

    #[test]
    fn cluster_tasks_are_balanced_and_labelled() {
        let env = cluster_env();
        env.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let task = sample_task(&env, &mut rng).unwrap();
        let classes: Vec<usize> = task
            .support
            .iter()
            .map(|s| match s.target {
                Target::Class(c) => c,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(classes, vec![0, 1, 0, 1]);
        assert!(task.query.iter().all(|s| s.input.len() == 2));
    }

    #[test]
    fn sampling_is_reproducible() {
        let env = cluster_env();
        let a = sample_task_batch(&env, &mut ChaCha8Rng::seed_from_u64(5), 4).unwrap();
        let b = sample_task_batch(&env, &mut ChaCha8Rng::seed_from_u64(5), 4).unwrap();
        assert_eq!(a, b);
    }
}
