use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::OptimizerKind;
use crate::error::{Error, Result};
use crate::metalearn::{AdaptationVariant, InnerLoopConfig, MetaGradOrder, MetaObjective};
use crate::model::ModelSpec;
use crate::tasks::TaskEnvironment;
use crate::weighting::{TowSettings, WeightingStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Uniform,
    Exploration,
    Exploitation,
    Tow,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(StrategyKind::Uniform),
            "exploration" => Ok(StrategyKind::Exploration),
            "exploitation" => Ok(StrategyKind::Exploitation),
            "tow" => Ok(StrategyKind::Tow),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (expected uniform, exploration, exploitation or tow)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub meta_iterations: usize,
    /// `T`, mini-batches per outer iteration.
    pub horizon: usize,
    /// `M`, tasks per mini-batch.
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    pub strategy: StrategyKind,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    1.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Evaluate after every `every`-th iteration (and after the last).
    pub every: usize,
    pub n_tasks: usize,
    /// Family mix of held-out tasks; `None` means uniform over families.
    pub family_probabilities: Option<Vec<f64>>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            every: 1,
            n_tasks: 100,
            family_probabilities: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Record wall-clock milliseconds; off keeps output byte-reproducible.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted config path, e.g. `tow.beta_u`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub environment: TaskEnvironment,
    pub model: ModelSpec,
    pub inner: InnerLoopConfig,
    #[serde(default)]
    pub meta_grad_order: MetaGradOrder,
    pub optimizer: OptimizerKind,
    pub training: TrainingConfig,
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub tow: TowSettings,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Copy with `key=value` applied.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        apply_override(&mut value, assignment)?;
        Self::from_value(value)
    }

    pub fn objective(&self) -> MetaObjective {
        MetaObjective::new(self.model.clone(), self.inner.clone(), self.meta_grad_order)
    }

    pub fn strategy(&self) -> WeightingStrategy {
        match self.weighting.strategy {
            StrategyKind::Uniform => WeightingStrategy::Uniform,
            StrategyKind::Exploration => WeightingStrategy::Exploration {
                kappa: self.weighting.kappa,
            },
            StrategyKind::Exploitation => WeightingStrategy::Exploitation {
                kappa: self.weighting.kappa,
            },
            StrategyKind::Tow => WeightingStrategy::Tow(self.tow.clone()),
        }
    }

    pub fn eval_environment(&self) -> Result<TaskEnvironment> {
        let probs = self
            .evaluation
            .family_probabilities
            .clone()
            .unwrap_or_else(|| self.environment.uniform_family_probabilities());
        self.environment.with_family_probabilities(probs)
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.objective().validate()?;
        self.optimizer.validate()?;
        if self.model.in_dim() != self.environment.input_dim() {
            return Err(Error::config(format!(
                "model input width {} does not match environment input width {}",
                self.model.in_dim(),
                self.environment.input_dim()
            )));
        }
        let prototypical = self.inner.variant == AdaptationVariant::Prototypical;
        if prototypical && !self.environment.is_classification() {
            return Err(Error::config("prototypical adaptation needs a classification environment"));
        }
        if !prototypical && self.model.out_dim() != self.environment.output_dim() {
            return Err(Error::config(format!(
                "model output width {} does not match environment output width {}",
                self.model.out_dim(),
                self.environment.output_dim()
            )));
        }
        if self.training.horizon == 0 || self.training.batch_size == 0 {
            return Err(Error::config("horizon and batch_size must be >= 1"));
        }
        if self.evaluation.every == 0 {
            return Err(Error::config("evaluation.every must be >= 1"));
        }
        if self.evaluation.n_tasks < 2 {
            return Err(Error::config("evaluation.n_tasks must be >= 2"));
        }
        self.eval_environment()?;
        self.strategy().validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep.values must not be empty"));
            }
        }
        Ok(())
    }
}

/// Sets a dotted path in a TOML tree. The right-hand side is parsed as a TOML
/// value, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    set_path(root, key, value)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub(crate) fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    if key.is_empty() {
        return Err(Error::config("empty override key"));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{key}': '{part}' is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override '{key}' does not address a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_parses_typed_values() {
        let mut v: toml::Value = toml::from_str("[a]\nb = 1\n").unwrap();
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c = true").unwrap();
        apply_override(&mut v, "d.e=word").unwrap();
        apply_override(&mut v, "a.f=[1, 2]").unwrap();
        assert_eq!(v["a"]["b"].as_float(), Some(2.5));
        assert_eq!(v["a"]["c"].as_bool(), Some(true));
        assert_eq!(v["d"]["e"].as_str(), Some("word"));
        assert_eq!(v["a"]["f"].as_array().map(Vec::len), Some(2));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a.b.c=1").is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!("TOW".parse::<StrategyKind>().unwrap(), StrategyKind::Tow);
        assert!("softmax".parse::<StrategyKind>().is_err());
    }
}
