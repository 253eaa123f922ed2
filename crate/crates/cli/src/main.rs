use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use tow::harness::{
    emit_curve, emit_metrics, evaluate_tasks, run_check, seeded_rng, CheckKind, ExperimentConfig, SeedStream,
    StrategyKind, TrainLog, Trainer,
};
use tow::tasks::sample_task;
use tow::Error;

#[derive(Parser)]
#[command(name = "tow", version, about = "Trajectory-optimized task weighting for meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the weighting strategy: uniform, exploration, exploitation or tow.
    #[arg(long)]
    strategy: Option<String>,
    /// Sets a config entry, e.g. `--override tow.beta_u=100`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write metrics.csv, curve.csv, params.json and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Start from saved meta-parameters instead of a fresh initialization.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Evaluate saved meta-parameters on held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: PathBuf,
        /// Number of held-out tasks; defaults to `evaluation.n_tasks`.
        #[arg(long)]
        n_tasks: Option<usize>,
    },
    /// Run derivative and solver diagnostics.
    Check {
        #[command(flatten)]
        common: Common,
        /// gradients, linearization, quadraticization, lqr, theta_sign or all.
        #[arg(long, default_value = "all")]
        what: String,
    },
    /// Train once per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dotted key to vary; defaults to `sweep.key` in the config.
        #[arg(long)]
        key: Option<String>,
        /// Comma-separated values; defaults to `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Numeric(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, out, params } => cmd_train(&common, &out, params.as_deref()),
        Command::Eval {
            common,
            params,
            n_tasks,
        } => cmd_eval(&common, &params, n_tasks),
        Command::Check { common, what } => cmd_check(&common, &what),
        Command::Sweep {
            common,
            out,
            key,
            values,
        } => cmd_sweep(&common, &out, key, values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(s) = &common.strategy {
        let kind: StrategyKind = s.parse()?;
        let name = serde_json::to_value(kind).context("strategy name")?;
        overrides.push(format!("weighting.strategy=\"{}\"", name.as_str().unwrap_or_default()));
    }
    Ok(ExperimentConfig::load(&common.config, &overrides)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_params(path: &Path) -> anyhow::Result<DVector<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values: Vec<f64> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(DVector::from_vec(values))
}

#[derive(Serialize)]
struct RunSummary {
    strategy: String,
    iterations: usize,
    final_val_loss: Option<f64>,
    final_val_accuracy: Option<f64>,
    max_delta_emp: f64,
    completed: bool,
}

fn summarize(cfg: &ExperimentConfig, log: &TrainLog, completed: bool) -> RunSummary {
    let last = log.records.iter().rev().find(|r| !r.val_loss.is_nan());
    RunSummary {
        strategy: cfg.strategy().name().to_string(),
        iterations: log.records.len(),
        final_val_loss: last.map(|r| r.val_loss),
        final_val_accuracy: last.map(|r| r.val_accuracy).filter(|a| !a.is_nan()),
        max_delta_emp: log.records.iter().map(|r| r.delta_emp).fold(0.0, f64::max),
        completed,
    }
}

/// Trains into `out`; outputs are written even when training aborts.
fn train_into(cfg: ExperimentConfig, out: &Path, params: Option<&Path>) -> Result<RunSummary, Failure> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?).context("writing resolved config")?;
    let mut trainer = match params {
        Some(p) => Trainer::with_params(cfg.clone(), read_params(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let result = trainer.run();
    emit_metrics(trainer.log(), &out.join("metrics.csv"))?;
    emit_curve(trainer.log(), &out.join("curve.csv"), 0.1)?;
    write_json(&out.join("params.json"), &trainer.params().as_slice())?;
    let summary = summarize(&cfg, trainer.log(), result.is_ok());
    write_json(&out.join("summary.json"), &summary)?;
    result?;
    Ok(summary)
}

fn cmd_train(common: &Common, out: &Path, params: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let summary = train_into(cfg, out, params)?;
    println!("{}", serde_json::to_string_pretty(&summary).context("summary")?);
    Ok(())
}

fn cmd_eval(common: &Common, params: &Path, n_tasks: Option<usize>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let x = read_params(params)?;
    let objective = cfg.objective();
    let env = cfg.eval_environment()?;
    let mut rng = seeded_rng(cfg.seed, SeedStream::Evaluation);
    let n = n_tasks.unwrap_or(cfg.evaluation.n_tasks);
    let tasks = (0..n).map(|_| sample_task(&env, &mut rng)).collect::<Result<Vec<_>, _>>()?;
    let summary = evaluate_tasks(&objective, &x, &tasks)?;
    println!("{}", serde_json::to_string_pretty(&summary).context("summary")?);
    Ok(())
}

fn cmd_check(common: &Common, what: &str) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let kinds: Vec<CheckKind> = if what.eq_ignore_ascii_case("all") {
        CheckKind::ALL.to_vec()
    } else {
        what.split(',').map(str::parse).collect::<Result<_, _>>()?
    };
    let mut all_passed = true;
    for kind in kinds {
        let report = run_check(&cfg, kind)?;
        for m in &report.measurements {
            println!(
                "{:<18} {:<42} {:>12.4e}  (threshold {:.1e})  {}",
                format!("{:?}", report.kind),
                m.name,
                m.value,
                m.threshold,
                if m.passed { "PASS" } else { "FAIL" }
            );
        }
        all_passed &= report.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            error: anyhow::anyhow!("diagnostic check failed"),
        })
    }
}

fn cmd_sweep(common: &Common, out: &Path, key: Option<String>, values: Vec<String>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (key, values) = match (key, cfg.sweep.clone()) {
        (Some(k), _) if !values.is_empty() => (k, values),
        (k, Some(s)) => (
            k.unwrap_or(s.key),
            if values.is_empty() {
                s.values.iter().map(|v| v.to_string()).collect()
            } else {
                values
            },
        ),
        _ => {
            return Err(Error::Config("sweep needs --key and --values or a [sweep] section".into()).into());
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut table = csv::Writer::from_path(out.join("sweep.csv")).context("creating sweep.csv")?;
    table
        .write_record(["key", "value", "final_val_loss", "final_val_accuracy", "max_delta_emp", "completed"])
        .context("writing sweep.csv")?;
    let mut failure = None;
    for value in &values {
        let run_cfg = cfg.with_override(&format!("{key}={value}"))?;
        let dir = out.join(format!("{key}={}", value.trim_matches('"')));
        log::info!("sweep {key}={value}");
        let summary = match train_into(run_cfg.clone(), &dir, None) {
            Ok(s) => s,
            Err(f) => {
                log::error!("{key}={value}: {:#}", f.error);
                failure.get_or_insert(f);
                summarize(&run_cfg, &TrainLog::default(), false)
            }
        };
        let opt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.16e}"));
        table
            .write_record([
                key.clone(),
                value.clone(),
                opt(summary.final_val_loss),
                opt(summary.final_val_accuracy),
                format!("{:.16e}", summary.max_delta_emp),
                summary.completed.to_string(),
            ])
            .context("writing sweep.csv")?;
    }
    table.flush().context("writing sweep.csv")?;
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}
