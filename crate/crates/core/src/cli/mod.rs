//! Experiment configuration files and the `train-base`, `one-shot`, `sweep`
//! and `trace` commands built on them.
//!
//! A configuration is one TOML file. Relative paths inside it resolve
//! against the file's directory, and the output directory can be redirected
//! with the `ONESHOT_DIL_OUT` environment variable.

mod commands;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batchnorm::StatsMode;
use crate::data::SyntheticSpec;
use crate::harness::{BaseTrainConfig, DomainSpec, Method, OneShotConfig};
use crate::models::Architecture;

pub use commands::{
    cmd_one_shot, cmd_sweep, cmd_trace, cmd_train_base, prepare, BaseReport, Prepared, SweepCell, SweepOutput,
    TraceOutput, BASE_JSON, CHECKPOINT_FILE, ONE_SHOT_CSV, ONE_SHOT_JSON, SWEEP_CSV, SWEEP_JSON, TRACE_DIR,
};

/// Overrides `output_dir` when set.
pub const OUT_DIR_ENV: &str = "ONESHOT_DIL_OUT";

/// Where the images come from. Raw class ids are what [`DomainSpec`] refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX image and label files, optionally gzipped.
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticSpec),
}

/// Sample count and checkpoint location for `one-shot` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsConfig {
    /// Misclassified new-domain samples, one trial each.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Base checkpoint; `<output_dir>/base.ckpt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

fn default_samples() -> usize {
    10
}

impl Default for TrialsConfig {
    fn default() -> Self {
        Self { samples: default_samples(), checkpoint: None }
    }
}

/// Mini-batch composition `(|B|, |C|)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub replay_batch: usize,
    pub copies: usize,
}

/// The grid swept by `sweep`: every method × mode × regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_modes")]
    pub stats_modes: Vec<StatsMode>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_modes() -> Vec<StatsMode> {
    vec![StatsMode::FixedStats, StatsMode::UpdatedStats]
}

fn default_regimes() -> Vec<Regime> {
    vec![
        Regime { replay_batch: 32, copies: 32 },
        Regime { replay_batch: 63, copies: 1 },
    ]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { methods: default_methods(), stats_modes: default_modes(), regimes: default_regimes() }
    }
}

/// `trace`: running-statistics traces in the one-shot regime (augmented
/// copies of one sample) and the many-shot regime (distinct new samples).
/// The judge is disabled so every run takes exactly `steps` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    #[serde(default = "default_trace_trials")]
    pub trials: usize,
    /// Distinct new-domain samples available to a many-shot run.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_trace_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_trace_mode")]
    pub stats_mode: StatsMode,
}

fn default_trace_trials() -> usize {
    5
}

fn default_pool() -> usize {
    1000
}

fn default_trace_lr() -> f64 {
    1e-5
}

fn default_steps() -> u64 {
    100
}

fn default_trace_mode() -> StatsMode {
    StatsMode::UpdatedStats
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            trials: default_trace_trials(),
            pool_size: default_pool(),
            lr: default_trace_lr(),
            steps: default_steps(),
            stats_mode: default_trace_mode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub domain: DomainSpec,
    /// Architecture only; input shape and class count follow from the data.
    pub model: Architecture,
    #[serde(default)]
    pub base: BaseTrainConfig,
    #[serde(default)]
    pub one_shot: OneShotConfig,
    #[serde(default)]
    pub trials: TrialsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub trace: TraceConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A rejected configuration, with every problem found.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self { problems: vec![msg.into()] }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.problems.join("; "))
    }
}

impl std::error::Error for ConfigError {}

/// Failure of a command: configuration problems exit with 1, anything that
/// goes wrong once computing has started exits with 2.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// One `ERROR:`-prefixed line per problem.
    pub fn lines(&self) -> Vec<String> {
        match self {
            CliError::Config(c) => c.problems.iter().map(|p| format!("ERROR: config: {p}")).collect(),
            CliError::Runtime(e) => vec![format!("ERROR: {e}")],
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting every unknown key rather than just the first.
    /// Paths are left as written.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::one(e.to_string().trim().to_string()))?;
        let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| ConfigError::one(e.to_string().trim().to_string()))?;
        if !unknown.is_empty() {
            return Err(ConfigError {
                problems: unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect(),
            });
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration types serialize to TOML")
    }

    /// Reads, resolves and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::one(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Idx { images, labels } = &mut self.dataset {
            fix(images);
            fix(labels);
        }
        fix(&mut self.output_dir);
        if let Some(c) = &mut self.trials.checkpoint {
            fix(c);
        }
    }

    /// Every semantic problem, keyed by dotted path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |section: &str, list: Vec<(String, String)>| {
            out.extend(list.into_iter().map(|(k, m)| format!("`{section}.{k}` {m}")));
        };
        push("domain", self.domain.problems());
        push("base", self.base.problems());
        push("one_shot", self.one_shot.problems());
        match &self.dataset {
            DatasetSource::Idx { images, labels } => {
                for (key, p) in [("images", images), ("labels", labels)] {
                    if !p.is_file() {
                        out.push(format!("`dataset.{key}` file {} does not exist", p.display()));
                    }
                }
            }
            DatasetSource::Synthetic(spec) => {
                if let Err(e) = spec.check() {
                    out.push(format!("`dataset` {e}"));
                }
                let k = spec.classes.len();
                for (key, c) in [("new_class", self.domain.new_class), ("absorbing_class", self.domain.absorbing_class)] {
                    if c >= k {
                        out.push(format!("`domain.{key}` {c} is not one of the {k} synthetic classes"));
                    }
                }
            }
        }
        if let Some(c) = &self.trials.checkpoint {
            if c.is_dir() {
                out.push(format!("`trials.checkpoint` {} is a directory", c.display()));
            }
        }
        if self.trials.samples == 0 {
            out.push("`trials.samples` must be at least 1".into());
        }
        let s = &self.sweep;
        if s.methods.is_empty() || s.stats_modes.is_empty() || s.regimes.is_empty() {
            out.push("`sweep` needs at least one method, statistics mode and regime".into());
        }
        if s.stats_modes.contains(&StatsMode::Inference) {
            out.push("`sweep.stats_modes` cannot include inference".into());
        }
        for (i, r) in s.regimes.iter().enumerate() {
            let cell = OneShotConfig { replay_batch: r.replay_batch, copies: r.copies, ..self.one_shot.clone() };
            for (k, m) in cell.problems() {
                if k == "replay_batch" || k == "copies" {
                    out.push(format!("`sweep.regimes[{i}].{k}` {m}"));
                }
            }
        }
        let t = &self.trace;
        if t.trials == 0 || t.pool_size == 0 || t.steps == 0 {
            out.push("`trace.trials`, `trace.pool_size` and `trace.steps` must be positive".into());
        }
        if t.pool_size < self.one_shot.copies {
            out.push(format!(
                "`trace.pool_size` {} is smaller than `one_shot.copies` {}",
                t.pool_size, self.one_shot.copies
            ));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            out.push("`trace.lr` must be finite and nonnegative".into());
        }
        if t.stats_mode == StatsMode::Inference {
            out.push("`trace.stats_mode` cannot be inference".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.trials.checkpoint.clone().unwrap_or_else(|| self.output_dir.join(CHECKPOINT_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[dataset]
source = "synthetic"
image_size = 8
samples_per_class = 4
classes = [ { mean = [1.0, 0.0] }, { mean = [0.0, 1.0] }, { mean = [1.0, 1.0] } ]

[domain]
new_class = 2
absorbing_class = 0

[model]
kind = "small_cnn"
channels = [2, 2]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.one_shot, OneShotConfig::default());
        assert_eq!(cfg.sweep.regimes.len(), 2);
        assert_eq!(cfg.trials.samples, 10);
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = format!("{MINIMAL}\n[base]\nepochz = 3\n[one_shot]\nlr = 1.0\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.problems.len(), 2, "{err}");
        assert!(err.problems[0].contains("base.epochz"));
        assert!(err.problems[1].contains("one_shot.lr"));
    }

    #[test]
    fn semantic_problems_collected() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.domain.new_class = 7;
        cfg.one_shot.delta = 2.0;
        cfg.trace.steps = 0;
        assert_eq!(cfg.problems().len(), 3, "{:?}", cfg.problems());
    }
}
