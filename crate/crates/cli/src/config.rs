//! Run configuration: one TOML file with sections, plus `KEY=VALUE` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use gcdm::diffusion::{NoiseSchedule, ScheduleConfig};
use gcdm::gcpnet::GcpNetConfig;
use gcdm::moldata::{ChargeSource, DatasetFormat, FeatureScaler, SplitSizes, SplitStrategy};
use gcdm::training::{FitConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, training noise, sampling and likelihood estimates.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: GcpNetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub scaler: FeatureScaler,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    #[serde(default)]
    pub charges: ChargeSource,
    /// Split manifest; when absent the data are split with `split_seed`.
    #[serde(default)]
    pub split_manifest: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    /// Explicit partition sizes; QM9 proportions when absent.
    #[serde(default)]
    pub split_sizes: Option<[usize; 3]>,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Internal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub data_seed: u64,
    pub eval_every: u64,
    pub eval_molecules: usize,
    pub patience: u32,
    pub grad_chunk: usize,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: u64,
    /// Steps between progress lines on stderr; 0 silences them.
    pub log_every: u64,
    /// Continue from the checkpoint in the output directory if one exists.
    pub resume: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        TrainingConfig {
            steps: fit.steps,
            data_seed: fit.data_seed,
            eval_every: fit.eval_every,
            eval_molecules: fit.eval_molecules,
            patience: fit.patience,
            grad_chunk: fit.grad_chunk,
            checkpoint_every: 500,
            log_every: 50,
            resume: false,
        }
    }
}

impl TrainingConfig {
    pub fn fit(&self) -> FitConfig {
        FitConfig {
            steps: self.steps,
            data_seed: self.data_seed,
            eval_every: self.eval_every,
            eval_molecules: self.eval_molecules,
            patience: self.patience,
            grad_chunk: self.grad_chunk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub count: usize,
    /// Molecules denoised together.
    pub chunk: usize,
    /// Defaults to `checkpoint.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            count: 100,
            chunk: 50,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bonds: Option<PathBuf>,
    pub valences: Option<PathBuf>,
    pub batches: usize,
    /// Evaluate this molecule file instead of sampling from a checkpoint.
    pub samples: Option<PathBuf>,
    /// Test molecules whose likelihood bound is estimated; 0 skips it.
    pub nll_molecules: usize,
    pub nll_t_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            bonds: None,
            valences: None,
            batches: 1,
            samples: None,
            nll_molecules: 0,
            nll_t_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Parses `KEY=VALUE`, reading VALUE as a TOML value and falling back to a
/// bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{raw}` is not of the form KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(usage(format!("override key `{key}` is malformed")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut node = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = node
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("override key `{}` is not a section", path[..=depth].join("."))))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Reads, overrides, deserializes and validates a configuration.
    /// Relative paths are resolved against the configuration file's directory.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply_override(&mut table, &key, value)?;
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.path);
        for p in [
            &mut self.data.split_manifest,
            &mut self.sampling.checkpoint,
            &mut self.evaluation.bonds,
            &mut self.evaluation.valences,
            &mut self.evaluation.samples,
            &mut self.output.dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks every section; no command does any work before this passes.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        NoiseSchedule::new(&self.schedule).map_err(|e| usage(format!("schedule: {e}")))?;
        self.scaler.validate().map_err(|e| usage(format!("scaler: {e}")))?;
        self.optimizer.validate().map_err(|e| usage(e.to_string()))?;
        if self.seed > i64::MAX as u64 {
            bail!(usage("seed must fit in a signed 64-bit integer"));
        }
        if self.training.steps == 0 {
            bail!(usage("training.steps must be at least 1"));
        }
        if self.training.grad_chunk == 0 {
            bail!(usage("training.grad_chunk must be at least 1"));
        }
        if self.sampling.count == 0 {
            bail!(usage("sampling.count must be at least 1"));
        }
        if self.sampling.chunk == 0 {
            bail!(usage("sampling.chunk must be at least 1"));
        }
        if self.evaluation.batches == 0 {
            bail!(usage("evaluation.batches must be at least 1"));
        }
        if self.evaluation.nll_molecules > 0 && self.evaluation.nll_t_samples == 0 {
            bail!(usage("evaluation.nll_t_samples must be at least 1"));
        }
        if let Some([train, val, test]) = self.data.split_sizes {
            if train == 0 {
                bail!(usage("data.split_sizes needs a non-empty training partition"));
            }
            let _ = (val, test);
        }
        if self.data.split_manifest.is_some() && self.data.split_sizes.is_some() {
            bail!(usage("data.split_manifest and data.split_sizes are mutually exclusive"));
        }
        Ok(())
    }

    pub fn split_strategy(&self) -> SplitStrategy {
        match &self.data.split_manifest {
            Some(path) => SplitStrategy::Manifest(path.clone()),
            None => SplitStrategy::Seeded {
                seed: self.data.split_seed,
                sizes: self.data.split_sizes.map(|[train, val, test]| SplitSizes { train, val, test }),
            },
        }
    }

    /// Canonical serialization of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Output directory: `--out` wins over `output.dir`.
    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .ok_or_else(|| usage("no output directory: pass --out or set output.dir"))
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.sampling.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
    }

    pub fn require_data(&self) -> Result<()> {
        if !self.data.path.exists() {
            bail!(usage(format!("data.path {} does not exist", self.data.path.display())));
        }
        if let Some(m) = &self.data.split_manifest {
            if !m.exists() {
                bail!(usage(format!("data.split_manifest {} does not exist", m.display())));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Table {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn override_values_are_typed() {
        let mut t = table("[optimizer]\nlearning_rate = 0.1\n");
        for raw in ["optimizer.learning_rate=0.5", "model.use_frames=false", "data.path=a b.mol"] {
            let (k, v) = parse_override(raw).unwrap();
            apply_override(&mut t, &k, v).unwrap();
        }
        assert_eq!(t["optimizer"]["learning_rate"].as_float(), Some(0.5));
        assert_eq!(t["model"]["use_frames"].as_bool(), Some(false));
        assert_eq!(t["data"]["path"].as_str(), Some("a b.mol"));
    }

    #[test]
    fn malformed_overrides_are_usage_errors() {
        for raw in ["novalue", ".x=1", "a..b=1"] {
            let err = parse_override(raw).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{raw}");
        }
        let mut t = table("seed = 1\n");
        let (k, v) = parse_override("seed.inner=2").unwrap();
        assert!(apply_override(&mut t, &k, v).is_err());
    }
}
