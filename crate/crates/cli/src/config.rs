//! Experiment configuration: one TOML document, optionally patched with
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use annealdbn::calibration::CalibrationSettings;
use annealdbn::dbn::TrainSchedule;
use annealdbn::mnist::FEATURES;
use annealdbn::sampler::{ChipConfig, EstimatorKind, GibbsConfig, SamplerConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "ANNEALDBN_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed. `compare` derives every per-trial seed from it and ignores
    /// `schedule.seed` and `sampler.seed`.
    pub seed: u64,
    /// Falls back to `$ANNEALDBN_OUTPUT_DIR`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Visible size first, class count last.
    pub layer_sizes: Vec<usize>,
    /// Pretraining iteration counts to sweep, ascending.
    pub pretrain_sweep: Vec<usize>,
    /// Backprop iterations at which accuracy is recorded, ascending.
    pub checkpoints: Vec<usize>,
    /// Trial `t` trains on split `t`.
    pub trials: usize,
    pub data: DataConfig,
    pub arms: Vec<Arm>,
    pub schedule: TrainSchedule,
    pub sampler: SamplerConfig,
    pub chip: ChipConfig,
    pub gibbs: GibbsConfig,
    pub calibration: CalibrationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the four IDX files (read by `prepare-data`).
    pub mnist_dir: PathBuf,
    /// Prepared CG-MNIST training set; defaults to `<output>/data/cg-mnist-train.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Number of disjoint training splits.
    pub splits: usize,
    /// Use only the first rows of each split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    /// Shuffle the training set before splitting. Unset keeps file order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train: None,
            test: None,
            splits: 10,
            train_subset: None,
            test_subset: None,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub estimator: EstimatorKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            layer_sizes: vec![FEATURES, 32, 32, 10],
            pretrain_sweep: vec![1, 5, 10, 20, 50],
            checkpoints: vec![100, 200, 400, 800, 1000],
            trials: 10,
            data: DataConfig::default(),
            arms: vec![
                Arm {
                    name: "classical".into(),
                    estimator: EstimatorKind::Cd1,
                },
                Arm {
                    name: "quantum".into(),
                    estimator: EstimatorKind::Chimera,
                },
            ],
            schedule: TrainSchedule::default(),
            sampler: SamplerConfig::default(),
            chip: ChipConfig::default(),
            gibbs: GibbsConfig::default(),
            calibration: CalibrationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies the overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |msg: String| -> anyhow::Result<()> { Err(UsageError(msg).into()) };
        if self.layer_sizes.len() < 3 {
            return usage("layer_sizes needs the input size, at least one hidden layer and the class count".into());
        }
        if self.layer_sizes.contains(&0) {
            return usage("layer sizes must be positive".into());
        }
        if !strictly_ascending(&self.pretrain_sweep) {
            return usage("pretrain_sweep must be strictly ascending".into());
        }
        if self.checkpoints.is_empty() || !strictly_ascending(&self.checkpoints) {
            return usage("checkpoints must be non-empty and strictly ascending".into());
        }
        if let Some(&last) = self.checkpoints.last() {
            if last > self.schedule.backprop_iters {
                return usage(format!(
                    "checkpoint {last} is beyond schedule.backprop_iters = {}",
                    self.schedule.backprop_iters
                ));
            }
        }
        if self.trials == 0 || self.trials > self.data.splits {
            return usage(format!("trials must be in 1..={} (data.splits)", self.data.splits));
        }
        if self.arms.is_empty() {
            return usage("at least one arm is required".into());
        }
        for (k, a) in self.arms.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(',') {
                return usage(format!("arm name '{}' must be non-empty and contain no commas", a.name));
            }
            if self.arms[..k].iter().any(|b| b.name == a.name) {
                return usage(format!("arm '{}' listed twice", a.name));
            }
        }
        if self.data.train_subset == Some(0) || self.data.test_subset == Some(0) {
            return usage("data subsets must be at least 1 row".into());
        }
        self.schedule.validate().map_err(|e| UsageError(e.to_string()))?;
        self.sampler.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    /// Hidden stack of the DBN: every size but the class count.
    pub fn rbm_sizes(&self) -> &[usize] {
        &self.layer_sizes[..self.layer_sizes.len() - 1]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn train_path(&self) -> PathBuf {
        self.data
            .train
            .clone()
            .unwrap_or_else(|| self.output_dir().join("data").join("cg-mnist-train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data
            .test
            .clone()
            .unwrap_or_else(|| self.output_dir().join("data").join("cg-mnist-test.csv"))
    }

    /// Hash of everything that affects results. Locations (output directory,
    /// data paths) are left out; the dataset digests stand in for the data.
    pub fn digest(&self, train_digest: &str, test_digest: &str) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.data.train = None;
        c.data.test = None;
        c.data.mnist_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&c).expect("configuration serializes"));
        h.update(train_digest);
        h.update(test_digest);
        hex::encode(h.finalize())[..16].to_string()
    }
}

fn strictly_ascending(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// `a.b.c=value`; the value is parsed as a TOML value, or taken as a plain
/// string when it does not parse.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(UsageError(format!(
            "override '{assignment}' is not of the form key=value"
        )));
    };
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("bad override key '{key}'")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(UsageError(format!("override key '{key}': '{p}' is not a table"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
