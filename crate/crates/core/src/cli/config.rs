//! Run configuration files.
//!
//! A config is a flat TOML table; every key is optional and unknown keys
//! are rejected. Relative paths are resolved against the directory of the
//! config file.
//!
//! ```toml
//! dataset = "csv"              # toy | toy_parallel | synth | csv
//! csv_path = "data/train.csv"
//! x_columns = ["a", "b"]
//! y_columns = ["target"]
//! task = "regression"          # regression | classification
//! split_ratio = 0.6            # omit to train on everything
//! schedule = "linear"          # linear | concave | convex
//! iterations = 5000
//! batch_size = 256
//! lr = 3e-3
//! lr_schedule = "constant"     # cosine | constant
//! t_zero_prob = 0.1
//! label_noise_std = 0.1
//! eval_solver = "euler:1"      # euler:N | rk4:N | dopri5 | dopri5:RTOL,ATOL
//! seed = 0
//! eval_interval = 1000
//! patience = 10
//! encoder_hidden = [64]
//! dynamics_hidden = [64, 64, 64, 64, 64, 64]
//! out = "runs/example"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, LabelKind, Normalization, PairedDataset};
use crate::error::{Error, Result};
use crate::interpolants::Schedule;
use crate::model::{Architecture, LrSchedule, NodeArchitecture, TrainConfig};
use crate::nn::Activation;
use crate::solvers::SolverSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Toy,
    ToyParallel,
    Synth,
    Csv,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Toy => "toy",
            DatasetKind::ToyParallel => "toy_parallel",
            DatasetKind::Synth => "synth",
            DatasetKind::Csv => "csv",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DatasetKind::Toy),
            "toy_parallel" => Ok(DatasetKind::ToyParallel),
            "synth" => Ok(DatasetKind::Synth),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub csv_path: Option<PathBuf>,
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    pub task: TaskName,
    pub synth_n: usize,
    pub synth_dx: usize,
    pub data_seed: u64,
    pub split_ratio: Option<f64>,
    /// Standardize when not splitting. Defaults to on except for the toy sets.
    pub standardize: Option<bool>,

    pub schedule: Schedule,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub t_zero_prob: f64,
    pub label_noise_std: f64,
    pub eval_solver: SolverSpec,
    pub seed: u64,
    pub eval_interval: usize,
    pub patience: usize,

    pub latent_dim: Option<usize>,
    pub encoder_hidden: Vec<usize>,
    pub encoder_activation: Activation,
    pub label_hidden: Vec<usize>,
    pub label_activation: Activation,
    pub dynamics_hidden: Vec<usize>,
    pub dynamics_activation: Activation,
    /// Unrolled training solver of the NODE baseline in `compare`.
    pub node_solver: SolverSpec,

    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = Architecture::default();
        Self {
            dataset: DatasetKind::Toy,
            csv_path: None,
            x_columns: Vec::new(),
            y_columns: Vec::new(),
            task: TaskName::Regression,
            synth_n: 512,
            synth_dx: 4,
            data_seed: 0,
            split_ratio: None,
            standardize: None,
            schedule: Schedule::Linear,
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_schedule: t.lr_schedule,
            t_zero_prob: t.t_zero_prob,
            label_noise_std: t.label_noise_std,
            eval_solver: t.eval_solver,
            seed: t.seed,
            eval_interval: t.eval_interval,
            patience: t.patience,
            latent_dim: a.latent_dim,
            encoder_hidden: a.encoder_hidden,
            encoder_activation: a.encoder_activation,
            label_hidden: a.label_hidden,
            label_activation: a.label_activation,
            dynamics_hidden: a.dynamics_hidden,
            dynamics_activation: a.dynamics_activation,
            node_solver: SolverSpec::Euler { steps: 8 },
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.csv_path = cfg.csv_path.map(|p| if p.is_relative() { base.join(p) } else { p });
        cfg.out = cfg.out.map(|p| if p.is_relative() { base.join(p) } else { p });
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.node_solver.validated()?;
        if !self.node_solver.is_fixed_step() {
            return Err(Error::Config("node_solver must be fixed-step".into()));
        }
        if let Some(r) = self.split_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("split_ratio {r} not in (0, 1)")));
            }
        }
        if self.dataset == DatasetKind::Csv {
            let path = self
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset = \"csv\" needs csv_path".into()))?;
            if !path.is_file() {
                return Err(Error::Config(format!("csv_path `{}` does not exist", path.display())));
            }
            if self.x_columns.is_empty() || self.y_columns.is_empty() {
                return Err(Error::Config("csv datasets need x_columns and y_columns".into()));
            }
        }
        if self.dataset == DatasetKind::Synth && (self.synth_n < 2 || self.synth_dx == 0) {
            return Err(Error::Config("synth_n must be >= 2 and synth_dx >= 1".into()));
        }
        Ok(())
    }

    /// Applies a `--dataset` value: a dataset name or a CSV path.
    pub fn set_dataset(&mut self, value: &str) -> Result<()> {
        match value.parse::<DatasetKind>() {
            Ok(DatasetKind::Csv) => {
                return Err(Error::Config("pass the CSV path itself to --dataset".into()));
            }
            Ok(kind) => self.dataset = kind,
            Err(_) => {
                let path = PathBuf::from(value);
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset `{value}` is neither a known name nor a file")));
                }
                self.dataset = DatasetKind::Csv;
                self.csv_path = Some(path);
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            t_zero_prob: self.t_zero_prob,
            label_noise_std: self.label_noise_std,
            eval_solver: self.eval_solver,
            seed: self.seed,
            eval_interval: self.eval_interval,
            patience: self.patience,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            encoder_activation: self.encoder_activation,
            label_hidden: self.label_hidden.clone(),
            label_activation: self.label_activation,
            dynamics_hidden: self.dynamics_hidden.clone(),
            dynamics_activation: self.dynamics_activation,
        }
    }

    pub fn node_architecture(&self) -> NodeArchitecture {
        NodeArchitecture {
            state_dim: self.latent_dim,
            encoder: true,
            encoder_hidden: self.encoder_hidden.clone(),
            encoder_activation: self.encoder_activation,
            decoder: true,
            dynamics_hidden: self.dynamics_hidden.clone(),
            dynamics_activation: self.dynamics_activation,
            train_solver: self.node_solver,
        }
    }

    fn standardize(&self) -> bool {
        self.standardize
            .unwrap_or(!matches!(self.dataset, DatasetKind::Toy | DatasetKind::ToyParallel))
    }

    /// The dataset as described, before any standardization.
    pub fn load_raw(&self) -> Result<PairedDataset> {
        match self.dataset {
            DatasetKind::Toy => Ok(data::toy_crossing()),
            DatasetKind::ToyParallel => Ok(data::toy_parallel()),
            DatasetKind::Synth => data::synth_regression(self.synth_n, self.synth_dx, self.data_seed),
            DatasetKind::Csv => {
                let path = self
                    .csv_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("csv dataset without csv_path".into()))?;
                let kind = match self.task {
                    TaskName::Regression => LabelKind::Continuous,
                    TaskName::Classification => LabelKind::Categorical,
                };
                data::load_csv(path, &self.x_columns, &self.y_columns, kind)
            }
        }
    }

    /// Training (and optional validation) data with standardization applied.
    pub fn prepare(&self) -> Result<Prepared> {
        let raw = self.load_raw()?;
        let (train, val) = match self.split_ratio {
            Some(r) => {
                let (t, v) = data::split(&raw, r, self.data_seed)?;
                (t, Some(v))
            }
            None if self.standardize() => (raw.standardized()?, None),
            None => (raw, None),
        };
        Ok(Prepared { train, val })
    }
}

pub struct Prepared {
    pub train: PairedDataset,
    pub val: Option<PairedDataset>,
}

impl Prepared {
    pub fn normalization(&self) -> Option<&Normalization> {
        self.train.normalization.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_parse() {
        let cfg = RunConfig::from_toml(
            "dataset = \"synth\"\nschedule = \"concave\"\neval_solver = \"rk4:3\"\nlr_schedule = \"constant\"\ndynamics_hidden = [8, 8]\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Synth);
        assert_eq!(cfg.schedule, Schedule::Concave);
        assert_eq!(cfg.eval_solver, SolverSpec::Rk4 { steps: 3 });
        assert_eq!(cfg.lr_schedule, LrSchedule::Constant);
        assert_eq!(cfg.dynamics_hidden, vec![8, 8]);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("iterashuns = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("eval_solver = \"euler:0\"").is_err());
        assert!(RunConfig::from_toml("schedule = \"cubic\"").is_err());
    }

    #[test]
    fn csv_path_must_exist() {
        let cfg = RunConfig {
            dataset: DatasetKind::Csv,
            csv_path: Some("/nonexistent/file.csv".into()),
            x_columns: vec!["a".into()],
            y_columns: vec!["b".into()],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toy_is_raw_and_synth_standardized() {
        let toy = RunConfig::default().prepare().unwrap();
        assert!(toy.train.normalization.is_none());
        let synth = RunConfig {
            dataset: DatasetKind::Synth,
            split_ratio: Some(0.6),
            ..RunConfig::default()
        }
        .prepare()
        .unwrap();
        assert!(synth.normalization().is_some());
        assert_eq!(synth.train.len() + synth.val.unwrap().len(), 512);
    }
}
