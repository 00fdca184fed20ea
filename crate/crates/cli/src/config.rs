// SPDX-License-Identifier: Apache-2.0

//! Run configuration: a TOML file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use contood::continual::{Averaging, ProtocolConfig};
use contood::data::Source;
use contood::model::TrainConfig;
use contood::reporting::{Format, Method};
use contood::search::SearchMetric;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "CONTOOD_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mnist,
    Fmnist,
    Cifar10,
    Synthetic,
}

impl Dataset {
    pub fn source(self) -> Source {
        match self {
            Dataset::Mnist => Source::Mnist,
            Dataset::Fmnist => Source::Fmnist,
            Dataset::Cifar10 => Source::Cifar10,
            Dataset::Synthetic => Source::Synthetic,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Dataset::Mnist | Dataset::Synthetic => 10,
            Dataset::Fmnist => 20,
            Dataset::Cifar10 => 35,
        }
    }

    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Dataset::Synthetic => vec![64],
            _ => vec![400, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Fixed,
    Cheating,
    Dynamic,
    All,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Fixed => vec![Method::FixedShels],
            MethodChoice::Cheating => vec![Method::Cheating],
            MethodChoice::Dynamic => vec![Method::Dynamic],
            MethodChoice::All => Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricChoice {
    Total,
    Gmean,
}

impl From<MetricChoice> for SearchMetric {
    fn from(m: MetricChoice) -> Self {
        match m {
            MetricChoice::Total => SearchMetric::TotalAccuracy,
            MetricChoice::Gmean => SearchMetric::GMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AveragingChoice {
    Pairwise,
    Cumulative,
}

impl From<AveragingChoice> for Averaging {
    fn from(a: AveragingChoice) -> Self {
        match a {
            AveragingChoice::Pairwise => Averaging::Pairwise,
            AveragingChoice::Cumulative => Averaging::Cumulative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    Csv,
    Json,
}

impl From<FormatChoice> for Format {
    fn from(f: FormatChoice) -> Self {
        match f {
            FormatChoice::Csv => Format::Csv,
            FormatChoice::Json => Format::Json,
        }
    }
}

/// Every field is optional; unset fields fall back to dataset defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset to run on
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    /// Directory holding the dataset files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Number of in-distribution classes
    #[arg(long)]
    pub n_id_classes: Option<usize>,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricChoice>,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Fraction of a detection batch that must be rejected to flag it
    #[arg(long)]
    pub rho: Option<f64>,
    /// Size of the detection batch drawn from each incoming class
    #[arg(long)]
    pub detection_batch: Option<usize>,
    #[arg(long, value_enum)]
    pub averaging: Option<AveragingChoice>,
    /// eta used by the fixed baseline
    #[arg(long)]
    pub fixed_eta: Option<f64>,
    /// Comma-separated hidden layer widths
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub lambda_group_sparsity: Option<f64>,
    #[arg(long)]
    pub lambda_soft_freeze: Option<f64>,
    /// Report path (stdout when absent)
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatChoice>,
    /// Where to write the final model and thresholds of each seed
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `top` win.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay!(
            self,
            top,
            dataset,
            data_dir,
            n_id_classes,
            seeds,
            metric,
            method,
            rho,
            detection_batch,
            averaging,
            fixed_eta,
            hidden,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            lambda_group_sparsity,
            lambda_soft_freeze,
            output,
            format,
            checkpoint
        );
        self
    }

    /// File, then `CONTOOD_DATA_DIR`, then flags.
    pub fn load(file: Option<&Path>, flags: RunConfig) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            cfg.data_dir = Some(PathBuf::from(dir));
        }
        Ok(cfg.overlay(flags))
    }

    pub fn dataset(&self) -> Dataset {
        self.dataset.unwrap_or(Dataset::Synthetic)
    }

    pub fn n_id(&self) -> usize {
        self.n_id_classes.unwrap_or(5)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (0..10).collect())
    }

    pub fn methods(&self) -> Vec<Method> {
        self.method.unwrap_or(MethodChoice::All).methods()
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(FormatChoice::Csv).into()
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data_dir.as_deref().ok_or_else(|| {
            CliError::Usage(format!(
                "data_dir is required for dataset {:?} (set --data-dir, data_dir in the config, or {DATA_DIR_ENV})",
                self.dataset()
            ))
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        let needs_loocv = self.methods().contains(&Method::Dynamic);
        if needs_loocv && self.n_id() < 3 {
            return Err(CliError::Usage(format!(
                "n_id_classes = {} but the dynamic method needs >= 3",
                self.n_id()
            )));
        }
        if self.n_id() < 2 {
            return Err(CliError::Usage("n_id_classes must be >= 2".into()));
        }
        if self.dataset() != Dataset::Synthetic {
            self.data_dir()?;
        }
        self.protocol(0)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn protocol(&self, seed: u64) -> ProtocolConfig {
        let base = ProtocolConfig::default();
        let train = TrainConfig::default();
        let dataset = self.dataset();
        ProtocolConfig {
            metric: self.metric.map_or(base.metric, Into::into),
            batch_size: self.detection_batch.unwrap_or(base.batch_size),
            rho: self.rho.unwrap_or(base.rho),
            train: TrainConfig {
                epochs: self.epochs.unwrap_or(dataset.default_epochs()),
                batch_size: self.batch_size.unwrap_or(train.batch_size),
                learning_rate: self.learning_rate.unwrap_or(train.learning_rate),
                momentum: self.momentum.unwrap_or(train.momentum),
                lambda_group_sparsity: self
                    .lambda_group_sparsity
                    .unwrap_or(train.lambda_group_sparsity),
                lambda_soft_freeze: self.lambda_soft_freeze.unwrap_or(train.lambda_soft_freeze),
                seed: train.seed,
            },
            hidden: self
                .hidden
                .clone()
                .unwrap_or_else(|| dataset.default_hidden()),
            seed,
            averaging: self.averaging.map_or(base.averaging, Into::into),
            fixed_eta: self.fixed_eta.unwrap_or(base.fixed_eta),
            methods: self.methods(),
        }
    }
}
