//! Run configuration documents (JSON). Unknown keys are rejected; missing
//! keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientConfig;
use crate::data::{self, DataError, DatasetFragment, DatasetStore, ScenarioConfig};
use crate::model::{Activation, SgdConfig};
use crate::orchestrator::{ExperimentConfig, FedAvgWeighting, MethodId, PoisonConfig};
use crate::replay::GeneratorConfig;
use crate::server::WeightOptConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            feature_dim: 16,
            per_class_train: 1000,
            per_class_test: 500,
            class_separation: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "IdxSpec::default_classes")]
    pub num_classes: usize,
}

impl IdxSpec {
    fn default_classes() -> usize {
        10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub methods: Vec<MethodId>,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub lambda_align: f64,
    pub fedprox_mu: f64,
    pub replay_budget: u64,
    pub replay_enabled: bool,
    pub weight_opt: WeightOptConfig,
    pub generator: GeneratorConfig,
    pub fedavg_weighting: FedAvgWeighting,
    pub poison: Option<PoisonConfig>,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let client = ClientConfig::default();
        let experiment = ExperimentConfig::default();
        RunConfig {
            methods: vec![MethodId::Pfedgrp, MethodId::Fedavg],
            seeds: vec![0],
            scenario: experiment.scenario,
            model: ModelConfig::default(),
            sgd: client.sgd,
            lambda_align: client.lambda_align,
            fedprox_mu: client.fedprox_mu,
            replay_budget: experiment.replay_budget,
            replay_enabled: client.replay_enabled,
            weight_opt: experiment.weight_opt,
            generator: client.generator,
            fedavg_weighting: experiment.fedavg_weighting,
            poison: None,
            dataset: DatasetSource::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl RunConfig {
    /// Parses a document. Whitespace-only input yields the defaults.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        de.end().map_err(|e| ConfigError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        if self.methods.is_empty() {
            return invalid("at least one method is required");
        }
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return invalid("lambda_align must be finite and nonnegative");
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return invalid("fedprox_mu must be finite and nonnegative");
        }
        if self.replay_budget == 0 {
            return invalid("replay_budget must be positive");
        }
        if !(self.weight_opt.step_size > 0.0 && self.weight_opt.step_size.is_finite()) {
            return invalid("weight_opt.step_size must be positive");
        }
        if self.model.hidden_dims.contains(&0) {
            return invalid("hidden layer widths must be positive");
        }
        if let Some(p) = &self.poison {
            if p.client >= self.scenario.num_clients || !(p.std >= 0.0 && p.std.is_finite()) {
                return invalid("poison.client must name an existing client and poison.std be nonnegative");
            }
        }
        self.sgd.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scenario.validate()?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if s.num_classes < self.scenario.num_classes {
                    return invalid("synthetic dataset has fewer classes than the scenario");
                }
            }
            DatasetSource::Idx(idx) => {
                for path in [&idx.train_images, &idx.train_labels, &idx.test_images, &idx.test_labels] {
                    if !path.is_file() {
                        return Err(ConfigError::Invalid(format!("dataset file {} does not exist", path.display())));
                    }
                }
                if idx.num_classes < self.scenario.num_classes {
                    return invalid("IDX dataset has fewer classes than the scenario");
                }
            }
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            scenario: self.scenario.clone(),
            hidden_dims: self.model.hidden_dims.clone(),
            activation: self.model.activation,
            client: ClientConfig {
                sgd: self.sgd.clone(),
                lambda_align: self.lambda_align,
                fedprox_mu: self.fedprox_mu,
                generator: self.generator.clone(),
                replay_enabled: self.replay_enabled,
            },
            weight_opt: self.weight_opt.clone(),
            replay_budget: self.replay_budget,
            fedavg_weighting: self.fedavg_weighting,
            poison: self.poison.clone(),
        }
    }

    pub fn load_store(&self) -> Result<DatasetStore, DataError> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => data::make_synthetic(
                s.num_classes,
                s.feature_dim,
                s.per_class_train,
                s.per_class_test,
                s.class_separation,
                s.seed,
            ),
            DatasetSource::Idx(idx) => {
                let train: DatasetFragment = data::load_idx(&idx.train_images, &idx.train_labels)?;
                let test: DatasetFragment = data::load_idx(&idx.test_images, &idx.test_labels)?;
                DatasetStore::from_fragments(&train, &test, idx.num_classes)
            }
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_json_str(&text)
}
