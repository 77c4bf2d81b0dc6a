//! Label accounting, replay planning and category-decoupled generators.

mod counts;
mod generator;
mod plan;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use counts::{accumulate, LabelCountVector};
pub use generator::{
    em, fit_submodel, FitBudget, GeneratorConfig, GeneratorKind, GeneratorParams, VARIANCE_FLOOR,
};
pub use plan::{reconstruction_plan, ReconstructionPlan};

use crate::model::LabeledBatch;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no generator for class {0}")]
    MissingSubmodel(usize),
    #[error("malformed generator record at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
}

/// One generator per class the owning client has seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryModel {
    pub submodels: BTreeMap<usize, GeneratorParams>,
}

impl AuxiliaryModel {
    pub fn get(&self, class: usize) -> Option<&GeneratorParams> {
        self.submodels.get(&class)
    }

    pub fn insert(&mut self, class: usize, params: GeneratorParams) {
        self.submodels.insert(class, params);
    }

    pub fn contains(&self, class: usize) -> bool {
        self.submodels.contains_key(&class)
    }
}

/// Draws exactly `counts[c]` rows for every class `c`, in ascending class order.
pub fn sample_counts(
    aux: &AuxiliaryModel,
    counts: &LabelCountVector,
    feature_dim: usize,
    seed: u64,
) -> Result<LabeledBatch, ReplayError> {
    if let Some((c, _)) = counts.iter().find(|(c, _)| !aux.contains(*c)) {
        return Err(ReplayError::MissingSubmodel(c));
    }
    let mut rng = seed::rng(seed);
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(counts.total() as usize);
    for (class, n) in counts.iter() {
        let generator = &aux.submodels[&class];
        if generator.dim() != feature_dim {
            return Err(ReplayError::Contract(format!(
                "generator for class {class} has dimension {}, expected {feature_dim}",
                generator.dim()
            )));
        }
        blocks.push(generator.sample(n as usize, &mut rng));
        labels.extend(std::iter::repeat_n(class, n as usize));
    }
    if blocks.is_empty() {
        return Ok(LabeledBatch::empty(feature_dim));
    }
    let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).expect("blocks share the feature dimension");
    LabeledBatch::replayed(features, labels).map_err(|e| ReplayError::Contract(e.to_string()))
}

/// Replay batch for a reconstruction plan; every row is marked synthetic.
pub fn sample_replay(
    aux: &AuxiliaryModel,
    plan: &ReconstructionPlan,
    feature_dim: usize,
    seed: u64,
) -> Result<LabeledBatch, ReplayError> {
    sample_counts(aux, &plan.generate_counts, feature_dim, seed)
}
