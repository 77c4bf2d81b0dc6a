//! The federated loop: stream materialization, local rounds, aggregation and
//! evaluation for every supported method.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{self, BaselineMethod, ClientConfig, ClientState, RoundUpload};
use crate::data::{build_streams, materialize, DatasetStore, ScenarioConfig};
use crate::metrics::{self, AccuracyRow};
use crate::model::{self, Activation, AggregationWeights, ModelArch, ParamVector};
use crate::server::{self, ServerCache, WeightOptConfig};
use crate::seed::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Pfedgrp,
    Fedavg,
    Fedprox,
    FedavgReplay,
    PfedgrpAsg,
    PfedgrpAsp,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::Pfedgrp,
        MethodId::Fedavg,
        MethodId::Fedprox,
        MethodId::FedavgReplay,
        MethodId::PfedgrpAsg,
        MethodId::PfedgrpAsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Pfedgrp => "pfedgrp",
            MethodId::Fedavg => "fedavg",
            MethodId::Fedprox => "fedprox",
            MethodId::FedavgReplay => "fedavg_replay",
            MethodId::PfedgrpAsg => "pfedgrp_asg",
            MethodId::PfedgrpAsp => "pfedgrp_asp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        MethodId::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Methods evaluated on per-client personalized models.
    pub fn is_personalized(self) -> bool {
        matches!(self, MethodId::Pfedgrp | MethodId::PfedgrpAsg | MethodId::PfedgrpAsp)
    }

    fn baseline(self) -> Option<BaselineMethod> {
        match self {
            MethodId::Pfedgrp => None,
            MethodId::Fedavg => Some(BaselineMethod::FedAvg),
            MethodId::Fedprox => Some(BaselineMethod::FedProx),
            MethodId::FedavgReplay => Some(BaselineMethod::FedAvgReplay),
            MethodId::PfedgrpAsg => Some(BaselineMethod::Asg),
            MethodId::PfedgrpAsp => Some(BaselineMethod::Asp),
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How FedAvg-family methods weight client models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeighting {
    /// Proportional to the round's local training-set size.
    DataSize,
    Uniform,
}

/// Replaces one client's upload with Gaussian noise every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonConfig {
    pub client: usize,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub client: ClientConfig,
    pub weight_opt: WeightOptConfig,
    pub replay_budget: u64,
    pub fedavg_weighting: FedAvgWeighting,
    pub poison: Option<PoisonConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
            client: ClientConfig::default(),
            weight_opt: WeightOptConfig::default(),
            replay_budget: 512,
            fedavg_weighting: FedAvgWeighting::DataSize,
            poison: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Materialize,
    Local,
    Aggregate,
    Evaluate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Setup => "setup",
            Phase::Materialize => "materialize",
            Phase::Local => "local training",
            Phase::Aggregate => "aggregation",
            Phase::Evaluate => "evaluation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("round {round}, {phase}: {source}")]
pub struct RunError {
    pub round: usize,
    pub phase: Phase,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

/// Wall-clock seconds spent per phase, summed over rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub materialize: f64,
    pub local: f64,
    pub aggregate: f64,
    pub evaluate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: MethodId,
    pub scenario: String,
    pub seed: u64,
    pub iaa: Vec<f64>,
    /// `[round][client]` accuracy on the cumulative test set.
    pub accuracies: Vec<Vec<f64>>,
    /// `[round][client]` real training samples seen so far.
    pub counts: Vec<Vec<u64>>,
    /// `[round][client][model]` aggregation weights; empty for FedAvg-family methods.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Excluded from equality and serialization so records stay reproducible.
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.scenario == other.scenario
            && self.seed == other.seed
            && self.iaa == other.iaa
            && self.accuracies == other.accuracies
            && self.counts == other.counts
            && self.weights == other.weights
    }
}

impl RunRecord {
    pub fn aa(&self) -> f64 {
        metrics::aa(&self.iaa).expect("a record holds at least one round")
    }

    pub fn afm(&self) -> Option<f64> {
        metrics::afm(&self.iaa).ok()
    }
}

fn fail<E>(round: usize, phase: Phase) -> impl FnOnce(E) -> RunError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| RunError {
        round,
        phase,
        source: Box::new(e),
    }
}

fn noise_params(arch: &ModelArch, std: f64, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed);
    let values = (0..arch.param_count())
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ParamVector::new(arch, values).expect("noise has the architecture's length")
}

/// Per-client accuracy on the cumulative test sets plus IAA.
pub fn evaluate_round(
    arch: &ModelArch,
    models: &[&ParamVector],
    states: &[ClientState],
) -> Result<(AccuracyRow, f64), RunError> {
    let err = |e: model::ModelError| fail(0, Phase::Evaluate)(e);
    let accuracies = models
        .par_iter()
        .zip(states.par_iter())
        .map(|(m, s)| model::accuracy(arch, m, &s.cumulative_test))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let row = AccuracyRow {
        accuracies,
        counts: states.iter().map(|s| s.y_cum.total()).collect(),
    };
    let iaa = metrics::iaa(&row).map_err(fail(0, Phase::Evaluate))?;
    Ok((row, iaa))
}

/// Runs one method end to end. The result depends only on the store, the
/// configuration and `seed`; worker scheduling never changes it.
pub fn run_experiment(
    store: &DatasetStore,
    method: MethodId,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunRecord, RunError> {
    let mut scenario = cfg.scenario.clone();
    scenario.seed = derive_seed(seed, "scenario", &[]);
    scenario.max_parts_per_class = Some(store.parts_available(scenario.samples_per_class));
    if scenario.num_classes > store.num_classes() {
        return Err(fail(0, Phase::Setup)(crate::data::DataError::Config(format!(
            "scenario uses {} classes, dataset has {}",
            scenario.num_classes,
            store.num_classes()
        ))));
    }
    let streams = build_streams(&scenario).map_err(fail(0, Phase::Setup))?;
    let arch = ModelArch::new(
        store.feature_dim(),
        cfg.hidden_dims.clone(),
        scenario.num_classes,
        cfg.activation,
    )
    .map_err(fail(0, Phase::Setup))?;
    cfg.client.sgd.validate().map_err(fail(0, Phase::Setup))?;

    let n = scenario.num_clients;
    let mut global = arch.init_params(derive_seed(seed, "init", &[]));
    let mut states: Vec<ClientState> = (0..n).map(|i| ClientState::new(i, store.feature_dim())).collect();
    let mut cache = ServerCache::default();
    let mut record = RunRecord {
        method,
        scenario: scenario.kind.name().to_string(),
        seed,
        iaa: Vec::new(),
        accuracies: Vec::new(),
        counts: Vec::new(),
        weights: Vec::new(),
        timings: PhaseTimings::default(),
    };

    for round in 1..=scenario.total_rounds {
        let clock = Instant::now();
        let mut train_sets = Vec::with_capacity(n);
        for (state, stream) in states.iter_mut().zip(&streams) {
            let spec = &stream.tasks[round - 1];
            let (train, shard) = materialize(store, spec).map_err(fail(round, Phase::Materialize))?;
            state
                .cumulative_test
                .append(&shard)
                .map_err(fail(round, Phase::Materialize))?;
            train_sets.push(train);
        }
        record.timings.materialize += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let lookup = |class: usize| server::lookup_class(&cache, class).cloned();
        let results: Vec<(RoundUpload, ClientState)> = states
            .par_iter()
            .zip(train_sets.par_iter())
            .map(|(state, train)| {
                let local_seed = derive_seed(seed, "local", &[state.client_id as u64, round as u64]);
                let personalized = state.last_personalized.as_ref();
                match method.baseline() {
                    None => client::local_round(
                        state, train, &arch, &global, personalized, &cfg.client, lookup, local_seed,
                    ),
                    Some(baseline) => client::local_round_baseline(
                        state, train, &arch, &global, personalized, baseline, &cfg.client, lookup, local_seed,
                    ),
                }
            })
            .collect::<Result<_, _>>()
            .map_err(fail(round, Phase::Local))?;
        let (mut uploads, next_states): (Vec<RoundUpload>, Vec<ClientState>) = results.into_iter().unzip();
        states = next_states;
        if let Some(poison) = &cfg.poison {
            if let Some(up) = uploads.get_mut(poison.client) {
                up.theta_star = noise_params(&arch, poison.std, derive_seed(seed, "poison", &[round as u64]));
            }
        }
        record.timings.local += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let eval_models: Vec<ParamVector> = if method.is_personalized() {
            let agg = server::aggregate_round(
                &uploads,
                &cache,
                &arch,
                &cfg.weight_opt,
                cfg.replay_budget,
                derive_seed(seed, "server", &[round as u64]),
            )
            .map_err(fail(round, Phase::Aggregate))?;
            for (state, p) in states.iter_mut().zip(&agg.personalized) {
                state.last_personalized = Some(p.clone());
            }
            record
                .weights
                .push(agg.weights.iter().map(|w| w.as_slice().to_vec()).collect());
            global = agg.global_mean;
            cache = agg.cache;
            agg.personalized
        } else {
            let weights = match cfg.fedavg_weighting {
                FedAvgWeighting::DataSize => {
                    let sizes: Vec<usize> = uploads.iter().map(|u| u.train_size).collect();
                    AggregationWeights::proportional(&sizes).map_err(fail(round, Phase::Aggregate))?
                }
                FedAvgWeighting::Uniform => AggregationWeights::uniform(n),
            };
            let thetas: Vec<ParamVector> = uploads.iter().map(|u| u.theta_star.clone()).collect();
            global = model::mix_params(&thetas, &weights).map_err(fail(round, Phase::Aggregate))?;
            cache.merge(&uploads);
            vec![global.clone(); n]
        };
        record.timings.aggregate += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let model_refs: Vec<&ParamVector> = eval_models.iter().collect();
        let (row, iaa) = evaluate_round(&arch, &model_refs, &states).map_err(|mut e| {
            e.round = round;
            e
        })?;
        record.iaa.push(iaa);
        record.accuracies.push(row.accuracies);
        record.counts.push(row.counts);
        record.timings.evaluate += clock.elapsed().as_secs_f64();
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, ScenarioKind};
    use crate::model::SgdConfig;

    fn small() -> (DatasetStore, ExperimentConfig) {
        let store = make_synthetic(4, 3, 100, 50, 4.0, 1).unwrap();
        let cfg = ExperimentConfig {
            scenario: ScenarioConfig {
                kind: ScenarioKind::ClassIncremental,
                num_clients: 2,
                num_classes: 4,
                classes_per_task: 2,
                samples_per_class: 50,
                total_rounds: 2,
                ..ScenarioConfig::default()
            },
            hidden_dims: vec![8],
            client: ClientConfig {
                sgd: SgdConfig {
                    epochs: 3,
                    ..SgdConfig::default()
                },
                ..ClientConfig::default()
            },
            replay_budget: 64,
            ..ExperimentConfig::default()
        };
        (store, cfg)
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(MethodId::from_name(m.name()), Some(m));
        }
        assert_eq!(MethodId::from_name("fedem"), None);
    }

    #[test]
    fn single_round_gives_single_iaa() {
        let (store, mut cfg) = small();
        cfg.scenario.total_rounds = 1;
        for m in MethodId::ALL {
            let rec = run_experiment(&store, m, &cfg, 3).unwrap();
            assert_eq!(rec.iaa.len(), 1);
            assert_eq!(rec.accuracies[0].len(), 2);
            assert_eq!(rec.counts[0], vec![100, 100]);
        }
    }

    #[test]
    fn repeated_runs_are_identical() {
        let (store, cfg) = small();
        let a = run_experiment(&store, MethodId::Pfedgrp, &cfg, 9).unwrap();
        let b = run_experiment(&store, MethodId::Pfedgrp, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.weights.len(), 2);
    }

    #[test]
    fn exhausted_budget_reports_setup_phase() {
        let (store, mut cfg) = small();
        cfg.scenario.samples_per_class = 101;
        let err = run_experiment(&store, MethodId::Fedavg, &cfg, 0).unwrap_err();
        assert_eq!(err.phase, Phase::Setup);
    }
}
