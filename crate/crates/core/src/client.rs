//! One client's round: reconstruct the label distribution, replay past
//! classes, train the task model locally, and refresh the per-class generators.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, LabeledBatch, ModelArch, ModelError, Objective, ParamVector, SgdConfig};
use crate::replay::{
    self, accumulate, fit_submodel, reconstruction_plan, AuxiliaryModel, FitBudget, GeneratorConfig,
    GeneratorParams, LabelCountVector, ReplayError,
};
use crate::seed::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("client {client}: {source}")]
    Model {
        client: usize,
        #[source]
        source: ModelError,
    },
    #[error("client {client}: {source}")]
    Replay {
        client: usize,
        #[source]
        source: ReplayError,
    },
    #[error("client {client}: contract violation: {reason}")]
    Contract { client: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub sgd: SgdConfig,
    pub lambda_align: f64,
    pub fedprox_mu: f64,
    pub generator: GeneratorConfig,
    /// Off turns the replay pipeline into a no-op for every method.
    pub replay_enabled: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            sgd: SgdConfig::default(),
            lambda_align: 0.1,
            fedprox_mu: 0.01,
            generator: GeneratorConfig::default(),
            replay_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub y_cum: LabelCountVector,
    pub aux: AuxiliaryModel,
    pub cumulative_test: LabeledBatch,
    pub last_personalized: Option<ParamVector>,
    pub seen_classes: BTreeSet<usize>,
}

impl ClientState {
    pub fn new(client_id: usize, feature_dim: usize) -> Self {
        ClientState {
            client_id,
            y_cum: LabelCountVector::new(),
            aux: AuxiliaryModel::default(),
            cumulative_test: LabeledBatch::empty(feature_dim),
            last_personalized: None,
            seen_classes: BTreeSet::new(),
        }
    }
}

/// How many generator fits ran under each budget this round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitLog {
    pub init: usize,
    pub transfer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpload {
    pub client_id: usize,
    pub theta_star: ParamVector,
    pub updated_submodels: BTreeMap<usize, GeneratorParams>,
    /// Cumulative label counts, the client's reported label distribution.
    pub label_counts: LabelCountVector,
    /// Rows in the local training set, replayed rows included.
    pub train_size: usize,
    pub replay_size: usize,
    pub fit_log: FitLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Real data only, global initialization.
    FedAvg,
    /// FedAvg plus a proximal term toward the global model.
    FedProx,
    /// FedAvg training on real plus replayed data.
    FedAvgReplay,
    /// Replay, global initialization, no alignment.
    Asg,
    /// Replay, personalized initialization, no alignment.
    Asp,
}

struct LocalRecipe<'a> {
    init: &'a ParamVector,
    teacher: Option<&'a ParamVector>,
    proximal_anchor: Option<&'a ParamVector>,
    replay: bool,
    fit_generators: bool,
}

fn run_local<F>(
    state: &ClientState,
    task_train: &LabeledBatch,
    arch: &ModelArch,
    recipe: LocalRecipe,
    cfg: &ClientConfig,
    cache_lookup: F,
    seed: u64,
) -> Result<(RoundUpload, ClientState), ClientError>
where
    F: Fn(usize) -> Option<GeneratorParams>,
{
    let client = state.client_id;
    let model_err = |source| ClientError::Model { client, source };
    let replay_err = |source| ClientError::Replay { client, source };
    if task_train.is_empty() {
        return Err(ClientError::Contract {
            client,
            reason: "empty task training set".into(),
        });
    }

    let y_t = LabelCountVector::from_labels(&task_train.labels);
    let y_cum = accumulate(&state.y_cum, &y_t);

    let replay_batch = if recipe.replay && cfg.replay_enabled {
        let plan = reconstruction_plan(&y_cum, &y_t).map_err(replay_err)?;
        replay::sample_replay(&state.aux, &plan, task_train.feature_dim(), derive_seed(seed, "replay", &[]))
            .map_err(replay_err)?
    } else {
        LabeledBatch::empty(task_train.feature_dim())
    };
    let training = LabeledBatch::concat(&[task_train, &replay_batch]).map_err(model_err)?;

    let previous = &state.seen_classes;
    let teacher = recipe.teacher.filter(|_| !previous.is_empty());
    let lambda = if teacher.is_some() { cfg.lambda_align } else { 0.0 };
    let mut objective = Objective::aligned(teacher, previous, lambda).map_err(model_err)?;
    if let Some(anchor) = recipe.proximal_anchor {
        objective = objective.with_proximal(anchor, cfg.fedprox_mu);
    }
    let trained = model::sgd_train(
        arch,
        recipe.init,
        &training,
        &cfg.sgd,
        &objective,
        derive_seed(seed, "train", &[]),
    )
    .map_err(model_err)?;

    let mut aux = state.aux.clone();
    let mut updated = BTreeMap::new();
    let mut fit_log = FitLog::default();
    if recipe.fit_generators {
        for (class, _) in y_t.iter() {
            let rows: Vec<usize> = (0..task_train.len()).filter(|&r| task_train.labels[r] == class).collect();
            let data = task_train.select(&rows).features;
            let warm = state.aux.get(class).cloned().or_else(|| cache_lookup(class));
            let budget = if warm.is_some() {
                fit_log.transfer += 1;
                FitBudget::Transfer
            } else {
                fit_log.init += 1;
                FitBudget::Init
            };
            let params = fit_submodel(
                data.view(),
                warm.as_ref(),
                budget,
                &cfg.generator,
                derive_seed(seed, "fit", &[class as u64]),
            )
            .map_err(replay_err)?;
            aux.insert(class, params.clone());
            updated.insert(class, params);
        }
    }

    let upload = RoundUpload {
        client_id: client,
        theta_star: trained.params,
        updated_submodels: updated,
        label_counts: y_cum.clone(),
        train_size: training.len(),
        replay_size: replay_batch.len(),
        fit_log,
    };
    let next = ClientState {
        client_id: client,
        seen_classes: y_cum.support(),
        y_cum,
        aux,
        cumulative_test: state.cumulative_test.clone(),
        last_personalized: state.last_personalized.clone(),
    };
    Ok((upload, next))
}

/// The pFedGRP local round: replay mixed with real data, training from the
/// global model, alignment toward the previous personalized model on
/// previously seen classes.
///
/// Takes the state by reference and returns the successor, so a failed round
/// leaves the caller's state untouched.
#[allow(clippy::too_many_arguments)]
pub fn local_round<F>(
    state: &ClientState,
    task_train: &LabeledBatch,
    arch: &ModelArch,
    global_model: &ParamVector,
    personalized_model: Option<&ParamVector>,
    cfg: &ClientConfig,
    cache_lookup: F,
    seed: u64,
) -> Result<(RoundUpload, ClientState), ClientError>
where
    F: Fn(usize) -> Option<GeneratorParams>,
{
    let recipe = LocalRecipe {
        init: global_model,
        teacher: personalized_model,
        proximal_anchor: None,
        replay: true,
        fit_generators: true,
    };
    run_local(state, task_train, arch, recipe, cfg, cache_lookup, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn local_round_baseline<F>(
    state: &ClientState,
    task_train: &LabeledBatch,
    arch: &ModelArch,
    global_model: &ParamVector,
    personalized_model: Option<&ParamVector>,
    method: BaselineMethod,
    cfg: &ClientConfig,
    cache_lookup: F,
    seed: u64,
) -> Result<(RoundUpload, ClientState), ClientError>
where
    F: Fn(usize) -> Option<GeneratorParams>,
{
    let recipe = match method {
        BaselineMethod::FedAvg => LocalRecipe {
            init: global_model,
            teacher: None,
            proximal_anchor: None,
            replay: false,
            fit_generators: false,
        },
        BaselineMethod::FedProx => LocalRecipe {
            init: global_model,
            teacher: None,
            proximal_anchor: Some(global_model),
            replay: false,
            fit_generators: false,
        },
        BaselineMethod::FedAvgReplay | BaselineMethod::Asg => LocalRecipe {
            init: global_model,
            teacher: None,
            proximal_anchor: None,
            replay: true,
            fit_generators: true,
        },
        BaselineMethod::Asp => LocalRecipe {
            init: personalized_model.unwrap_or(global_model),
            teacher: None,
            proximal_anchor: None,
            replay: true,
            fit_generators: true,
        },
    };
    run_local(state, task_train, arch, recipe, cfg, cache_lookup, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, materialize, DatasetStore, TaskSpec};
    use crate::model::{Activation, Alignment};

    fn store() -> DatasetStore {
        make_synthetic(6, 4, 200, 100, 4.0, 11).unwrap()
    }

    fn arch() -> ModelArch {
        ModelArch::new(4, vec![16], 6, Activation::Relu).unwrap()
    }

    fn task(store: &DatasetStore, round: usize, classes: &[usize], part: usize) -> LabeledBatch {
        let spec = TaskSpec {
            round,
            class_counts: classes.iter().map(|&c| (c, 60)).collect(),
            parts: classes.iter().map(|&c| (c, part)).collect(),
        };
        materialize(store, &spec).unwrap().0
    }

    fn cfg() -> ClientConfig {
        ClientConfig {
            sgd: SgdConfig {
                epochs: 5,
                ..SgdConfig::default()
            },
            ..ClientConfig::default()
        }
    }

    fn no_cache(_: usize) -> Option<GeneratorParams> {
        None
    }

    #[test]
    fn first_round_is_plain_supervised_training() {
        let s = store();
        let a = arch();
        let global = a.init_params(1);
        let state = ClientState::new(0, 4);
        let data = task(&s, 1, &[0, 1], 0);
        let (upload, next) = local_round(&state, &data, &a, &global, None, &cfg(), no_cache, 5).unwrap();
        assert_eq!(upload.replay_size, 0);
        assert_eq!(upload.fit_log, FitLog { init: 2, transfer: 0 });
        let plain = model::sgd_train(
            &a,
            &global,
            &data,
            &cfg().sgd,
            &Objective::supervised(),
            derive_seed(5, "train", &[]),
        )
        .unwrap();
        assert_eq!(upload.theta_star, plain.params);
        assert_eq!(next.seen_classes, [0, 1].into_iter().collect());
        assert_eq!(next.aux.submodels.keys().copied().collect::<Vec<_>>(), vec![0, 1]);

        let (replay_upload, _) = local_round_baseline(
            &state,
            &data,
            &a,
            &global,
            None,
            BaselineMethod::FedAvgReplay,
            &cfg(),
            no_cache,
            5,
        )
        .unwrap();
        assert_eq!(replay_upload.theta_star, upload.theta_star);
    }

    #[test]
    fn second_round_uses_cache_for_new_classes() {
        let s = store();
        let a = arch();
        let global = a.init_params(1);
        let data1 = task(&s, 1, &[0, 1], 0);
        let (_, other) = local_round(&ClientState::new(1, 4), &task(&s, 1, &[2, 3], 0), &a, &global, None, &cfg(), no_cache, 6).unwrap();
        let cache = other.aux.clone();
        let (up1, state1) = local_round(&ClientState::new(0, 4), &data1, &a, &global, None, &cfg(), no_cache, 7).unwrap();
        let personalized = up1.theta_star.clone();

        let data2 = task(&s, 2, &[2, 3], 1);
        let lookup = |c: usize| cache.get(c).cloned();
        let (up2, state2) = local_round(&state1, &data2, &a, &global, Some(&personalized), &cfg(), lookup, 8).unwrap();
        assert_eq!(up2.fit_log, FitLog { init: 0, transfer: 2 });
        assert_eq!(up2.updated_submodels.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
        // 120 current rows; cumulative {0:60,1:60,2:60,3:60} scaled by 1 -> 60 each for 0 and 1
        assert_eq!(up2.replay_size, 120);
        assert_eq!(up2.train_size, 240);
        assert_eq!(
            state2.y_cum,
            [(0, 60), (1, 60), (2, 60), (3, 60)].into_iter().collect::<LabelCountVector>()
        );
        assert_eq!(state2.aux.get(0), state1.aux.get(0));
    }

    #[test]
    fn failed_round_leaves_state_intact() {
        let s = store();
        let a = arch();
        let global = a.init_params(1);
        let (_, mut state) = local_round(&ClientState::new(0, 4), &task(&s, 1, &[0, 1], 0), &a, &global, None, &cfg(), no_cache, 1).unwrap();
        // drop a generator the next plan will need
        state.aux.submodels.remove(&0);
        let before = state.clone();
        let err = local_round(&state, &task(&s, 2, &[2, 3], 1), &a, &global, None, &cfg(), no_cache, 2).unwrap_err();
        assert!(matches!(err, ClientError::Replay { source: ReplayError::MissingSubmodel(0), .. }));
        assert_eq!(state, before);
    }

    #[test]
    fn strong_alignment_pulls_outputs_toward_teacher() {
        let s = store();
        let a = arch();
        let global = a.init_params(1);
        let teacher = a.init_params(2);
        let (_, state) = local_round(&ClientState::new(0, 4), &task(&s, 1, &[0, 1], 0), &a, &global, None, &cfg(), no_cache, 1).unwrap();
        let data = task(&s, 2, &[0, 1], 1);

        let strong = ClientConfig {
            lambda_align: 10.0,
            replay_enabled: false,
            ..cfg()
        };
        let weak = ClientConfig {
            lambda_align: 0.0,
            ..strong.clone()
        };
        let (aligned, _) = local_round(&state, &data, &a, &global, Some(&teacher), &strong, no_cache, 3).unwrap();
        let (free, _) = local_round(&state, &data, &a, &global, Some(&teacher), &weak, no_cache, 3).unwrap();
        let prev = state.seen_classes.clone();
        let measure = |p: &ParamVector| {
            let objective = Objective {
                alignment: Some(Alignment {
                    teacher: &teacher,
                    previous_classes: &prev,
                    lambda: 1.0,
                }),
                proximal: None,
            };
            model::objective_value(&a, p, &data, &objective).unwrap()
                - model::cross_entropy(&model::forward(&a, p, &data).unwrap(), &data.labels).unwrap()
        };
        assert!(measure(&aligned.theta_star) < measure(&free.theta_star));
    }

    #[test]
    fn fedprox_with_zero_mu_is_fedavg() {
        let s = store();
        let a = arch();
        let global = a.init_params(3);
        let state = ClientState::new(0, 4);
        let data = task(&s, 1, &[4, 5], 0);
        let zero_mu = ClientConfig {
            fedprox_mu: 0.0,
            ..cfg()
        };
        let run = |m| local_round_baseline(&state, &data, &a, &global, None, m, &zero_mu, no_cache, 4).unwrap().0;
        let avg = run(BaselineMethod::FedAvg);
        assert_eq!(run(BaselineMethod::FedProx).theta_star, avg.theta_star);
        assert!(avg.updated_submodels.is_empty());
        assert_eq!(avg.fit_log, FitLog::default());
    }

    #[test]
    fn y_cum_matches_naive_recount() {
        let s = store();
        let a = arch();
        let global = a.init_params(1);
        let rounds: [&[usize]; 3] = [&[0, 1], &[2, 3], &[0, 4]];
        let mut state = ClientState::new(0, 4);
        let mut seen_labels = Vec::new();
        for (r, classes) in rounds.iter().enumerate() {
            let part = if r == 2 { 1 } else { 0 };
            let data = task(&s, r + 1, classes, part);
            seen_labels.extend(data.labels.iter().copied());
            let personalized = state.last_personalized.clone();
            let (up, mut next) =
                local_round(&state, &data, &a, &global, personalized.as_ref(), &cfg(), no_cache, r as u64).unwrap();
            next.last_personalized = Some(up.theta_star.clone());
            assert_eq!(next.y_cum, LabelCountVector::from_labels(&seen_labels));
            assert_eq!(next.seen_classes, next.y_cum.support());
            assert!(next.aux.submodels.keys().all(|c| next.seen_classes.contains(c)));
            let current: BTreeSet<usize> = classes.iter().copied().collect();
            assert_eq!(up.updated_submodels.keys().copied().collect::<BTreeSet<_>>(), current);
            state = next;
        }
    }
}
