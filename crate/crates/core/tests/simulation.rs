use std::collections::BTreeSet;

use pfedgrp::client::{local_round, ClientConfig, ClientState};
use pfedgrp::data::{build_streams, make_synthetic, materialize, DatasetStore, ScenarioConfig, ScenarioKind};
use pfedgrp::model::{self, Activation, AggregationWeights, LabeledBatch, ModelArch, Objective, ParamVector, SgdConfig};
use pfedgrp::orchestrator::{run_experiment, ExperimentConfig, MethodId};
use pfedgrp::server::{self, lookup_class, ServerCache, WeightOptConfig};

fn blobs(store: &DatasetStore, classes: &[usize]) -> LabeledBatch {
    let spec = pfedgrp::data::TaskSpec {
        round: 1,
        class_counts: classes.iter().map(|&c| (c, store.train_pool(c).nrows() as u64)).collect(),
        parts: classes.iter().map(|&c| (c, 0)).collect(),
    };
    materialize(store, &spec).unwrap().0
}

#[test]
fn sgd_on_separable_blobs_decreases_loss_every_epoch() {
    let store = make_synthetic(2, 2, 100, 10, 10.0, 4).unwrap();
    let data = blobs(&store, &[0, 1]);
    let arch = ModelArch::new(2, vec![8], 2, Activation::Relu).unwrap();
    let cfg = SgdConfig {
        epochs: 8,
        ..SgdConfig::default()
    };
    let out = model::sgd_train(&arch, &arch.init_params(9), &data, &cfg, &Objective::supervised(), 2).unwrap();
    assert_eq!(out.epoch_losses.len(), 8);
    for w in out.epoch_losses.windows(2) {
        assert!(w[1] < w[0], "loss went from {} to {}", w[0], w[1]);
    }
    assert_eq!(model::accuracy(&arch, &out.params, &data).unwrap(), 1.0);
}

/// Rotates the rows of the last layer so every class is predicted as another.
fn permute_output_layer(arch: &ModelArch, theta: &ParamVector) -> ParamVector {
    let mut values = theta.values().to_vec();
    let (out, inp) = *arch.layer_dims().last().unwrap();
    let start = values.len() - out * inp - out;
    let original = values.clone();
    for r in 0..out {
        let src = (r + 1) % out;
        for c in 0..inp {
            values[start + r * inp + c] = original[start + src * inp + c];
        }
        values[start + out * inp + r] = original[start + out * inp + src];
    }
    ParamVector::new(arch, values).unwrap()
}

#[test]
fn weight_fit_prefers_the_accurate_model_over_a_permuted_copy() {
    let store = make_synthetic(3, 2, 150, 10, 10.0, 8).unwrap();
    let data = blobs(&store, &[0, 1, 2]);
    let arch = ModelArch::new(2, vec![8], 3, Activation::Relu).unwrap();
    let cfg = SgdConfig {
        epochs: 30,
        ..SgdConfig::default()
    };
    let theta_a = model::sgd_train(&arch, &arch.init_params(1), &data, &cfg, &Objective::supervised(), 1)
        .unwrap()
        .params;
    assert_eq!(model::accuracy(&arch, &theta_a, &data).unwrap(), 1.0);
    let theta_b = permute_output_layer(&arch, &theta_a);
    let thetas = [theta_a, theta_b];

    let fit = server::optimize_weights(&thetas, &data, &arch, &WeightOptConfig::default()).unwrap();
    assert!(fit.weights.as_slice()[0] > 0.9, "{:?}", fit.weights);
    let grid_best = (0..=100)
        .map(|k| {
            let a = k as f64 / 100.0;
            server::mixed_loss(&thetas, &AggregationWeights::new(vec![a, 1.0 - a]).unwrap(), &data, &arch).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    assert!(fit.final_loss <= 1.05 * grid_best, "{} vs {grid_best}", fit.final_loss);
}

#[test]
fn every_uploaded_class_is_retrievable_after_aggregation() {
    let store = make_synthetic(6, 3, 200, 50, 4.0, 2).unwrap();
    let arch = ModelArch::new(3, vec![8], 6, Activation::Relu).unwrap();
    let scenario = ScenarioConfig {
        kind: ScenarioKind::ClassIncremental,
        num_clients: 3,
        num_classes: 6,
        classes_per_task: 2,
        samples_per_class: 40,
        total_rounds: 3,
        seed: 5,
        ..ScenarioConfig::default()
    };
    let streams = build_streams(&scenario).unwrap();
    let cfg = ClientConfig {
        sgd: SgdConfig {
            epochs: 2,
            ..SgdConfig::default()
        },
        ..ClientConfig::default()
    };
    let mut states: Vec<ClientState> = (0..3).map(|i| ClientState::new(i, 3)).collect();
    let mut global = arch.init_params(0);
    let mut cache = ServerCache::default();
    for round in 1..=3 {
        let mut uploads = Vec::new();
        for (i, stream) in streams.iter().enumerate() {
            let (train, _) = materialize(&store, &stream.tasks[round - 1]).unwrap();
            let lookup = |c: usize| lookup_class(&cache, c).cloned();
            let personalized = states[i].last_personalized.clone();
            let (up, next) = local_round(
                &states[i],
                &train,
                &arch,
                &global,
                personalized.as_ref(),
                &cfg,
                lookup,
                (round * 10 + i) as u64,
            )
            .unwrap();
            states[i] = next;
            uploads.push(up);
        }
        let agg = server::aggregate_round(&uploads, &cache, &arch, &WeightOptConfig::default(), 128, round as u64).unwrap();
        let uploaded: BTreeSet<usize> = uploads.iter().flat_map(|u| u.updated_submodels.keys().copied()).collect();
        for c in uploaded {
            assert!(lookup_class(&agg.cache, c).is_some(), "class {c} missing after round {round}");
        }
        for (state, p) in states.iter_mut().zip(&agg.personalized) {
            state.last_personalized = Some(p.clone());
        }
        global = agg.global_mean;
        cache = agg.cache;
    }
    let bytes = cache.to_checkpoint_bytes();
    assert_eq!(ServerCache::from_checkpoint_bytes(&bytes).unwrap(), cache);
}

#[test]
fn runs_are_deterministic_and_cover_every_scenario_kind() {
    let store = make_synthetic(10, 4, 400, 100, 4.0, 3).unwrap();
    for kind in [ScenarioKind::Gradual, ScenarioKind::Circulating, ScenarioKind::ClassIncremental, ScenarioKind::OverlapSweep] {
        let scenario = ScenarioConfig {
            kind,
            num_clients: 2,
            num_classes: 10,
            classes_per_task: 2,
            samples_per_class: 40,
            total_rounds: 3,
            ..ScenarioConfig::default()
        };
        let cfg = ExperimentConfig {
            scenario,
            hidden_dims: vec![16],
            replay_budget: 64,
            client: ClientConfig {
                sgd: SgdConfig {
                    epochs: 2,
                    ..SgdConfig::default()
                },
                ..ClientConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let a = run_experiment(&store, MethodId::Pfedgrp, &cfg, 4).unwrap();
        let b = run_experiment(&store, MethodId::Pfedgrp, &cfg, 4).unwrap();
        assert_eq!(a, b, "{kind:?}");
        assert_eq!(a.iaa.len(), 3);
        assert!(a.iaa.iter().all(|v| (0.0..=1.0).contains(v)));
        for round in &a.weights {
            for w in round {
                assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
