use std::collections::BTreeMap;

use ndarray::{s, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetStore};
use crate::model::LabeledBatch;
use crate::replay::LabelCountVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Two-task loop drawn from the client's tasks; one member is swapped out
    /// every `replace_every` executed tasks.
    Gradual,
    /// The client's tasks repeated in a fixed cycle.
    Circulating,
    /// Disjoint tasks covering every class exactly once.
    ClassIncremental,
    /// Adjacent tasks share `overlap` classes.
    OverlapSweep,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Gradual => "gradual",
            ScenarioKind::Circulating => "circulating",
            ScenarioKind::ClassIncremental => "class_incremental",
            ScenarioKind::OverlapSweep => "overlap_sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub num_clients: usize,
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    /// Tasks each client draws for the gradual and circulating scenarios.
    pub tasks_per_client: usize,
    pub loop_length: usize,
    pub replace_every: usize,
    pub overlap: usize,
    pub total_rounds: usize,
    /// Derived from the run seed; not part of the configuration document.
    #[serde(skip)]
    pub seed: u64,
    /// Whole slices each class pool can supply; `None` skips the budget check.
    #[serde(skip)]
    pub max_parts_per_class: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::ClassIncremental,
            num_clients: 4,
            num_classes: 10,
            classes_per_task: 2,
            samples_per_class: 200,
            tasks_per_client: 5,
            loop_length: 2,
            replace_every: 30,
            overlap: 0,
            total_rounds: 5,
            seed: 0,
            max_parts_per_class: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| Err(DataError::Config(msg));
        if self.num_clients == 0 || self.total_rounds == 0 || self.samples_per_class == 0 {
            return err("num_clients, total_rounds and samples_per_class must be positive".into());
        }
        if self.num_classes < 2 {
            return err("need at least two classes".into());
        }
        if self.classes_per_task == 0 || self.classes_per_task > self.num_classes {
            return err(format!(
                "classes_per_task {} must lie in [1, {}]",
                self.classes_per_task, self.num_classes
            ));
        }
        match self.kind {
            ScenarioKind::Gradual | ScenarioKind::Circulating => {
                if self.tasks_per_client == 0 || self.tasks_per_client * self.classes_per_task > self.num_classes {
                    return err(format!(
                        "{} disjoint tasks of {} classes need more than {} classes",
                        self.tasks_per_client, self.classes_per_task, self.num_classes
                    ));
                }
                if self.kind == ScenarioKind::Gradual {
                    if self.loop_length == 0 || self.loop_length >= self.tasks_per_client {
                        return err("loop_length must be positive and below tasks_per_client".into());
                    }
                    if self.replace_every == 0 {
                        return err("replace_every must be positive".into());
                    }
                }
            }
            ScenarioKind::ClassIncremental => {
                if !self.num_classes.is_multiple_of(self.classes_per_task) {
                    return err(format!(
                        "{} classes do not split into tasks of {}",
                        self.num_classes, self.classes_per_task
                    ));
                }
                let available = self.num_classes / self.classes_per_task;
                if self.total_rounds > available {
                    return err(format!(
                        "class budget exhausted: {} rounds requested but only {available} disjoint tasks exist",
                        self.total_rounds
                    ));
                }
            }
            ScenarioKind::OverlapSweep => {
                if ![0, 2, 4, 6].contains(&self.overlap) {
                    return err(format!("overlap {} is not one of 0, 2, 4, 6", self.overlap));
                }
                if self.classes_per_task != self.overlap + 2 {
                    return err(format!(
                        "overlap {} implies classes_per_task {}, got {}",
                        self.overlap,
                        self.overlap + 2,
                        self.classes_per_task
                    ));
                }
                if self.num_classes < self.overlap + 4 {
                    return err(format!(
                        "overlap {} needs at least {} classes",
                        self.overlap,
                        self.overlap + 4
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub round: usize,
    /// Training samples requested per class.
    pub class_counts: LabelCountVector,
    /// Which nonoverlapping slice of each class pool this task draws.
    pub parts: BTreeMap<usize, usize>,
}

impl TaskSpec {
    pub fn classes(&self) -> Vec<usize> {
        self.class_counts.iter().map(|(c, _)| c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub client_id: usize,
    pub tasks: Vec<TaskSpec>,
}

/// Shuffled classes cut into `count` disjoint tasks.
fn disjoint_tasks(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, count: usize) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
    classes.shuffle(rng);
    classes
        .chunks(cfg.classes_per_task)
        .take(count)
        .map(|chunk| {
            let mut t = chunk.to_vec();
            t.sort_unstable();
            t
        })
        .collect()
}

/// Sequence of class sets, one per round, for a single client.
fn class_schedule(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vec<Vec<usize>> {
    let rounds = cfg.total_rounds;
    match cfg.kind {
        ScenarioKind::Circulating => {
            let tasks = disjoint_tasks(rng, cfg, cfg.tasks_per_client);
            (0..rounds).map(|r| tasks[r % tasks.len()].clone()).collect()
        }
        ScenarioKind::ClassIncremental => {
            let tasks = disjoint_tasks(rng, cfg, cfg.num_classes / cfg.classes_per_task);
            tasks.into_iter().take(rounds).collect()
        }
        ScenarioKind::Gradual => {
            let tasks = disjoint_tasks(rng, cfg, cfg.tasks_per_client);
            let mut indices: Vec<usize> = (0..tasks.len()).collect();
            indices.shuffle(rng);
            let mut task_loop: Vec<usize> = indices[..cfg.loop_length].to_vec();
            let mut executed = 0;
            let mut schedule = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                if executed == cfg.replace_every {
                    let outside: Vec<usize> =
                        (0..tasks.len()).filter(|t| !task_loop.contains(t)).collect();
                    let out = rng.random_range(0..task_loop.len());
                    task_loop.remove(out);
                    let fresh = *outside.choose(rng).expect("loop_length < tasks_per_client");
                    task_loop.push(fresh);
                    executed = 0;
                }
                schedule.push(tasks[task_loop[executed % task_loop.len()]].clone());
                executed += 1;
            }
            schedule
        }
        ScenarioKind::OverlapSweep => {
            let mut order: Vec<usize> = (0..cfg.num_classes).collect();
            order.shuffle(rng);
            let width = cfg.overlap + 2;
            (0..rounds)
                .map(|t| {
                    let mut task: Vec<usize> =
                        (0..width).map(|j| order[(2 * t + j) % cfg.num_classes]).collect();
                    task.sort_unstable();
                    task
                })
                .collect()
        }
    }
}

/// Per-client task streams. A pure function of the configuration.
pub fn build_streams(cfg: &ScenarioConfig) -> Result<Vec<TaskStream>, DataError> {
    cfg.validate()?;
    (0..cfg.num_clients)
        .map(|client_id| {
            let mut rng = seed::rng(seed::derive_seed(cfg.seed, "stream", &[client_id as u64]));
            let schedule = class_schedule(&mut rng, cfg);
            let mut next_part: BTreeMap<usize, usize> = BTreeMap::new();
            let mut tasks = Vec::with_capacity(schedule.len());
            for (r, classes) in schedule.into_iter().enumerate() {
                let mut parts = BTreeMap::new();
                for &c in &classes {
                    let part = next_part.entry(c).or_insert(0);
                    if cfg.max_parts_per_class.is_some_and(|max| *part >= max) {
                        return Err(DataError::Config(format!(
                            "class budget exhausted: client {client_id} needs slice {} of class {c} in round {}",
                            *part + 1,
                            r + 1
                        )));
                    }
                    parts.insert(c, *part);
                    *part += 1;
                }
                tasks.push(TaskSpec {
                    round: r + 1,
                    class_counts: classes.iter().map(|&c| (c, cfg.samples_per_class as u64)).collect(),
                    parts,
                });
            }
            Ok(TaskStream { client_id, tasks })
        })
        .collect()
}

/// Training slice for a task plus the test shard proportional to it.
///
/// Part `k` of size `n` covers train rows `[k*n, (k+1)*n)`; its test shard has
/// `floor(n * test_pool / train_pool)` rows at the same part index.
pub fn materialize(store: &DatasetStore, spec: &TaskSpec) -> Result<(LabeledBatch, LabeledBatch), DataError> {
    let mut train_blocks: Vec<ArrayView2<f64>> = Vec::new();
    let mut test_blocks: Vec<ArrayView2<f64>> = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    for (class, count) in spec.class_counts.iter() {
        if class >= store.num_classes() {
            return Err(DataError::Config(format!("class {class} not in the dataset")));
        }
        let part = *spec
            .parts
            .get(&class)
            .ok_or_else(|| DataError::Config(format!("no part index for class {class}")))?;
        let size = count as usize;
        let train_pool = store.train_pool(class);
        let test_pool = store.test_pool(class);
        let end = (part + 1) * size;
        if end > train_pool.nrows() {
            return Err(DataError::Budget {
                class,
                part,
                size,
                pool: train_pool.nrows(),
            });
        }
        let shard = size * test_pool.nrows() / train_pool.nrows();
        train_blocks.push(train_pool.slice(s![part * size..end, ..]));
        test_blocks.push(test_pool.slice(s![part * shard..(part + 1) * shard, ..]));
        train_labels.extend(std::iter::repeat_n(class, size));
        test_labels.extend(std::iter::repeat_n(class, shard));
    }
    let join = |blocks: &[ArrayView2<f64>], labels: Vec<usize>| -> LabeledBatch {
        if blocks.is_empty() {
            return LabeledBatch::empty(store.feature_dim());
        }
        let features = ndarray::concatenate(Axis(0), blocks).expect("pools share the feature dimension");
        LabeledBatch::new(features, labels).expect("row and label counts agree")
    };
    Ok((join(&train_blocks, train_labels), join(&test_blocks, test_labels)))
}
