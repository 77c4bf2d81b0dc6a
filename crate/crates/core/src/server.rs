//! Server side of a round: generator cache maintenance, per-client
//! aggregation weights fitted on replayed data, personalized and global models.

use std::collections::BTreeMap;

use byteorder::{ByteOrder, LittleEndian};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::RoundUpload;
use crate::model::{self, LabeledBatch, ModelArch, ModelError, Objective, ParamVector};
pub use crate::model::AggregationWeights;
use crate::replay::{self, AuxiliaryModel, GeneratorParams, LabelCountVector, ReplayError};
use crate::seed::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("cache inconsistency: client {client} reports class {class} but its mirror has no generator")]
    CacheConsistency { client: usize, class: usize },
    #[error("weight optimization produced a non-finite loss at step {step}")]
    Optimization { step: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightOptConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for WeightOptConfig {
    fn default() -> Self {
        WeightOptConfig {
            steps: 20,
            step_size: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedGenerator {
    pub round: u64,
    pub client: usize,
    pub params: GeneratorParams,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServerCache {
    pub round: u64,
    pub thetas: BTreeMap<usize, ParamVector>,
    pub mirrors: BTreeMap<usize, AuxiliaryModel>,
    /// Newest uploaded generator per class across all clients.
    pub class_cache: BTreeMap<usize, CachedGenerator>,
    pub label_counts: BTreeMap<usize, LabelCountVector>,
}

pub fn lookup_class(cache: &ServerCache, class: usize) -> Option<&GeneratorParams> {
    cache.class_cache.get(&class).map(|c| &c.params)
}

impl ServerCache {
    /// Applies one round of uploads. Within a round, a higher client id wins a
    /// per-class tie.
    pub fn merge(&mut self, uploads: &[RoundUpload]) {
        self.round += 1;
        let mut ordered: Vec<&RoundUpload> = uploads.iter().collect();
        ordered.sort_by_key(|u| u.client_id);
        for upload in ordered {
            self.thetas.insert(upload.client_id, upload.theta_star.clone());
            let mirror = self.mirrors.entry(upload.client_id).or_default();
            for (&class, params) in &upload.updated_submodels {
                mirror.insert(class, params.clone());
                self.class_cache.insert(
                    class,
                    CachedGenerator {
                        round: self.round,
                        client: upload.client_id,
                        params: params.clone(),
                    },
                );
            }
            self.label_counts.insert(upload.client_id, upload.label_counts.clone());
        }
    }
}

/// Splits `budget` across classes in proportion to `counts`; leftover units go
/// to the largest remainders, ties to the lowest class id.
pub fn apportion(counts: &LabelCountVector, budget: u64) -> LabelCountVector {
    let total = counts.total() as u128;
    if total == 0 {
        return LabelCountVector::new();
    }
    let mut shares: Vec<(usize, u64, u128)> = counts
        .iter()
        .map(|(c, n)| {
            let scaled = budget as u128 * n as u128;
            (c, (scaled / total) as u64, scaled % total)
        })
        .collect();
    let assigned: u64 = shares.iter().map(|s| s.1).sum();
    let mut leftover = budget - assigned;
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].2.cmp(&shares[a].2).then(shares[a].0.cmp(&shares[b].0)));
    for i in order {
        if leftover == 0 {
            break;
        }
        shares[i].1 += 1;
        leftover -= 1;
    }
    shares.into_iter().map(|(c, n, _)| (c, n)).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: AggregationWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
}

const MAX_BACKOFFS: usize = 40;

/// Minimizes the replay-set cross entropy of `mix_params(thetas, softmax(z))`
/// over `z`, starting from uniform weights.
///
/// Each step follows `-dL/dz` where `dL/dw_j = <dL/dtheta, theta_j>` pushed
/// through the softmax Jacobian. The step length starts at `cfg.step_size`,
/// doubles after every accepted step and halves whenever a trial would raise
/// the loss; if no halving helps the search stops. The descent result is
/// finally compared against every single-model vertex of the simplex.
pub fn optimize_weights(
    thetas: &[ParamVector],
    replay_set: &LabeledBatch,
    arch: &ModelArch,
    cfg: &WeightOptConfig,
) -> Result<WeightFit, ServerError> {
    if thetas.is_empty() {
        return Err(ServerError::Contract("no models to aggregate".into()));
    }
    let n = thetas.len();
    if n == 1 || cfg.steps == 0 {
        let weights = AggregationWeights::uniform(n);
        let loss = if replay_set.is_empty() {
            f64::NAN
        } else {
            mixed_loss(thetas, &weights, replay_set, arch)?
        };
        return Ok(WeightFit {
            weights,
            initial_loss: loss,
            final_loss: loss,
        });
    }
    if replay_set.is_empty() {
        return Err(ServerError::Contract("empty replay set for weight optimization".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        return Err(ServerError::Contract("weight step size must be positive".into()));
    }

    let mut z = vec![0.0; n];
    let mut weights = AggregationWeights::uniform(n);
    let mixed = model::mix_params(thetas, &weights)?;
    let (mut loss, mut grad) = model::objective_value_and_grad(arch, &mixed, replay_set, &Objective::supervised())?;
    if !loss.is_finite() {
        return Err(ServerError::Optimization { step: 0 });
    }
    let initial_loss = loss;

    let mut eta = cfg.step_size;
    'steps: for step in 0..cfg.steps {
        let w = weights.as_slice();
        let dw: Vec<f64> = thetas.iter().map(|t| grad.dot(t)).collect();
        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = w.iter().zip(&dw).map(|(wk, dk)| wk * (dk - mean)).collect();

        for _ in 0..MAX_BACKOFFS {
            let candidate_z: Vec<f64> = z.iter().zip(&dz).map(|(zk, gk)| zk - eta * gk).collect();
            let candidate = AggregationWeights::new(softmax(&candidate_z))?;
            let mixed = model::mix_params(thetas, &candidate)?;
            let (candidate_loss, candidate_grad) =
                model::objective_value_and_grad(arch, &mixed, replay_set, &Objective::supervised())?;
            if candidate_loss.is_nan() {
                return Err(ServerError::Optimization { step });
            }
            if candidate_loss <= loss {
                z = candidate_z;
                weights = candidate;
                loss = candidate_loss;
                grad = candidate_grad;
                eta *= 2.0;
                continue 'steps;
            }
            eta *= 0.5;
        }
        break;
    }

    // The loss is not convex in w; a single model can beat the basin reached from uniform.
    for j in 0..n {
        let vertex = AggregationWeights::one_hot(n, j);
        let vertex_loss = mixed_loss(thetas, &vertex, replay_set, arch)?;
        if vertex_loss < loss {
            weights = vertex;
            loss = vertex_loss;
        }
    }
    Ok(WeightFit {
        weights,
        initial_loss,
        final_loss: loss,
    })
}

/// Replay cross entropy of the mixture `sum_j w_j * theta_j`.
pub fn mixed_loss(
    thetas: &[ParamVector],
    weights: &AggregationWeights,
    replay_set: &LabeledBatch,
    arch: &ModelArch,
) -> Result<f64, ServerError> {
    let mixed = model::mix_params(thetas, weights)?;
    let logits = model::forward(arch, &mixed, replay_set)?;
    Ok(model::cross_entropy(&logits, &replay_set.labels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundAggregate {
    /// Client ids in upload order; all other vectors follow it.
    pub clients: Vec<usize>,
    pub personalized: Vec<ParamVector>,
    pub weights: Vec<AggregationWeights>,
    pub global_mean: ParamVector,
    pub cache: ServerCache,
}

/// Draws a client's server-side replay set from its mirrored generators with
/// per-class sizes apportioned from its reported label counts.
pub fn client_replay_set(
    cache: &ServerCache,
    client: usize,
    replay_budget: u64,
    feature_dim: usize,
    seed: u64,
) -> Result<LabeledBatch, ServerError> {
    let counts = cache
        .label_counts
        .get(&client)
        .ok_or_else(|| ServerError::Contract(format!("no label counts for client {client}")))?;
    let empty = AuxiliaryModel::default();
    let mirror = cache.mirrors.get(&client).unwrap_or(&empty);
    if let Some((class, _)) = counts.iter().find(|(c, _)| !mirror.contains(*c)) {
        return Err(ServerError::CacheConsistency { client, class });
    }
    let plan = apportion(counts, replay_budget);
    Ok(replay::sample_counts(mirror, &plan, feature_dim, seed)?)
}

/// Merges uploads into the cache, fits every client's aggregation weights on
/// its replayed distribution, and forms personalized models plus the
/// unweighted global mean.
pub fn aggregate_round(
    uploads: &[RoundUpload],
    cache: &ServerCache,
    arch: &ModelArch,
    cfg: &WeightOptConfig,
    replay_budget: u64,
    seed: u64,
) -> Result<RoundAggregate, ServerError> {
    if uploads.is_empty() {
        return Err(ServerError::Contract("no uploads this round".into()));
    }
    let mut clients: Vec<usize> = uploads.iter().map(|u| u.client_id).collect();
    clients.sort_unstable();
    clients.dedup();
    if clients.len() != uploads.len() {
        return Err(ServerError::Contract("duplicate client uploads".into()));
    }

    let mut next = cache.clone();
    next.merge(uploads);
    let thetas: Vec<ParamVector> = uploads.iter().map(|u| u.theta_star.clone()).collect();
    let n = thetas.len();
    let optimize = cfg.steps > 0 && n > 1;

    let fitted: Vec<AggregationWeights> = uploads
        .par_iter()
        .map(|upload| {
            if !optimize {
                return Ok(AggregationWeights::uniform(n));
            }
            let replay_set = client_replay_set(
                &next,
                upload.client_id,
                replay_budget,
                arch.input_dim,
                derive_seed(seed, "server-replay", &[upload.client_id as u64]),
            )?;
            if replay_set.is_empty() {
                return Ok(AggregationWeights::uniform(n));
            }
            Ok(optimize_weights(&thetas, &replay_set, arch, cfg)?.weights)
        })
        .collect::<Result<_, ServerError>>()?;

    let personalized = fitted
        .iter()
        .map(|w| model::mix_params(&thetas, w))
        .collect::<Result<Vec<_>, _>>()?;
    let global_mean = model::mix_params(&thetas, &AggregationWeights::uniform(n))?;
    Ok(RoundAggregate {
        clients: uploads.iter().map(|u| u.client_id).collect(),
        personalized,
        weights: fitted,
        global_mean,
        cache: next,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFGRPCK\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Cache checkpoint, little-endian throughout:
///
/// ```text
/// [8]  magic "PFGRPCK\0"
/// u32  version (1)
/// u64  round
/// u32  cached classes;  each: u64 class, u64 round, u64 client, generator record
/// u32  theta vectors;   each: u64 client, u64 fingerprint, u64 length, f64 * length
/// u32  client mirrors;  each: u64 client, u32 classes, each: u64 class, generator record
/// u32  label vectors;   each: u64 client, u32 entries, each: u64 class, u64 count
/// ```
///
/// Generator records use [`GeneratorParams::to_bytes`].
impl ServerCache {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.round);
        w.u32(self.class_cache.len() as u32);
        for (&class, entry) in &self.class_cache {
            w.u64(class as u64);
            w.u64(entry.round);
            w.u64(entry.client as u64);
            w.bytes(&entry.params.to_bytes());
        }
        w.u32(self.thetas.len() as u32);
        for (&client, theta) in &self.thetas {
            w.u64(client as u64);
            w.u64(theta.fingerprint());
            w.u64(theta.len() as u64);
            for &v in theta.values() {
                w.f64(v);
            }
        }
        w.u32(self.mirrors.len() as u32);
        for (&client, mirror) in &self.mirrors {
            w.u64(client as u64);
            w.u32(mirror.submodels.len() as u32);
            for (&class, params) in &mirror.submodels {
                w.u64(class as u64);
                w.bytes(&params.to_bytes());
            }
        }
        w.u32(self.label_counts.len() as u32);
        for (&client, counts) in &self.label_counts {
            w.u64(client as u64);
            w.u32(counts.len() as u32);
            for (class, n) in counts.iter() {
                w.u64(class as u64);
                w.u64(n);
            }
        }
        w.0
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ServerError> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ServerError::Checkpoint {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ServerError::Checkpoint {
                offset: 8,
                reason: format!("unsupported version {version}"),
            });
        }
        let mut cache = ServerCache {
            round: r.u64()?,
            ..ServerCache::default()
        };
        for _ in 0..r.u32()? {
            let class = r.u64()? as usize;
            let round = r.u64()?;
            let client = r.u64()? as usize;
            let params = r.generator()?;
            cache.class_cache.insert(class, CachedGenerator { round, client, params });
        }
        for _ in 0..r.u32()? {
            let client = r.u64()? as usize;
            let fingerprint = r.u64()?;
            let len = r.u64()? as usize;
            if len > r.remaining() / 8 {
                return Err(r.error("theta length exceeds file"));
            }
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let at = r.offset;
            let theta = ParamVector::from_raw(fingerprint, values).map_err(|e| ServerError::Checkpoint {
                offset: at,
                reason: e.to_string(),
            })?;
            cache.thetas.insert(client, theta);
        }
        for _ in 0..r.u32()? {
            let client = r.u64()? as usize;
            let mut mirror = AuxiliaryModel::default();
            for _ in 0..r.u32()? {
                let class = r.u64()? as usize;
                mirror.insert(class, r.generator()?);
            }
            cache.mirrors.insert(client, mirror);
        }
        for _ in 0..r.u32()? {
            let client = r.u64()? as usize;
            let mut counts = LabelCountVector::new();
            for _ in 0..r.u32()? {
                let class = r.u64()? as usize;
                counts.add(class, r.u64()?);
            }
            cache.label_counts.insert(client, counts);
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes"));
        }
        Ok(cache)
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        let mut buf = [0u8; 4];
        LittleEndian::write_u32(&mut buf, v);
        self.bytes(&buf);
    }
    fn u64(&mut self, v: u64) {
        let mut buf = [0u8; 8];
        LittleEndian::write_u64(&mut buf, v);
        self.bytes(&buf);
    }
    fn f64(&mut self, v: f64) {
        let mut buf = [0u8; 8];
        LittleEndian::write_f64(&mut buf, v);
        self.bytes(&buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> ServerError {
        ServerError::Checkpoint {
            offset: self.offset,
            reason: reason.into(),
        }
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ServerError> {
        if self.remaining() < n {
            return Err(self.error("truncated"));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, ServerError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
    fn u64(&mut self) -> Result<u64, ServerError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
    fn f64(&mut self) -> Result<f64, ServerError> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }
    fn generator(&mut self) -> Result<GeneratorParams, ServerError> {
        let at = self.offset;
        let (params, used) =
            GeneratorParams::from_bytes(&self.bytes[at..]).map_err(|e| match e {
                ReplayError::Format { offset, reason } => ServerError::Checkpoint {
                    offset: at + offset,
                    reason,
                },
                other => ServerError::Replay(other),
            })?;
        self.offset += used;
        Ok(params)
    }
}
