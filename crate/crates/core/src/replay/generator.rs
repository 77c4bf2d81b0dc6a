//! Per-class density models used as replay generators.
//!
//! Two kinds are supported: a single diagonal Gaussian fitted in closed form,
//! and a diagonal-covariance Gaussian mixture fitted by EM. The training loss
//! is the negative log-likelihood of the class's real rows.

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ReplayError;
use crate::seed;

pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    DiagGaussian,
    Gmm,
}

impl GeneratorKind {
    fn tag(self) -> u8 {
        match self {
            GeneratorKind::DiagGaussian => 0,
            GeneratorKind::Gmm => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(GeneratorKind::DiagGaussian),
            1 => Some(GeneratorKind::Gmm),
            _ => None,
        }
    }
}

/// Which iteration budget a fit runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitBudget {
    /// Cold start: k-means++ seeding followed by `init_iters` EM steps.
    Init,
    /// Warm start from existing parameters, `transfer_iters` EM steps.
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub components: usize,
    pub init_iters: usize,
    pub transfer_iters: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::DiagGaussian,
            components: 3,
            init_iters: 50,
            transfer_iters: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub kind: GeneratorKind,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub fit_sample_count: u64,
    /// Set when a mixture fit fell back to a single Gaussian for lack of data.
    pub downgraded: bool,
}

impl GeneratorParams {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Mean per-row log-likelihood of `data`.
    pub fn log_likelihood(&self, data: ArrayView2<f64>) -> f64 {
        let total: f64 = data.outer_iter().map(|x| self.row_log_density(x)).sum();
        total / data.nrows() as f64
    }

    fn component_log_density(&self, k: usize, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let d = xi - m;
            acc += LN_2PI + v.ln() + d * d / v;
        }
        -0.5 * acc
    }

    fn row_log_density(&self, x: ArrayView1<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Draws `n` rows.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let dim = self.dim();
        let mut out = Array2::zeros((n, dim));
        for mut row in out.outer_iter_mut() {
            let k = self.pick_component(rng.random::<f64>());
            for ((r, &m), &v) in row.iter_mut().zip(&self.means[k]).zip(&self.variances[k]) {
                let z: f64 = rng.sample(StandardNormal);
                *r = m + v.sqrt() * z;
            }
        }
        out
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = k;
            }
            acc += w;
            if u < acc && w > 0.0 {
                return k;
            }
        }
        last_positive
    }

    /// Flat little-endian record:
    ///
    /// ```text
    /// u8   kind tag (0 = diag_gaussian, 1 = gmm)
    /// u8   flags (bit 0 = downgraded)
    /// u32  component count k
    /// u32  dimension d
    /// u64  fit sample count
    /// f64  means      k*d, component-major
    /// f64  variances  k*d, component-major
    /// f64  weights    k
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.components();
        let d = self.dim();
        let mut out = vec![0u8; Self::encoded_len(k, d)];
        out[0] = self.kind.tag();
        out[1] = u8::from(self.downgraded);
        LittleEndian::write_u32(&mut out[2..6], k as u32);
        LittleEndian::write_u32(&mut out[6..10], d as u32);
        LittleEndian::write_u64(&mut out[10..18], self.fit_sample_count);
        let mut offset = 18;
        for v in self.means.iter().chain(&self.variances).flatten().chain(&self.weights) {
            LittleEndian::write_f64(&mut out[offset..offset + 8], *v);
            offset += 8;
        }
        out
    }

    pub fn encoded_len(components: usize, dim: usize) -> usize {
        18 + 8 * (2 * components * dim + components)
    }

    /// Parses one record from the front of `bytes`, returning it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), ReplayError> {
        if bytes.len() < 18 {
            return Err(ReplayError::Format {
                offset: bytes.len(),
                reason: "truncated generator header".into(),
            });
        }
        let kind = GeneratorKind::from_tag(bytes[0]).ok_or_else(|| ReplayError::Format {
            offset: 0,
            reason: format!("unknown generator kind tag {}", bytes[0]),
        })?;
        if bytes[1] > 1 {
            return Err(ReplayError::Format {
                offset: 1,
                reason: format!("unknown flag bits {:#04x}", bytes[1]),
            });
        }
        let k = LittleEndian::read_u32(&bytes[2..6]) as usize;
        let d = LittleEndian::read_u32(&bytes[6..10]) as usize;
        let fit_sample_count = LittleEndian::read_u64(&bytes[10..18]);
        let len = Self::encoded_len(k, d);
        if bytes.len() < len {
            return Err(ReplayError::Format {
                offset: bytes.len(),
                reason: format!("generator record needs {len} bytes"),
            });
        }
        let mut offset = 18;
        let mut next = || {
            let v = LittleEndian::read_f64(&bytes[offset..offset + 8]);
            offset += 8;
            v
        };
        let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| next()).collect()).collect();
        let variances: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| next()).collect()).collect();
        let weights: Vec<f64> = (0..k).map(|_| next()).collect();
        let params = GeneratorParams {
            kind,
            means,
            variances,
            weights,
            fit_sample_count,
            downgraded: bytes[1] == 1,
        };
        params.validate().map_err(|reason| ReplayError::Format { offset: 18, reason })?;
        Ok((params, len))
    }

    fn validate(&self) -> Result<(), String> {
        if self.components() == 0 {
            return Err("generator has no components".into());
        }
        if self.variances.iter().flatten().any(|&v| !v.is_finite() || v < VARIANCE_FLOOR) {
            return Err("variance below floor".into());
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite mean".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w.is_nan() || w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err("component weights off the simplex".into());
        }
        Ok(())
    }
}

fn diag_gaussian(data: ArrayView2<f64>, kind: GeneratorKind, downgraded: bool) -> GeneratorParams {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).expect("nonempty data");
    let mut var = vec![0.0; data.ncols()];
    for row in data.outer_iter() {
        for ((v, &x), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *v += (x - m) * (x - m);
        }
    }
    let variances = var.into_iter().map(|v| (v / n).max(VARIANCE_FLOOR)).collect();
    GeneratorParams {
        kind,
        means: vec![mean.to_vec()],
        variances: vec![variances],
        weights: vec![1.0],
        fit_sample_count: data.nrows() as u64,
        downgraded,
    }
}

/// k-means++ centers, shared global variance, uniform weights.
fn kmeans_pp_start(data: ArrayView2<f64>, k: usize, seed: u64) -> GeneratorParams {
    let mut rng = seed::rng(seed);
    let n = data.nrows();
    let sq_dist = |a: ArrayView1<f64>, b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centers: Vec<Vec<f64>> = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = data.outer_iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let center = data.row(pick).to_vec();
        for (d, x) in nearest.iter_mut().zip(data.outer_iter()) {
            *d = d.min(sq_dist(x, &center));
        }
        centers.push(center);
    }
    let global = diag_gaussian(data, GeneratorKind::Gmm, false);
    GeneratorParams {
        kind: GeneratorKind::Gmm,
        variances: vec![global.variances[0].clone(); k],
        means: centers,
        weights: vec![1.0 / k as f64; k],
        fit_sample_count: n as u64,
        downgraded: false,
    }
}

/// Runs `iters` EM steps from `start`. Returns the fitted parameters and the
/// mean log-likelihood before the first step and after every step.
pub fn em(data: ArrayView2<f64>, start: &GeneratorParams, iters: usize) -> (GeneratorParams, Vec<f64>) {
    let mut params = start.clone();
    params.fit_sample_count = data.nrows() as u64;
    let n = data.nrows();
    let k = params.components();
    let dim = data.ncols();
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(params.log_likelihood(data));
    let mut resp = Array2::<f64>::zeros((n, k));

    for _ in 0..iters {
        for (x, mut r) in data.outer_iter().zip(resp.outer_iter_mut()) {
            let mut max = f64::NEG_INFINITY;
            for (c, rc) in r.iter_mut().enumerate() {
                *rc = if params.weights[c] > 0.0 {
                    params.weights[c].ln() + params.component_log_density(c, x)
                } else {
                    f64::NEG_INFINITY
                };
                max = max.max(*rc);
            }
            let mut z = 0.0;
            for rc in r.iter_mut() {
                *rc = (*rc - max).exp();
                z += *rc;
            }
            r.mapv_inplace(|v| v / z);
        }
        let mass = resp.sum_axis(Axis(0));
        for c in 0..k {
            let nk = mass[c];
            params.weights[c] = nk / n as f64;
            if nk < 1e-10 {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (x, r) in data.outer_iter().zip(resp.column(c)) {
                for (m, &xi) in mean.iter_mut().zip(x.iter()) {
                    *m += r * xi;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; dim];
            for (x, r) in data.outer_iter().zip(resp.column(c)) {
                for ((v, &xi), &m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                    *v += r * (xi - m) * (xi - m);
                }
            }
            params.means[c] = mean;
            params.variances[c] = var.into_iter().map(|v| (v / nk).max(VARIANCE_FLOOR)).collect();
        }
        let wsum: f64 = params.weights.iter().sum();
        params.weights.iter_mut().for_each(|w| *w /= wsum);
        trace.push(params.log_likelihood(data));
    }
    (params, trace)
}

/// Fits one class's sub-model on its real rows.
///
/// A transfer fit needs a warm start. A mixture with fewer rows than
/// components degrades to a single diagonal Gaussian and says so in `downgraded`.
pub fn fit_submodel(
    data: ArrayView2<f64>,
    warm_start: Option<&GeneratorParams>,
    budget: FitBudget,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<GeneratorParams, ReplayError> {
    if data.nrows() == 0 {
        return Err(ReplayError::Contract("fitting a generator on zero rows".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ReplayError::Contract("non-finite generator training data".into()));
    }
    if let Some(warm) = warm_start {
        if warm.dim() != data.ncols() {
            return Err(ReplayError::Contract(format!(
                "warm start has dimension {}, data has {}",
                warm.dim(),
                data.ncols()
            )));
        }
    }
    match cfg.kind {
        GeneratorKind::DiagGaussian => {
            if budget == FitBudget::Transfer && warm_start.is_none() {
                return Err(ReplayError::Contract("transfer fit without a warm start".into()));
            }
            Ok(diag_gaussian(data, GeneratorKind::DiagGaussian, false))
        }
        GeneratorKind::Gmm => {
            if cfg.components == 0 {
                return Err(ReplayError::Contract("mixture needs at least one component".into()));
            }
            match budget {
                FitBudget::Init => {
                    if data.nrows() < cfg.components {
                        return Ok(diag_gaussian(data, GeneratorKind::DiagGaussian, true));
                    }
                    let start = kmeans_pp_start(data, cfg.components, seed);
                    Ok(em(data, &start, cfg.init_iters).0)
                }
                FitBudget::Transfer => {
                    let warm = warm_start.ok_or_else(|| {
                        ReplayError::Contract("transfer fit without a warm start".into())
                    })?;
                    if data.nrows() < warm.components() {
                        return Ok(diag_gaussian(data, GeneratorKind::DiagGaussian, true));
                    }
                    Ok(em(data, warm, cfg.transfer_iters).0)
                }
            }
        }
    }
}
