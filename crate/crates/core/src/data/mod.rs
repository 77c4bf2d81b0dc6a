//! Datasets, IDX ingestion, synthetic blobs and per-client task streams.

pub mod idx;
mod stream;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use idx::{load_idx, DatasetFragment, IdxError, IdxImages, IdxLabels};
pub use stream::{build_streams, materialize, ScenarioConfig, ScenarioKind, TaskSpec, TaskStream};

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("scenario configuration error: {0}")]
    Config(String),
    #[error("class {class}: part {part} of {size} samples exceeds the pool of {pool}")]
    Budget {
        class: usize,
        part: usize,
        size: usize,
        pool: usize,
    },
}

/// Per-class train and test pools. The two pools never share a row.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    feature_dim: usize,
    num_classes: usize,
    train: Vec<Array2<f64>>,
    test: Vec<Array2<f64>>,
}

impl DatasetStore {
    pub fn new(train: Vec<Array2<f64>>, test: Vec<Array2<f64>>) -> Result<Self, DataError> {
        if train.len() != test.len() || train.len() < 2 {
            return Err(DataError::Invalid(
                "need matching train/test pools for at least two classes".into(),
            ));
        }
        let feature_dim = train[0].ncols();
        if train.iter().chain(&test).any(|p| p.ncols() != feature_dim) || feature_dim == 0 {
            return Err(DataError::Invalid("pools disagree on feature dimension".into()));
        }
        Ok(DatasetStore {
            feature_dim,
            num_classes: train.len(),
            train,
            test,
        })
    }

    /// Groups labelled fragments by class. Labels must be below `num_classes`.
    pub fn from_fragments(
        train: &DatasetFragment,
        test: &DatasetFragment,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let group = |frag: &DatasetFragment| -> Result<Vec<Array2<f64>>, DataError> {
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (r, &y) in frag.labels.iter().enumerate() {
                if y >= num_classes {
                    return Err(DataError::Invalid(format!(
                        "label {y} at row {r} is not below {num_classes}"
                    )));
                }
                rows[y].push(r);
            }
            Ok(rows.iter().map(|idx| frag.features.select(Axis(0), idx)).collect())
        };
        DatasetStore::new(group(train)?, group(test)?)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn train_pool(&self, class: usize) -> &Array2<f64> {
        &self.train[class]
    }

    pub fn test_pool(&self, class: usize) -> &Array2<f64> {
        &self.test[class]
    }

    /// Number of whole training slices of `part_size` rows every class can supply.
    pub fn parts_available(&self, part_size: usize) -> usize {
        if part_size == 0 {
            return 0;
        }
        self.train.iter().map(|p| p.nrows() / part_size).min().unwrap_or(0)
    }
}

/// Lattice point of class `c`: the base-`side` digits of `c` on the leading
/// axes, where `side` is the smallest integer with `side^dim >= num_classes`.
pub fn class_means(num_classes: usize, feature_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut side = 1usize;
    while side
        .checked_pow(feature_dim.min(u32::MAX as usize) as u32)
        .is_some_and(|cap| cap < num_classes)
    {
        side += 1;
    }
    (0..num_classes)
        .map(|c| {
            let mut rest = c;
            (0..feature_dim)
                .map(|_| {
                    let digit = if side > 1 { rest % side } else { 0 };
                    if side > 1 {
                        rest /= side;
                    }
                    digit as f64 * separation
                })
                .collect()
        })
        .collect()
}

/// Gaussian blobs with unit diagonal covariance around [`class_means`].
pub fn make_synthetic(
    num_classes: usize,
    feature_dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    class_separation: f64,
    seed: u64,
) -> Result<DatasetStore, DataError> {
    if num_classes < 2 || feature_dim == 0 || per_class_train == 0 || per_class_test == 0 {
        return Err(DataError::Invalid("synthetic dataset sizes must be positive".into()));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(DataError::Invalid("class separation must be finite and nonnegative".into()));
    }
    let means = class_means(num_classes, feature_dim, class_separation);
    let mut rng = seed::rng(seed);
    let mut blob = |mean: &[f64], n: usize| {
        Array2::from_shape_fn((n, feature_dim), |(_, d)| {
            let z: f64 = rng.sample(StandardNormal);
            mean[d] + z
        })
    };
    let mut train = Vec::with_capacity(num_classes);
    let mut test = Vec::with_capacity(num_classes);
    for mean in &means {
        train.push(blob(mean, per_class_train));
        test.push(blob(mean, per_class_test));
    }
    DatasetStore::new(train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_store() {
        let a = make_synthetic(4, 3, 10, 5, 2.0, 9).unwrap();
        assert_eq!(a, make_synthetic(4, 3, 10, 5, 2.0, 9).unwrap());
        assert_ne!(a, make_synthetic(4, 3, 10, 5, 2.0, 10).unwrap());
    }

    #[test]
    fn zero_separation_collapses_means() {
        let means = class_means(8, 2, 0.0);
        assert!(means.iter().all(|m| m == &means[0]));
    }

    #[test]
    fn lattice_means_are_distinct_and_spaced() {
        for (k, d) in [(8, 2), (8, 16), (10, 1), (47, 3)] {
            let means = class_means(k, d, 3.0);
            for i in 0..k {
                for j in 0..i {
                    let dist: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    assert!(dist >= 9.0 - 1e-12, "classes {i},{j} in {k}x{d}");
                }
            }
        }
    }

    #[test]
    fn well_separated_blobs_are_centroid_classifiable() {
        let store = make_synthetic(8, 2, 200, 200, 10.0, 4).unwrap();
        let centroids: Vec<Vec<f64>> = (0..8)
            .map(|c| store.train_pool(c).mean_axis(Axis(0)).unwrap().to_vec())
            .collect();
        let (mut hits, mut total) = (0, 0);
        for c in 0..8 {
            for row in store.test_pool(c).outer_iter() {
                let nearest = (0..8)
                    .min_by(|&a, &b| {
                        let da: f64 = row.iter().zip(&centroids[a]).map(|(x, m)| (x - m).powi(2)).sum();
                        let db: f64 = row.iter().zip(&centroids[b]).map(|(x, m)| (x - m).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hits += usize::from(nearest == c);
                total += 1;
            }
        }
        assert!(hits as f64 / total as f64 > 0.99);
    }

    #[test]
    fn fragments_group_by_label() {
        let frag = DatasetFragment {
            features: ndarray::array![[0.0], [1.0], [2.0], [3.0]],
            labels: vec![1, 0, 1, 0],
        };
        let store = DatasetStore::from_fragments(&frag, &frag, 2).unwrap();
        assert_eq!(store.train_pool(0), &ndarray::array![[1.0], [3.0]]);
        assert_eq!(store.train_pool(1), &ndarray::array![[0.0], [2.0]]);
        assert!(DatasetStore::from_fragments(&frag, &frag, 1).is_err());
    }
}
