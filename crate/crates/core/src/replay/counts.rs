use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Per-class sample counts. Absent classes count as zero; zero entries are never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelCountVector(BTreeMap<usize, u64>);

impl LabelCountVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let mut counts = Self::new();
        for &y in labels {
            counts.add(y, 1);
        }
        counts
    }

    pub fn get(&self, class: usize) -> u64 {
        self.0.get(&class).copied().unwrap_or(0)
    }

    pub fn set(&mut self, class: usize, count: u64) {
        if count == 0 {
            self.0.remove(&class);
        } else {
            self.0.insert(class, count);
        }
    }

    pub fn add(&mut self, class: usize, count: u64) {
        let total = self.get(class) + count;
        self.set(class, total);
    }

    /// Nonzero `(class, count)` pairs in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.0.iter().map(|(&c, &n)| (c, n))
    }

    pub fn support(&self) -> BTreeSet<usize> {
        self.0.keys().copied().collect()
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn max(&self) -> u64 {
        self.0.values().copied().max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl FromIterator<(usize, u64)> for LabelCountVector {
    fn from_iter<I: IntoIterator<Item = (usize, u64)>>(iter: I) -> Self {
        let mut counts = Self::new();
        for (c, n) in iter {
            counts.add(c, n);
        }
        counts
    }
}

/// Elementwise sum of a running history and the current task's counts.
pub fn accumulate(history: &LabelCountVector, current: &LabelCountVector) -> LabelCountVector {
    let mut out = history.clone();
    for (c, n) in current.iter() {
        out.add(c, n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(pairs: &[(usize, u64)]) -> LabelCountVector {
        pairs.iter().copied().collect()
    }

    #[test]
    fn accumulate_examples() {
        let current = counts(&[(0, 200), (1, 100)]);
        assert_eq!(accumulate(&LabelCountVector::new(), &current), current);
        assert_eq!(
            accumulate(&counts(&[(0, 200)]), &current),
            counts(&[(0, 400), (1, 100)])
        );
    }

    #[test]
    fn zero_counts_are_not_stored() {
        let mut c = counts(&[(3, 0), (1, 2)]);
        assert_eq!(c.len(), 1);
        c.set(1, 0);
        assert!(c.is_empty());
    }

    fn arb_counts() -> impl Strategy<Value = Vec<u64>> {
        prop::collection::vec(0u64..1000, 0..12)
    }

    fn from_dense(v: &[u64]) -> LabelCountVector {
        v.iter().enumerate().map(|(c, &n)| (c, n)).collect()
    }

    proptest! {
        #[test]
        fn accumulate_is_naive_sum_commutative_associative(a in arb_counts(), b in arb_counts(), c in arb_counts()) {
            let (va, vb, vc) = (from_dense(&a), from_dense(&b), from_dense(&c));
            prop_assert_eq!(accumulate(&va, &vb), accumulate(&vb, &va));
            prop_assert_eq!(
                accumulate(&accumulate(&va, &vb), &vc),
                accumulate(&va, &accumulate(&vb, &vc))
            );
            let width = a.len().max(b.len());
            let summed = accumulate(&va, &vb);
            for class in 0..width {
                let naive = a.get(class).copied().unwrap_or(0) + b.get(class).copied().unwrap_or(0);
                prop_assert_eq!(summed.get(class), naive);
            }
        }
    }
}
