//! Label-count reconstruction: how many synthetic samples of each class to
//! mix into the current task so that the training set mirrors the client's
//! cumulative label distribution, scaled down and capped.

use serde::{Deserialize, Serialize};

use super::{LabelCountVector, ReplayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionPlan {
    pub generate_counts: LabelCountVector,
    /// The shrink ratio `Y_t[ref] / Y_cum[ref]` as an exact fraction.
    pub scale_numerator: u64,
    pub scale_denominator: u64,
    pub reference_class: usize,
    pub cap: u64,
}

impl ReconstructionPlan {
    pub fn scale_factor(&self) -> f64 {
        self.scale_numerator as f64 / self.scale_denominator as f64
    }

    pub fn total(&self) -> u64 {
        self.generate_counts.total()
    }
}

/// Shrinks `cumulative` by the smallest ratio `current[c] / cumulative[c]` over
/// the current task's classes (ties to the lowest class id), floors the scaled
/// counts, and replays only the shortfall against real data, capped at the
/// largest current-class count.
pub fn reconstruction_plan(
    cumulative: &LabelCountVector,
    current: &LabelCountVector,
) -> Result<ReconstructionPlan, ReplayError> {
    if current.is_empty() {
        return Err(ReplayError::Contract("current task has no labelled samples".into()));
    }
    for (c, n) in current.iter() {
        if cumulative.get(c) < n {
            return Err(ReplayError::Contract(format!(
                "class {c}: cumulative count {} below current count {n}",
                cumulative.get(c)
            )));
        }
    }

    // Ratios compared exactly by cross-multiplication. Strict `<` keeps the lowest id on ties.
    let mut reference: Option<(usize, u64, u64)> = None;
    for (c, n) in current.iter() {
        let cum = cumulative.get(c);
        let better = match reference {
            None => true,
            Some((_, rn, rcum)) => (n as u128) * (rcum as u128) < (rn as u128) * (cum as u128),
        };
        if better {
            reference = Some((c, n, cum));
        }
    }
    let (reference_class, num, den) = reference.expect("current is nonempty");
    let cap = current.max();

    let generate_counts = cumulative
        .iter()
        .map(|(c, cum)| {
            let scaled = ((num as u128 * cum as u128) / den as u128) as u64;
            let supplement = scaled.saturating_sub(current.get(c));
            (c, supplement.min(cap))
        })
        .collect();

    Ok(ReconstructionPlan {
        generate_counts,
        scale_numerator: num,
        scale_denominator: den,
        reference_class,
        cap,
    })
}
