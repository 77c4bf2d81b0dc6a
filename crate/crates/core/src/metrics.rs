//! Instant average accuracy (IAA), average accuracy (AA) and average
//! forgetting measure (AFM).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// One round of per-client accuracies `a_i` and cumulative data counts `n_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub accuracies: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub iaa_series: Vec<f64>,
    pub aa: f64,
    /// `None` for single-round runs, where forgetting is undefined.
    pub afm: Option<f64>,
}

/// `sum(n_i * a_i) / sum(n_i)`
pub fn iaa(row: &AccuracyRow) -> Result<f64> {
    if row.accuracies.is_empty() || row.accuracies.len() != row.counts.len() {
        return Err(MetricsError::Contract(format!(
            "{} accuracies and {} counts",
            row.accuracies.len(),
            row.counts.len()
        )));
    }
    if let Some(a) = row.accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(MetricsError::Contract(format!("accuracy {a} outside [0, 1]")));
    }
    let total: u64 = row.counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::Contract("total data count is zero".into()));
    }
    let weighted: f64 = row
        .accuracies
        .iter()
        .zip(&row.counts)
        .map(|(&a, &n)| n as f64 * a)
        .sum();
    Ok(weighted / total as f64)
}

pub fn aa(iaa_series: &[f64]) -> Result<f64> {
    if iaa_series.is_empty() {
        return Err(MetricsError::Contract("average accuracy of an empty series".into()));
    }
    Ok(iaa_series.iter().sum::<f64>() / iaa_series.len() as f64)
}

/// Mean over consecutive rounds of the positive drop `max(0, IAA[t-1] - IAA[t])`.
pub fn afm(iaa_series: &[f64]) -> Result<f64> {
    if iaa_series.len() < 2 {
        return Err(MetricsError::Contract("forgetting needs at least two rounds".into()));
    }
    let drops: f64 = iaa_series.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum();
    Ok(drops / (iaa_series.len() - 1) as f64)
}

pub fn summarize(table: &AccuracyTable) -> Result<MetricSummary> {
    let iaa_series = table.rows.iter().map(iaa).collect::<Result<Vec<_>>>()?;
    let aa = aa(&iaa_series)?;
    let afm = if iaa_series.len() >= 2 {
        Some(afm(&iaa_series)?)
    } else {
        None
    };
    Ok(MetricSummary { iaa_series, aa, afm })
}
