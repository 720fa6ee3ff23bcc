//! Patch distances and the median-of-minimum slide distance.
//!
//! Slide matching decomposes into two steps: a distance between two patch
//! embeddings, and an aggregation over the two mosaics. For every query patch
//! we take its distance to the nearest target patch, then report the median of
//! those minima. The measure is directed: `median_of_min(a, b)` and
//! `median_of_min(b, a)` generally differ.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingKind, EmbeddingSet, MedianRule, ModelError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchDistanceMetric {
    /// `1 - cos(a, b)`, clamped to `[0, 2]`. Float sets only.
    #[default]
    Cosine,
    /// Euclidean distance. Float sets only.
    L2,
    /// Number of differing bits. Barcode sets only.
    Hamming,
}

impl PatchDistanceMetric {
    pub fn accepts(self, kind: EmbeddingKind) -> bool {
        match self {
            Self::Cosine | Self::L2 => kind == EmbeddingKind::Float,
            Self::Hamming => kind == EmbeddingKind::Barcode,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::L2 => "l2",
            Self::Hamming => "hamming",
        }
    }
}

impl fmt::Display for PatchDistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatchDistanceMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Self::Cosine),
            "l2" | "euclidean" => Ok(Self::L2),
            "hamming" => Ok(Self::Hamming),
            _ => Err(format!(
                "unknown metric '{s}' (expected cosine, l2 or hamming)"
            )),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("vector of length {len} is too short to binarize (need at least 2)")]
    TooShort { len: usize },
    #[error("embedding set is empty")]
    EmptySet,
    #[error("metric {metric} cannot be applied to {kind:?} embeddings")]
    KindMismatch {
        metric: PatchDistanceMetric,
        kind: EmbeddingKind,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch { left: a, right: b })
    }
}

fn sq_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn cosine_from_parts(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    (1.0 - dot / (sq_a * sq_b).sqrt()).clamp(0.0, 2.0)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Number of differing bits between two packed rows of equal length.
pub fn hamming_packed(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Distance between two patch vectors.
///
/// For [`PatchDistanceMetric::Hamming`] the inputs are unpacked bit vectors and
/// the result counts positions whose entries differ.
pub fn patch_distance(
    a: &[f32],
    b: &[f32],
    metric: PatchDistanceMetric,
) -> Result<f64, MetricError> {
    check_len(a.len(), b.len())?;
    match metric {
        PatchDistanceMetric::Cosine => {
            let (sq_a, sq_b) = (sq_norm(a), sq_norm(b));
            if sq_a == 0.0 || sq_b == 0.0 {
                return Err(MetricError::ZeroVector);
            }
            Ok(cosine_from_parts(dot(a, b), sq_a, sq_b))
        }
        PatchDistanceMetric::L2 => Ok(l2(a, b)),
        PatchDistanceMetric::Hamming => Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64),
    }
}

/// Min-max barcode: bit `i` is set when `v[i + 1] > v[i]`.
pub fn binarize_minmax(v: &[f32]) -> Result<Vec<u8>, MetricError> {
    if v.len() < 2 {
        return Err(MetricError::TooShort { len: v.len() });
    }
    Ok(v.windows(2).map(|w| u8::from(w[1] > w[0])).collect())
}

/// Applies [`binarize_minmax`] to every row of a float set.
pub fn binarize_set(set: &EmbeddingSet) -> Result<EmbeddingSet, MetricError> {
    if set.kind() != EmbeddingKind::Float {
        return Err(MetricError::KindMismatch {
            metric: PatchDistanceMetric::Hamming,
            kind: set.kind(),
        });
    }
    let rows = (0..set.len())
        .map(|i| binarize_minmax(set.float_row(i).expect("row in range")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingSet::from_bits(set.wsi_id(), &rows)?)
}

fn check_sets(
    query: &EmbeddingSet,
    target: &EmbeddingSet,
    metric: PatchDistanceMetric,
) -> Result<(), MetricError> {
    if query.is_empty() || target.is_empty() {
        return Err(MetricError::EmptySet);
    }
    check_len(query.dim(), target.dim())?;
    for kind in [query.kind(), target.kind()] {
        if !metric.accepts(kind) {
            return Err(MetricError::KindMismatch { metric, kind });
        }
    }
    Ok(())
}

fn row_sq_norms(set: &EmbeddingSet) -> Result<Vec<f64>, MetricError> {
    (0..set.len())
        .map(|i| {
            let n = sq_norm(set.float_row(i).expect("row in range"));
            if n == 0.0 {
                Err(MetricError::ZeroVector)
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Per-query-row distance to the nearest target row, in query row order.
///
/// Rows are evaluated in parallel; each entry depends only on its own row, so
/// the output is identical for any thread count.
pub fn pairwise_min_profile(
    query: &EmbeddingSet,
    target: &EmbeddingSet,
    metric: PatchDistanceMetric,
) -> Result<Vec<f64>, MetricError> {
    check_sets(query, target, metric)?;
    let n = query.len();
    let m = target.len();
    match metric {
        PatchDistanceMetric::Cosine => {
            let q_norms = row_sq_norms(query)?;
            let t_norms = row_sq_norms(target)?;
            Ok((0..n)
                .into_par_iter()
                .map(|i| {
                    let q = query.float_row(i).expect("row in range");
                    (0..m)
                        .map(|j| {
                            let t = target.float_row(j).expect("row in range");
                            cosine_from_parts(dot(q, t), q_norms[i], t_norms[j])
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect())
        }
        PatchDistanceMetric::L2 => Ok((0..n)
            .into_par_iter()
            .map(|i| {
                let q = query.float_row(i).expect("row in range");
                (0..m)
                    .map(|j| l2(q, target.float_row(j).expect("row in range")))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()),
        PatchDistanceMetric::Hamming => Ok((0..n)
            .into_par_iter()
            .map(|i| {
                let q = query.packed_row(i).expect("row in range");
                let best = (0..m)
                    .map(|j| hamming_packed(q, target.packed_row(j).expect("row in range")))
                    .min()
                    .expect("target is non-empty");
                f64::from(best)
            })
            .collect()),
    }
}

/// Median of a list of values under the given even-count rule.
pub fn median(values: &[f64], rule: MedianRule) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        return Ok(sorted[mid]);
    }
    Ok(match rule {
        MedianRule::MidpointAverage => (sorted[mid - 1] + sorted[mid]) / 2.0,
        MedianRule::LowerMedian => sorted[mid - 1],
    })
}

/// Median over query patches of the distance to the nearest target patch.
pub fn median_of_min(
    query: &EmbeddingSet,
    target: &EmbeddingSet,
    metric: PatchDistanceMetric,
    rule: MedianRule,
) -> Result<f64, MetricError> {
    median(&pairwise_min_profile(query, target, metric)?, rule)
}
