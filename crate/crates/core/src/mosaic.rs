//! Mosaic selection: pick a small, representative subset of a slide's patches.
//!
//! Patches are grouped by k-means over their color descriptors; within each
//! group a fixed fraction of patches is chosen by farthest-point sampling on
//! slide coordinates, starting from the patch closest to the group's color
//! centroid. All ties resolve towards the smaller patch id, and patches are
//! processed in patch id order, so the result depends only on the set of input
//! patches and the seed.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PatchRecord;

/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Convergence threshold on the largest centroid shift between iterations.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MosaicError {
    #[error("no patches to cluster")]
    EmptyInput,
    #[error("patch {patch_id} has {found} color features, expected {expected}")]
    DimensionMismatch {
        patch_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("patch {patch_id} has a non-finite color feature")]
    NonFinite { patch_id: u64 },
    #[error("patch id {0} occurs more than once")]
    DuplicatePatchId(u64),
    #[error("invalid mosaic parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicParams {
    pub n_clusters: usize,
    pub selection_fraction: f64,
    pub min_per_cluster: usize,
    pub rng_seed: u64,
}

impl Default for MosaicParams {
    fn default() -> Self {
        Self {
            n_clusters: 9,
            selection_fraction: 0.15,
            min_per_cluster: 1,
            rng_seed: 42,
        }
    }
}

impl MosaicParams {
    pub fn validate(&self) -> Result<(), MosaicError> {
        if self.n_clusters == 0 {
            return Err(MosaicError::InvalidParams("n_clusters must be >= 1".into()));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(MosaicError::InvalidParams(format!(
                "selection_fraction must be in (0, 1], got {}",
                self.selection_fraction
            )));
        }
        if self.min_per_cluster == 0 {
            return Err(MosaicError::InvalidParams(
                "min_per_cluster must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of patches taken from a cluster of `size` patches.
    pub fn quota(&self, size: usize) -> usize {
        // f64::round rounds half away from zero.
        let scaled = (self.selection_fraction * size as f64).round() as usize;
        scaled.max(self.min_per_cluster).min(size)
    }
}

/// Result of clustering: per-patch cluster index (input order) and centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Input indices sorted by patch id, after checking feature shapes.
fn canonical_order(patches: &[PatchRecord]) -> Result<Vec<usize>, MosaicError> {
    let first = patches.first().ok_or(MosaicError::EmptyInput)?;
    let dim = first.color_features.len();
    for p in patches {
        if p.color_features.len() != dim {
            return Err(MosaicError::DimensionMismatch {
                patch_id: p.patch_id,
                expected: dim,
                found: p.color_features.len(),
            });
        }
        if p.color_features.iter().any(|v| !v.is_finite()) {
            return Err(MosaicError::NonFinite {
                patch_id: p.patch_id,
            });
        }
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by_key(|&i| patches[i].patch_id);
    if let Some(w) = order
        .windows(2)
        .find(|w| patches[w[0]].patch_id == patches[w[1]].patch_id)
    {
        return Err(MosaicError::DuplicatePatchId(patches[w[0]].patch_id));
    }
    Ok(order)
}

fn count_distinct(points: &[&[f64]]) -> usize {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    sorted.dedup_by(|a, b| lex_cmp(a, b).is_eq());
    sorted.len()
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            chosen = Some(i);
            if acc > target {
                break;
            }
        }
        let next = points[chosen.expect("positive total weight")].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }
    centroids
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Seeded k-means over color features.
///
/// `k = min(n_clusters, #distinct feature vectors)`. Cluster indices are
/// numbered by first appearance in patch id order, so the patch with the
/// smallest id is always in cluster 0.
pub fn cluster(
    patches: &[PatchRecord],
    n_clusters: usize,
    rng_seed: u64,
) -> Result<Clustering, MosaicError> {
    if n_clusters == 0 {
        return Err(MosaicError::InvalidParams("n_clusters must be >= 1".into()));
    }
    let order = canonical_order(patches)?;
    let points: Vec<&[f64]> = order
        .iter()
        .map(|&i| patches[i].color_features.as_slice())
        .collect();
    let dim = points[0].len();
    let k = n_clusters.min(count_distinct(&points));

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
    let mut labels: Vec<usize> = points
        .iter()
        .map(|p| nearest_centroid(p, &centroids))
        .collect();

    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(centroid, &updated).sqrt());
            *centroid = updated;
        }
        labels = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids))
            .collect();
        if shift <= CONVERGENCE_TOLERANCE {
            break;
        }
    }

    // Renumber by first appearance and drop clusters that ended up empty.
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for &c in &labels {
        if remap[c] == usize::MAX {
            remap[c] = kept.len();
            kept.push(centroids[c].clone());
        }
    }
    let mut assignment = vec![0; patches.len()];
    for (&input_idx, &c) in order.iter().zip(&labels) {
        assignment[input_idx] = remap[c];
    }
    Ok(Clustering {
        assignment,
        centroids: kept,
    })
}

/// Cluster index per patch, in input order.
pub fn cluster_patches(
    patches: &[PatchRecord],
    n_clusters: usize,
    rng_seed: u64,
) -> Result<Vec<usize>, MosaicError> {
    Ok(cluster(patches, n_clusters, rng_seed)?.assignment)
}

fn coord_sq_dist(a: &PatchRecord, b: &PatchRecord) -> i128 {
    let dx = i128::from(a.x) - i128::from(b.x);
    let dy = i128::from(a.y) - i128::from(b.y);
    dx.saturating_mul(dx).saturating_add(dy.saturating_mul(dy))
}

/// Farthest-point sampling over patch coordinates.
///
/// `members` must be sorted by patch id. Starts at `members[seed]` and returns
/// `count` positions into `members`.
pub fn farthest_point_sample(members: &[&PatchRecord], seed: usize, count: usize) -> Vec<usize> {
    let count = count.min(members.len());
    if count == 0 {
        return Vec::new();
    }
    let mut selected = vec![seed];
    let mut taken = vec![false; members.len()];
    taken[seed] = true;
    let mut min_d: Vec<i128> = members
        .iter()
        .map(|p| coord_sq_dist(p, members[seed]))
        .collect();
    while selected.len() < count {
        // Strict comparison keeps the smallest patch id among equal distances.
        let mut best: Option<usize> = None;
        for i in 0..members.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("count is capped at cluster size");
        taken[next] = true;
        selected.push(next);
        for (d, p) in min_d.iter_mut().zip(members) {
            *d = (*d).min(coord_sq_dist(p, members[next]));
        }
    }
    selected
}

/// Selects the mosaic of one slide. Returned patch ids are sorted ascending.
pub fn build_mosaic(
    patches: &[PatchRecord],
    params: &MosaicParams,
) -> Result<Vec<u64>, MosaicError> {
    params.validate()?;
    let clustering = cluster(patches, params.n_clusters, params.rng_seed)?;

    let mut by_cluster: Vec<Vec<&PatchRecord>> = vec![Vec::new(); clustering.centroids.len()];
    for (p, &c) in patches.iter().zip(&clustering.assignment) {
        by_cluster[c].push(p);
    }

    let mut mosaic = Vec::new();
    for members in &mut by_cluster {
        members.sort_by_key(|p| p.patch_id);
        let dim = members[0].color_features.len();
        let mut centroid = vec![0.0; dim];
        for p in members.iter() {
            for (c, v) in centroid.iter_mut().zip(&p.color_features) {
                *c += v;
            }
        }
        for c in &mut centroid {
            *c /= members.len() as f64;
        }
        let mut seed = 0;
        let mut seed_d = f64::INFINITY;
        for (i, p) in members.iter().enumerate() {
            let d = sq_dist(&p.color_features, &centroid);
            if d < seed_d {
                seed = i;
                seed_d = d;
            }
        }
        let quota = params.quota(members.len());
        mosaic.extend(
            farthest_point_sample(members, seed, quota)
                .into_iter()
                .map(|i| members[i].patch_id),
        );
    }
    mosaic.sort_unstable();
    Ok(mosaic)
}
