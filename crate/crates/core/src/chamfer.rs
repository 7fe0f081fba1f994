//! Chamfer distance between primitive-center point clouds.
//!
//! Convention: the sum over both directions of squared nearest-neighbour
//! distances, not normalized by point count.

use alloc::vec::Vec;

use crate::decode::SplatSet;
use crate::math;

/// Primitives with opacity above this belong to the point cloud.
pub const POINT_OPACITY: f64 = 0.01;

pub fn point_cloud(splats: &SplatSet, min_opacity: f64) -> Vec<[f64; 3]> {
    splats
        .primitives
        .iter()
        .filter(|p| p.opacity > min_opacity)
        .map(|p| p.position)
        .collect()
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn one_way(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Symmetric Chamfer distance. Two empty clouds are at distance 0; an empty
/// cloud against a nonempty one has no nearest neighbours and yields `None`.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Option<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => Some(one_way(a, b) + one_way(b, a)),
        _ => None,
    }
}

/// Mean, minimum and maximum of a set of distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn distance_stats(values: &[f64]) -> Option<DistanceStats> {
    if values.is_empty() {
        return None;
    }
    let (mean, _) = math::mean_std(values);
    Some(DistanceStats {
        mean,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: values.len(),
    })
}

/// Chamfer distances over all unordered pairs of `clouds`, in
/// lexicographic pair order. Pairs with an undefined distance are skipped.
pub fn pairwise_chamfer(clouds: &[Vec<[f64; 3]>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..clouds.len() {
        for j in i + 1..clouds.len() {
            if let Some(d) = chamfer_distance(&clouds[i], &clouds[j]) {
                out.push(d);
            }
        }
    }
    out
}
