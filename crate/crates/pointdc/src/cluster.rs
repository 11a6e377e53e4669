//! K-means over super-voxel features, cosine soft assignment against the
//! centroids, label pooling, and hardening.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{self, FeatureMatrix};
use crate::supervoxel::{pool_avg, SuperVoxelPartition};

/// Cluster centroids, one row per cluster. In sphere mode every row is kept
/// on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub matrix: FeatureMatrix,
    pub sphere: bool,
}

impl Centroids {
    pub fn count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.matrix.is_finite() {
            return Err(Error::InvalidInput("centroids contain non-finite values".into()));
        }
        if self.sphere {
            for c in 0..self.count() {
                let n = matrix::norm(self.matrix.row(c));
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "sphere-mode centroid {c} has norm {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-row probability distributions over clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub matrix: FeatureMatrix,
}

impl SoftLabels {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn classes(&self) -> usize {
        self.matrix.cols()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows() {
            let row = self.matrix.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidInput(format!(
                    "label row {i} leaves [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "label row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub clusters: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub sphere: bool,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            clusters: 2,
            max_iters: 100,
            tol: 1e-9,
            seed: 0,
            sphere: true,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding (or a warm start). Returns the
/// centroids, per-row assignments, and the objective value recorded after
/// every assignment step.
pub fn kmeans_fit(
    features: &FeatureMatrix,
    config: &KmeansConfig,
    warm_start: Option<&Centroids>,
) -> Result<(Centroids, Vec<usize>, Vec<f64>)> {
    let r = features.rows();
    let d = features.cols();
    let c = config.clusters;
    if c == 0 {
        return Err(Error::InvalidInput("cluster count must be positive".into()));
    }
    if r < c {
        return Err(Error::InvalidInput(format!(
            "{r} rows cannot support {c} clusters"
        )));
    }
    if !features.is_finite() {
        return Err(Error::InvalidInput("features contain non-finite values".into()));
    }

    let mut centroids = match warm_start {
        Some(start) => {
            if start.count() != c || start.dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "warm start is {}x{}, expected {c}x{d}",
                    start.count(),
                    start.dim()
                )));
            }
            start.matrix.clone()
        }
        None => kmeans_plus_plus(features, c, config.seed),
    };

    let mut assignments = vec![0usize; r];
    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;
    for _ in 0..config.max_iters {
        let mut objective = 0.0;
        let mut changed = false;
        for i in 0..r {
            let row = features.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..c {
                let dist = matrix::squared_distance(row, centroids.row(k));
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            objective += best.0;
            if assignments[i] != best.1 {
                assignments[i] = best.1;
                changed = true;
            }
        }
        trace.push(objective);
        if trace.len() > 1 && prev_obj - objective < config.tol {
            break;
        }
        prev_obj = objective;

        let mut sums = FeatureMatrix::zeros(c, d);
        let mut counts = vec![0usize; c];
        for (i, &k) in assignments.iter().enumerate() {
            counts[k] += 1;
            for (dst, src) in sums.row_mut(k).iter_mut().zip(features.row(i)) {
                *dst += src;
            }
        }
        let mut reseeded = false;
        for k in 0..c {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                for v in sums.row_mut(k).iter_mut() {
                    *v *= inv;
                }
            } else {
                let far = farthest_point(features, &centroids, &assignments);
                sums.row_mut(k).copy_from_slice(features.row(far));
                reseeded = true;
            }
            if config.sphere {
                let norm = matrix::norm(sums.row(k));
                if norm > 0.0 {
                    for v in sums.row_mut(k).iter_mut() {
                        *v /= norm;
                    }
                } else if counts[k] > 0 {
                    // A zero mean direction carries no information; restart
                    // the cluster somewhere useful.
                    let far = farthest_point(features, &centroids, &assignments);
                    sums.row_mut(k).copy_from_slice(features.row(far));
                    let norm = matrix::norm(sums.row(k));
                    if norm > 0.0 {
                        for v in sums.row_mut(k).iter_mut() {
                            *v /= norm;
                        }
                    }
                    reseeded = true;
                }
            }
        }
        if !changed && !reseeded && trace.len() > 1 {
            break;
        }
        centroids = sums;
    }

    let centroids = Centroids {
        matrix: centroids,
        sphere: config.sphere,
    };
    Ok((centroids, assignments, trace))
}

/// Index of the row farthest from its assigned centroid; ties break low.
fn farthest_point(
    features: &FeatureMatrix,
    centroids: &FeatureMatrix,
    assignments: &[usize],
) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &k) in assignments.iter().enumerate() {
        let dist = matrix::squared_distance(features.row(i), centroids.row(k));
        if dist > best.0 {
            best = (dist, i);
        }
    }
    best.1
}

/// k-means++ seeding: first pick uniform, later picks weighted by squared
/// distance to the nearest chosen centroid.
fn kmeans_plus_plus(features: &FeatureMatrix, c: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = features.rows();
    let mut chosen = Vec::with_capacity(c);
    chosen.push(rng.gen_range(0..r));
    let mut min_dist: Vec<f64> = (0..r)
        .map(|i| matrix::squared_distance(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < c {
        let total: f64 = min_dist.iter().sum();
        let next = if total > 0.0 {
            let mut ticket = rng.gen_range(0.0..total);
            let mut pick = r - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                if ticket < w {
                    pick = i;
                    break;
                }
                ticket -= w;
            }
            pick
        } else {
            // All remaining mass is zero: duplicate data; any row works.
            rng.gen_range(0..r)
        };
        chosen.push(next);
        for i in 0..r {
            let dist = matrix::squared_distance(features.row(i), features.row(next));
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
        }
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| features.row(i)).collect();
    FeatureMatrix::from_rows(&rows).expect("uniform row widths")
}

/// Softmax over cosine similarities to each centroid at temperature τ.
/// Zero-norm feature rows get a uniform distribution; their indices are
/// returned so callers can log them.
pub fn soft_assign(
    features: &FeatureMatrix,
    centroids: &Centroids,
    tau: f64,
) -> Result<(SoftLabels, Vec<usize>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if features.cols() != centroids.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, centroids {}",
            features.cols(),
            centroids.dim()
        )));
    }
    let n = features.rows();
    let c = centroids.count();
    let mut out = FeatureMatrix::zeros(n, c);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let row = features.row(i);
        let dst = out.row_mut(i);
        if matrix::norm(row) == 0.0 {
            dst.fill(1.0 / c as f64);
            degenerate.push(i);
            continue;
        }
        for (k, p) in dst.iter_mut().enumerate() {
            *p = matrix::cosine_similarity(row, centroids.matrix.row(k)) / tau;
        }
        let max = dst.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in dst.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in dst.iter_mut() {
            *p /= sum;
        }
    }
    Ok((SoftLabels { matrix: out }, degenerate))
}

/// Averages point-level soft labels over each super-voxel; rows stay on the
/// probability simplex.
pub fn pool_soft_labels(
    point_labels: &SoftLabels,
    part: &SuperVoxelPartition,
) -> Result<SoftLabels> {
    let pooled = pool_avg(&point_labels.matrix, part)?;
    Ok(SoftLabels { matrix: pooled })
}

/// Per-row argmax; ties break toward the lowest class index.
pub fn harden(soft: &SoftLabels) -> Vec<usize> {
    (0..soft.rows())
        .map(|i| {
            let row = soft.matrix.row(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, &p) in row.iter().enumerate() {
                if p > best.0 {
                    best = (p, k);
                }
            }
            best.1
        })
        .collect()
}
