//! Super-voxel partitioning and the pooling/scatter operators that move
//! features between point and super-voxel resolution.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::cloud::{knn_indices, PointCloud};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

const NORMAL_NEIGHBORS: usize = 16;

/// How to split a cloud into super-voxels.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionStrategy {
    /// Points sharing the floor-quantized cell (x/cell, y/cell, z/cell)
    /// share a super-voxel.
    UniformGrid { cell_size: f64 },
    /// Flood fill over the k-NN graph, crossing an edge only when the
    /// estimated normals differ by less than `normal_deg` degrees and the
    /// RGB distance is below `color_tol`. Segments smaller than `min_size`
    /// are merged into the spatially nearest segment.
    RegionGrow {
        normal_deg: f64,
        color_tol: f64,
        min_size: usize,
    },
}

/// A total assignment of points to super-voxels with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperVoxelPartition {
    voxel_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl SuperVoxelPartition {
    /// Builds a partition from raw per-point labels, renumbering ids
    /// densely in first-occurrence order.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput(
                "partition needs at least one point".into(),
            ));
        }
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut voxel_of = Vec::with_capacity(labels.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (point, &raw) in labels.iter().enumerate() {
            let next = members.len();
            let id = *remap.entry(raw).or_insert(next);
            if id == members.len() {
                members.push(Vec::new());
            }
            members[id].push(point);
            voxel_of.push(id);
        }
        Ok(Self { voxel_of, members })
    }

    pub fn num_points(&self) -> usize {
        self.voxel_of.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.members.len()
    }

    pub fn voxel_of(&self) -> &[usize] {
        &self.voxel_of
    }

    pub fn members(&self, voxel: usize) -> &[usize] {
        &self.members[voxel]
    }
}

/// Splits the cloud into super-voxels; ids are densely numbered in
/// first-occurrence order over the point list.
pub fn partition(cloud: &PointCloud, strategy: &PartitionStrategy) -> Result<SuperVoxelPartition> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput(
            "cannot partition an empty cloud".into(),
        ));
    }
    match *strategy {
        PartitionStrategy::UniformGrid { cell_size } => {
            if !(cell_size > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "cell_size must be positive, got {cell_size}"
                )));
            }
            uniform_grid(cloud, cell_size)
        }
        PartitionStrategy::RegionGrow {
            normal_deg,
            color_tol,
            min_size,
        } => {
            if normal_deg < 0.0 || color_tol < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "region-grow thresholds must be non-negative, got normal_deg={normal_deg} color_tol={color_tol}"
                )));
            }
            region_grow(cloud, normal_deg, color_tol, min_size.max(1))
        }
    }
}

fn uniform_grid(cloud: &PointCloud, cell_size: f64) -> Result<SuperVoxelPartition> {
    let mut cell_ids: HashMap<[i64; 3], usize> = HashMap::new();
    let mut labels = Vec::with_capacity(cloud.len());
    for p in &cloud.positions {
        let cell = [
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
            (p[2] / cell_size).floor() as i64,
        ];
        let next = cell_ids.len();
        labels.push(*cell_ids.entry(cell).or_insert(next));
    }
    SuperVoxelPartition::from_labels(&labels)
}

fn region_grow(
    cloud: &PointCloud,
    normal_deg: f64,
    color_tol: f64,
    min_size: usize,
) -> Result<SuperVoxelPartition> {
    let n = cloud.len();
    let neighbors = knn_indices(&cloud.positions, NORMAL_NEIGHBORS);
    let normals = estimate_normals(&cloud.positions, &neighbors);
    let cos_tol = normal_deg.to_radians().cos();

    // PCA normals carry an arbitrary sign on vertical surfaces, so edges
    // compare the undirected angle.
    let edge_ok = |a: usize, b: usize| -> bool {
        let dot = normals[a].dot(&normals[b]).abs().min(1.0);
        if dot < cos_tol {
            return false;
        }
        let ca = cloud.colors[a];
        let cb = cloud.colors[b];
        let dist = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2))
            .sqrt();
        dist < color_tol
    };

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }

    let mut label = vec![usize::MAX; n];
    let mut segments = 0usize;
    let mut queue = Vec::new();
    for seed in 0..n {
        if label[seed] != usize::MAX {
            continue;
        }
        label[seed] = segments;
        queue.push(seed);
        while let Some(p) = queue.pop() {
            for &q in &adjacency[p] {
                if label[q] == usize::MAX && edge_ok(p, q) {
                    label[q] = segments;
                    queue.push(q);
                }
            }
        }
        segments += 1;
    }

    merge_small_segments(&mut label, segments, &cloud.positions, min_size);
    SuperVoxelPartition::from_labels(&label)
}

/// Repeatedly folds the smallest undersized segment into the segment of
/// its spatially nearest outside point.
fn merge_small_segments(label: &mut [usize], segments: usize, positions: &[[f64; 3]], min_size: usize) {
    let mut active = segments;
    loop {
        if active <= 1 {
            return;
        }
        let mut sizes: HashMap<usize, usize> = HashMap::new();
        for &l in label.iter() {
            *sizes.entry(l).or_insert(0) += 1;
        }
        let victim = label
            .iter()
            .map(|&l| (sizes[&l], l))
            .filter(|&(size, _)| size < min_size)
            .min();
        let Some((_, victim)) = victim else {
            return;
        };
        let mut best: Option<(f64, usize)> = None;
        for (i, &li) in label.iter().enumerate() {
            if li != victim {
                continue;
            }
            for (j, &lj) in label.iter().enumerate() {
                if lj == victim {
                    continue;
                }
                let d = crate::matrix::squared_distance(&positions[i], &positions[j]);
                let candidate = (d, lj);
                best = Some(match best {
                    None => candidate,
                    Some(b) if candidate < b => candidate,
                    Some(b) => b,
                });
            }
        }
        let Some((_, target)) = best else {
            return;
        };
        for l in label.iter_mut() {
            if *l == victim {
                *l = target;
            }
        }
        active -= 1;
    }
}

/// Plane normals by PCA over the neighborhood, oriented toward +z.
fn estimate_normals(positions: &[[f64; 3]], neighbors: &[Vec<usize>]) -> Vec<Vector3<f64>> {
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut pts: Vec<Vector3<f64>> = neighbors[i]
                .iter()
                .map(|&j| Vector3::from(positions[j]))
                .collect();
            pts.push(Vector3::from(*p));
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let mut cov = Matrix3::zeros();
            for q in &pts {
                let d = q - mean;
                cov += d * d.transpose();
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut smallest = 0;
            for a in 1..3 {
                if eig.eigenvalues[a] < eig.eigenvalues[smallest] {
                    smallest = a;
                }
            }
            let mut normal: Vector3<f64> = eig.eigenvectors.column(smallest).into();
            if normal.norm() > 0.0 {
                normal /= normal.norm();
            }
            if normal.z < 0.0 {
                -normal
            } else {
                normal
            }
        })
        .collect()
}

/// Row k = mean of the member rows of voxel k.
pub fn pool_avg(values: &FeatureMatrix, part: &SuperVoxelPartition) -> Result<FeatureMatrix> {
    if values.rows() != part.num_points() {
        return Err(Error::ShapeMismatch(format!(
            "pooling {} rows against a partition of {} points",
            values.rows(),
            part.num_points()
        )));
    }
    let mut out = FeatureMatrix::zeros(part.num_voxels(), values.cols());
    for k in 0..part.num_voxels() {
        let members = part.members(k);
        let row = out.row_mut(k);
        for &j in members {
            for (dst, src) in row.iter_mut().zip(values.row(j)) {
                *dst += src;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Fuses per-view point features: elementwise max across the views where a
/// point is visible, then a mean over the visible members of each voxel.
/// Voxels with no visible member come back zeroed with `voxel_mask` false.
pub fn pool_multiview(
    per_view: &[(FeatureMatrix, Vec<bool>)],
    part: &SuperVoxelPartition,
) -> Result<(FeatureMatrix, Vec<bool>)> {
    let Some((first, _)) = per_view.first() else {
        return Err(Error::InvalidInput("pooling requires at least one view".into()));
    };
    let n = part.num_points();
    let dim = first.cols();
    for (v, (features, mask)) in per_view.iter().enumerate() {
        if features.rows() != n || features.cols() != dim || mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "view {v} is {}x{} with {} mask entries, expected {n}x{dim}",
                features.rows(),
                features.cols(),
                mask.len()
            )));
        }
    }

    let mut fused = FeatureMatrix::zeros(n, dim);
    let mut point_visible = vec![false; n];
    for (features, mask) in per_view {
        for j in 0..n {
            if !mask[j] {
                continue;
            }
            let src = features.row(j);
            let dst = fused.row_mut(j);
            if point_visible[j] {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = d.max(*s);
                }
            } else {
                dst.copy_from_slice(src);
                point_visible[j] = true;
            }
        }
    }

    let mut pooled = FeatureMatrix::zeros(part.num_voxels(), dim);
    let mut voxel_mask = vec![false; part.num_voxels()];
    for k in 0..part.num_voxels() {
        let visible: Vec<usize> = part
            .members(k)
            .iter()
            .copied()
            .filter(|&j| point_visible[j])
            .collect();
        if visible.is_empty() {
            continue;
        }
        voxel_mask[k] = true;
        let row = pooled.row_mut(k);
        for &j in &visible {
            for (dst, src) in row.iter_mut().zip(fused.row(j)) {
                *dst += src;
            }
        }
        let inv = 1.0 / visible.len() as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((pooled, voxel_mask))
}

/// Row j = voxel_values[voxel_of[j]].
pub fn scatter_to_points(
    voxel_values: &FeatureMatrix,
    part: &SuperVoxelPartition,
) -> Result<FeatureMatrix> {
    if voxel_values.rows() != part.num_voxels() {
        return Err(Error::ShapeMismatch(format!(
            "scattering {} voxel rows against a partition of {} voxels",
            voxel_values.rows(),
            part.num_voxels()
        )));
    }
    let mut out = FeatureMatrix::zeros(part.num_points(), voxel_values.cols());
    for (j, &k) in part.voxel_of().iter().enumerate() {
        out.row_mut(j).copy_from_slice(voxel_values.row(k));
    }
    Ok(out)
}
