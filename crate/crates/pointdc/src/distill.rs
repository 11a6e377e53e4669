//! Cross-modal distillation: multi-view feature maps are lifted onto the
//! cloud, pooled into per-super-voxel targets, and the feature net is
//! regressed onto them.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::featnet::{adam_step, AdamState, PointFeatureNet};
use crate::geometry::{lift_pixel_features, project_points, zbuffer_visibility, CameraModel};
use crate::matrix::{FeatureImage, FeatureMatrix};
use crate::supervoxel::{pool_avg, pool_multiview, SuperVoxelPartition};

/// Per-super-voxel regression targets; masked rows are zero and excluded
/// from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargets {
    pub features: FeatureMatrix,
    pub voxel_mask: Vec<bool>,
}

/// One training scene: the cloud, its partition, and posed feature maps.
#[derive(Debug, Clone)]
pub struct DistillScene {
    pub cloud: PointCloud,
    pub partition: SuperVoxelPartition,
    pub views: Vec<(CameraModel, FeatureImage)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Builds the per-voxel targets for one scene: lift each view's pixels onto
/// the points it sees, take the per-point max over views, then the mean
/// over each voxel's visible members. Rows are L2-normalized when the net
/// being distilled normalizes its outputs.
pub fn build_distill_targets(
    scene: &PointCloud,
    views: &[(CameraModel, FeatureImage)],
    part: &SuperVoxelPartition,
    normalize: bool,
) -> Result<DistillTargets> {
    if views.is_empty() {
        return Err(Error::InvalidInput(
            "distillation needs at least one view".into(),
        ));
    }
    if scene.len() != part.num_points() {
        return Err(Error::ShapeMismatch(format!(
            "scene has {} points, partition covers {}",
            scene.len(),
            part.num_points()
        )));
    }
    let mut lifted = Vec::with_capacity(views.len());
    for (v, (camera, image)) in views.iter().enumerate() {
        if camera.width as usize != image.width || camera.height as usize != image.height {
            return Err(Error::ShapeMismatch(format!(
                "view {v}: camera is {}x{}, feature map is {}x{}",
                camera.height, camera.width, image.height, image.width
            )));
        }
        let projections = project_points(scene, camera)?;
        let vis = zbuffer_visibility(&projections, camera);
        lifted.push(lift_pixel_features(&vis, image, scene.len())?);
    }
    let (mut features, voxel_mask) = pool_multiview(&lifted, part)?;
    if normalize {
        features.normalize_rows();
    }
    Ok(DistillTargets {
        features,
        voxel_mask,
    })
}

/// Mean squared distance between pooled point features and the visible
/// targets, with its exact gradient in point-feature space.
pub fn cmd_loss_and_grad(
    point_features: &FeatureMatrix,
    part: &SuperVoxelPartition,
    targets: &DistillTargets,
) -> Result<(f64, FeatureMatrix)> {
    if targets.features.rows() != part.num_voxels()
        || targets.voxel_mask.len() != part.num_voxels()
    {
        return Err(Error::ShapeMismatch(format!(
            "targets cover {} voxels, partition has {}",
            targets.features.rows(),
            part.num_voxels()
        )));
    }
    if point_features.cols() != targets.features.cols() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, targets {}",
            point_features.cols(),
            targets.features.cols()
        )));
    }
    let pooled = pool_avg(point_features, part)?;
    let visible = targets.voxel_mask.iter().filter(|&&m| m).count();
    if visible == 0 {
        return Err(Error::InvalidInput(
            "no super-voxel is visible in any view; the loss is undefined".into(),
        ));
    }

    let dim = point_features.cols();
    let inv_vis = 1.0 / visible as f64;
    let mut loss = 0.0;
    let mut voxel_grad = FeatureMatrix::zeros(part.num_voxels(), dim);
    for k in 0..part.num_voxels() {
        if !targets.voxel_mask[k] {
            continue;
        }
        let diff: Vec<f64> = pooled
            .row(k)
            .iter()
            .zip(targets.features.row(k))
            .map(|(p, t)| p - t)
            .collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>() * inv_vis;
        let scale = 2.0 * inv_vis / part.members(k).len() as f64;
        for (g, d) in voxel_grad.row_mut(k).iter_mut().zip(&diff) {
            *g = scale * d;
        }
    }

    let mut grad = FeatureMatrix::zeros(point_features.rows(), dim);
    for (j, &k) in part.voxel_of().iter().enumerate() {
        grad.row_mut(j).copy_from_slice(voxel_grad.row(k));
    }
    Ok((loss, grad))
}

/// Distills the net onto the scenes' visual targets. Targets are built once
/// up front; scenes are visited in a freshly shuffled order each epoch.
/// Returns the per-epoch mean loss.
pub fn run_cmd(
    net: &mut PointFeatureNet,
    scenes: &[DistillScene],
    config: &CmdConfig,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no scenes to distill on".into()));
    }
    let mut targets = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let t = build_distill_targets(
            &scene.cloud,
            &scene.views,
            &scene.partition,
            net.normalize_output,
        )
        .map_err(|e| e.in_context(format!("scene {i}")))?;
        targets.push(t);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::for_net(net);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let scene = &scenes[i];
            let mut step = || -> Result<f64> {
                let (features, record) = net.forward(&scene.cloud)?;
                let (loss, fgrad) = cmd_loss_and_grad(&features, &scene.partition, &targets[i])?;
                let grads = net.backward(&record, &fgrad)?;
                adam_step(
                    net,
                    &grads,
                    &mut state,
                    config.lr,
                    config.beta1,
                    config.beta2,
                    config.epsilon,
                )?;
                Ok(loss)
            };
            epoch_loss += step().map_err(|e| e.in_context(format!("scene {i}")))?;
        }
        trace.push(epoch_loss / scenes.len() as f64);
    }
    Ok(trace)
}
