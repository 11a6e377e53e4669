//! Iterative super-voxel clustering: the self-training loop that refines
//! distilled features.
//!
//! Each iteration first runs K-means over the pooled super-voxel features
//! of the whole dataset, then trains the net for a number of epochs. One
//! epoch visits every scene: the untransformed cloud is classified against
//! the frozen centroids, the soft labels are pooled per voxel and hardened
//! into targets, the cloud is perturbed (appearance noise, then a gravity
//! rotation and optional mirror), and the net is updated by cross-entropy
//! between the transformed cloud's cosine logits and those targets.
//!
//! Two ablation switches match the structure of the full model: turning
//! `use_nonparametric` off trains a learnable linear head instead of the
//! centroid-cosine classifier, and turning `use_label_pooling` off keeps
//! per-point targets instead of per-voxel ones. The DeepCluster-style
//! baseline skips super-voxels and transforms entirely: point-level
//! K-means provides pseudo-labels for an ordinary classification loss.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::cluster::{
    harden, kmeans_fit, pool_soft_labels, soft_assign, Centroids, KmeansConfig, SoftLabels,
};
use crate::error::{Error, Result};
use crate::featnet::{
    adam_step, adam_step_dense, transform_equivariant, transform_invariant, AdamState, Dense,
    PointFeatureNet, TransformSpec,
};
use crate::matrix::{self, FeatureMatrix};
use crate::supervoxel::{pool_avg, SuperVoxelPartition};

/// One training scene: a cloud and its super-voxel partition.
#[derive(Debug, Clone)]
pub struct SvcScene {
    pub cloud: PointCloud,
    pub partition: SuperVoxelPartition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvcConfig {
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub clusters: usize,
    /// Softmax temperature of the cosine classifier.
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub transform: TransformSpec,
    /// Keep centroids on the unit sphere during K-means.
    pub sphere: bool,
    /// Off: a learnable linear head replaces the centroid-cosine
    /// classifier in the training loss.
    pub use_nonparametric: bool,
    /// Off: per-point targets instead of per-voxel ones.
    pub use_label_pooling: bool,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for SvcConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            epochs_per_iteration: 15,
            clusters: 5,
            tau: 0.1,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            transform: TransformSpec {
                color_jitter: 0.05,
                coord_noise_sigma: 0.01,
                rotation_range: (0.0, std::f64::consts::TAU),
                mirror_prob: 0.5,
            },
            sphere: true,
            use_nonparametric: true,
            use_label_pooling: true,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-9,
            seed: 0,
        }
    }
}

impl SvcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidInput("need at least one iteration".into()));
        }
        if self.clusters < 1 {
            return Err(Error::InvalidInput("need at least one cluster".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.kmeans_max_iters < 1 {
            return Err(Error::InvalidInput("K-means needs at least one sweep".into()));
        }
        self.transform.validate()
    }
}

/// What one clustering-plus-training iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SvcIterationReport {
    /// Final K-means objective over all pooled voxel features.
    pub kmeans_objective: f64,
    /// Rows assigned to each cluster at fit time.
    pub cluster_occupancy: Vec<usize>,
    /// Mean cross-entropy per epoch, over scenes.
    pub epoch_losses: Vec<f64>,
}

/// Softmax cross-entropy against integer targets; returns the mean loss
/// and the gradient with respect to the logits (already divided by the
/// row count).
fn softmax_ce(logits: &FeatureMatrix, targets: &[usize]) -> (f64, FeatureMatrix) {
    let n = logits.rows();
    let c = logits.cols();
    let mut dlogits = FeatureMatrix::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &l in row {
            z += (l - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[targets[i]];
        let drow = dlogits.row_mut(i);
        for (j, &l) in row.iter().enumerate() {
            drow[j] = ((l - log_z).exp() - if j == targets[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, dlogits)
}

/// Cross-entropy of the centroid-cosine classifier at temperature tau,
/// with the exact gradient through the cosine. Rows with zero norm get a
/// uniform prediction and no gradient.
fn cosine_ce(
    features: &FeatureMatrix,
    centroids: &Centroids,
    tau: f64,
    targets: &[usize],
) -> (f64, FeatureMatrix) {
    let n = features.rows();
    let c = centroids.count();
    let mut logits = FeatureMatrix::zeros(n, c);
    for i in 0..n {
        let row = features.row(i);
        for j in 0..c {
            logits.set(i, j, matrix::cosine_similarity(row, centroids.matrix.row(j)) / tau);
        }
    }
    let (loss, dlogits) = softmax_ce(&logits, targets);
    let mut dfeatures = FeatureMatrix::zeros(n, features.cols());
    for i in 0..n {
        let f = features.row(i);
        let f_norm = matrix::norm(f);
        if f_norm == 0.0 {
            continue;
        }
        let df = dfeatures.row_mut(i);
        for j in 0..c {
            let mu = centroids.matrix.row(j);
            let mu_norm = matrix::norm(mu);
            if mu_norm == 0.0 {
                continue;
            }
            let cos = logits.get(i, j) * tau;
            let scale = dlogits.get(i, j) / tau;
            for (d, (dv, (&fv, &mv))) in df.iter_mut().zip(f.iter().zip(mu)).enumerate() {
                let _ = d;
                *dv += scale * (mv / (f_norm * mu_norm) - cos * fv / (f_norm * f_norm));
            }
        }
    }
    (loss, dfeatures)
}

fn softmax_rows(logits: &FeatureMatrix) -> SoftLabels {
    let mut out = FeatureMatrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &l in row {
            z += (l - max).exp();
        }
        for (o, &l) in out.row_mut(i).iter_mut().zip(row) {
            *o = (l - max).exp() / z;
        }
    }
    SoftLabels { matrix: out }
}

/// Runs the iterative loop while keeping the state (centroids, optimizer,
/// rng, optional head) inspectable between iterations.
pub struct SvcTrainer<'a> {
    net: &'a mut PointFeatureNet,
    scenes: &'a [SvcScene],
    config: SvcConfig,
    centroids: Option<Centroids>,
    head: Option<Dense>,
    state: AdamState,
    head_state: Option<AdamState>,
    rng: ChaCha8Rng,
}

impl<'a> SvcTrainer<'a> {
    pub fn new(
        net: &'a mut PointFeatureNet,
        scenes: &'a [SvcScene],
        config: SvcConfig,
    ) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::InvalidInput("no scenes to train on".into()));
        }
        for (i, scene) in scenes.iter().enumerate() {
            if scene.partition.num_points() != scene.cloud.len() {
                return Err(Error::ShapeMismatch(format!(
                    "scene {i}: partition covers {} points, cloud has {}",
                    scene.partition.num_points(),
                    scene.cloud.len()
                )));
            }
        }
        let head = (!config.use_nonparametric).then(|| Dense::zeros(config.clusters, net.dim));
        let head_state = head.as_ref().map(AdamState::for_dense);
        let state = AdamState::for_net(net);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            net,
            scenes,
            config,
            centroids: None,
            head,
            state,
            head_state,
            rng,
        })
    }

    pub fn centroids(&self) -> Option<&Centroids> {
        self.centroids.as_ref()
    }

    pub fn head(&self) -> Option<&Dense> {
        self.head.as_ref()
    }

    pub fn net(&self) -> &PointFeatureNet {
        self.net
    }

    /// Pooled voxel features of every scene, stacked in scene order.
    fn pooled_features(&self) -> Result<FeatureMatrix> {
        let total: usize = self.scenes.iter().map(|s| s.partition.num_voxels()).sum();
        let mut stacked = FeatureMatrix::zeros(total, self.net.dim);
        let mut row = 0;
        for (i, scene) in self.scenes.iter().enumerate() {
            let (features, _) = self
                .net
                .forward(&scene.cloud)
                .map_err(|e| e.in_context(format!("scene {i}")))?;
            let pooled = pool_avg(&features, &scene.partition)?;
            for v in 0..pooled.rows() {
                stacked.row_mut(row).copy_from_slice(pooled.row(v));
                row += 1;
            }
        }
        Ok(stacked)
    }

    /// One K-means fit over all pooled voxel features, then the configured
    /// number of training epochs against the resulting centroids.
    pub fn run_iteration(&mut self) -> Result<SvcIterationReport> {
        let pooled = self.pooled_features()?;
        let kmeans_config = KmeansConfig {
            clusters: self.config.clusters,
            max_iters: self.config.kmeans_max_iters,
            tol: self.config.kmeans_tol,
            seed: self.config.seed,
            sphere: self.config.sphere,
        };
        let (centroids, assignments, trace) =
            kmeans_fit(&pooled, &kmeans_config, self.centroids.as_ref())?;
        let mut occupancy = vec![0usize; self.config.clusters];
        for &a in &assignments {
            occupancy[a] += 1;
        }
        self.centroids = Some(centroids);
        let mut epoch_losses = Vec::with_capacity(self.config.epochs_per_iteration);
        for e in 0..self.config.epochs_per_iteration {
            let loss = self
                .run_epoch()
                .map_err(|err| err.in_context(format!("epoch {e}")))?;
            epoch_losses.push(loss);
        }
        Ok(SvcIterationReport {
            kmeans_objective: *trace.last().expect("K-means always records its objective"),
            cluster_occupancy: occupancy,
            epoch_losses,
        })
    }

    /// One pass over all scenes; needs centroids from a prior
    /// `run_iteration`. Returns the mean per-scene loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        if self.centroids.is_none() {
            return Err(Error::InvalidInput(
                "cannot train before the first clustering pass has produced centroids".into(),
            ));
        }
        let mut total = 0.0;
        for i in 0..self.scenes.len() {
            total += self
                .train_scene(i)
                .map_err(|e| e.in_context(format!("scene {i}")))?;
        }
        Ok(total / self.scenes.len() as f64)
    }

    fn train_scene(&mut self, index: usize) -> Result<f64> {
        let scene = &self.scenes[index];
        let centroids = self.centroids.as_ref().expect("checked by run_epoch");

        let (features, _) = self.net.forward(&scene.cloud)?;
        let (soft, _) = soft_assign(&features, centroids, self.config.tau)?;
        let targets: Vec<usize> = if self.config.use_label_pooling {
            let pooled = pool_soft_labels(&soft, &scene.partition)?;
            let voxel_class = harden(&pooled);
            scene
                .partition
                .voxel_of()
                .iter()
                .map(|&v| voxel_class[v])
                .collect()
        } else {
            harden(&soft)
        };

        let perturbed = transform_invariant(&scene.cloud, &self.config.transform, &mut self.rng)?;
        let (transformed, _) =
            transform_equivariant(&perturbed, &self.config.transform, &mut self.rng)?;
        let (features_t, record) = self.net.forward(&transformed)?;

        let (loss, dfeatures, head_grads) = match &self.head {
            None => {
                let (loss, dfeatures) = cosine_ce(&features_t, centroids, self.config.tau, &targets);
                (loss, dfeatures, None)
            }
            Some(head) => {
                let logits = head.forward(&features_t)?;
                let (loss, dlogits) = softmax_ce(&logits, &targets);
                let (head_grads, dfeatures) = head.backward(&features_t, &dlogits);
                (loss, dfeatures, Some(head_grads))
            }
        };

        let grads = self.net.backward(&record, &dfeatures)?;
        adam_step(
            self.net,
            &grads,
            &mut self.state,
            self.config.lr,
            self.config.beta1,
            self.config.beta2,
            self.config.epsilon,
        )?;
        if let (Some(head), Some(head_grads), Some(head_state)) =
            (&mut self.head, head_grads, &mut self.head_state)
        {
            adam_step_dense(
                head,
                &head_grads,
                head_state,
                self.config.lr,
                self.config.beta1,
                self.config.beta2,
                self.config.epsilon,
            )?;
        }
        Ok(loss)
    }

    /// Labels one scene with the trained model.
    pub fn predict(&self, scene: &SvcScene) -> Result<Vec<usize>> {
        let centroids = self.centroids.as_ref().ok_or_else(|| {
            Error::InvalidInput(
                "cannot predict before the first clustering pass has produced centroids".into(),
            )
        })?;
        predict_labels(self.net, scene, centroids, self.head.as_ref(), &self.config)
    }
}

/// Per-point class labels: classify (by centroid cosine or head), then
/// optionally pool per voxel and harden so every voxel is labeled as one
/// class.
pub fn predict_labels(
    net: &PointFeatureNet,
    scene: &SvcScene,
    centroids: &Centroids,
    head: Option<&Dense>,
    config: &SvcConfig,
) -> Result<Vec<usize>> {
    if scene.partition.num_points() != scene.cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "partition covers {} points, cloud has {}",
            scene.partition.num_points(),
            scene.cloud.len()
        )));
    }
    let (features, _) = net.forward(&scene.cloud)?;
    let soft = match head {
        Some(h) => softmax_rows(&h.forward(&features)?),
        None => soft_assign(&features, centroids, config.tau)?.0,
    };
    if config.use_label_pooling {
        let pooled = pool_soft_labels(&soft, &scene.partition)?;
        let voxel_class = harden(&pooled);
        Ok(scene
            .partition
            .voxel_of()
            .iter()
            .map(|&v| voxel_class[v])
            .collect())
    } else {
        Ok(harden(&soft))
    }
}

/// The full loop: `iterations` rounds of clustering plus training.
/// Bit-reproducible for a fixed seed and initial net.
pub fn run_svc(
    net: &mut PointFeatureNet,
    scenes: &[SvcScene],
    config: &SvcConfig,
) -> Result<(Centroids, Option<Dense>, Vec<SvcIterationReport>)> {
    let mut trainer = SvcTrainer::new(net, scenes, config.clone())?;
    let mut reports = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations {
        reports.push(
            trainer
                .run_iteration()
                .map_err(|e| e.in_context(format!("iteration {i}")))?,
        );
    }
    let centroids = trainer
        .centroids()
        .expect("at least one iteration ran")
        .clone();
    let head = trainer.head().cloned();
    Ok((centroids, head, reports))
}

/// DeepCluster-style baseline: K-means over raw per-point features yields
/// pseudo-labels, and a linear head over the net is trained to predict
/// them. No super-voxels, no transforms.
pub fn run_baseline_deepcluster(
    net: &mut PointFeatureNet,
    head: &mut Dense,
    clouds: &[PointCloud],
    config: &SvcConfig,
) -> Result<(Centroids, Vec<SvcIterationReport>)> {
    config.validate()?;
    if clouds.is_empty() {
        return Err(Error::InvalidInput("no scenes to train on".into()));
    }
    if head.out_dim() != config.clusters || head.in_dim() != net.dim {
        return Err(Error::ShapeMismatch(format!(
            "head maps {}→{}, expected {}→{}",
            head.in_dim(),
            head.out_dim(),
            net.dim,
            config.clusters
        )));
    }
    let mut state = AdamState::for_net(net);
    let mut head_state = AdamState::for_dense(head);
    let mut centroids: Option<Centroids> = None;
    let mut reports = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let run = |e: Error| e.in_context(format!("iteration {iteration}"));

        let mut per_scene = Vec::with_capacity(clouds.len());
        for (i, cloud) in clouds.iter().enumerate() {
            let (features, _) = net
                .forward(cloud)
                .map_err(|e| run(e.in_context(format!("scene {i}"))))?;
            per_scene.push(features);
        }
        let total: usize = per_scene.iter().map(|f| f.rows()).sum();
        let mut stacked = FeatureMatrix::zeros(total, net.dim);
        let mut row = 0;
        for features in &per_scene {
            for i in 0..features.rows() {
                stacked.row_mut(row).copy_from_slice(features.row(i));
                row += 1;
            }
        }
        let kmeans_config = KmeansConfig {
            clusters: config.clusters,
            max_iters: config.kmeans_max_iters,
            tol: config.kmeans_tol,
            seed: config.seed,
            sphere: config.sphere,
        };
        let (fitted, assignments, trace) =
            kmeans_fit(&stacked, &kmeans_config, centroids.as_ref()).map_err(run)?;
        let mut occupancy = vec![0usize; config.clusters];
        for &a in &assignments {
            occupancy[a] += 1;
        }
        centroids = Some(fitted);

        let mut offsets = Vec::with_capacity(clouds.len());
        let mut start = 0;
        for features in &per_scene {
            offsets.push(start);
            start += features.rows();
        }

        let mut epoch_losses = Vec::with_capacity(config.epochs_per_iteration);
        for _ in 0..config.epochs_per_iteration {
            let mut total_loss = 0.0;
            for (i, cloud) in clouds.iter().enumerate() {
                let pseudo = &assignments[offsets[i]..offsets[i] + cloud.len()];
                let (features, record) = net
                    .forward(cloud)
                    .map_err(|e| run(e.in_context(format!("scene {i}"))))?;
                let logits = head.forward(&features).map_err(run)?;
                let (loss, dlogits) = softmax_ce(&logits, pseudo);
                let (head_grads, dfeatures) = head.backward(&features, &dlogits);
                let grads = net.backward(&record, &dfeatures).map_err(run)?;
                adam_step(
                    net,
                    &grads,
                    &mut state,
                    config.lr,
                    config.beta1,
                    config.beta2,
                    config.epsilon,
                )
                .map_err(run)?;
                adam_step_dense(
                    head,
                    &head_grads,
                    &mut head_state,
                    config.lr,
                    config.beta1,
                    config.beta2,
                    config.epsilon,
                )
                .map_err(run)?;
                total_loss += loss;
            }
            epoch_losses.push(total_loss / clouds.len() as f64);
        }
        reports.push(SvcIterationReport {
            kmeans_objective: *trace.last().expect("K-means always records its objective"),
            cluster_occupancy: occupancy,
            epoch_losses,
        });
    }
    Ok((centroids.expect("at least one iteration ran"), reports))
}

/// Per-point argmax of the baseline's linear head.
pub fn predict_with_head(
    net: &PointFeatureNet,
    head: &Dense,
    cloud: &PointCloud,
) -> Result<Vec<usize>> {
    let (features, _) = net.forward(cloud)?;
    let logits = head.forward(&features)?;
    Ok(harden(&softmax_rows(&logits)))
}
