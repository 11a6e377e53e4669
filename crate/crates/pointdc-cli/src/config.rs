//! Flat run configuration: one TOML file covers every pipeline stage, every
//! key has a default, and unknown keys are rejected so typos cannot silently
//! fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pointdc::distill::CmdConfig;
use pointdc::eval::ProbeConfig;
use pointdc::featnet::TransformSpec;
use pointdc::supervoxel::PartitionStrategy;
use pointdc::svc::SvcConfig;
use pointdc::synth::{default_palette, DatasetSpec, SceneSpec};

macro_rules! defaults {
    ($($fn_name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $fn_name() -> $ty { $value })*
    };
}

defaults! {
    seed: u64 = 0;
    scenes: usize = 8;
    classes: usize = 5;
    feature_dim: usize = 16;
    noise_sigma: f64 = 0.15;
    nuisance: f64 = 0.2;
    points_per_scene: usize = 4096;
    cameras: usize = 4;
    image_size: usize = 64;
    objects_min: usize = 6;
    objects_max: usize = 8;
    strategy: String = "grid".into();
    cell_size: f64 = 0.25;
    normal_deg: f64 = 25.0;
    color_tol: f64 = 0.1;
    min_segment: usize = 20;
    hidden: usize = 64;
    knn: usize = 8;
    cmd_epochs: usize = 30;
    cmd_lr: f64 = 1e-3;
    svc_iterations: usize = 3;
    svc_epochs: usize = 15;
    tau: f64 = 0.1;
    svc_lr: f64 = 5e-5;
    clusters: usize = 5;
    sphere: bool = true;
    use_nonparametric: bool = true;
    use_label_pooling: bool = true;
    kmeans_max_iters: usize = 100;
    kmeans_tol: f64 = 1e-9;
    color_jitter: f64 = 0.05;
    coord_noise_sigma: f64 = 0.01;
    rotation_min: f64 = 0.0;
    rotation_max: f64 = std::f64::consts::TAU;
    mirror_prob: f64 = 0.5;
    probe_epochs: usize = 60;
    probe_batch: usize = 64;
    probe_lr: f64 = 0.5;
}

/// Every tunable of the pipeline, flat so a config file reads like a table.
/// Defaults reproduce the reference benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // Scene generation.
    pub scenes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub nuisance: f64,
    pub points_per_scene: usize,
    pub cameras: usize,
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,

    // Super-voxel partitioning: "grid" or "region".
    pub strategy: String,
    pub cell_size: f64,
    pub normal_deg: f64,
    pub color_tol: f64,
    pub min_segment: usize,

    // Feature network.
    pub hidden: usize,
    pub knn: usize,

    // Distillation.
    pub cmd_epochs: usize,
    pub cmd_lr: f64,

    // Clustering loop.
    pub svc_iterations: usize,
    pub svc_epochs: usize,
    pub tau: f64,
    pub svc_lr: f64,
    pub clusters: usize,
    pub sphere: bool,
    pub use_nonparametric: bool,
    pub use_label_pooling: bool,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,

    // Training-time transforms.
    pub color_jitter: f64,
    pub coord_noise_sigma: f64,
    pub rotation_min: f64,
    pub rotation_max: f64,
    pub mirror_prob: f64,

    // Linear probe.
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: seed(),
            scenes: scenes(),
            classes: classes(),
            feature_dim: feature_dim(),
            noise_sigma: noise_sigma(),
            nuisance: nuisance(),
            points_per_scene: points_per_scene(),
            cameras: cameras(),
            image_size: image_size(),
            objects_min: objects_min(),
            objects_max: objects_max(),
            strategy: strategy(),
            cell_size: cell_size(),
            normal_deg: normal_deg(),
            color_tol: color_tol(),
            min_segment: min_segment(),
            hidden: hidden(),
            knn: knn(),
            cmd_epochs: cmd_epochs(),
            cmd_lr: cmd_lr(),
            svc_iterations: svc_iterations(),
            svc_epochs: svc_epochs(),
            tau: tau(),
            svc_lr: svc_lr(),
            clusters: clusters(),
            sphere: sphere(),
            use_nonparametric: use_nonparametric(),
            use_label_pooling: use_label_pooling(),
            kmeans_max_iters: kmeans_max_iters(),
            kmeans_tol: kmeans_tol(),
            color_jitter: color_jitter(),
            coord_noise_sigma: coord_noise_sigma(),
            rotation_min: rotation_min(),
            rotation_max: rotation_max(),
            mirror_prob: mirror_prob(),
            probe_epochs: probe_epochs(),
            probe_batch: probe_batch(),
            probe_lr: probe_lr(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; absent path means all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            format!(
                "invalid config {}: {}",
                path.display(),
                e.to_string().split('\n').collect::<Vec<_>>().join("; ")
            )
        })
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let reference = SceneSpec::benchmark();
        let mut density = vec![1.0; self.classes];
        if let Some(floor) = density.first_mut() {
            *floor = 10.0;
        }
        SceneSpec {
            classes: self.classes,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            density,
            base_colors: default_palette(self.classes),
            points_per_scene: self.points_per_scene,
            camera_count: self.cameras,
            image_size: self.image_size as u32,
            ..reference
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            scene: self.scene_spec(),
            scenes: self.scenes,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            nuisance: self.nuisance,
            seed: self.seed,
        }
    }

    pub fn partition_strategy(&self) -> Result<PartitionStrategy, String> {
        match self.strategy.as_str() {
            "grid" => Ok(PartitionStrategy::UniformGrid {
                cell_size: self.cell_size,
            }),
            "region" => Ok(PartitionStrategy::RegionGrow {
                normal_deg: self.normal_deg,
                color_tol: self.color_tol,
                min_size: self.min_segment,
            }),
            other => Err(format!(
                "unknown partition strategy `{other}` (expected grid or region)"
            )),
        }
    }

    pub fn transform_spec(&self) -> TransformSpec {
        TransformSpec {
            color_jitter: self.color_jitter,
            coord_noise_sigma: self.coord_noise_sigma,
            rotation_range: (self.rotation_min, self.rotation_max),
            mirror_prob: self.mirror_prob,
        }
    }

    pub fn cmd_config(&self) -> CmdConfig {
        CmdConfig {
            epochs: self.cmd_epochs,
            lr: self.cmd_lr,
            seed: self.seed,
            ..CmdConfig::default()
        }
    }

    pub fn svc_config(&self) -> SvcConfig {
        SvcConfig {
            iterations: self.svc_iterations,
            epochs_per_iteration: self.svc_epochs,
            clusters: self.clusters,
            tau: self.tau,
            lr: self.svc_lr,
            transform: self.transform_spec(),
            sphere: self.sphere,
            use_nonparametric: self.use_nonparametric,
            use_label_pooling: self.use_label_pooling,
            kmeans_max_iters: self.kmeans_max_iters,
            kmeans_tol: self.kmeans_tol,
            seed: self.seed,
            ..SvcConfig::default()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            batch_size: self.probe_batch,
            lr: self.probe_lr,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("svc_epocs = 3\n").unwrap_err();
        assert!(err.to_string().contains("svc_epocs"), "{err}");
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let config: RunConfig = toml::from_str("tau = 0.25\n").unwrap();
        assert_eq!(config.tau, 0.25);
        assert_eq!(config.scenes, RunConfig::default().scenes);
    }

    #[test]
    fn strategy_names_map_to_partitioners() {
        let mut config = RunConfig::default();
        assert!(matches!(
            config.partition_strategy().unwrap(),
            PartitionStrategy::UniformGrid { .. }
        ));
        config.strategy = "region".into();
        assert!(matches!(
            config.partition_strategy().unwrap(),
            PartitionStrategy::RegionGrow { .. }
        ));
        config.strategy = "voronoi".into();
        let err = config.partition_strategy().unwrap_err();
        assert!(err.contains("voronoi"), "{err}");
    }
}
