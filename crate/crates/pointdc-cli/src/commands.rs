//! One function per subcommand, each writing a self-contained run directory:
//! the effective config, a `run.json` manifest, and the stage's artifacts.

use std::path::{Path, PathBuf};

use serde_json::json;

use pointdc::codec;
use pointdc::distill::{run_cmd, DistillScene};
use pointdc::eval::{evaluate_predictions, linear_probe, MetricsReport};
use pointdc::featnet::{Dense, PointFeatureNet};
use pointdc::supervoxel::{partition, SuperVoxelPartition};
use pointdc::svc::{
    predict_labels, predict_with_head, run_baseline_deepcluster, run_svc, SvcIterationReport,
    SvcScene,
};
use pointdc::synth::{generate_dataset, load_dataset, RenderedScene};
use pointdc::PointCloud;

use crate::config::RunConfig;

pub const PARTITIONS_MANIFEST: &str = "partitions.json";
pub const CHECKPOINT_NAME: &str = "checkpoint.pdck";
pub const METRICS_NAME: &str = "metrics.txt";

/// Flattens library errors to the single-line form the CLI promises.
fn flat(e: pointdc::Error) -> String {
    e.to_string().replace('\n', "; ")
}

/// Writes the effective config echo and the run manifest into `out`.
fn write_run_dir(
    out: &Path,
    config: &RunConfig,
    command: &str,
    details: serde_json::Value,
) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let echo = toml::to_string(config).map_err(|e| format!("cannot encode config: {e}"))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, echo)
        .map_err(|e| format!("cannot write {}: {e}", config_path.display()))?;
    let manifest = json!({
        "command": command,
        "seed": config.seed,
        "details": details,
    });
    let run_path = out.join("run.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| format!("cannot encode run manifest: {e}"))?;
    std::fs::write(&run_path, text)
        .map_err(|e| format!("cannot write {}: {e}", run_path.display()))?;
    Ok(())
}

fn iteration_details(reports: &[SvcIterationReport]) -> serde_json::Value {
    json!(reports
        .iter()
        .map(|r| json!({
            "kmeans_objective": r.kmeans_objective,
            "cluster_occupancy": r.cluster_occupancy,
            "epoch_losses": r.epoch_losses,
        }))
        .collect::<Vec<_>>())
}

fn load_scenes(data: &Path) -> Result<Vec<RenderedScene>, String> {
    let (_, scenes) = load_dataset(data).map_err(flat)?;
    Ok(scenes)
}

fn load_partitions(dir: &Path, expected: usize) -> Result<Vec<SuperVoxelPartition>, String> {
    let path = dir.join(PARTITIONS_MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let files: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| format!("malformed partitions manifest {}: {e}", path.display()))?;
    if files.len() != expected {
        return Err(format!(
            "dataset has {expected} scenes but {} lists {} partitions",
            path.display(),
            files.len()
        ));
    }
    files
        .iter()
        .map(|name| codec::load_partition(dir.join(name)).map_err(flat))
        .collect()
}

fn load_checkpoint(path: Option<&Path>) -> Result<codec::Checkpoint, String> {
    let Some(path) = path else {
        return Err("missing checkpoint: pass --checkpoint with a trained model".into());
    };
    if !path.exists() {
        return Err(format!("missing checkpoint: {} does not exist", path.display()));
    }
    codec::load_checkpoint(path).map_err(flat)
}

fn ground_truth(scenes: &[RenderedScene]) -> Result<Vec<usize>, String> {
    let mut gt = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let labels = scene
            .cloud
            .labels
            .as_ref()
            .ok_or_else(|| format!("scene {i} has no ground-truth labels"))?;
        gt.extend(labels.iter().map(|&l| l as usize));
    }
    Ok(gt)
}

fn svc_scenes(
    scenes: &[RenderedScene],
    partitions: &[SuperVoxelPartition],
) -> Vec<SvcScene> {
    scenes
        .iter()
        .zip(partitions)
        .map(|(scene, part)| SvcScene {
            cloud: scene.cloud.clone(),
            partition: part.clone(),
        })
        .collect()
}

pub fn synth(config: &RunConfig, out: &Path) -> Result<(), String> {
    let spec = config.dataset_spec();
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let manifest = generate_dataset(&spec, out).map_err(flat)?;
    write_run_dir(
        out,
        config,
        "synth",
        json!({ "scenes": manifest.scenes.len() }),
    )?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

pub fn partition_cmd(config: &RunConfig, data: &Path, out: &Path) -> Result<(), String> {
    let strategy = config.partition_strategy()?;
    let scenes = load_scenes(data)?;
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let mut files = Vec::with_capacity(scenes.len());
    let mut voxel_counts = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let part = partition(&scene.cloud, &strategy)
            .map_err(|e| format!("scene {i}: {}", flat(e)))?;
        let name = format!("partition_{i:03}.pdsv");
        codec::save_partition(out.join(&name), &part).map_err(flat)?;
        voxel_counts.push(part.num_voxels());
        files.push(name);
    }
    let manifest_path = out.join(PARTITIONS_MANIFEST);
    let text = serde_json::to_string_pretty(&files)
        .map_err(|e| format!("cannot encode partitions manifest: {e}"))?;
    std::fs::write(&manifest_path, text)
        .map_err(|e| format!("cannot write {}: {e}", manifest_path.display()))?;
    write_run_dir(
        out,
        config,
        "partition",
        json!({ "voxel_counts": voxel_counts }),
    )?;
    println!("partitioned {} scenes into {}", files.len(), out.display());
    Ok(())
}

pub fn distill(
    config: &RunConfig,
    data: &Path,
    partitions: &Path,
    out: &Path,
) -> Result<(), String> {
    let scenes = load_scenes(data)?;
    let parts = load_partitions(partitions, scenes.len())?;
    let distill_scenes: Vec<DistillScene> = scenes
        .iter()
        .zip(&parts)
        .map(|(scene, part)| DistillScene {
            cloud: scene.cloud.clone(),
            partition: part.clone(),
            views: scene
                .cameras
                .iter()
                .cloned()
                .zip(scene.views.iter().cloned())
                .collect(),
        })
        .collect();
    let mut net = PointFeatureNet::new(
        config.hidden,
        config.knn,
        config.feature_dim,
        true,
        config.seed,
    )
    .map_err(flat)?;
    let losses = run_cmd(&mut net, &distill_scenes, &config.cmd_config()).map_err(flat)?;
    let checkpoint = codec::Checkpoint {
        net,
        centroids: None,
        head: None,
    };
    codec::save_checkpoint(out_checkpoint(out)?, &checkpoint).map_err(flat)?;
    write_run_dir(out, config, "distill", json!({ "epoch_losses": losses }))?;
    println!(
        "distilled {} epochs, loss {:.6} -> {:.6}",
        config.cmd_epochs,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

pub fn svc(
    config: &RunConfig,
    data: &Path,
    partitions: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), String> {
    let scenes = load_scenes(data)?;
    let parts = load_partitions(partitions, scenes.len())?;
    let mut ckpt = load_checkpoint(checkpoint)?;
    let training = svc_scenes(&scenes, &parts);
    let (centroids, head, reports) =
        run_svc(&mut ckpt.net, &training, &config.svc_config()).map_err(flat)?;
    let trained = codec::Checkpoint {
        net: ckpt.net,
        centroids: Some(centroids),
        head,
    };
    codec::save_checkpoint(out_checkpoint(out)?, &trained).map_err(flat)?;
    write_run_dir(
        out,
        config,
        "svc",
        json!({ "iterations": iteration_details(&reports) }),
    )?;
    println!(
        "clustered {} iterations of {} epochs",
        config.svc_iterations, config.svc_epochs
    );
    Ok(())
}

pub fn baseline(config: &RunConfig, data: &Path, out: &Path) -> Result<(), String> {
    let scenes = load_scenes(data)?;
    let clouds: Vec<PointCloud> = scenes.iter().map(|s| s.cloud.clone()).collect();
    let mut net = PointFeatureNet::new(
        config.hidden,
        config.knn,
        config.feature_dim,
        true,
        config.seed,
    )
    .map_err(flat)?;
    let mut head = Dense::zeros(config.clusters, config.feature_dim);
    let (_, reports) =
        run_baseline_deepcluster(&mut net, &mut head, &clouds, &config.svc_config())
            .map_err(flat)?;
    let checkpoint = codec::Checkpoint {
        net,
        centroids: None,
        head: Some(head),
    };
    codec::save_checkpoint(out_checkpoint(out)?, &checkpoint).map_err(flat)?;
    write_run_dir(
        out,
        config,
        "baseline",
        json!({ "iterations": iteration_details(&reports) }),
    )?;
    println!(
        "trained baseline for {} iterations of {} epochs",
        config.svc_iterations, config.svc_epochs
    );
    Ok(())
}

/// Predictions for every point of every scene, ordered scene by scene. A
/// checkpoint with centroids predicts through pooled soft labels and needs
/// partitions; a head-only checkpoint classifies points directly.
fn predict_dataset(
    config: &RunConfig,
    ckpt: &codec::Checkpoint,
    scenes: &[RenderedScene],
    partitions: Option<&Path>,
) -> Result<Vec<usize>, String> {
    if let Some(centroids) = &ckpt.centroids {
        let Some(partitions) = partitions else {
            return Err(
                "checkpoint carries centroids; pass --partitions to pool predictions".into(),
            );
        };
        let parts = load_partitions(partitions, scenes.len())?;
        let svc_config = config.svc_config();
        let mut pred = Vec::new();
        for scene in svc_scenes(scenes, &parts) {
            pred.extend(
                predict_labels(&ckpt.net, &scene, centroids, ckpt.head.as_ref(), &svc_config)
                    .map_err(flat)?,
            );
        }
        Ok(pred)
    } else if let Some(head) = &ckpt.head {
        let mut pred = Vec::new();
        for scene in scenes {
            pred.extend(predict_with_head(&ckpt.net, head, &scene.cloud).map_err(flat)?);
        }
        Ok(pred)
    } else {
        Err("checkpoint has neither centroids nor a classifier head".into())
    }
}

pub fn eval(
    config: &RunConfig,
    data: &Path,
    partitions: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), String> {
    let scenes = load_scenes(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let pred = predict_dataset(config, &ckpt, &scenes, partitions)?;
    let gt = ground_truth(&scenes)?;
    let classes = config.clusters.max(config.classes);
    let report = evaluate_predictions(&pred, &gt, classes).map_err(flat)?;
    write_report(config, out, "eval", &report)
}

pub fn probe(
    config: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), String> {
    let scenes = load_scenes(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let gt = ground_truth(&scenes)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for scene in &scenes {
        let (scene_features, _) = ckpt.net.forward(&scene.cloud).map_err(flat)?;
        rows.extend(scene_features.iter_rows().map(|r| r.to_vec()));
    }
    let features = pointdc::FeatureMatrix::from_rows(&rows).map_err(flat)?;
    let (_, report) = linear_probe(&features, &gt, &config.probe_config()).map_err(flat)?;
    write_report(config, out, "probe", &report)
}

fn write_report(
    config: &RunConfig,
    out: &Path,
    command: &str,
    report: &MetricsReport,
) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    codec::save_metrics(out.join(METRICS_NAME), report).map_err(flat)?;
    write_run_dir(
        out,
        config,
        command,
        json!({
            "miou": report.miou,
            "accuracy": report.accuracy,
            "mean_class_accuracy": report.mean_class_accuracy,
        }),
    )?;
    println!(
        "{command}: miou {:.4} accuracy {:.4} over {} points",
        report.miou, report.accuracy, report.total_points
    );
    Ok(())
}

fn out_checkpoint(out: &Path) -> Result<PathBuf, String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    Ok(out.join(CHECKPOINT_NAME))
}
