//! Runs the synthetic benchmark end to end and prints per-seed quality and
//! timing for every pipeline variant: the point-level DeepCluster baseline,
//! distillation alone, and distillation plus iterative clustering.
//!
//! Usage: `cargo run --release --example benchmark [seeds] [hidden] [tau] [lr] [epochs] [jitter] [noise] [nuisance] [diag] [nobase]`

use std::time::Instant;

use pointdc::cluster::Centroids;
use pointdc::distill::{run_cmd, CmdConfig, DistillScene};
use pointdc::eval::evaluate_predictions;
use pointdc::featnet::{Dense, PointFeatureNet};
use pointdc::supervoxel::{partition, PartitionStrategy, SuperVoxelPartition};
use pointdc::svc::{
    predict_labels, predict_with_head, run_baseline_deepcluster, SvcConfig, SvcScene, SvcTrainer,
};
use pointdc::synth::{generate_rendered_scenes, DatasetSpec, RenderedScene};
use pointdc::PointCloud;

fn dataset_metrics(
    net: &PointFeatureNet,
    scenes: &[SvcScene],
    centroids: &Centroids,
    head: Option<&Dense>,
    config: &SvcConfig,
) -> (f64, Vec<f64>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for scene in scenes {
        pred.extend(predict_labels(net, scene, centroids, head, config).unwrap());
        gt.extend(
            scene
                .cloud
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .map(|&l| l as usize),
        );
    }
    let report = evaluate_predictions(&pred, &gt, config.clusters).unwrap();
    let ious = report
        .classes
        .iter()
        .map(|c| c.iou.unwrap_or(f64::NAN))
        .collect();
    (report.miou, ious)
}

/// Prints a class-by-cluster point contingency table plus per-class voxel
/// visibility, the raw material for judging what the clustering got wrong.
fn print_diagnostics(
    net: &PointFeatureNet,
    rendered: &[RenderedScene],
    parts: &[SuperVoxelPartition],
    centroids: &Centroids,
    classes: usize,
) {
    let clusters = centroids.count();
    let mut table = vec![vec![0usize; clusters]; classes];
    let mut class_voxels = vec![0usize; classes];
    let mut class_visible = vec![0usize; classes];
    for (scene, part) in rendered.iter().zip(parts) {
        let (features, _) = net.forward(&scene.cloud).unwrap();
        let pooled = pointdc::supervoxel::pool_avg(&features, part).unwrap();
        let views: Vec<_> = scene
            .cameras
            .iter()
            .cloned()
            .zip(scene.views.iter().cloned())
            .collect();
        let targets =
            pointdc::distill::build_distill_targets(&scene.cloud, &views, part, true).unwrap();
        let labels = scene.cloud.labels.as_ref().unwrap();
        for v in 0..part.num_voxels() {
            let members = part.members(v);
            let mut votes = vec![0usize; classes];
            for &p in members {
                votes[labels[p] as usize] += 1;
            }
            let class = (0..classes).max_by_key(|&c| votes[c]).unwrap();
            class_voxels[class] += 1;
            if targets.voxel_mask[v] {
                class_visible[class] += 1;
            }
            let row = pooled.row(v);
            let cluster = (0..clusters)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(centroids.matrix.row(a))
                        .map(|(x, m)| (x - m) * (x - m))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(centroids.matrix.row(b))
                        .map(|(x, m)| (x - m) * (x - m))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            for &p in members {
                table[labels[p] as usize][cluster] += 1;
            }
        }
    }
    for class in 0..classes {
        println!(
            "  class {class}: voxels {:5} visible {:.2} points-by-cluster {:?}",
            class_voxels[class],
            class_visible[class] as f64 / class_voxels[class].max(1) as f64,
            table[class],
        );
    }
}

fn head_miou(net: &PointFeatureNet, head: &Dense, clouds: &[PointCloud], classes: usize) -> f64 {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for cloud in clouds {
        pred.extend(predict_with_head(net, head, cloud).unwrap());
        gt.extend(cloud.labels.as_ref().unwrap().iter().map(|&l| l as usize));
    }
    evaluate_predictions(&pred, &gt, classes).unwrap().miou
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let tau: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5e-5);
    let epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(15);
    let jitter: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let noise: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let nuisance: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let diag = args.iter().any(|s| s == "diag");
    let baseline_arm = !args.iter().any(|s| s == "nobase");

    for seed in 0..seeds {
        let total = Instant::now();
        let mut spec = DatasetSpec::benchmark(seed);
        spec.scene.color_jitter = jitter;
        spec.noise_sigma = noise;
        spec.nuisance = nuisance;
        let classes = spec.scene.classes;

        let t = Instant::now();
        let rendered: Vec<RenderedScene> = generate_rendered_scenes(&spec).unwrap();
        let parts: Vec<SuperVoxelPartition> = rendered
            .iter()
            .map(|s| {
                partition(&s.cloud, &PartitionStrategy::UniformGrid { cell_size: 0.25 }).unwrap()
            })
            .collect();
        let gen_time = t.elapsed();

        let svc_scenes: Vec<SvcScene> = rendered
            .iter()
            .zip(&parts)
            .map(|(s, p)| SvcScene {
                cloud: s.cloud.clone(),
                partition: p.clone(),
            })
            .collect();
        let clouds: Vec<PointCloud> = rendered.iter().map(|s| s.cloud.clone()).collect();
        let svc_config = SvcConfig {
            clusters: classes,
            seed,
            tau,
            lr,
            epochs_per_iteration: epochs,
            ..SvcConfig::default()
        };

        // Point-level DeepCluster baseline on a fresh net.
        let t = Instant::now();
        let baseline = if baseline_arm {
            let mut baseline_net =
                PointFeatureNet::new(hidden, 8, spec.feature_dim, true, seed).unwrap();
            let mut head = Dense::zeros(classes, spec.feature_dim);
            run_baseline_deepcluster(&mut baseline_net, &mut head, &clouds, &svc_config).unwrap();
            head_miou(&baseline_net, &head, &clouds, classes)
        } else {
            f64::NAN
        };
        let baseline_time = t.elapsed();

        // Cross-modal distillation.
        let t = Instant::now();
        let mut net = PointFeatureNet::new(hidden, 8, spec.feature_dim, true, seed).unwrap();
        let distill_scenes: Vec<DistillScene> = rendered
            .iter()
            .zip(&parts)
            .map(|(s, p)| DistillScene {
                cloud: s.cloud.clone(),
                partition: p.clone(),
                views: s.cameras.iter().cloned().zip(s.views.iter().cloned()).collect(),
            })
            .collect();
        let cmd_losses = run_cmd(&mut net, &distill_scenes, &CmdConfig { seed, ..CmdConfig::default() }).unwrap();
        let cmd_time = t.elapsed();

        // Distillation followed by clustering only (no self-training).
        let t = Instant::now();
        let mut cmd_only_net = net.clone();
        let cmd_only_config = SvcConfig {
            iterations: 1,
            epochs_per_iteration: 0,
            ..svc_config.clone()
        };
        let mut cmd_trainer =
            SvcTrainer::new(&mut cmd_only_net, &svc_scenes, cmd_only_config.clone()).unwrap();
        let cmd_report = cmd_trainer.run_iteration().unwrap();
        let (cmd_only, cmd_ious) = dataset_metrics(
            cmd_trainer.net(),
            &svc_scenes,
            cmd_trainer.centroids().unwrap(),
            None,
            &cmd_only_config,
        );
        let cmd_only_time = t.elapsed();
        println!(
            "seed {seed}: cmd-only occupancy {:?} ious {:?}",
            cmd_report.cluster_occupancy,
            cmd_ious.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>(),
        );
        if diag {
            print_diagnostics(
                cmd_trainer.net(),
                &rendered,
                &parts,
                cmd_trainer.centroids().unwrap(),
                classes,
            );
        }

        // Full loop, scoring after every iteration.
        let t = Instant::now();
        let mut trainer = SvcTrainer::new(&mut net, &svc_scenes, svc_config.clone()).unwrap();
        let mut trajectory = Vec::new();
        for _ in 0..svc_config.iterations {
            let report = trainer.run_iteration().unwrap();
            let (miou, ious) = dataset_metrics(
                trainer.net(),
                &svc_scenes,
                trainer.centroids().unwrap(),
                None,
                &svc_config,
            );
            trajectory.push(miou);
            println!(
                "seed {seed}: iter occupancy {:?} loss {:.4}->{:.4} ious {:?}",
                report.cluster_occupancy,
                report.epoch_losses.first().unwrap_or(&f64::NAN),
                report.epoch_losses.last().unwrap_or(&f64::NAN),
                ious.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>(),
            );
        }
        let svc_time = t.elapsed();

        println!(
            "seed {seed}: baseline {baseline:.4} | cmd-only {cmd_only:.4} | full {:?} | \
             cmd loss {:.4}->{:.4} | gen {gen_time:.1?} baseline {baseline_time:.1?} \
             cmd {cmd_time:.1?} cmd-only {cmd_only_time:.1?} svc {svc_time:.1?} total {:.1?}",
            trajectory
                .iter()
                .map(|m| (m * 1e5).round() / 1e5)
                .collect::<Vec<_>>(),
            cmd_losses.first().unwrap(),
            cmd_losses.last().unwrap(),
            total.elapsed()
        );
    }
}
