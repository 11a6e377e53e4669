//! Evaluation: Hungarian alignment of cluster ids to ground-truth classes,
//! IoU/accuracy metrics, and the linear probe.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featnet::Dense;
use crate::matrix::FeatureMatrix;

/// Prediction-by-ground-truth point counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(pred: &[usize], gt: &[usize], classes: usize) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions vs {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        if classes == 0 {
            return Err(Error::InvalidInput("need at least one class".into()));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= classes || g >= classes {
                return Err(Error::InvalidInput(format!(
                    "label pair ({p}, {g}) outside the {classes} configured classes"
                )));
            }
            counts[p][g] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred][gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Optimal assignment of prediction ids to ground-truth classes: the
/// permutation maximizing total matched counts, found by the O(C³)
/// potential-based augmenting-path algorithm on negated counts.
pub fn hungarian_match(conf: &ConfusionMatrix) -> Result<Vec<usize>> {
    let n = conf.classes();
    for row in &conf.counts {
        if row.len() != n {
            return Err(Error::ShapeMismatch(
                "confusion matrix must be square".into(),
            ));
        }
    }
    let cost = |i: usize, j: usize| -> i64 { -(conf.counts[i][j] as i64) };
    const INF: i64 = i64::MAX / 4;

    // 1-indexed arrays; p[j] is the row matched to column j.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Per-class tallies after matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub gt_total: u64,
    /// None when the class never occurs in either labeling.
    pub iou: Option<f64>,
    /// None when the class never occurs in the ground truth.
    pub class_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Mean IoU over classes present in prediction or ground truth.
    pub miou: f64,
    /// Overall point accuracy.
    pub accuracy: f64,
    /// Mean of per-class recall over classes present in the ground truth.
    pub mean_class_accuracy: f64,
    /// The prediction-to-ground-truth relabeling the report was computed
    /// under.
    pub permutation: Vec<usize>,
    pub total_points: u64,
}

/// Scores predictions against ground truth after relabeling them through
/// the given permutation.
pub fn segmentation_metrics(
    pred: &[usize],
    gt: &[usize],
    permutation: &[usize],
) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let c = permutation.len();
    {
        let mut seen = vec![false; c];
        for &t in permutation {
            if t >= c || seen[t] {
                return Err(Error::InvalidInput(
                    "matching must be a permutation of the class ids".into(),
                ));
            }
            seen[t] = true;
        }
    }

    let mut tp = vec![0u64; c];
    let mut fp = vec![0u64; c];
    let mut fn_ = vec![0u64; c];
    let mut gt_total = vec![0u64; c];
    let mut correct = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= c || g >= c {
            return Err(Error::InvalidInput(format!(
                "label pair ({p}, {g}) outside the {c} configured classes"
            )));
        }
        let mapped = permutation[p];
        gt_total[g] += 1;
        if mapped == g {
            tp[g] += 1;
            correct += 1;
        } else {
            fp[mapped] += 1;
            fn_[g] += 1;
        }
    }

    let mut classes = Vec::with_capacity(c);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_count = 0usize;
    for k in 0..c {
        let union = tp[k] + fp[k] + fn_[k];
        let iou = if union > 0 {
            let v = tp[k] as f64 / union as f64;
            iou_sum += v;
            iou_count += 1;
            Some(v)
        } else {
            None
        };
        let class_accuracy = if gt_total[k] > 0 {
            let v = tp[k] as f64 / gt_total[k] as f64;
            recall_sum += v;
            recall_count += 1;
            Some(v)
        } else {
            None
        };
        classes.push(ClassMetrics {
            true_positive: tp[k],
            false_positive: fp[k],
            false_negative: fn_[k],
            gt_total: gt_total[k],
            iou,
            class_accuracy,
        });
    }
    let total = pred.len() as u64;
    Ok(MetricsReport {
        classes,
        miou: if iou_count > 0 {
            iou_sum / iou_count as f64
        } else {
            0.0
        },
        accuracy: correct as f64 / total as f64,
        mean_class_accuracy: if recall_count > 0 {
            recall_sum / recall_count as f64
        } else {
            0.0
        },
        permutation: permutation.to_vec(),
        total_points: total,
    })
}

/// Confusion, matching, and metrics in one call.
pub fn evaluate_predictions(pred: &[usize], gt: &[usize], classes: usize) -> Result<MetricsReport> {
    let conf = ConfusionMatrix::from_labels(pred, gt, classes)?;
    let perm = hungarian_match(&conf)?;
    segmentation_metrics(pred, gt, &perm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Trains a linear classifier on frozen features against ground-truth
/// labels (seeded mini-batch gradient descent, softmax cross-entropy) and
/// scores it on a held-out 20% split.
pub fn linear_probe(
    features: &FeatureMatrix,
    gt: &[usize],
    config: &ProbeConfig,
) -> Result<(Dense, MetricsReport)> {
    let n = features.rows();
    if gt.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows vs {} labels",
            gt.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "probe needs at least two points to split".into(),
        ));
    }
    let classes = gt.iter().copied().max().map_or(0, |m| m + 1);
    {
        let first = gt[0];
        if gt.iter().all(|&g| g == first) {
            return Err(Error::InvalidInput(
                "ground truth has a single class; the probe is degenerate".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let eval_count = (n / 5).max(1);
    let (eval_idx, train_idx) = order.split_at(eval_count);

    let mut probe = Dense::zeros(classes, features.cols());
    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size.max(1)) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| features.row(i)).collect();
            let x = FeatureMatrix::from_rows(&rows)?;
            let logits = probe.forward(&x)?;
            let mut dlogits = FeatureMatrix::zeros(batch.len(), classes);
            let inv = 1.0 / batch.len() as f64;
            for (bi, &i) in batch.iter().enumerate() {
                let row = logits.row(bi);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (k, d) in dlogits.row_mut(bi).iter_mut().enumerate() {
                    let p = exps[k] / sum;
                    *d = (p - if gt[i] == k { 1.0 } else { 0.0 }) * inv;
                }
            }
            let (grads, _) = probe.backward(&x, &dlogits);
            probe.weight.axpy(-config.lr, &grads.weight);
            for (b, g) in probe.bias.iter_mut().zip(&grads.bias) {
                *b -= config.lr * g;
            }
        }
    }

    let eval_rows: Vec<&[f64]> = eval_idx.iter().map(|&i| features.row(i)).collect();
    let logits = probe.forward(&FeatureMatrix::from_rows(&eval_rows)?)?;
    let pred: Vec<usize> = (0..eval_idx.len())
        .map(|i| {
            let row = logits.row(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, &l) in row.iter().enumerate() {
                if l > best.0 {
                    best = (l, k);
                }
            }
            best.1
        })
        .collect();
    let eval_gt: Vec<usize> = eval_idx.iter().map(|&i| gt[i]).collect();
    let identity: Vec<usize> = (0..classes).collect();
    let report = segmentation_metrics(&pred, &eval_gt, &identity)?;
    Ok((probe, report))
}
