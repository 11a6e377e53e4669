//! Point feature network with analytic gradients, the Adam optimizer, and
//! the stochastic cloud transforms used during clustering.
//!
//! Architecture: per-point input map (6→h, ReLU), two context blocks that
//! concatenate each point's hidden state with the mean over its k nearest
//! neighbors (2h→h, ReLU), and a linear head (h→D) with optional row L2
//! normalization. Inputs are bounding-box-normalized XYZ plus RGB.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::prelude::*;
use rand_distr::Normal;

use crate::cloud::{knn_indices, PointCloud};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

static NET_IDS: AtomicU64 = AtomicU64::new(1);

/// Linear layer, weight stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: FeatureMatrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: FeatureMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Kaiming-uniform fan-in initialization; biases start at zero.
    pub fn kaiming(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut weight = FeatureMatrix::zeros(out_dim, in_dim);
        for v in weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Self {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// x (N×in) -> x·Wᵀ + b (N×out).
    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut out = x.matmul_nt(&self.weight);
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the layer
    /// output; returns (parameter gradients, input gradient).
    pub fn backward(&self, input: &FeatureMatrix, dout: &FeatureMatrix) -> (Dense, FeatureMatrix) {
        let dweight = dout.matmul_tn(input);
        let dbias = dout.col_sums();
        let dinput = dout.matmul_nn(&self.weight);
        (
            Dense {
                weight: dweight,
                bias: dbias,
            },
            dinput,
        )
    }
}

/// The point feature extractor f.
#[derive(Debug, Clone)]
pub struct PointFeatureNet {
    pub hidden: usize,
    pub k: usize,
    pub dim: usize,
    pub normalize_output: bool,
    pub(crate) input: Dense,
    pub(crate) context1: Dense,
    pub(crate) context2: Dense,
    pub(crate) head: Dense,
    net_id: u64,
    version: u64,
}

/// Everything backward needs from the matching forward call.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    net_id: u64,
    version: u64,
    k_used: usize,
    neighbors: Vec<Vec<usize>>,
    inputs: FeatureMatrix,
    act1: FeatureMatrix,
    cat1: FeatureMatrix,
    act2: FeatureMatrix,
    cat2: FeatureMatrix,
    act3: FeatureMatrix,
    raw_output: FeatureMatrix,
}

impl ActivationRecord {
    /// Neighbor count actually used; smaller than the configured k on tiny
    /// clouds.
    pub fn k_used(&self) -> usize {
        self.k_used
    }
}

/// One gradient tensor per parameter tensor, same shapes as the net.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub input: Dense,
    pub context1: Dense,
    pub context2: Dense,
    pub head: Dense,
}

impl ParamGradients {
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("input.weight", self.input.weight.data()),
            ("input.bias", &self.input.bias),
            ("context1.weight", self.context1.weight.data()),
            ("context1.bias", &self.context1.bias),
            ("context2.weight", self.context2.weight.data()),
            ("context2.bias", &self.context2.bias),
            ("head.weight", self.head.weight.data()),
            ("head.bias", &self.head.bias),
        ]
    }

    /// Sums another gradient set into this one, used for batched losses.
    pub fn accumulate(&mut self, other: &ParamGradients) {
        for (dst, src) in [
            (&mut self.input, &other.input),
            (&mut self.context1, &other.context1),
            (&mut self.context2, &other.context2),
            (&mut self.head, &other.head),
        ] {
            dst.weight.axpy(1.0, &src.weight);
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for layer in [
            &mut self.input,
            &mut self.context1,
            &mut self.context2,
            &mut self.head,
        ] {
            layer.weight.scale(a);
            for b in layer.bias.iter_mut() {
                *b *= a;
            }
        }
    }
}

impl PointFeatureNet {
    pub fn new(
        hidden: usize,
        k: usize,
        dim: usize,
        normalize_output: bool,
        seed: u64,
    ) -> Result<Self> {
        Self::validate_shape(hidden, k, dim)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            hidden,
            k,
            dim,
            normalize_output,
            input: Dense::kaiming(hidden, 6, &mut rng),
            context1: Dense::kaiming(hidden, 2 * hidden, &mut rng),
            context2: Dense::kaiming(hidden, 2 * hidden, &mut rng),
            head: Dense::kaiming(dim, hidden, &mut rng),
            net_id: NET_IDS.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn zeros(hidden: usize, k: usize, dim: usize, normalize_output: bool) -> Result<Self> {
        Self::validate_shape(hidden, k, dim)?;
        Ok(Self {
            hidden,
            k,
            dim,
            normalize_output,
            input: Dense::zeros(hidden, 6),
            context1: Dense::zeros(hidden, 2 * hidden),
            context2: Dense::zeros(hidden, 2 * hidden),
            head: Dense::zeros(dim, hidden),
            net_id: NET_IDS.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    fn validate_shape(hidden: usize, k: usize, dim: usize) -> Result<()> {
        if hidden < 1 || k < 1 || dim < 2 {
            return Err(Error::InvalidInput(format!(
                "network needs hidden ≥ 1, k ≥ 1, dim ≥ 2; got hidden={hidden} k={k} dim={dim}"
            )));
        }
        Ok(())
    }

    pub fn param_tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("input.weight", self.input.weight.data()),
            ("input.bias", &self.input.bias),
            ("context1.weight", self.context1.weight.data()),
            ("context1.bias", &self.context1.bias),
            ("context2.weight", self.context2.weight.data()),
            ("context2.bias", &self.context2.bias),
            ("head.weight", self.head.weight.data()),
            ("head.bias", &self.head.bias),
        ]
    }

    /// Mutable view of every parameter tensor. Outstanding activation
    /// records become stale, since the caller may write through this.
    pub fn param_tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        self.version += 1;
        vec![
            ("input.weight", self.input.weight.data_mut()),
            ("input.bias", &mut self.input.bias),
            ("context1.weight", self.context1.weight.data_mut()),
            ("context1.bias", &mut self.context1.bias),
            ("context2.weight", self.context2.weight.data_mut()),
            ("context2.bias", &mut self.context2.bias),
            ("head.weight", self.head.weight.data_mut()),
            ("head.bias", &mut self.head.bias),
        ]
    }

    /// Evaluates the net on a cloud. The k-NN graph is built on raw
    /// coordinates once per call.
    pub fn forward(&self, cloud: &PointCloud) -> Result<(FeatureMatrix, ActivationRecord)> {
        if cloud.is_empty() {
            return Err(Error::InvalidInput(
                "cannot run the feature net on an empty cloud".into(),
            ));
        }
        let n = cloud.len();
        let k_used = if n == 1 { 1 } else { self.k.min(n - 1) };
        let neighbors = knn_indices(&cloud.positions, k_used);
        let inputs = build_inputs(cloud);

        let mut act1 = self.input.forward(&inputs)?;
        relu_inplace(&mut act1);
        let cat1 = concat_cols(&act1, &neighbor_mean(&act1, &neighbors));
        let mut act2 = self.context1.forward(&cat1)?;
        relu_inplace(&mut act2);
        let cat2 = concat_cols(&act2, &neighbor_mean(&act2, &neighbors));
        let mut act3 = self.context2.forward(&cat2)?;
        relu_inplace(&mut act3);
        let raw_output = self.head.forward(&act3)?;

        let output = if self.normalize_output {
            let mut y = raw_output.clone();
            y.normalize_rows();
            y
        } else {
            raw_output.clone()
        };
        let record = ActivationRecord {
            net_id: self.net_id,
            version: self.version,
            k_used,
            neighbors,
            inputs,
            act1,
            cat1,
            act2,
            cat2,
            act3,
            raw_output,
        };
        Ok((output, record))
    }

    /// Gradients of ⟨output, output_grad⟩ with respect to every parameter.
    pub fn backward(
        &self,
        record: &ActivationRecord,
        output_grad: &FeatureMatrix,
    ) -> Result<ParamGradients> {
        if record.net_id != self.net_id || record.version != self.version {
            return Err(Error::StaleRecord(format!(
                "activation record is from net {} version {}, current net is {} version {}",
                record.net_id, record.version, self.net_id, self.version
            )));
        }
        let n = record.raw_output.rows();
        if output_grad.rows() != n || output_grad.cols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "output gradient is {}x{}, expected {n}x{}",
                output_grad.rows(),
                output_grad.cols(),
                self.dim
            )));
        }

        let mut d_raw = if self.normalize_output {
            let mut d = FeatureMatrix::zeros(n, self.dim);
            for i in 0..n {
                let y0 = record.raw_output.row(i);
                let norm = crate::matrix::norm(y0);
                if norm <= 0.0 {
                    continue;
                }
                let g = output_grad.row(i);
                let along = crate::matrix::dot(y0, g) / (norm * norm);
                for (d, (&y, &gv)) in d.row_mut(i).iter_mut().zip(y0.iter().zip(g)) {
                    *d = (gv - y * along) / norm;
                }
            }
            d
        } else {
            output_grad.clone()
        };

        let (head_grad, d_act3) = self.head.backward(&record.act3, &d_raw);
        d_raw = d_act3;
        relu_mask_inplace(&mut d_raw, &record.act3);
        let (context2_grad, d_cat2) = self.context2.backward(&record.cat2, &d_raw);
        let mut d_act2 = merge_context_grad(&d_cat2, &record.neighbors, self.hidden);
        relu_mask_inplace(&mut d_act2, &record.act2);
        let (context1_grad, d_cat1) = self.context1.backward(&record.cat1, &d_act2);
        let mut d_act1 = merge_context_grad(&d_cat1, &record.neighbors, self.hidden);
        relu_mask_inplace(&mut d_act1, &record.act1);
        let (input_grad, _) = self.input.backward(&record.inputs, &d_act1);

        Ok(ParamGradients {
            input: input_grad,
            context1: context1_grad,
            context2: context2_grad,
            head: head_grad,
        })
    }

    pub fn zero_gradients(&self) -> ParamGradients {
        ParamGradients {
            input: Dense::zeros(self.hidden, 6),
            context1: Dense::zeros(self.hidden, 2 * self.hidden),
            context2: Dense::zeros(self.hidden, 2 * self.hidden),
            head: Dense::zeros(self.dim, self.hidden),
        }
    }
}

/// Bounding-box-normalized XYZ concatenated with RGB.
fn build_inputs(cloud: &PointCloud) -> FeatureMatrix {
    let (lo, hi) = cloud.bounding_box();
    let extent: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-12)).collect();
    let mut inputs = FeatureMatrix::zeros(cloud.len(), 6);
    for (i, (p, c)) in cloud.positions.iter().zip(&cloud.colors).enumerate() {
        let row = inputs.row_mut(i);
        for a in 0..3 {
            row[a] = (p[a] - lo[a]) / extent[a];
            row[a + 3] = c[a];
        }
    }
    inputs
}

fn relu_inplace(m: &mut FeatureMatrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
fn relu_mask_inplace(grad: &mut FeatureMatrix, activation: &FeatureMatrix) {
    for (g, a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Mean of neighbor rows; points with no neighbors get a zero row.
fn neighbor_mean(values: &FeatureMatrix, neighbors: &[Vec<usize>]) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(values.rows(), values.cols());
    for (i, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let row = out.row_mut(i);
        for &j in nbrs {
            for (d, s) in row.iter_mut().zip(values.row(j)) {
                *d += s;
            }
        }
        let inv = 1.0 / nbrs.len() as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Adjoint of [own | neighbor-mean] concatenation: the own half passes
/// through, the mean half scatters back onto the contributing neighbors.
fn merge_context_grad(
    d_cat: &FeatureMatrix,
    neighbors: &[Vec<usize>],
    hidden: usize,
) -> FeatureMatrix {
    let n = d_cat.rows();
    let mut out = FeatureMatrix::zeros(n, hidden);
    for i in 0..n {
        let row = d_cat.row(i);
        out.row_mut(i).copy_from_slice(&row[..hidden]);
    }
    for (i, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let inv = 1.0 / nbrs.len() as f64;
        let mean_part: Vec<f64> = d_cat.row(i)[hidden..].to_vec();
        for &j in nbrs {
            for (d, s) in out.row_mut(j).iter_mut().zip(&mean_part) {
                *d += s * inv;
            }
        }
    }
    out
}

fn concat_cols(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        row[..a.cols()].copy_from_slice(a.row(i));
        row[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

/// First and second Adam moments per parameter tensor, plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn for_net(net: &PointFeatureNet) -> Self {
        Self {
            step: 0,
            moments: net
                .param_tensors()
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn for_dense(layer: &Dense) -> Self {
        Self {
            step: 0,
            moments: vec![
                (
                    vec![0.0; layer.weight.data().len()],
                    vec![0.0; layer.weight.data().len()],
                ),
                (vec![0.0; layer.bias.len()], vec![0.0; layer.bias.len()]),
            ],
        }
    }
}

/// Standard Adam with bias correction over one slice of parameters.
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bias1 = 1.0 - beta1.powi(step as i32);
    let bias2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn check_finite(tensors: &[(&'static str, &[f64])]) -> Result<()> {
    for (name, t) in tensors {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(())
}

/// One Adam step over the whole net. Rejects non-finite gradients, naming
/// the offending tensor, without touching any parameter.
pub fn adam_step(
    net: &mut PointFeatureNet,
    grads: &ParamGradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    {
        let params = net.param_tensors();
        if state.moments.len() != params.len()
            || state
                .moments
                .iter()
                .zip(&params)
                .any(|((m, _), (_, p))| m.len() != p.len())
            || grad_tensors
                .iter()
                .zip(&params)
                .any(|((_, g), (_, p))| g.len() != p.len())
        {
            return Err(Error::ShapeMismatch(
                "optimizer state or gradients do not match the network".into(),
            ));
        }
        check_finite(&grad_tensors)?;
    }
    state.step += 1;
    for (((_, p), (_, g)), (m, v)) in net
        .param_tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.moments.iter_mut())
    {
        adam_update(p, g, m, v, state.step, lr, beta1, beta2, eps);
    }
    Ok(())
}

/// One Adam step over a standalone dense layer (the baseline's
/// segmentation head).
pub fn adam_step_dense(
    layer: &mut Dense,
    grads: &Dense,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.weight.rows() != layer.weight.rows()
        || grads.weight.cols() != layer.weight.cols()
        || grads.bias.len() != layer.bias.len()
        || state.moments.len() != 2
        || state.moments[0].0.len() != layer.weight.data().len()
        || state.moments[1].0.len() != layer.bias.len()
    {
        return Err(Error::ShapeMismatch(
            "optimizer state or gradients do not match the layer".into(),
        ));
    }
    check_finite(&[
        ("head.weight", grads.weight.data()),
        ("head.bias", &grads.bias),
    ])?;
    state.step += 1;
    let (m, v) = &mut state.moments[0];
    adam_update(
        layer.weight.data_mut(),
        grads.weight.data(),
        m,
        v,
        state.step,
        lr,
        beta1,
        beta2,
        eps,
    );
    let (m, v) = &mut state.moments[1];
    adam_update(
        &mut layer.bias,
        &grads.bias,
        m,
        v,
        state.step,
        lr,
        beta1,
        beta2,
        eps,
    );
    Ok(())
}

/// Amplitudes for the stochastic cloud transforms applied during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    /// Uniform color jitter amplitude; output clamped to [0, 1].
    pub color_jitter: f64,
    /// Per-axis Gaussian coordinate noise.
    pub coord_noise_sigma: f64,
    /// Rotation about the gravity (z) axis, sampled from this range.
    pub rotation_range: (f64, f64),
    pub mirror_prob: f64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            color_jitter: 0.0,
            coord_noise_sigma: 0.0,
            rotation_range: (0.0, 0.0),
            mirror_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range;
        if self.color_jitter < 0.0
            || self.coord_noise_sigma < 0.0
            || !(0.0..=1.0).contains(&self.mirror_prob)
        {
            return Err(Error::InvalidInput(
                "transform amplitudes must be non-negative and mirror_prob in [0, 1]".into(),
            ));
        }
        if !(0.0 <= lo && lo <= hi && hi <= std::f64::consts::TAU) {
            return Err(Error::InvalidInput(format!(
                "rotation range must satisfy 0 ≤ lo ≤ hi ≤ 2π, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// The sampled equivariant transform, for replaying or undoing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRecord {
    pub angle: f64,
    pub mirrored: bool,
}

/// Appearance-level perturbation the features should be invariant to:
/// uniform color jitter and Gaussian coordinate noise. Point count, order,
/// and labels are untouched.
pub fn transform_invariant(
    cloud: &PointCloud,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    spec.validate()?;
    let mut out = cloud.clone();
    if spec.color_jitter > 0.0 {
        let a = spec.color_jitter;
        for c in out.colors.iter_mut() {
            for ch in c.iter_mut() {
                *ch = (*ch + rng.gen_range(-a..a)).clamp(0.0, 1.0);
            }
        }
    }
    if spec.coord_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.coord_noise_sigma).expect("validated sigma");
        for p in out.positions.iter_mut() {
            for x in p.iter_mut() {
                *x += rng.sample(normal);
            }
        }
    }
    Ok(out)
}

/// Geometric transform the features should be equivariant to: optional
/// mirror across the x axis, then a rotation about z. Colors and labels
/// carry over by index.
pub fn transform_equivariant(
    cloud: &PointCloud,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<(PointCloud, TransformRecord)> {
    spec.validate()?;
    let (lo, hi) = spec.rotation_range;
    let angle = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let mirrored = spec.mirror_prob > 0.0 && rng.gen_bool(spec.mirror_prob);
    let record = TransformRecord { angle, mirrored };
    let (sin, cos) = angle.sin_cos();
    let mut out = cloud.clone();
    for p in out.positions.iter_mut() {
        let x = if mirrored { -p[0] } else { p[0] };
        let y = p[1];
        p[0] = x * cos - y * sin;
        p[1] = x * sin + y * cos;
    }
    Ok((out, record))
}
