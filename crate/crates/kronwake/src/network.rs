//! Feed-forward fully-connected network with manual backpropagation.
//!
//! Biases are folded into the weight matrices by augmenting every layer input
//! with a trailing constant 1, so layer `l` holds a single `out × (in+1)`
//! matrix. Flattened parameter vectors use the crate-wide column-stacking
//! convention (see `tensor`), which keeps per-layer gradient blocks aligned
//! with the Kronecker factor identities used by the curvature module.

use crate::error::{Error, Result};
use crate::tensor::{vec_of, Matrix};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Marks a classification head. The forward pass still emits raw logits;
    /// softmax is applied only inside losses, sampling and SKL terms.
    SoftmaxOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Validate that layer dims chain and softmax appears only on the last layer.
pub fn validate_arch(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("architecture has no layers".into()));
    }
    for w in layers.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Config(format!(
                "layer dims do not chain: {} -> {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if l.activation == Activation::SoftmaxOutput && i + 1 != layers.len() {
            return Err(Error::Config("softmax-output allowed only on the final layer".into()));
        }
    }
    Ok(())
}

/// What the final layer models; decides loss, sampling and SKL forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Categorical,
    Gaussian,
}

pub fn head_kind(layers: &[LayerSpec]) -> HeadKind {
    match layers.last().map(|l| l.activation) {
        Some(Activation::SoftmaxOutput) => HeadKind::Categorical,
        _ => HeadKind::Gaussian,
    }
}

/// Per-layer augmented weight matrices, bias column last.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    arch: Vec<LayerSpec>,
    weights: Vec<Matrix>,
}

impl NetParams {
    pub fn zeros(arch: &[LayerSpec]) -> Result<Self> {
        validate_arch(arch)?;
        let weights = arch.iter().map(|l| Matrix::zeros(l.out_dim, l.in_dim + 1)).collect();
        Ok(NetParams { arch: arch.to_vec(), weights })
    }

    /// Scaled uniform fan-in init, range ±√(6/(fan_in+fan_out)); bias column 0.
    /// Draws layer by layer, row-major within the non-bias block.
    pub fn init<R: Rng>(arch: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut p = NetParams::zeros(arch)?;
        for (l, spec) in arch.iter().enumerate() {
            let r = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            for i in 0..spec.out_dim {
                for j in 0..spec.in_dim {
                    p.weights[l].set(i, j, rng.gen_range(-r..r));
                }
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.weights[l]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.arch.iter().map(|l| l.out_dim * (l.in_dim + 1)).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.arch.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.first().map(|l| l.in_dim).unwrap_or(0)
    }

    /// Column-stacked per-layer blocks, layers in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for w in &self.weights {
            v.extend(vec_of(w));
        }
        v
    }

    pub fn from_flat(arch: &[LayerSpec], flat: &[f64]) -> Result<Self> {
        let mut p = NetParams::zeros(arch)?;
        if flat.len() != p.dim() {
            return Err(Error::Dimension(format!("from_flat: {} vs {}", flat.len(), p.dim())));
        }
        let mut off = 0;
        for (l, spec) in arch.iter().enumerate() {
            let rows = spec.out_dim;
            let cols = spec.in_dim + 1;
            let block = &flat[off..off + rows * cols];
            p.weights[l] = crate::tensor::unvec(block, rows, cols)?;
            off += rows * cols;
        }
        Ok(p)
    }

    /// θ += s, with s flattened in the crate convention.
    pub fn add_flat(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim() {
            return Err(Error::Dimension(format!("add_flat: {} vs {}", s.len(), self.dim())));
        }
        let mut off = 0;
        for w in &mut self.weights {
            let rows = w.rows();
            let cols = w.cols();
            for j in 0..cols {
                for i in 0..rows {
                    let v = w.get(i, j) + s[off + j * rows + i];
                    w.set(i, j, v);
                }
            }
            off += rows * cols;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for w in &mut self.weights {
            *w = w.scale(a);
        }
    }

    /// Deep, mutation-independent copy.
    pub fn snapshot(&self) -> NetParams {
        self.clone()
    }

    /// Coordinate ranges of each layer block in the flattened vector.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.arch.len());
        let mut off = 0;
        for l in &self.arch {
            let len = l.out_dim * (l.in_dim + 1);
            out.push(off..off + len);
            off += len;
        }
        out
    }
}

/// Everything the backward pass needs, retained per layer for one batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// ā_{l-1}: batch × (in_dim+1), trailing coordinate exactly 1.
    pub aug_inputs: Vec<Matrix>,
    /// z_l: batch × out_dim.
    pub preacts: Vec<Matrix>,
    /// Network outputs (logits for classification heads): batch × out.
    pub outputs: Matrix,
}

fn augment(inputs: &Matrix) -> Matrix {
    let b = inputs.rows();
    let d = inputs.cols();
    let mut aug = Matrix::zeros(b, d + 1);
    for i in 0..b {
        let src = inputs.row(i);
        let dst = aug.row_mut(i);
        dst[..d].copy_from_slice(src);
        dst[d] = 1.0;
    }
    aug
}

/// Forward pass over a batch (one sample per row).
pub fn forward(params: &NetParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "forward: input dim {} vs {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    if inputs.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("forward: non-finite input entries".into()));
    }
    let mut aug_inputs = Vec::with_capacity(params.num_layers());
    let mut preacts = Vec::with_capacity(params.num_layers());
    let mut act = inputs.clone();
    for (l, spec) in params.arch.iter().enumerate() {
        let aug = augment(&act);
        let z = aug.mul_transpose_b(&params.weights[l])?;
        act = match spec.activation {
            Activation::Relu => {
                let mut a = z.clone();
                for i in 0..a.rows() {
                    for x in a.row_mut(i) {
                        if *x <= 0.0 {
                            *x = 0.0;
                        }
                    }
                }
                a
            }
            Activation::Identity | Activation::SoftmaxOutput => z.clone(),
        };
        aug_inputs.push(aug);
        preacts.push(z);
    }
    let cache = ForwardCache { aug_inputs, preacts, outputs: act.clone() };
    Ok((act, cache))
}

/// Backprop from per-sample output-space gradients `dz_out` (batch × out).
///
/// Returns parameter-space gradients (summed over the batch; fold any 1/B
/// into `dz_out`) and the per-layer pre-activation gradients, which the
/// curvature module consumes.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    dz_out: &Matrix,
) -> Result<(NetParams, Vec<Matrix>)> {
    let n_layers = params.num_layers();
    if dz_out.rows() != cache.outputs.rows() || dz_out.cols() != cache.outputs.cols() {
        return Err(Error::Dimension("backward: dz_out shape mismatch".into()));
    }
    let mut grads = NetParams::zeros(&params.arch)?;
    let mut preact_grads = vec![Matrix::zeros(0, 0); n_layers];
    let mut dz = dz_out.clone();
    for l in (0..n_layers).rev() {
        grads.weights[l] = dz.mul_transpose_a(&cache.aug_inputs[l])?;
        preact_grads[l] = dz.clone();
        if l == 0 {
            break;
        }
        // da_{l-1} = dz · W_l (bias column dropped), then gate by φ'(z_{l-1}).
        let w = &params.weights[l];
        let in_dim = params.arch[l].in_dim;
        let b = dz.rows();
        let mut da = Matrix::zeros(b, in_dim);
        for s in 0..b {
            let dzrow = dz.row(s);
            let darow = da.row_mut(s);
            for (o, &d) in dzrow.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wrow = &w.row(o)[..in_dim];
                for (dst, &wv) in darow.iter_mut().zip(wrow) {
                    *dst += d * wv;
                }
            }
        }
        match params.arch[l - 1].activation {
            Activation::Relu => {
                let z = &cache.preacts[l - 1];
                for s in 0..b {
                    let zrow = z.row(s);
                    let darow = da.row_mut(s);
                    for (x, &zv) in darow.iter_mut().zip(zrow) {
                        if zv <= 0.0 {
                            *x = 0.0;
                        }
                    }
                }
            }
            Activation::Identity | Activation::SoftmaxOutput => {}
        }
        dz = da;
    }
    Ok((grads, preact_grads))
}

#[derive(Clone, Debug)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => {
                let mut m = Matrix::zeros(idx.len(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    m.row_mut(r).copy_from_slice(t.row(i));
                }
                Labels::Targets(m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Gaussian,
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-sample cross-entropy output gradients (softmax − onehot) · scale.
pub fn output_grad_cross_entropy(outputs: &Matrix, classes: &[usize], scale: f64) -> Result<Matrix> {
    if outputs.rows() != classes.len() {
        return Err(Error::Dimension("cross-entropy: batch size mismatch".into()));
    }
    let n_c = outputs.cols();
    let mut dz = Matrix::zeros(outputs.rows(), n_c);
    for s in 0..outputs.rows() {
        let y = classes[s];
        if y >= n_c {
            return Err(Error::Label(format!("class {y} out of range {n_c}")));
        }
        let p = softmax_row(outputs.row(s));
        let row = dz.row_mut(s);
        for (k, pk) in p.into_iter().enumerate() {
            row[k] = (pk - if k == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(dz)
}

/// Per-sample Gaussian (unit covariance) output gradients (h − y) · scale.
pub fn output_grad_gaussian(outputs: &Matrix, targets: &Matrix, scale: f64) -> Result<Matrix> {
    if outputs.rows() != targets.rows() || outputs.cols() != targets.cols() {
        return Err(Error::Dimension("gaussian: target shape mismatch".into()));
    }
    let mut dz = Matrix::zeros(outputs.rows(), outputs.cols());
    for s in 0..outputs.rows() {
        let h = outputs.row(s);
        let t = targets.row(s);
        let row = dz.row_mut(s);
        for k in 0..h.len() {
            row[k] = (h[k] - t[k]) * scale;
        }
    }
    Ok(dz)
}

/// Mean negative log-likelihood computed from outputs alone (evaluation path,
/// no backward pass).
pub fn batch_loss(outputs: &Matrix, labels: &Labels, kind: LossKind) -> Result<f64> {
    let b = outputs.rows();
    if b == 0 || labels.len() != b {
        return Err(Error::Dimension("batch_loss: batch/label mismatch".into()));
    }
    let mut loss = 0.0;
    match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(classes)) => {
            for s in 0..b {
                let y = classes[s];
                if y >= outputs.cols() {
                    return Err(Error::Label(format!("class {y} out of range {}", outputs.cols())));
                }
                loss += log_sum_exp(outputs.row(s)) - outputs.get(s, y);
            }
        }
        (LossKind::Gaussian, Labels::Targets(targets)) => {
            let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            for s in 0..b {
                let h = outputs.row(s);
                let t = targets.row(s);
                let sq: f64 = h.iter().zip(t).map(|(a, c)| (a - c) * (a - c)).sum();
                loss += 0.5 * sq + half_log_2pi * h.len() as f64;
            }
        }
        _ => return Err(Error::Label("loss kind does not match label kind".into())),
    }
    Ok(loss / b as f64)
}

/// Mean negative log-likelihood over the batch, its parameter gradient, and
/// the forward cache.
pub fn loss_grad(
    params: &NetParams,
    inputs: &Matrix,
    labels: &Labels,
    kind: LossKind,
) -> Result<(f64, NetParams, ForwardCache)> {
    let (outputs, cache) = forward(params, inputs)?;
    let b = outputs.rows();
    if b == 0 {
        return Err(Error::Dimension("loss_grad: empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Dimension("loss_grad: label count mismatch".into()));
    }
    let scale = 1.0 / b as f64;
    let loss = batch_loss(&outputs, labels, kind)?;
    let dz = match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(classes)) => {
            output_grad_cross_entropy(&outputs, classes, scale)?
        }
        (LossKind::Gaussian, Labels::Targets(targets)) => {
            output_grad_gaussian(&outputs, targets, scale)?
        }
        _ => return Err(Error::Label("loss kind does not match label kind".into())),
    };
    if !loss.is_finite() {
        let bad = cache
            .preacts
            .iter()
            .position(|z| z.data().iter().any(|x| !x.is_finite()))
            .unwrap_or(params.num_layers());
        return Err(Error::Numeric(format!("non-finite loss (first bad layer {bad})")));
    }
    let (grads, _) = backward(params, &cache, &dz)?;
    Ok((loss, grads, cache))
}

/// Draw one standard normal via Box–Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Regression targets = outputs + noise (noise rows match outputs).
pub fn gaussian_targets(outputs: &Matrix, noise: &Matrix) -> Result<Matrix> {
    outputs.add(noise)
}

/// Sample labels from the model's own predictive distribution, so curvature
/// factors estimate the true Fisher rather than the empirical one.
pub fn sample_labels_from_outputs<R: Rng>(
    outputs: &Matrix,
    head: HeadKind,
    rng: &mut R,
) -> Result<Labels> {
    match head {
        HeadKind::Categorical => {
            let mut classes = Vec::with_capacity(outputs.rows());
            for s in 0..outputs.rows() {
                let p = softmax_row(outputs.row(s));
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = p.len() - 1;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        chosen = k;
                        break;
                    }
                }
                classes.push(chosen);
            }
            Ok(Labels::Classes(classes))
        }
        HeadKind::Gaussian => {
            let mut noise = Matrix::zeros(outputs.rows(), outputs.cols());
            for i in 0..noise.rows() {
                for j in 0..outputs.cols() {
                    noise.set(i, j, standard_normal(rng));
                }
            }
            Ok(Labels::Targets(gaussian_targets(outputs, &noise)?))
        }
    }
}

pub fn sample_labels<R: Rng>(params: &NetParams, inputs: &Matrix, rng: &mut R) -> Result<Labels> {
    let (outputs, _) = forward(params, inputs)?;
    sample_labels_from_outputs(&outputs, head_kind(params.arch()), rng)
}
