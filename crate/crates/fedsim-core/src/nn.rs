//! From-scratch dense network: softmax cross-entropy loss, analytic
//! gradients, and plain SGD. This is the local objective every client
//! optimizes; all arithmetic is f64 and every operation is a pure function
//! of its inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Hidden-layer activation. Only ReLU is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    ReLU,
}

/// Layer sizes of a fully connected network: input, hidden..., output.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

/// Offsets of one layer's weights and biases inside a flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layers, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::ReLU,
        })
    }

    /// The 784-200-200-10 network used for the MNIST experiments.
    pub fn mnist_2nn() -> Self {
        Self::new(vec![784, 200, 200, 10]).expect("static sizes are valid")
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least 2 layers")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of weight layers (= layer_sizes - 1).
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum of fan_in*fan_out + fan_out per layer.
    pub fn param_len(&self) -> usize {
        self.layers().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }

    /// Per-layer offsets into the flat parameter layout: weight matrix
    /// (fan_in x fan_out, row-major) followed by the bias vector.
    pub fn layers(&self) -> impl Iterator<Item = LayerShape> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let shape = LayerShape {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            shape
        })
    }
}

/// Flat f64 vector housing all weights and biases of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// self += a * x. Lengths must match.
    pub fn axpy(&mut self, a: f64, x: &ParameterVector) -> Result<()> {
        if self.len() != x.len() {
            return Err(Error::Shape(format!(
                "axpy length mismatch: {} vs {}",
                self.len(),
                x.len()
            )));
        }
        for (s, &v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
        Ok(())
    }
}

/// Gradient of the mean batch loss; same length and layout as its
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// A batch of flattened images with class labels.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    images: Vec<f64>,
    labels: Vec<u8>,
    dim: usize,
}

impl MiniBatch {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("batch must contain at least one sample".into()));
        }
        if images.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "batch images length {} does not match {} samples x dim {}",
                images.len(),
                labels.len(),
                dim
            )));
        }
        Ok(Self { images, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.labels.len(), self.dim), &self.images)
            .expect("length validated in constructor")
    }
}

/// Reusable buffers for forward/backward passes with batches up to `b_max`
/// rows. Reusing these keeps the per-step hot path allocation-free.
pub(crate) struct Scratch {
    b_max: usize,
    /// Input batch, (b_max, input_dim). Loaded before each pass.
    input: Array2<f64>,
    /// Pre-activations per layer, (b_max, fan_out).
    zs: Vec<Array2<f64>>,
    /// Post-ReLU activations for hidden layers, (b_max, fan_out).
    acts: Vec<Array2<f64>>,
    /// Backprop deltas per layer, (b_max, fan_out).
    deltas: Vec<Array2<f64>>,
    /// Softmax probabilities, (b_max, output_dim).
    probs: Array2<f64>,
}

impl Scratch {
    pub(crate) fn new(spec: &NetworkSpec, b_max: usize) -> Self {
        let zs: Vec<_> = spec
            .layers()
            .map(|l| Array2::zeros((b_max, l.fan_out)))
            .collect();
        let acts = zs.clone();
        let deltas = zs.clone();
        let probs = Array2::zeros((b_max, spec.output_dim()));
        Self {
            b_max,
            input: Array2::zeros((b_max, spec.input_dim())),
            zs,
            acts,
            deltas,
            probs,
        }
    }

    /// Copies `b` rows of `dim` contiguous values into the input buffer.
    pub(crate) fn load_input(&mut self, src: &[f64], b: usize, dim: usize) {
        debug_assert!(b <= self.b_max);
        debug_assert_eq!(src.len(), b * dim);
        debug_assert_eq!(self.input.ncols(), dim);
        let dst = self
            .input
            .as_slice_mut()
            .expect("input buffer is standard layout");
        dst[..b * dim].copy_from_slice(src);
    }

    /// Mutable row slice of the input buffer, for gathering samples.
    pub(crate) fn input_row(&mut self, row: usize) -> &mut [f64] {
        let dim = self.input.ncols();
        let dst = self
            .input
            .as_slice_mut()
            .expect("input buffer is standard layout");
        &mut dst[row * dim..(row + 1) * dim]
    }
}

fn check_layout(params: &ParameterVector, spec: &NetworkSpec) -> Result<()> {
    if params.len() != spec.param_len() {
        return Err(Error::Shape(format!(
            "parameter vector length {} does not match spec layout length {}",
            params.len(),
            spec.param_len()
        )));
    }
    Ok(())
}

fn check_batch(spec: &NetworkSpec, batch: &MiniBatch) -> Result<()> {
    if batch.dim() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch dimension {} does not match network input {}",
            batch.dim(),
            spec.input_dim()
        )));
    }
    Ok(())
}

fn weight_view<'a>(values: &'a [f64], l: &LayerShape) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(
        (l.fan_in, l.fan_out),
        &values[l.w_offset..l.w_offset + l.fan_in * l.fan_out],
    )
    .expect("layout invariant")
}

fn bias_slice<'a>(values: &'a [f64], l: &LayerShape) -> &'a [f64] {
    &values[l.b_offset..l.b_offset + l.fan_out]
}

/// Glorot-style uniform init: weights in +-sqrt(6/(fan_in+fan_out)),
/// biases zero. Deterministic for a given seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParameterVector {
    let mut rng = rng::stream(seed, &[rng::domain::INIT]);
    let mut values = vec![0.0; spec.param_len()];
    for l in spec.layers() {
        let scale = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut values[l.w_offset..l.w_offset + l.fan_in * l.fan_out] {
            let u: f64 = rand::Rng::random(&mut rng);
            *w = (2.0 * u - 1.0) * scale;
        }
        // biases stay zero
    }
    ParameterVector { values }
}

/// Runs the network up to the logits of the final layer, reading the batch
/// from `scratch.input`. Fills `scratch.zs` and `scratch.acts` for the
/// first `b` rows.
fn forward_logits(params: &[f64], spec: &NetworkSpec, scratch: &mut Scratch, b: usize) {
    debug_assert!(b <= scratch.b_max);
    let depth = spec.depth();
    for (idx, l) in spec.layers().enumerate() {
        let w = weight_view(params, &l);
        let bias = bias_slice(params, &l);
        // z = a_prev . W  (+ bias per row)
        {
            let a_prev: ArrayView2<'_, f64> = if idx == 0 {
                scratch.input.slice(s![..b, ..])
            } else {
                scratch.acts[idx - 1].slice(s![..b, ..])
            };
            let mut z_view = scratch.zs[idx].slice_mut(s![..b, ..]);
            general_mat_mul(1.0, &a_prev, &w, 0.0, &mut z_view);
            for mut row in z_view.rows_mut() {
                for (v, &bi) in row.iter_mut().zip(bias) {
                    *v += bi;
                }
            }
        }
        if idx < depth - 1 {
            // hidden layer: ReLU
            let z_view = scratch.zs[idx].slice(s![..b, ..]);
            let mut a_view = scratch.acts[idx].slice_mut(s![..b, ..]);
            azip_relu(&z_view, &mut a_view);
        }
    }
}

fn azip_relu(z: &ArrayView2<'_, f64>, a: &mut ArrayViewMut2<'_, f64>) {
    ndarray::Zip::from(a).and(z).for_each(|a, &z| {
        *a = if z > 0.0 { z } else { 0.0 };
    });
}

/// Softmax of the final-layer logits into `scratch.probs`; returns nothing,
/// rows of `probs[..b]` are normalized distributions.
fn softmax_rows(scratch: &mut Scratch, depth: usize, b: usize) {
    let logits = scratch.zs[depth - 1].slice(s![..b, ..]);
    let mut probs = scratch.probs.slice_mut(s![..b, ..]);
    for (zrow, mut prow) in logits.rows().into_iter().zip(probs.rows_mut()) {
        let m = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &z) in prow.iter_mut().zip(zrow) {
            let e = (z - m).exp();
            *p = e;
            sum += e;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
    }
}

/// Class-probability matrix for a batch: one softmax distribution per row.
pub fn forward(
    params: &ParameterVector,
    spec: &NetworkSpec,
    batch: &MiniBatch,
) -> Result<Array2<f64>> {
    check_layout(params, spec)?;
    check_batch(spec, batch)?;
    let b = batch.len();
    let mut scratch = Scratch::new(spec, b);
    scratch.load_input(batch.images(), b, batch.dim());
    forward_logits(&params.values, spec, &mut scratch, b);
    softmax_rows(&mut scratch, spec.depth(), b);
    Ok(scratch.probs)
}

/// Mean cross-entropy over the batch and its exact analytic gradient.
pub fn loss_and_grad(
    params: &ParameterVector,
    spec: &NetworkSpec,
    batch: &MiniBatch,
) -> Result<(f64, Gradient)> {
    check_layout(params, spec)?;
    check_batch(spec, batch)?;
    let mut scratch = Scratch::new(spec, batch.len());
    scratch.load_input(batch.images(), batch.len(), batch.dim());
    let mut grad = Gradient::zeros(params.len());
    let loss = loss_grad_into(
        &params.values,
        spec,
        batch.labels(),
        &mut scratch,
        grad.as_mut_slice(),
    )?;
    Ok((loss, grad))
}

/// Core backprop shared by `loss_and_grad` and the client training loop.
/// Reads the batch from `scratch.input` (already loaded) and writes the
/// gradient of the mean batch loss into `grad`.
pub(crate) fn loss_grad_into(
    params: &[f64],
    spec: &NetworkSpec,
    labels: &[u8],
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> Result<f64> {
    let b = labels.len();
    let depth = spec.depth();
    let out_dim = spec.output_dim();
    for &y in labels {
        if (y as usize) >= out_dim {
            return Err(Error::Range(format!(
                "label {y} outside network output range 0..{out_dim}"
            )));
        }
    }

    forward_logits(params, spec, scratch, b);

    // loss from logits via log-sum-exp; delta of final layer = (p - y)/b
    let mut loss = 0.0;
    {
        let logits = scratch.zs[depth - 1].slice(s![..b, ..]);
        let mut delta = scratch.deltas[depth - 1].slice_mut(s![..b, ..]);
        let inv_b = 1.0 / b as f64;
        for ((zrow, mut drow), &y) in logits.rows().into_iter().zip(delta.rows_mut()).zip(labels) {
            let m = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &z) in drow.iter_mut().zip(zrow) {
                let e = (z - m).exp();
                *d = e;
                sum += e;
            }
            loss += sum.ln() - (zrow[y as usize] - m);
            let inv_sum = 1.0 / sum;
            for d in drow.iter_mut() {
                *d *= inv_sum;
            }
            drow[y as usize] -= 1.0;
            for d in drow.iter_mut() {
                *d *= inv_b;
            }
        }
        loss *= inv_b;
    }

    // walk layers backwards: dW = a_prev^T . delta, db = column sums,
    // delta_prev = (delta . W^T) masked by relu'(z_prev)
    let layers: Vec<LayerShape> = spec.layers().collect();
    for idx in (0..depth).rev() {
        let l = &layers[idx];
        let a_prev: ArrayView2<'_, f64> = if idx == 0 {
            scratch.input.slice(s![..b, ..])
        } else {
            scratch.acts[idx - 1].slice(s![..b, ..])
        };
        {
            let delta = scratch.deltas[idx].slice(s![..b, ..]);
            let mut dw = ArrayViewMut2::from_shape(
                (l.fan_in, l.fan_out),
                &mut grad[l.w_offset..l.w_offset + l.fan_in * l.fan_out],
            )
            .expect("layout invariant");
            general_mat_mul(1.0, &a_prev.t(), &delta, 0.0, &mut dw);
            let db = &mut grad[l.b_offset..l.b_offset + l.fan_out];
            db.fill(0.0);
            for drow in delta.rows() {
                for (acc, &d) in db.iter_mut().zip(drow) {
                    *acc += d;
                }
            }
        }
        if idx > 0 {
            let w = weight_view(params, l);
            let (head, tail) = scratch.deltas.split_at_mut(idx);
            let delta = tail[0].slice(s![..b, ..]);
            let mut delta_prev = head[idx - 1].slice_mut(s![..b, ..]);
            general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut delta_prev);
            let z_prev = scratch.zs[idx - 1].slice(s![..b, ..]);
            ndarray::Zip::from(&mut delta_prev)
                .and(&z_prev)
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
    }
    Ok(loss)
}

/// One plain SGD step: result[i] = params[i] - lr * grad[i].
pub fn sgd_step(params: &ParameterVector, grad: &Gradient, lr: f64) -> Result<ParameterVector> {
    if params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "sgd_step length mismatch: params {} vs grad {}",
            params.len(),
            grad.len()
        )));
    }
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(&p, &g)| p - lr * g)
        .collect();
    Ok(ParameterVector { values })
}

/// In-place variant with identical floating semantics to [`sgd_step`].
pub(crate) fn sgd_step_inplace(params: &mut ParameterVector, grad: &[f64], lr: f64) {
    debug_assert_eq!(params.len(), grad.len());
    for (p, &g) in params.values.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

const EVAL_CHUNK: usize = 512;

fn count_correct_chunk(
    params: &[f64],
    spec: &NetworkSpec,
    images: &[f64],
    labels: &[u8],
) -> usize {
    let dim = spec.input_dim();
    let b = labels.len();
    let mut scratch = Scratch::new(spec, b);
    scratch.load_input(images, b, dim);
    forward_logits(params, spec, &mut scratch, b);
    softmax_rows(&mut scratch, spec.depth(), b);
    let probs = scratch.probs.slice(s![..b, ..]);
    let mut correct = 0;
    for (prow, &y) in probs.rows().into_iter().zip(labels) {
        // argmax with ties broken toward the lowest class index
        let mut best = 0;
        let mut best_p = prow[0];
        for (j, &p) in prow.iter().enumerate().skip(1) {
            if p > best_p {
                best_p = p;
                best = j;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }
    correct
}

/// Fraction of samples whose argmax class probability equals the label.
/// Chunked so large sets evaluate with efficient matrix products; the
/// per-chunk counts are integers, so the reduction order cannot change
/// the result.
pub fn evaluate(params: &ParameterVector, spec: &NetworkSpec, dataset: &MiniBatch) -> Result<f64> {
    check_layout(params, spec)?;
    check_batch(spec, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluate requires a nonempty dataset".into()));
    }
    let n = dataset.len();
    let dim = dataset.dim();
    let correct = evaluate_count(params, spec, dataset.images(), dataset.labels(), dim);
    Ok(correct as f64 / n as f64)
}

#[cfg(feature = "parallel")]
fn evaluate_count(params: &ParameterVector, spec: &NetworkSpec, images: &[f64], labels: &[u8], dim: usize) -> usize {
    use rayon::prelude::*;
    labels
        .par_chunks(EVAL_CHUNK)
        .zip(images.par_chunks(EVAL_CHUNK * dim))
        .map(|(lc, ic)| count_correct_chunk(params.as_slice(), spec, ic, lc))
        .sum()
}

#[cfg(not(feature = "parallel"))]
fn evaluate_count(params: &ParameterVector, spec: &NetworkSpec, images: &[f64], labels: &[u8], dim: usize) -> usize {
    labels
        .chunks(EVAL_CHUNK)
        .zip(images.chunks(EVAL_CHUNK * dim))
        .map(|(lc, ic)| count_correct_chunk(params.as_slice(), spec, ic, lc))
        .sum()
}

/// Sequential evaluation, always available; bit-identical to [`evaluate`].
pub fn evaluate_sequential(
    params: &ParameterVector,
    spec: &NetworkSpec,
    dataset: &MiniBatch,
) -> Result<f64> {
    check_layout(params, spec)?;
    check_batch(spec, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluate requires a nonempty dataset".into()));
    }
    let dim = dataset.dim();
    let correct: usize = dataset
        .labels()
        .chunks(EVAL_CHUNK)
        .zip(dataset.images().chunks(EVAL_CHUNK * dim))
        .map(|(lc, ic)| count_correct_chunk(params.as_slice(), spec, ic, lc))
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}
