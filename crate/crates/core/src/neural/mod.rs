//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Everything here is single-threaded and seeded, so a `(seed, data, config)`
//! triple fully determines the trained parameters. Weights are stored
//! row-major as `out_dim x in_dim`, activations batch-major as `batch x dim`.

mod checkpoint;
mod optim;
mod train;

use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint,
    CHECKPOINT_VERSION,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{
    error_metrics, evaluate, gradient_check, predict, train, EarlyStopper, EarlyStopping, Loss, Metrics, StopDecision,
    TrainConfig, TrainRecord, EVAL_CHUNK_ROWS, GRADIENT_CHECK_EPSILON,
};

/// Generator used for initialization, shuffling and dropout masks.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Recorded in every checkpoint and manifest.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng/seed_from_u64 (rand_chacha 0.3)";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("invalid layer specification: {0}")]
    InvalidSpec(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Floating-point element type of a network.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// `out[batch x n] = x[batch x k] * w[n x k]^T`
fn matmul_xwt<T: Real>(x: &[T], w: &[T], out: &mut [T], batch: usize, k: usize, n: usize) {
    assert!(x.len() == batch * k && w.len() == n * k && out.len() == batch * n);
    unsafe {
        T::gemm(
            batch,
            k,
            n,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `dw[n x k] = dz[batch x n]^T * x[batch x k]`
fn matmul_dzt_x<T: Real>(dz: &[T], x: &[T], dw: &mut [T], batch: usize, k: usize, n: usize) {
    assert!(dz.len() == batch * n && x.len() == batch * k && dw.len() == n * k);
    unsafe {
        T::gemm(
            n,
            batch,
            k,
            dz.as_ptr(),
            1,
            n as isize,
            x.as_ptr(),
            k as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            k as isize,
            1,
        )
    }
}

/// `dx[batch x k] = dz[batch x n] * w[n x k]`
fn matmul_dz_w<T: Real>(dz: &[T], w: &[T], dx: &mut [T], batch: usize, k: usize, n: usize) {
    assert!(dz.len() == batch * n && w.len() == n * k && dx.len() == batch * k);
    unsafe {
        T::gemm(
            batch,
            n,
            k,
            dz.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            T::zero(),
            dx.as_mut_ptr(),
            k as isize,
            1,
        )
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NeuralError::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Linear,
}

impl Activation {
    /// Negative-side slope used by the correctors.
    pub const LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky() -> Self {
        Activation::LeakyRelu {
            slope: Self::LEAKY_SLOPE,
        }
    }

    pub fn apply<T: Real>(&self, z: T) -> T {
        match *self {
            Activation::Relu => z.max(T::zero()),
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    z
                } else {
                    z * T::from_f64(slope)
                }
            }
            Activation::Linear => z,
        }
    }

    pub fn derivative<T: Real>(&self, z: T) -> T {
        match *self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::from_f64(slope)
                }
            }
            Activation::Linear => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Inverted-dropout rate applied to this layer's output in train mode.
    pub dropout_after: f64,
}

/// Layer specs for the width chain `widths[0] -> ... -> widths[n]`.
///
/// `dropout_layers` holds zero-based layer indices followed by dropout.
pub fn chain_specs(
    widths: &[usize],
    hidden: Activation,
    output: Activation,
    dropout_layers: &[usize],
    dropout_rate: f64,
) -> Vec<LayerSpec> {
    let n_layers = widths.len().saturating_sub(1);
    (0..n_layers)
        .map(|i| LayerSpec {
            in_dim: widths[i],
            out_dim: widths[i + 1],
            activation: if i + 1 == n_layers { output } else { hidden },
            dropout_after: if dropout_layers.contains(&i) { dropout_rate } else { 0.0 },
        })
        .collect()
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<(), NeuralError> {
    if specs.is_empty() {
        return Err(NeuralError::InvalidSpec("no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NeuralError::InvalidSpec(format!("layer {i} has a zero dimension")));
        }
        if !(0.0..1.0).contains(&s.dropout_after) {
            return Err(NeuralError::InvalidSpec(format!(
                "layer {i} dropout rate {} outside [0, 1)",
                s.dropout_after
            )));
        }
        if let Activation::LeakyRelu { slope } = s.activation {
            if !slope.is_finite() {
                return Err(NeuralError::InvalidSpec(format!("layer {i} has a non-finite slope")));
            }
        }
        if let Some(next) = specs.get(i + 1) {
            if next.in_dim != s.out_dim {
                return Err(NeuralError::ShapeMismatch(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    s.out_dim,
                    i + 1,
                    next.in_dim
                )));
            }
        }
    }
    if specs[specs.len() - 1].dropout_after != 0.0 {
        return Err(NeuralError::InvalidSpec("dropout after the output layer".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub spec: LayerSpec,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    pub layers: Vec<Dense<T>>,
    pub mode: Mode,
    /// Initialization seed.
    pub seed: u64,
}

/// Activations retained by a train-mode forward pass for [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub batch: usize,
    /// Input seen by each layer (after the previous layer's dropout).
    inputs: Vec<Vec<T>>,
    pre_activations: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
    pub output: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Side of the hinge each pre-activation sits on, over every layer whose
    /// activation has one. Used to spot finite differences that straddle a kink.
    pub fn hinge_pattern(&self, model: &MlpModel<T>) -> Vec<bool> {
        model
            .layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(l, _)| l.spec.activation != Activation::Linear)
            .flat_map(|(_, z)| z.iter().map(|v| *v > T::zero()))
            .collect()
    }
}

/// Per-parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![T::zero(); l.biases.len()]).collect(),
        }
    }

    /// Flattened in the parameter order of [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Builds a model with uniform fan-in weights `U(-sqrt(6/in), sqrt(6/in))`
/// drawn layer by layer in row-major order, and zero biases.
pub fn init_model<T: Real>(specs: &[LayerSpec], seed: u64) -> Result<MlpModel<T>, NeuralError> {
    validate_specs(specs)?;
    let mut rng = Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let bound = (6.0 / spec.in_dim as f64).sqrt();
            let weights = (0..spec.in_dim * spec.out_dim)
                .map(|_| T::from_f64((2.0 * rng.gen::<f64>() - 1.0) * bound))
                .collect();
            Dense {
                spec: *spec,
                weights,
                biases: vec![T::zero(); spec.out_dim],
            }
        })
        .collect();
    Ok(MlpModel {
        layers,
        mode: Mode::Eval,
        seed,
    })
}

impl<T: Real> MlpModel<T> {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.spec.out_dim));
        w
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// All parameters, each layer's weights followed by its biases.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn parameter_mut(&mut self, mut index: usize) -> &mut T {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    spec: l.spec,
                    weights: l.weights.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    biases: l.biases.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            mode: self.mode,
            seed: self.seed,
        }
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<(), NeuralError> {
        if batch == 0 {
            return Err(NeuralError::EmptyData("batch of zero rows".into()));
        }
        if x.len() != batch * self.input_dim() {
            return Err(NeuralError::ShapeMismatch(format!(
                "input has {} values, expected {batch} x {}",
                x.len(),
                self.input_dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFiniteInput);
        }
        Ok(())
    }

    /// Inference pass; dropout is the identity regardless of `mode`.
    pub fn forward(&self, x: &[T], batch: usize) -> Result<Vec<T>, NeuralError> {
        self.check_input(x, batch)?;
        let mut current = x.to_vec();
        for layer in &self.layers {
            let s = layer.spec;
            let mut z = vec![T::zero(); batch * s.out_dim];
            matmul_xwt(&current, &layer.weights, &mut z, batch, s.in_dim, s.out_dim);
            for row in z.chunks_exact_mut(s.out_dim) {
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v = s.activation.apply(*v + *b);
                }
            }
            current = z;
        }
        Ok(current)
    }

    /// Forward pass that keeps the activations for [`MlpModel::backward`].
    ///
    /// In [`Mode::Train`] each flagged layer output is multiplied by a mask of
    /// `0` or `1 / (1 - rate)` drawn from `rng`; in [`Mode::Eval`] no masks are
    /// drawn and `rng` is untouched.
    pub fn forward_train(&self, x: &[T], batch: usize, rng: &mut Rng) -> Result<ForwardCache<T>, NeuralError> {
        self.check_input(x, batch)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut current = x.to_vec();
        for layer in &self.layers {
            let s = layer.spec;
            let mut z = vec![T::zero(); batch * s.out_dim];
            matmul_xwt(&current, &layer.weights, &mut z, batch, s.in_dim, s.out_dim);
            for row in z.chunks_exact_mut(s.out_dim) {
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v = *v + *b;
                }
            }
            let mut a: Vec<T> = z.iter().map(|&v| s.activation.apply(v)).collect();
            let mask = if self.mode == Mode::Train && s.dropout_after > 0.0 {
                let keep = 1.0 - s.dropout_after;
                let scale = T::from_f64(1.0 / keep);
                let m: Vec<T> = (0..a.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                for (v, k) in a.iter_mut().zip(&m) {
                    *v = *v * *k;
                }
                Some(m)
            } else {
                None
            };
            inputs.push(std::mem::replace(&mut current, a));
            pre_activations.push(z);
            masks.push(mask);
        }
        Ok(ForwardCache {
            batch,
            inputs,
            pre_activations,
            masks,
            output: current,
        })
    }

    /// Gradients of the batch-mean squared error (mean over rows and
    /// outputs) with respect to every parameter. Returns `(loss, grads)`.
    pub fn backward(&self, cache: &ForwardCache<T>, y_true: &[T]) -> Result<(f64, Gradients<T>), NeuralError> {
        let batch = cache.batch;
        let out_dim = self.output_dim();
        if cache.inputs.len() != self.layers.len() || cache.output.len() != batch * out_dim {
            return Err(NeuralError::ShapeMismatch(
                "forward cache does not match this model".into(),
            ));
        }
        if y_true.len() != batch * out_dim {
            return Err(NeuralError::ShapeMismatch(format!(
                "targets have {} values, expected {batch} x {out_dim}",
                y_true.len()
            )));
        }
        let n = (batch * out_dim) as f64;
        let mut loss = 0.0;
        let scale = T::from_f64(2.0 / n);
        let mut delta: Vec<T> = cache
            .output
            .iter()
            .zip(y_true)
            .map(|(&y, &t)| {
                let r = y - t;
                loss += r.as_f64() * r.as_f64();
                r * scale
            })
            .collect();
        loss /= n;

        let mut grads = Gradients::zeros_like(self);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let s = layer.spec;
            if let Some(mask) = &cache.masks[i] {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d = *d * *m;
                }
            }
            for (d, &z) in delta.iter_mut().zip(&cache.pre_activations[i]) {
                *d = *d * s.activation.derivative(z);
            }
            matmul_dzt_x(
                &delta,
                &cache.inputs[i],
                &mut grads.weights[i],
                batch,
                s.in_dim,
                s.out_dim,
            );
            let gb = &mut grads.biases[i];
            for row in delta.chunks_exact(s.out_dim) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
            if i > 0 {
                let mut dx = vec![T::zero(); batch * s.in_dim];
                matmul_dz_w(&delta, &layer.weights, &mut dx, batch, s.in_dim, s.out_dim);
                delta = dx;
            }
        }
        Ok((loss, grads))
    }
}

/// Seeded Fisher-Yates shuffle of `0..n`, drawing `j` uniformly from `0..=i`
/// as a `u64` so the permutation is identical on every platform.
pub fn seeded_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle_in_place(&mut idx, rng);
    idx
}

pub fn shuffle_in_place(idx: &mut [usize], rng: &mut Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        idx.swap(i, j);
    }
}
