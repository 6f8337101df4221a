//! Dense feed-forward networks with hand-written reverse mode.
//!
//! Networks are stacks of affine layers with leaky-ReLU between them and a
//! linear output. Everything works on row-major batches: one input per row.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite {what} in {net}")]
    NonFinite { what: &'static str, net: String },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Single-row matrix.
    pub fn row_vector(values: &[S]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` copied out.
    pub fn column(&self, c: usize) -> Vec<S> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Appends `extra` as trailing columns, row by row.
    pub fn hstack(&self, extra: &Matrix<S>) -> Result<Matrix<S>, NetError> {
        if self.rows != extra.rows {
            return Err(NetError::Dimension(format!(
                "hstack of {} and {} rows",
                self.rows, extra.rows
            )));
        }
        let cols = self.cols + extra.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(extra.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }
}

/// `out = a * b^T` where `a` is `m x k` and `b` is `n x k`.
fn matmul_abt<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!((out.rows, out.cols), (a.rows, b.rows));
    S::gemm(
        a.rows,
        a.cols,
        b.rows,
        S::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        S::zero(),
        &mut out.data,
        out.cols as isize,
        1,
    );
}

/// `out = a^T * b` where `a` is `k x m` and `b` is `k x n`.
fn matmul_atb<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!((out.rows, out.cols), (a.cols, b.cols));
    S::gemm(
        a.cols,
        a.rows,
        b.cols,
        S::one(),
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        S::zero(),
        &mut out.data,
        out.cols as isize,
        1,
    );
}

/// `out = a * b` where `a` is `m x k` and `b` is `k x n`.
fn matmul_ab<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, out: &mut Matrix<S>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    S::gemm(
        a.rows,
        a.cols,
        b.cols,
        S::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        S::zero(),
        &mut out.data,
        out.cols as isize,
        1,
    );
}

/// One affine layer; `weights` is `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub weights: Matrix<S>,
    pub biases: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            biases: vec![S::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows
    }

    fn forward(&self, x: &Matrix<S>) -> Matrix<S> {
        let mut z = Matrix::zeros(x.rows, self.outputs());
        matmul_abt(x, &self.weights, &mut z);
        for r in 0..z.rows {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&self.biases) {
                *v += b;
            }
        }
        z
    }

    fn param_slices_mut(&mut self) -> [&mut [S]; 2] {
        [self.weights.as_mut_slice(), &mut self.biases]
    }

    fn param_slices(&self) -> [&[S]; 2] {
        [self.weights.as_slice(), &self.biases]
    }
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Multi-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub layers: Vec<Layer<S>>,
    /// Negative-side slope of the hidden leaky-ReLU.
    pub slope: S,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    /// Input to each layer (the network input first).
    inputs: Vec<Matrix<S>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix<S>>,
    shape: Vec<usize>,
}

impl<S> ForwardCache<S> {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.rows)
    }
}

/// Gradients shaped exactly like an [`Mlp`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> MlpGrads<S> {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// Element-wise sum with another gradient of the same shape.
    pub fn add(&mut self, other: &MlpGrads<S>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += *y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += *y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<S> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.biases).copied())
            .collect()
    }
}

impl<S: Scalar> Mlp<S> {
    /// All-zero network with layer widths `sizes` (input first, output last).
    pub fn zeros(sizes: &[usize], slope: S) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Layer widths, input first.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::outputs));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    pub fn zero_grads(&self) -> MlpGrads<S> {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// Flattened parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<S> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.biases).copied())
            .collect()
    }

    /// Overwrites parameters from a flat vector in [`Mlp::flatten`] order.
    pub fn assign_flat(&mut self, flat: &[S]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for s in l.param_slices_mut() {
                for v in s.iter_mut() {
                    *v = it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    /// Batched forward pass.
    pub fn forward(&self, input: &Matrix<S>) -> Result<(Matrix<S>, ForwardCache<S>), NetError> {
        if input.cols != self.input_dim() {
            return Err(NetError::Dimension(format!(
                "input width {} for a network expecting {}",
                input.cols,
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x);
            inputs.push(x);
            if idx == last {
                return Ok((
                    z,
                    ForwardCache {
                        inputs,
                        pre,
                        shape: self.shape(),
                    },
                ));
            }
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                if *v < S::zero() {
                    *v *= self.slope;
                }
            }
            pre.push(z);
            x = a;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Forward pass on a single input vector.
    pub fn forward_one(&self, input: &[S]) -> Result<Vec<S>, NetError> {
        Ok(self.forward(&Matrix::row_vector(input))?.0.into_vec())
    }

    fn check_cache(&self, cache: &ForwardCache<S>, dout: &Matrix<S>) -> Result<(), NetError> {
        if cache.shape != self.shape() {
            return Err(NetError::Dimension("cache from a differently shaped network".into()));
        }
        if dout.rows != cache.batch_size() || dout.cols != self.output_dim() {
            return Err(NetError::Dimension(format!(
                "output gradient {}x{} for batch {} and output width {}",
                dout.rows,
                dout.cols,
                cache.batch_size(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn leaky_mask(&self, pre: &Matrix<S>, grad: &mut Matrix<S>) {
        for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            if z < S::zero() {
                *g *= self.slope;
            }
        }
    }

    /// Reverse pass: parameter gradients (summed over the batch) and the
    /// gradient with respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache<S>, dout: &Matrix<S>) -> Result<(MlpGrads<S>, Matrix<S>), NetError> {
        self.check_cache(cache, dout)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dout.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let x = &cache.inputs[idx];
            let mut gw = Matrix::zeros(layer.outputs(), layer.inputs());
            matmul_atb(&delta, x, &mut gw);
            let mut gb = vec![S::zero(); layer.outputs()];
            for r in 0..delta.rows {
                for (b, &d) in gb.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            grads.push(Layer {
                weights: gw,
                biases: gb,
            });
            let mut dx = Matrix::zeros(delta.rows, layer.inputs());
            matmul_ab(&delta, &layer.weights, &mut dx);
            if idx > 0 {
                self.leaky_mask(&cache.pre[idx - 1], &mut dx);
            }
            delta = dx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Gradient with respect to the input only; parameters are treated as
    /// constants and their gradients are not formed.
    pub fn input_gradient(&self, cache: &ForwardCache<S>, dout: &Matrix<S>) -> Result<Matrix<S>, NetError> {
        self.check_cache(cache, dout)?;
        let mut delta = dout.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let mut dx = Matrix::zeros(delta.rows, layer.inputs());
            matmul_ab(&delta, &layer.weights, &mut dx);
            if idx > 0 {
                self.leaky_mask(&cache.pre[idx - 1], &mut dx);
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Polyak averaging `self <- (1 - tau) self + tau other`.
    pub fn soft_update_from(&mut self, other: &Mlp<S>, tau: S) {
        let keep = S::one() - tau;
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            let src = theirs.param_slices();
            for (dst, src) in mine.param_slices_mut().into_iter().zip(src) {
                for (u, &w) in dst.iter_mut().zip(src) {
                    *u = keep * *u + tau * w;
                }
            }
        }
    }

    /// Largest absolute parameter difference to a same-shaped network.
    pub fn max_abs_diff(&self, other: &Mlp<S>) -> S {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .fold(S::zero(), |m, (a, b)| m.max((*a - b).abs()))
    }
}

/// Adam hyper-constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one parameter slice.
#[allow(clippy::too_many_arguments)]
fn adam_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    m: &mut [S],
    v: &mut [S],
    lr: S,
    cfg: &AdamConfig,
    bias1: S,
    bias2: S,
) {
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let eps = S::lit(cfg.eps);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn bias_corrections<S: Scalar>(cfg: &AdamConfig, step: u64) -> (S, S) {
    let t = step.min(i32::MAX as u64) as i32;
    (S::lit(1.0 - cfg.beta1.powi(t)), S::lit(1.0 - cfg.beta2.powi(t)))
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub first: MlpGrads<S>,
    pub second: MlpGrads<S>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(net: &Mlp<S>) -> Self {
        Self {
            first: net.zero_grads(),
            second: net.zero_grads(),
            step: 0,
            config: AdamConfig::default(),
        }
    }

    /// Descends `params` along `grads` with step size `lr`.
    pub fn step(&mut self, params: &mut Mlp<S>, grads: &MlpGrads<S>, lr: S) -> Result<(), NetError> {
        if !grads.is_finite() {
            return Err(NetError::NonFinite {
                what: "gradient",
                net: format!("{:?}", params.shape()),
            });
        }
        self.step += 1;
        let (bias1, bias2) = bias_corrections::<S>(&self.config, self.step);
        for (((layer, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            let gs = g.param_slices();
            let ms = m.param_slices_mut();
            let vs = v.param_slices_mut();
            for (((p, g), m), v) in layer.param_slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
                adam_update(p, g, m, v, lr, &self.config, bias1, bias2);
            }
        }
        Ok(())
    }
}

/// Adam on a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAdam<S> {
    pub first: S,
    pub second: S,
    pub step: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> Default for ScalarAdam<S> {
    fn default() -> Self {
        Self {
            first: S::zero(),
            second: S::zero(),
            step: 0,
            config: AdamConfig::default(),
        }
    }
}

impl<S: Scalar> ScalarAdam<S> {
    pub fn step(&mut self, param: &mut S, grad: S, lr: S) -> Result<(), NetError> {
        if !grad.is_finite() {
            return Err(NetError::NonFinite {
                what: "gradient",
                net: "scalar parameter".into(),
            });
        }
        self.step += 1;
        let (bias1, bias2) = bias_corrections::<S>(&self.config, self.step);
        let mut p = [*param];
        let mut m = [self.first];
        let mut v = [self.second];
        adam_update(&mut p, &[grad], &mut m, &mut v, lr, &self.config, bias1, bias2);
        *param = p[0];
        self.first = m[0];
        self.second = v[0];
        Ok(())
    }
}

/// Output-layer initialisation.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputInit {
    /// Xavier-uniform weights scaled by `gain`, with explicit biases.
    Uniform { gain: f64, biases: Vec<f64> },
    /// Orthogonal weights scaled by `gain`, every bias set to `bias`.
    Orthogonal { gain: f64, bias: f64 },
}

/// Gain applied to orthogonal hidden layers (the ReLU-family convention).
pub const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;

/// Orthogonal `rows x cols` matrix scaled by `gain`.
///
/// A Gaussian matrix is orthonormalised by two passes of modified
/// Gram-Schmidt along its shorter dimension. This is the `Q` of a QR
/// factorisation whose `R` has a positive diagonal.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let transpose = rows < cols;
    let (tall, short) = if transpose { (cols, rows) } else { (rows, cols) };
    // Column-major tall x short matrix.
    let mut q: Vec<f64> = (0..tall * short).map(|_| StandardNormal.sample(rng)).collect();
    for j in 0..short {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..tall).map(|r| q[i * tall + r] * q[j * tall + r]).sum();
                for r in 0..tall {
                    q[j * tall + r] -= dot * q[i * tall + r];
                }
            }
            let norm: f64 = (0..tall).map(|r| q[j * tall + r].powi(2)).sum::<f64>().sqrt();
            for r in 0..tall {
                q[j * tall + r] /= norm;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for j in 0..short {
        for r in 0..tall {
            let v = gain * q[j * tall + r];
            if transpose {
                out[j * cols + r] = v;
            } else {
                out[r * cols + j] = v;
            }
        }
    }
    out
}

/// Builds a network: orthogonal hidden layers with zero biases and the
/// requested output initialisation.
pub fn init_mlp<S: Scalar, R: Rng + ?Sized>(sizes: &[usize], slope: S, output: &OutputInit, rng: &mut R) -> Mlp<S> {
    let mut net = Mlp::zeros(sizes, slope);
    let last = net.layers.len() - 1;
    for (idx, layer) in net.layers.iter_mut().enumerate() {
        let (rows, cols) = (layer.outputs(), layer.inputs());
        let weights: Vec<f64> = if idx < last {
            orthogonal(rows, cols, HIDDEN_GAIN, rng)
        } else {
            match output {
                OutputInit::Uniform { gain, biases } => {
                    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
                    for (b, &v) in layer.biases.iter_mut().zip(biases) {
                        *b = S::lit(v);
                    }
                    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
                }
                OutputInit::Orthogonal { gain, bias } => {
                    layer.biases.iter_mut().for_each(|b| *b = S::lit(*bias));
                    orthogonal(rows, cols, *gain, rng)
                }
            }
        };
        for (w, v) in layer.weights.as_mut_slice().iter_mut().zip(weights) {
            *w = S::lit(v);
        }
    }
    net
}
