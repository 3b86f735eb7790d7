//! Minimal neural-net building blocks with explicit forward and backward
//! passes in `f64`: strided convolutions (im2col + GEMM), ReLU, global
//! average pooling, a linear layer, stable softmax/cross-entropy, and an
//! Adam optimizer over flat slices (used by the perturbation and
//! reverse-engineering optimizers).

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// 2-D convolution; weights stored as a `[out_c, in_c * k * k]` matrix so
/// forward/backward are plain GEMMs against im2col buffers.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in-scaled uniform init, zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Array2::from_shape_fn((out_channels, in_channels * kernel * kernel), |_| {
            rng.gen_range(-bound..=bound)
        });
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Unfolds `x` into a `[in_c * k * k, oh * ow]` patch matrix.
    pub fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a patch-matrix gradient back onto the input, accumulating
    /// overlapping contributions.
    pub fn col2im(&self, d_cols: &Array2<f64>, input_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = input_dim;
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[[ci, ii as usize, jj as usize]] += d_cols[[row, oi * ow + oj]];
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns `(cols, pre_activation)` where `pre_activation` is
    /// `[out_c, oh, ow]`.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array2<f64>, Array3<f64>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "Conv2d::forward",
                dimension: 0,
                expected: self.in_channels,
                actual: c,
            });
        }
        let (oh, ow) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        let out3 = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv output reshape");
        Ok((cols, out3))
    }

    /// Given upstream gradient on the pre-activation and the cached cols,
    /// returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        d_out: &Array3<f64>,
        cols: &Array2<f64>,
        input_dim: (usize, usize, usize),
    ) -> (Array2<f64>, Array1<f64>, Array3<f64>) {
        let (oc, oh, ow) = d_out.dim();
        let d_mat = d_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("grad reshape");
        let d_weight = d_mat.dot(&cols.t());
        let d_bias = d_mat.sum_axis(ndarray::Axis(1));
        let d_cols = self.weight.t().dot(&d_mat);
        let d_input = self.col2im(&d_cols, input_dim);
        (d_weight, d_bias, d_input)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        d_out: &Array1<f64>,
        x: &Array1<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let d_weight = d_out
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&x.view().insert_axis(ndarray::Axis(0)));
        let d_bias = d_out.clone();
        let d_input = self.weight.t().dot(d_out);
        (d_weight, d_bias, d_input)
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    // `v.max(0.0)` would map NaN to 0 and silently mask divergence.
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

/// Gradient through ReLU given the pre-activation (zero where inactive).
pub fn relu_backward(d_out: &Array3<f64>, pre: &Array3<f64>) -> Array3<f64> {
    let mut dx = d_out.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array1::from_iter((0..c).map(|ci| x.index_axis(ndarray::Axis(0), ci).sum() * scale))
}

pub fn global_avg_pool_backward(
    d_out: &Array1<f64>,
    input_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (c, h, w) = input_dim;
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| d_out[ci] * scale)
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// `-log softmax(logits)[label]` and its gradient w.r.t. the logits
/// (`softmax - one_hot`).
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let probs = softmax(logits);
    let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
    let mut d = probs;
    d[label] -= 1.0;
    (loss, d)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
