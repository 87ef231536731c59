//! Pooled dense classification head.
//!
//! Layer order: dense1 (ReLU) -> inverted dropout -> dense2 (ReLU) -> output
//! logits. Softmax is applied by the caller. The math is generic over
//! [`Real`] so finite-difference checks can run the same code in `f64`.

use rand::Rng;

use super::layers::Param;
use super::tensor::Real;
use crate::seed::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`, row-major.
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    /// Uniform fan-in initialization, `U(-limit, limit)` with
    /// `limit = gain * sqrt(1 / fan_in)`.
    pub(crate) fn new(name: &str, inputs: usize, outputs: usize, gain: f32, rng: &mut Stream) -> Self {
        let limit = gain * (1.0 / inputs as f32).sqrt();
        Dense {
            weight: Param::uniform(format!("{name}.weight"), vec![inputs, outputs], limit, rng),
            bias: Param::filled(format!("{name}.bias"), vec![outputs], 0.0, true),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub dense1: Dense,
    pub dense2: Dense,
    pub output: Dense,
    pub dropout_rate: f32,
}

/// He-style gain for layers followed by ReLU.
const RELU_GAIN: f32 = 2.449_489_7; // sqrt(6)
const OUTPUT_GAIN: f32 = 1.0;

impl Head {
    pub(crate) fn new(
        features: usize,
        units1: usize,
        units2: usize,
        classes: usize,
        dropout_rate: f32,
        rng: &mut Stream,
    ) -> Self {
        Head {
            dense1: Dense::new("head.dense1", features, units1, RELU_GAIN, rng),
            dense2: Dense::new("head.dense2", units1, units2, RELU_GAIN, rng),
            output: Dense::new("head.output", units2, classes, OUTPUT_GAIN, rng),
            dropout_rate,
        }
    }

    pub fn layers(&self) -> [&Dense; 3] {
        [&self.dense1, &self.dense2, &self.output]
    }

    pub(crate) fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.dense1, &mut self.dense2, &mut self.output]
    }

    pub(crate) fn dims(&self) -> [usize; 4] {
        [
            self.dense1.inputs(),
            self.dense1.outputs(),
            self.dense2.outputs(),
            self.output.outputs(),
        ]
    }

    pub(crate) fn weights_f32(&self) -> HeadWeights<'_, f32> {
        HeadWeights {
            weights: self.layers().map(|d| d.weight.value.as_slice()),
            biases: self.layers().map(|d| d.bias.value.as_slice()),
            dims: self.dims(),
        }
    }
}

/// Borrowed view of head parameters in some precision.
#[derive(Clone, Copy)]
pub(crate) struct HeadWeights<'a, T> {
    pub weights: [&'a [T]; 3],
    pub biases: [&'a [T]; 3],
    /// `[features, units1, units2, classes]`.
    pub dims: [usize; 4],
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. A zero rate yields all ones without consuming the stream.
pub fn dropout_mask(rate: f32, len: usize, rng: &mut Stream) -> Vec<f32> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect()
}

/// Applies a freshly drawn inverted-dropout mask to `x`.
pub fn apply_dropout(x: &[f32], rate: f32, rng: &mut Stream) -> Vec<f32> {
    dropout_mask(rate, x.len(), rng).iter().zip(x).map(|(m, v)| m * v).collect()
}

pub(crate) struct HeadTrace<T> {
    pub n: usize,
    pub input: Vec<T>,
    pub z1: Vec<T>,
    pub dropped: Vec<T>,
    pub mask: Option<Vec<T>>,
    pub z2: Vec<T>,
    pub a2: Vec<T>,
    pub logits: Vec<T>,
}

pub(crate) struct HeadGradients<T> {
    pub weights: [Vec<T>; 3],
    pub biases: [Vec<T>; 3],
    pub input: Vec<T>,
}

fn dense_forward<T: Real>(x: &[T], n: usize, w: &[T], b: &[T], inputs: usize, outputs: usize) -> Vec<T> {
    let mut z = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        z.extend_from_slice(b);
    }
    T::gemm(n, inputs, outputs, x, false, w, false, T::one(), &mut z);
    z
}

fn relu<T: Real>(z: &[T]) -> Vec<T> {
    z.iter().map(|v| v.max(T::zero())).collect()
}

/// `mask` holds `n x units1` dropout multipliers, or `None` for inference.
pub(crate) fn head_forward<T: Real>(w: HeadWeights<'_, T>, input: Vec<T>, n: usize, mask: Option<Vec<T>>) -> HeadTrace<T> {
    let [f, u1, u2, k] = w.dims;
    debug_assert_eq!(input.len(), n * f);
    let z1 = dense_forward(&input, n, w.weights[0], w.biases[0], f, u1);
    let mut dropped = relu(&z1);
    if let Some(m) = &mask {
        dropped.iter_mut().zip(m).for_each(|(a, m)| *a = *a * *m);
    }
    let z2 = dense_forward(&dropped, n, w.weights[1], w.biases[1], u1, u2);
    let a2 = relu(&z2);
    let logits = dense_forward(&a2, n, w.weights[2], w.biases[2], u2, k);
    HeadTrace {
        n,
        input,
        z1,
        dropped,
        mask,
        z2,
        a2,
        logits,
    }
}

fn dense_backward<T: Real>(
    x: &[T],
    dz: &[T],
    w: &[T],
    n: usize,
    inputs: usize,
    outputs: usize,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); inputs * outputs];
    T::gemm(inputs, n, outputs, x, true, dz, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); outputs];
    for row in dz.chunks_exact(outputs) {
        db.iter_mut().zip(row).for_each(|(g, d)| *g = *g + *d);
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![T::zero(); n * inputs];
        T::gemm(n, outputs, inputs, dz, false, w, true, T::zero(), &mut dx);
    }
    (dw, db, dx)
}

fn relu_backward<T: Real>(d: &mut [T], z: &[T]) {
    d.iter_mut().zip(z).for_each(|(g, z)| {
        if *z <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Backpropagates `dlogits` (`n x classes`) through the head.
pub(crate) fn head_backward<T: Real>(
    w: HeadWeights<'_, T>,
    trace: &HeadTrace<T>,
    dlogits: &[T],
    need_input_grad: bool,
) -> HeadGradients<T> {
    let [f, u1, u2, k] = w.dims;
    let n = trace.n;
    let (dw3, db3, mut da2) = dense_backward(&trace.a2, dlogits, w.weights[2], n, u2, k, true);
    relu_backward(&mut da2, &trace.z2);
    let (dw2, db2, mut dd1) = dense_backward(&trace.dropped, &da2, w.weights[1], n, u1, u2, true);
    if let Some(m) = &trace.mask {
        dd1.iter_mut().zip(m).for_each(|(g, m)| *g = *g * *m);
    }
    relu_backward(&mut dd1, &trace.z1);
    let (dw1, db1, dx) = dense_backward(&trace.input, &dd1, w.weights[0], n, f, u1, need_input_grad);
    HeadGradients {
        weights: [dw1, dw2, dw3],
        biases: [db1, db2, db3],
        input: dx,
    }
}
