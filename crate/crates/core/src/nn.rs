//! Dense layers, activations and first-order optimizers shared by the
//! autoencoder and the classifier.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, col_sums_into, gemm, Op, Scalar};

/// He-normal draws: `N(0, 2 / fan_in)`.
pub fn he_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, count: usize) -> Vec<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| S::from_f64(normal.sample(rng))).collect()
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, i.e. variance `1/(3 fan_in)`.
pub fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, count: usize) -> Vec<S> {
    let limit = (1.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect()
}

pub fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes `delta` wherever the post-activation value was not positive.
pub fn relu_backward<S: Scalar>(activated: &[S], delta: &mut [S]) {
    for (d, a) in delta.iter_mut().zip(activated) {
        if *a <= S::zero() {
            *d = S::zero();
        }
    }
}

/// Fully connected layer computing `x W + b` with `W` stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            inputs,
            outputs,
            weight: he_normal(rng, inputs, inputs * outputs),
            bias: vec![S::zero(); outputs],
        }
    }

    pub fn fan_in_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            inputs,
            outputs,
            weight: fan_in_uniform(rng, inputs, inputs * outputs),
            bias: vec![S::zero(); outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![S::zero(); inputs * outputs],
            bias: vec![S::zero(); outputs],
        }
    }

    /// `out = x W + b` for `rows` input rows.
    pub fn forward(&self, x: &[S], rows: usize, out: &mut [S]) {
        gemm(
            rows,
            self.inputs,
            self.outputs,
            S::one(),
            x,
            Op::N,
            &self.weight,
            Op::N,
            S::zero(),
            out,
        );
        add_row_bias(out, &self.bias);
    }

    /// Accumulates parameter gradients for upstream `delta` and, when asked,
    /// writes the gradient with respect to the input.
    pub fn backward(&self, x: &[S], delta: &[S], rows: usize, grad: &mut DenseGrad<S>, delta_in: Option<&mut [S]>) {
        gemm(
            self.inputs,
            rows,
            self.outputs,
            S::one(),
            x,
            Op::T,
            delta,
            Op::N,
            S::zero(),
            &mut grad.weight,
        );
        col_sums_into(delta, self.outputs, &mut grad.bias);
        if let Some(din) = delta_in {
            gemm(
                rows,
                self.outputs,
                self.inputs,
                S::one(),
                delta,
                Op::N,
                &self.weight,
                Op::T,
                S::zero(),
                din,
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<S> {
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> DenseGrad<S> {
    pub fn for_layer(layer: &Dense<S>) -> Self {
        DenseGrad {
            weight: vec![S::zero(); layer.weight.len()],
            bias: vec![S::zero(); layer.bias.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum: `v <- m v - lr g; p <- p + v`.
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor optimizer slots, indexed in a fixed parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    kind: Optimizer,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    steps: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: Optimizer, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![S::zero(); n]).collect::<Vec<_>>();
        let second = match kind {
            Optimizer::Adam { .. } => zeros(),
            Optimizer::Sgd { .. } => Vec::new(),
        };
        OptimizerState {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn kind(&self) -> Optimizer {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First-moment (velocity) buffers, then second-moment buffers (Adam only).
    pub fn buffers(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from saved buffers; shapes must match `sizes`.
    pub fn from_parts(
        kind: Optimizer,
        sizes: &[usize],
        first: Vec<Vec<S>>,
        second: Vec<Vec<S>>,
        steps: u64,
    ) -> Result<Self> {
        let fresh = Self::new(kind, sizes);
        let same = |a: &[Vec<S>], b: &[Vec<S>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &fresh.first) || !same(&second, &fresh.second) {
            return Err(Error::Format("optimizer buffers do not match the parameters".into()));
        }
        Ok(OptimizerState {
            kind,
            first,
            second,
            steps,
        })
    }

    /// Starts a new step; call once before the per-tensor updates of a batch.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [S], grad: &[S]) {
        match self.kind {
            Optimizer::Sgd { lr, momentum } => {
                let (lr, mu) = (S::from_f64(lr), S::from_f64(momentum));
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.first[slot].iter_mut()) {
                    *v = flush_subnormal(mu * *v - lr * *g);
                    *p += *v;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let t = self.steps.max(1) as i32;
                let step = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                let (b1, b2) = (S::from_f64(beta1), S::from_f64(beta2));
                let (step, eps) = (S::from_f64(step), S::from_f64(eps));
                let one = S::one();
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = flush_subnormal(b1 * m[i] + (one - b1) * g);
                    v[i] = flush_subnormal(b2 * v[i] + (one - b2) * g * g);
                    params[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
}

/// Moment buffers of parameters whose gradient stays zero (dead ReLUs)
/// decay into subnormals and never leave them; arithmetic on subnormals is
/// many times slower on x86.
#[inline]
fn flush_subnormal<S: Scalar>(v: S) -> S {
    if v.abs() < S::min_positive_value() {
        S::zero()
    } else {
        v
    }
}

/// Numerically stable softmax of each `classes`-wide row, in place.
pub fn softmax_rows<S: Scalar>(logits: &mut [S], classes: usize) {
    for row in logits.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

/// Maximum of `|a - n| / max(|a|, |n|)` over entries where either side
/// exceeds `floor`; entries that are both tiny are compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
