//! Convolutional digit classifier trained on inferred labels.
//!
//! Tensors are stored channels-last (`batch x height x width x channels`).
//! Convolutions are valid 3x3 with stride 1, lowered to a matrix product via
//! im2col. Pooling is 2x2 with stride 2; odd trailing rows and columns are
//! dropped.

mod eval;

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageStore, MNIST_SIDE};
use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, col_sums_into, gemm, Op, Scalar};
use crate::nn::{he_normal, relu_backward, relu_inplace, softmax_rows, Dense, DenseGrad, Optimizer, OptimizerState};
use crate::tensorfile::{Tensor, TensorFile};

pub use eval::{eval_addition, eval_classification, predict_store};

pub const KERNEL: usize = 3;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { filters: usize },
    Pool,
    Dense { units: usize },
}

/// Input geometry plus hidden layers. A linear `classes`-way output layer is
/// always appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub side: usize,
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl CnnSpec {
    /// conv32 - pool - conv64 - conv64 - pool - dense100 - dense10.
    pub fn mnist() -> Self {
        CnnSpec {
            side: MNIST_SIDE,
            channels: 1,
            layers: vec![
                LayerSpec::Conv { filters: 32 },
                LayerSpec::Pool,
                LayerSpec::Conv { filters: 64 },
                LayerSpec::Conv { filters: 64 },
                LayerSpec::Pool,
                LayerSpec::Dense { units: 100 },
            ],
            classes: CLASSES,
        }
    }

    pub fn input_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    /// `(height, width, channels)` after each layer, output layer included.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = (self.side, self.side, self.channels);
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for spec in &self.layers {
            shape = match *spec {
                LayerSpec::Conv { filters } => {
                    if shape.0 < KERNEL || shape.1 < KERNEL || filters == 0 {
                        return Err(Error::shape("spatial size >= 3", format!("{shape:?}")));
                    }
                    (shape.0 - KERNEL + 1, shape.1 - KERNEL + 1, filters)
                }
                LayerSpec::Pool => {
                    if shape.0 < 2 || shape.1 < 2 {
                        return Err(Error::shape("spatial size >= 2", format!("{shape:?}")));
                    }
                    (shape.0 / 2, shape.1 / 2, shape.2)
                }
                LayerSpec::Dense { units } => (1, 1, units),
            };
            out.push(shape);
        }
        out.push((1, 1, self.classes));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<S> {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub filters: usize,
    /// `(3 * 3 * in_c) x filters`, rows ordered `(ky, kx, channel)`.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ConvLayer<S> {
    fn out_h(&self) -> usize {
        self.in_h - KERNEL + 1
    }

    fn out_w(&self) -> usize {
        self.in_w - KERNEL + 1
    }

    fn patch(&self) -> usize {
        KERNEL * KERNEL * self.in_c
    }

    fn im2col(&self, x: &[S], batch: usize) -> Vec<S> {
        let (oh, ow, c) = (self.out_h(), self.out_w(), self.in_c);
        let mut cols = Vec::with_capacity(batch * oh * ow * self.patch());
        let img = self.in_h * self.in_w * c;
        for b in 0..batch {
            let base = &x[b * img..(b + 1) * img];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..KERNEL {
                        let start = ((oy + ky) * self.in_w + ox) * c;
                        cols.extend_from_slice(&base[start..start + KERNEL * c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, dcols: &[S], batch: usize, dx: &mut [S]) {
        let (oh, ow, c) = (self.out_h(), self.out_w(), self.in_c);
        let img = self.in_h * self.in_w * c;
        let patch = self.patch();
        for b in 0..batch {
            let base = &mut dx[b * img..(b + 1) * img];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &dcols[((b * oh + oy) * ow + ox) * patch..][..patch];
                    for ky in 0..KERNEL {
                        let start = ((oy + ky) * self.in_w + ox) * c;
                        for (d, g) in base[start..start + KERNEL * c]
                            .iter_mut()
                            .zip(&row[ky * KERNEL * c..(ky + 1) * KERNEL * c])
                        {
                            *d += *g;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolLayer {
    pub in_h: usize,
    pub in_w: usize,
    pub c: usize,
}

impl PoolLayer {
    fn out_len(&self) -> usize {
        (self.in_h / 2) * (self.in_w / 2) * self.c
    }

    /// Max over each 2x2 window. `argmax` records the flat input index that
    /// won, scanning the window row-major and keeping the first maximum.
    fn forward<S: Scalar>(&self, x: &[S], batch: usize, out: &mut [S], argmax: &mut [usize]) {
        let (oh, ow, c) = (self.in_h / 2, self.in_w / 2, self.c);
        let img = self.in_h * self.in_w * c;
        for b in 0..batch {
            for py in 0..oh {
                for px in 0..ow {
                    for ch in 0..c {
                        let o = ((b * oh + py) * ow + px) * c + ch;
                        let mut best_idx = b * img + ((2 * py) * self.in_w + 2 * px) * c + ch;
                        let mut best = x[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = b * img + ((2 * py + dy) * self.in_w + 2 * px + dx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv(ConvLayer<S>),
    Pool(PoolLayer),
    Dense(Dense<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<S> {
    Conv { weight: Vec<S>, bias: Vec<S> },
    Pool,
    Dense(DenseGrad<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams<S = f32> {
    pub spec: CnnSpec,
    pub layers: Vec<Layer<S>>,
}

enum Cache<S> {
    Conv { cols: Vec<S> },
    Pool { argmax: Vec<usize> },
    Dense,
}

struct Forward<S> {
    /// Input to each layer; the last entry holds the logits.
    acts: Vec<Vec<S>>,
    caches: Vec<Cache<S>>,
}

impl<S: Scalar> CnnParams<S> {
    /// He-initialized weights, zero biases.
    pub fn new(spec: CnnSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |fan_in, count| he_normal(&mut rng, fan_in, count))
    }

    /// Every weight and bias zero; all logits vanish.
    pub fn zeros(spec: CnnSpec) -> Result<Self> {
        Self::build(spec, |_, count| vec![S::zero(); count])
    }

    fn build(spec: CnnSpec, mut init: impl FnMut(usize, usize) -> Vec<S>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut prev = (spec.side, spec.side, spec.channels);
        let mut layers = Vec::with_capacity(shapes.len());
        let specs = spec
            .layers
            .iter()
            .copied()
            .chain(std::iter::once(LayerSpec::Dense { units: spec.classes }));
        for (ls, &shape) in specs.zip(&shapes) {
            let layer = match ls {
                LayerSpec::Conv { filters } => {
                    let fan_in = KERNEL * KERNEL * prev.2;
                    Layer::Conv(ConvLayer {
                        in_h: prev.0,
                        in_w: prev.1,
                        in_c: prev.2,
                        filters,
                        weight: init(fan_in, fan_in * filters),
                        bias: vec![S::zero(); filters],
                    })
                }
                LayerSpec::Pool => Layer::Pool(PoolLayer {
                    in_h: prev.0,
                    in_w: prev.1,
                    c: prev.2,
                }),
                LayerSpec::Dense { units } => {
                    let inputs = prev.0 * prev.1 * prev.2;
                    Layer::Dense(Dense {
                        inputs,
                        outputs: units,
                        weight: init(inputs, inputs * units),
                        bias: vec![S::zero(); units],
                    })
                }
            };
            layers.push(layer);
            prev = shape;
        }
        Ok(CnnParams { spec, layers })
    }

    fn forward(&self, x: &[S], batch: usize) -> Forward<S> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let (mut out, cache) = match layer {
                Layer::Conv(conv) => {
                    let cols = conv.im2col(input, batch);
                    let rows = batch * conv.out_h() * conv.out_w();
                    let mut out = vec![S::zero(); rows * conv.filters];
                    gemm(
                        rows,
                        conv.patch(),
                        conv.filters,
                        S::one(),
                        &cols,
                        Op::N,
                        &conv.weight,
                        Op::N,
                        S::zero(),
                        &mut out,
                    );
                    add_row_bias(&mut out, &conv.bias);
                    (out, Cache::Conv { cols })
                }
                Layer::Pool(pool) => {
                    let n = batch * pool.out_len();
                    let mut out = vec![S::zero(); n];
                    let mut argmax = vec![0; n];
                    pool.forward(input, batch, &mut out, &mut argmax);
                    (out, Cache::Pool { argmax })
                }
                Layer::Dense(dense) => {
                    let mut out = vec![S::zero(); batch * dense.outputs];
                    dense.forward(input, batch, &mut out);
                    (out, Cache::Dense)
                }
            };
            if l != last && !matches!(layer, Layer::Pool(_)) {
                relu_inplace(&mut out);
            }
            acts.push(out);
            caches.push(cache);
        }
        Forward { acts, caches }
    }

    /// Raw output-layer scores, `batch x classes`.
    pub fn logits(&self, x: &[S], batch: usize) -> Vec<S> {
        self.forward(x, batch).acts.pop().unwrap()
    }

    /// `(height, width, channels)` of every layer output for one forward pass.
    pub fn traced_shapes(&self, x: &[S]) -> Vec<usize> {
        self.forward(x, 1).acts[1..].iter().map(Vec::len).collect()
    }

    /// Mean softmax cross-entropy and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &[S], labels: &[u8], batch: usize) -> (f64, Vec<LayerGrad<S>>) {
        let fwd = self.forward(x, batch);
        let classes = self.spec.classes;
        let mut delta = fwd.acts.last().unwrap().clone();
        softmax_rows(&mut delta, classes);
        let mut loss = 0.0;
        let inv = S::from_f64(1.0 / batch as f64);
        for (row, &y) in delta.chunks_exact_mut(classes).zip(labels) {
            loss -= row[y as usize].to_f64().max(1e-300).ln();
            row[y as usize] -= S::one();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        loss /= batch as f64;

        let mut grads: Vec<LayerGrad<S>> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &fwd.acts[l];
            let need_input_grad = l > 0;
            let mut din = if need_input_grad {
                vec![S::zero(); input.len()]
            } else {
                Vec::new()
            };
            let grad = match (&self.layers[l], &fwd.caches[l]) {
                (Layer::Conv(conv), Cache::Conv { cols }) => {
                    let rows = batch * conv.out_h() * conv.out_w();
                    let patch = conv.patch();
                    let mut gw = vec![S::zero(); conv.weight.len()];
                    let mut gb = vec![S::zero(); conv.filters];
                    gemm(
                        patch,
                        rows,
                        conv.filters,
                        S::one(),
                        cols,
                        Op::T,
                        &delta,
                        Op::N,
                        S::zero(),
                        &mut gw,
                    );
                    col_sums_into(&delta, conv.filters, &mut gb);
                    if need_input_grad {
                        let mut dcols = vec![S::zero(); rows * patch];
                        gemm(
                            rows,
                            conv.filters,
                            patch,
                            S::one(),
                            &delta,
                            Op::N,
                            &conv.weight,
                            Op::T,
                            S::zero(),
                            &mut dcols,
                        );
                        conv.col2im_add(&dcols, batch, &mut din);
                    }
                    LayerGrad::Conv { weight: gw, bias: gb }
                }
                (Layer::Pool(_), Cache::Pool { argmax }) => {
                    for (g, &idx) in delta.iter().zip(argmax) {
                        din[idx] += *g;
                    }
                    LayerGrad::Pool
                }
                (Layer::Dense(dense), Cache::Dense) => {
                    let mut g = DenseGrad::for_layer(dense);
                    dense.backward(input, &delta, batch, &mut g, need_input_grad.then_some(&mut din[..]));
                    LayerGrad::Dense(g)
                }
                _ => unreachable!("cache matches layer"),
            };
            grads.push(grad);
            if need_input_grad {
                // The input of layer l is the ReLU output of layer l-1 unless
                // that layer is a pool (which passes activations through).
                if !matches!(self.layers[l - 1], Layer::Pool(_)) {
                    relu_backward(input, &mut din);
                }
                delta = din;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &[S], labels: &[u8], batch: usize) -> f64 {
        let mut p = self.logits(x, batch);
        softmax_rows(&mut p, self.spec.classes);
        let total: f64 = p
            .chunks_exact(self.spec.classes)
            .zip(labels)
            .map(|(row, &y)| -row[y as usize].to_f64().max(1e-300).ln())
            .sum();
        total / batch as f64
    }

    /// Visits every parameter tensor mutably, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Pool(_) => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Vec<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                Layer::Pool(_) => {}
            }
        }
        out
    }
}

/// Flattens gradients in the same order as [`CnnParams::params_mut`].
pub fn flatten_grads<S: Scalar>(grads: &[LayerGrad<S>]) -> Vec<&Vec<S>> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrad::Conv { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            LayerGrad::Dense(d) => {
                out.push(&d.weight);
                out.push(&d.bias);
            }
            LayerGrad::Pool => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnHyper {
    pub optimizer: Optimizer,
    pub batch_size: usize,
}

impl Default for CnnHyper {
    fn default() -> Self {
        CnnHyper {
            optimizer: Optimizer::sgd(0.01, 0.9),
            batch_size: 32,
        }
    }
}

/// He-initialized MNIST classifier.
pub fn init_cnn(seed: u64) -> CnnParams {
    CnnParams::new(CnnSpec::mnist(), seed).expect("the MNIST architecture is well formed")
}

/// SGD on softmax cross-entropy, reshuffling every epoch.
pub fn train_cnn(
    mut params: CnnParams,
    store: &ImageStore,
    labels: &[u8],
    epochs: usize,
    seed: u64,
    hyper: &CnnHyper,
) -> Result<CnnParams> {
    if labels.len() != store.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} images",
            labels.len(),
            store.len()
        )));
    }
    if store.dim() != params.spec.input_len() {
        return Err(Error::shape(params.spec.input_len(), store.dim()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= params.spec.classes) {
        return Err(Error::Argument(format!("label {bad} outside the class range")));
    }
    let sizes: Vec<usize> = params.params().iter().map(|p| p.len()).collect();
    let mut opt = OptimizerState::new(hyper.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut x = Vec::with_capacity(hyper.batch_size * store.dim());
    let mut y = Vec::with_capacity(hyper.batch_size);

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            x.clear();
            y.clear();
            for &id in chunk {
                x.extend_from_slice(store.image(id));
                y.push(labels[id]);
            }
            let (loss, grads) = params.loss_and_gradients(&x, &y, chunk.len());
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            opt.begin_step();
            let flat = flatten_grads(&grads);
            for (slot, (p, g)) in params.params_mut().into_iter().zip(flat).enumerate() {
                opt.update(slot, p, g);
            }
        }
        let mean = total / store.len().max(1) as f64;
        info!("classifier epoch {epoch}/{epochs}: loss {mean:.5}");
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub digit: u8,
    pub probabilities: Vec<f32>,
}

/// Argmax digit and softmax probabilities for `n` flattened images.
pub fn classify(params: &CnnParams, images: &[f32], n: usize) -> Result<Vec<Prediction>> {
    let len = params.spec.input_len();
    if images.len() != n * len {
        return Err(Error::shape(format!("{n} x {len}"), images.len()));
    }
    const CHUNK: usize = 256;
    let classes = params.spec.classes;
    let mut out = Vec::with_capacity(n);
    for chunk in images.chunks(CHUNK * len) {
        let rows = chunk.len() / len;
        let mut p = params.logits(chunk, rows);
        softmax_rows(&mut p, classes);
        for row in p.chunks_exact(classes) {
            let digit = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0 as u8;
            out.push(Prediction {
                digit,
                probabilities: row.to_vec(),
            });
        }
    }
    Ok(out)
}

impl CnnParams<f32> {
    pub fn to_tensor_file(&self, meta: serde_json::Value) -> Result<TensorFile> {
        let mut meta = meta;
        let spec = serde_json::to_value(&self.spec)?;
        match &mut meta {
            serde_json::Value::Object(map) => {
                map.insert("spec".into(), spec);
            }
            _ => meta = serde_json::json!({ "spec": spec }),
        }
        let tensors = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| Tensor::new(format!("p{i}"), vec![p.len()], p.clone()))
            .collect();
        Ok(TensorFile { meta, tensors })
    }

    pub fn from_tensor_file(mut file: TensorFile) -> Result<Self> {
        let spec: CnnSpec = serde_json::from_value(
            file.meta
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Format("classifier file lacks spec".into()))?,
        )?;
        let mut params = CnnParams::<f32>::zeros(spec)?;
        for (i, p) in params.params_mut().into_iter().enumerate() {
            let t = file.take(&format!("p{i}"))?;
            if t.data.len() != p.len() {
                return Err(Error::shape(p.len(), t.data.len()));
            }
            *p = t.data;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_tensor_file(meta)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::nn::max_relative_error;
    use rand::Rng;

    fn toy_spec() -> CnnSpec {
        CnnSpec {
            side: 8,
            channels: 1,
            layers: vec![
                LayerSpec::Conv { filters: 2 },
                LayerSpec::Pool,
                LayerSpec::Conv { filters: 2 },
                LayerSpec::Dense { units: 4 },
            ],
            classes: CLASSES,
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        // Random biases keep pre-activations away from the ReLU kink, which
        // zero biases on dead inputs would sit on exactly.
        let mut params = CnnParams::<f64>::new(toy_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for layer in &mut params.layers {
            let bias = match layer {
                Layer::Conv(c) => &mut c.bias,
                Layer::Dense(d) => &mut d.bias,
                Layer::Pool(_) => continue,
            };
            bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
        }
        let x: Vec<f64> = (0..4 * 64).map(|_| rng.random::<f64>()).collect();
        let y = [3u8, 0, 7, 3];
        let (_, grads) = params.loss_and_gradients(&x, &y, 4);
        let analytic: Vec<f64> = flatten_grads(&grads).into_iter().flatten().copied().collect();

        let eps = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        let n_tensors = params.params().len();
        for t in 0..n_tensors {
            for i in 0..params.params()[t].len() {
                let mut p = params.clone();
                p.params_mut()[t][i] += eps;
                let up = p.loss(&x, &y, 4);
                p.params_mut()[t][i] -= 2.0 * eps;
                let down = p.loss(&x, &y, 4);
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        let err = max_relative_error(&analytic, &numeric, 1e-7);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn mnist_shapes() {
        let params = init_cnn(0);
        let x = vec![0.5f32; 784];
        let sizes = params.traced_shapes(&x);
        assert_eq!(
            sizes,
            vec![
                26 * 26 * 32,
                13 * 13 * 32,
                11 * 11 * 64,
                9 * 9 * 64,
                4 * 4 * 64,
                100,
                10
            ]
        );
        assert_eq!(
            CnnSpec::mnist().shapes().unwrap(),
            vec![
                (26, 26, 32),
                (13, 13, 32),
                (11, 11, 64),
                (9, 9, 64),
                (4, 4, 64),
                (1, 1, 100),
                (1, 1, 10)
            ]
        );
    }

    #[test]
    fn he_statistics_and_zero_biases() {
        let params = init_cnn(5);
        for layer in &params.layers {
            let (w, b, fan_in) = match layer {
                Layer::Conv(c) => (&c.weight, &c.bias, 9 * c.in_c),
                Layer::Dense(d) => (&d.weight, &d.bias, d.inputs),
                Layer::Pool(_) => continue,
            };
            assert!(b.iter().all(|&v| v == 0.0));
            let sample = &w[..w.len().min(10_000)];
            let var = sample.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / sample.len() as f64;
            let want = 2.0 / fan_in as f64;
            if sample.len() >= 1000 {
                assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
            }
        }
        assert_eq!(init_cnn(5), params);
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let params = CnnParams::<f32>::zeros(CnnSpec::mnist()).unwrap();
        let preds = classify(&params, &vec![0.3; 2 * 784], 2).unwrap();
        for p in preds {
            assert!(p.probabilities.iter().all(|&v| (v - 0.1).abs() < 1e-6));
        }
    }

    #[test]
    fn probabilities_normalized_and_pure() {
        let params = init_cnn(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img: Vec<f32> = (0..784).map(|_| rng.random()).collect();
        let mut x = img.clone();
        x.extend_from_slice(&img);
        let preds = classify(&params, &x, 2).unwrap();
        assert_eq!(preds[0], preds[1]);
        let s: f32 = preds[0].probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(preds[0].probabilities.iter().all(|&p| p >= 0.0));
        assert!(matches!(classify(&params, &x[..100], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let params = init_cnn(4);
        let store = ImageStore::from_parts(vec![0.1; 2 * 784], 784, vec![1, 2], Split::Train).unwrap();
        let out = train_cnn(params.clone(), &store, &[1, 2], 0, 0, &CnnHyper::default()).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn label_length_mismatch_rejected() {
        let store = ImageStore::from_parts(vec![0.1; 2 * 784], 784, vec![1, 2], Split::Train).unwrap();
        assert!(train_cnn(init_cnn(0), &store, &[1], 1, 0, &CnnHyper::default()).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let params = CnnParams::<f32>::new(toy_spec(), 9).unwrap();
        let file = params.to_tensor_file(serde_json::json!({"seed": 9})).unwrap();
        let back = CnnParams::from_tensor_file(TensorFile::from_bytes(&file.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, params);
    }
}
