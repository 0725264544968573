//! Low-dimensional image embeddings: a fully connected symmetric autoencoder
//! and a deterministic PCA projection.

use std::path::Path;

use log::info;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageStore;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op, Scalar};
use crate::nn::{relu_backward, relu_inplace, Dense, DenseGrad, Optimizer, OptimizerState};
use crate::tensorfile::{Tensor, TensorFile};

/// Encoder widths used for MNIST: `784 -> 500 -> 500 -> 2000 -> 10`.
pub const MNIST_ENCODER_WIDTHS: [usize; 5] = [784, 500, 500, 2000, 10];

/// `rows x cols` latent coordinates, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite embedding value".into()));
        }
        Ok(EmbeddingMatrix { rows, cols, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor_file(&self, meta: serde_json::Value) -> TensorFile {
        TensorFile {
            meta,
            tensors: vec![Tensor::new(
                "embedding",
                vec![self.rows, self.cols],
                self.values.clone(),
            )],
        }
    }

    pub fn from_tensor_file(mut file: TensorFile) -> Result<Self> {
        let t = file.take("embedding")?;
        if t.shape.len() != 2 {
            return Err(Error::shape("2-d embedding", format!("{:?}", t.shape)));
        }
        EmbeddingMatrix::new(t.shape[0], t.shape[1], t.data)
    }
}

/// Weight initialization of the autoencoder; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Normal with variance `2 / fan_in`.
    He,
    /// Uniform with variance `1 / (3 fan_in)`.
    #[default]
    FanInUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderHyper {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    #[serde(default)]
    pub init: WeightInit,
}

impl Default for AutoencoderHyper {
    fn default() -> Self {
        AutoencoderHyper {
            optimizer: Optimizer::adam(1e-3),
            batch_size: 256,
            init: WeightInit::default(),
        }
    }
}

/// Symmetric dense autoencoder. The first `depth` layers form the encoder,
/// the rest mirror it. Hidden layers use ReLU; the code layer and the
/// reconstruction layer are linear.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<S = f32> {
    widths: Vec<usize>,
    layers: Vec<Dense<S>>,
}

/// Per-layer activations kept for the backward pass.
struct Trace<S> {
    acts: Vec<Vec<S>>,
}

impl<S: Scalar> AutoencoderParams<S> {
    /// Freshly initialized parameters for encoder `widths` (input first),
    /// using the default [`WeightInit`].
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::with_init(widths, WeightInit::default(), seed)
    }

    pub fn with_init(widths: &[usize], init: WeightInit, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Argument(format!("bad encoder widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::layer_dims(widths)
            .into_iter()
            .map(|(i, o)| match init {
                WeightInit::He => Dense::he(i, o, &mut rng),
                WeightInit::FanInUniform => Dense::fan_in_uniform(i, o, &mut rng),
            })
            .collect();
        Ok(AutoencoderParams {
            widths: widths.to_vec(),
            layers,
        })
    }

    /// All-zero parameters; every embedding is the zero vector.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Argument(format!("bad encoder widths {widths:?}")));
        }
        let layers = Self::layer_dims(widths)
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(AutoencoderParams {
            widths: widths.to_vec(),
            layers,
        })
    }

    fn layer_dims(widths: &[usize]) -> Vec<(usize, usize)> {
        let enc = widths.windows(2).map(|w| (w[0], w[1]));
        let dec = widths.windows(2).rev().map(|w| (w[1], w[0]));
        enc.chain(dec).collect()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn code_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    fn is_linear(&self, layer: usize) -> bool {
        layer == self.depth() - 1 || layer == self.layers.len() - 1
    }

    fn forward_range(&self, x: &[S], rows: usize, layers: std::ops::Range<usize>) -> Trace<S> {
        let mut acts = vec![x.to_vec()];
        for l in layers {
            let layer = &self.layers[l];
            let mut out = vec![S::zero(); rows * layer.outputs];
            layer.forward(acts.last().unwrap(), rows, &mut out);
            if !self.is_linear(l) {
                relu_inplace(&mut out);
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Mean squared reconstruction error over all `rows x input_dim` entries.
    pub fn reconstruction_loss(&self, x: &[S], rows: usize) -> f64 {
        let trace = self.forward_range(x, rows, 0..self.layers.len());
        let out = trace.acts.last().unwrap();
        let sse: f64 = out.iter().zip(x).map(|(o, t)| (*o - *t).to_f64().powi(2)).sum();
        sse / (rows * self.input_dim()) as f64
    }

    /// Loss and parameter gradients for a batch of `rows` images.
    pub fn loss_and_gradients(&self, x: &[S], rows: usize) -> (f64, Vec<DenseGrad<S>>) {
        let trace = self.forward_range(x, rows, 0..self.layers.len());
        let out = trace.acts.last().unwrap();
        let n = (rows * self.input_dim()) as f64;
        let mut sse = 0.0;
        let scale = S::from_f64(2.0 / n);
        let mut delta: Vec<S> = out
            .iter()
            .zip(x)
            .map(|(o, t)| {
                let d = *o - *t;
                sse += d.to_f64().powi(2);
                d * scale
            })
            .collect();

        let mut grads: Vec<DenseGrad<S>> = self.layers.iter().map(DenseGrad::for_layer).collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            if l > 0 {
                let mut din = vec![S::zero(); rows * layer.inputs];
                layer.backward(input, &delta, rows, &mut grads[l], Some(&mut din));
                if !self.is_linear(l - 1) {
                    relu_backward(input, &mut din);
                }
                delta = din;
            } else {
                layer.backward(input, &delta, rows, &mut grads[l], None);
            }
        }
        (sse / n, grads)
    }

    /// Encoder forward pass for `rows` inputs.
    pub fn encode_rows(&self, x: &[S], rows: usize) -> Vec<S> {
        let mut trace = self.forward_range(x, rows, 0..self.depth());
        trace.acts.pop().unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl AutoencoderParams<f32> {
    /// Mini-batch training on `store`; returns the mean batch loss of each epoch.
    pub fn fit(&mut self, store: &ImageStore, epochs: usize, seed: u64, hyper: &AutoencoderHyper) -> Result<Vec<f64>> {
        let mut trainer = AutoencoderTrainer::new(self.clone(), *hyper, seed);
        trainer.train_to(store, epochs)?;
        *self = trainer.params;
        Ok(trainer.history)
    }

    pub fn to_tensor_file(&self, meta: serde_json::Value) -> TensorFile {
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            tensors.push(Tensor::new(
                format!("w{l}"),
                vec![layer.inputs, layer.outputs],
                layer.weight.clone(),
            ));
            tensors.push(Tensor::new(format!("b{l}"), vec![layer.outputs], layer.bias.clone()));
        }
        let mut meta = meta;
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("widths".into(), serde_json::json!(self.widths));
        } else {
            meta = serde_json::json!({ "widths": self.widths });
        }
        TensorFile { meta, tensors }
    }

    pub fn from_tensor_file(mut file: TensorFile) -> Result<Self> {
        let widths: Vec<usize> = serde_json::from_value(
            file.meta
                .get("widths")
                .cloned()
                .ok_or_else(|| Error::Format("autoencoder file lacks widths".into()))?,
        )?;
        let mut params = AutoencoderParams::<f32>::zeros(&widths)?;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let w = file.take(&format!("w{l}"))?;
            let b = file.take(&format!("b{l}"))?;
            if w.shape != [layer.inputs, layer.outputs] || b.shape != [layer.outputs] {
                return Err(Error::shape(
                    format!("[{}, {}]", layer.inputs, layer.outputs),
                    format!("{:?}", w.shape),
                ));
            }
            layer.weight = w.data;
            layer.bias = b.data;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_tensor_file(meta).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?)
    }
}

/// Training state that can be saved and resumed. Epoch `e` shuffles with
/// stream `e` of a generator seeded by `seed`, so a run resumed after `n`
/// epochs continues exactly as an uninterrupted one would.
#[derive(Debug, Clone)]
pub struct AutoencoderTrainer {
    pub params: AutoencoderParams,
    pub hyper: AutoencoderHyper,
    pub seed: u64,
    /// Mean loss of every completed epoch.
    pub history: Vec<f64>,
    opt: OptimizerState<f32>,
}

impl AutoencoderTrainer {
    pub fn new(params: AutoencoderParams, hyper: AutoencoderHyper, seed: u64) -> Self {
        let opt = OptimizerState::new(hyper.optimizer, &Self::slot_sizes(&params));
        AutoencoderTrainer {
            params,
            hyper,
            seed,
            history: Vec::new(),
            opt,
        }
    }

    /// Untrained state as `train_autoencoder` starts from.
    pub fn fresh(widths: &[usize], seed: u64, hyper: &AutoencoderHyper) -> Result<Self> {
        Ok(Self::new(
            AutoencoderParams::with_init(widths, hyper.init, seed)?,
            *hyper,
            seed.wrapping_add(1),
        ))
    }

    fn slot_sizes(params: &AutoencoderParams) -> Vec<usize> {
        params
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// One pass over `store`; returns its mean batch loss.
    pub fn run_epoch(&mut self, store: &ImageStore) -> Result<f64> {
        if store.dim() != self.params.input_dim() {
            return Err(Error::shape(self.params.input_dim(), store.dim()));
        }
        if self.hyper.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let epoch = self.epochs_done() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..store.len()).collect();
        order.shuffle(&mut rng);

        let mut batch = Vec::with_capacity(self.hyper.batch_size * store.dim());
        let mut total = 0.0;
        for chunk in order.chunks(self.hyper.batch_size) {
            batch.clear();
            for &id in chunk {
                batch.extend_from_slice(store.image(id));
            }
            let (loss, grads) = self.params.loss_and_gradients(&batch, chunk.len());
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            self.opt.begin_step();
            for (l, (layer, g)) in self.params.layers.iter_mut().zip(&grads).enumerate() {
                self.opt.update(2 * l, &mut layer.weight, &g.weight);
                self.opt.update(2 * l + 1, &mut layer.bias, &g.bias);
            }
        }
        let mean = total / store.len().max(1) as f64;
        if !mean.is_finite() || !self.params.all_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        self.history.push(mean);
        Ok(mean)
    }

    /// Trains until `epochs` epochs are complete in total.
    pub fn train_to(&mut self, store: &ImageStore, epochs: usize) -> Result<()> {
        while self.epochs_done() < epochs {
            let loss = self.run_epoch(store)?;
            info!("autoencoder epoch {}/{epochs}: loss {loss:.6}", self.epochs_done());
        }
        Ok(())
    }

    /// Parameters plus optimizer buffers; `meta` gains the resume fields.
    pub fn to_tensor_file(&self, meta: serde_json::Value) -> Result<TensorFile> {
        let mut file = self.params.to_tensor_file(meta);
        let (first, second) = self.opt.buffers();
        for (i, buf) in first.iter().enumerate() {
            file.tensors
                .push(Tensor::new(format!("opt_m{i}"), vec![buf.len()], buf.clone()));
        }
        for (i, buf) in second.iter().enumerate() {
            file.tensors
                .push(Tensor::new(format!("opt_v{i}"), vec![buf.len()], buf.clone()));
        }
        let map = file.meta.as_object_mut().expect("parameter meta is an object");
        map.insert("hyper".into(), serde_json::to_value(self.hyper)?);
        map.insert("seed".into(), self.seed.into());
        map.insert("steps".into(), self.opt.steps().into());
        map.insert("history".into(), serde_json::to_value(&self.history)?);
        map.insert("epochs".into(), self.epochs_done().into());
        Ok(file)
    }

    pub fn from_tensor_file(mut file: TensorFile) -> Result<Self> {
        let field = |name: &str| {
            file.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let hyper: AutoencoderHyper = serde_json::from_value(field("hyper")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let steps: u64 = serde_json::from_value(field("steps")?)?;
        let history: Vec<f64> = serde_json::from_value(field("history")?)?;
        let n_slots = file.tensors.iter().filter(|t| t.name.starts_with("opt_m")).count();
        let mut first = Vec::with_capacity(n_slots);
        for i in 0..n_slots {
            first.push(file.take(&format!("opt_m{i}"))?.data);
        }
        let mut second = Vec::new();
        if matches!(hyper.optimizer, Optimizer::Adam { .. }) {
            for i in 0..n_slots {
                second.push(file.take(&format!("opt_v{i}"))?.data);
            }
        }
        let params = AutoencoderParams::from_tensor_file(file)?;
        let opt = OptimizerState::from_parts(hyper.optimizer, &Self::slot_sizes(&params), first, second, steps)?;
        Ok(AutoencoderTrainer {
            params,
            hyper,
            seed,
            history,
            opt,
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_tensor_file(meta)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?)
    }
}

/// Initializes an autoencoder with encoder `widths` and trains it on `store`.
pub fn train_autoencoder(
    store: &ImageStore,
    widths: &[usize],
    epochs: usize,
    seed: u64,
    hyper: &AutoencoderHyper,
) -> Result<AutoencoderParams> {
    if epochs == 0 {
        return Err(Error::Argument("epochs must be at least 1".into()));
    }
    let mut trainer = AutoencoderTrainer::fresh(widths, seed, hyper)?;
    trainer.train_to(store, epochs)?;
    Ok(trainer.params)
}

/// Runs every image through the encoder.
pub fn encode(params: &AutoencoderParams, store: &ImageStore) -> Result<EmbeddingMatrix> {
    if store.dim() != params.input_dim() {
        return Err(Error::shape(params.input_dim(), store.dim()));
    }
    const CHUNK: usize = 1024;
    let dim = store.dim();
    let mut values = Vec::with_capacity(store.len() * params.code_dim());
    for rows in store.pixels().chunks(CHUNK * dim) {
        values.extend(params.encode_rows(rows, rows.len() / dim));
    }
    EmbeddingMatrix::new(store.len(), params.code_dim(), values)
}

/// Projects centred images onto their top `dim` principal components.
/// Components beyond the numerical rank of the data are zero.
pub fn pca_embed(store: &ImageStore, dim: usize) -> Result<EmbeddingMatrix> {
    let d = store.dim();
    if dim == 0 || dim > d {
        return Err(Error::Argument(format!("pca dimension {dim} outside 1..={d}")));
    }
    let n = store.len();
    if n == 0 {
        return EmbeddingMatrix::new(0, dim, Vec::new());
    }

    let mut mean = vec![0.0f64; d];
    for row in store.pixels().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    const CHUNK: usize = 2048;
    let mut cov = vec![0.0f64; d * d];
    let mut centred = Vec::with_capacity(CHUNK * d);
    for rows in store.pixels().chunks(CHUNK * d) {
        centred.clear();
        for row in rows.chunks_exact(d) {
            centred.extend(row.iter().zip(&mean).map(|(v, m)| *v as f64 - m));
        }
        let r = rows.len() / d;
        gemm(d, r, d, 1.0, &centred, Op::T, &centred, Op::N, 1.0, &mut cov);
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = top * 1e-10 * d as f64;

    // d x dim projection, sign fixed so each component's largest entry is positive.
    let mut basis = vec![0.0f64; d * dim];
    for (c, &idx) in order.iter().take(dim).enumerate() {
        if eig.eigenvalues[idx] <= rank_tol {
            continue;
        }
        let col = eig.eigenvectors.column(idx);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            basis[r * dim + c] = sign * col[r];
        }
    }

    let mut values = Vec::with_capacity(n * dim);
    let mut out = vec![0.0f64; CHUNK * dim];
    for rows in store.pixels().chunks(CHUNK * d) {
        centred.clear();
        for row in rows.chunks_exact(d) {
            centred.extend(row.iter().zip(&mean).map(|(v, m)| *v as f64 - m));
        }
        let r = rows.len() / d;
        gemm(r, d, dim, 1.0, &centred, Op::N, &basis, Op::N, 0.0, &mut out[..r * dim]);
        values.extend(out[..r * dim].iter().map(|&v| v as f32));
    }
    EmbeddingMatrix::new(n, dim, values)
}
