//! End-to-end orchestration: embed, cluster, assign digits, propagate labels,
//! train the classifier, evaluate. Every stage persists an artifact tagged
//! with the hash of the configuration that produced it.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{solve_corpus, DigitAssignment};
use crate::classifier::{eval_addition, eval_classification, init_cnn, train_cnn, CnnHyper, CnnParams};
use crate::clustering::{kmeans_restarts, purity, ClusterModel, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::dataset::{build_corpus, load_mnist_dir, Corpus, GaussianBlobs, ImageStore, Split, MNIST_PIXELS};
use crate::embedding::{
    encode, pca_embed, AutoencoderHyper, AutoencoderParams, AutoencoderTrainer, EmbeddingMatrix, MNIST_ENCODER_WIDTHS,
};
use crate::error::{Error, Result};
use crate::inference::{default_schedule, final_labels, init_labels, run_inference_with_schedule, LabelSummary};
use crate::tensorfile::{Tensor, TensorFile};

/// Environment variable that overrides the default MNIST directory.
pub const AE_CHECKPOINT_EVERY: usize = 50;

pub const DATA_DIR_ENV: &str = "SUMLABEL_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    /// Gaussian blobs with 784 dimensions, one blob per digit.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Autoencoder,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 2000,
            n_test: 500,
            separation: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 10,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            n_init: 10,
        }
    }
}

/// Everything a run depends on. Every field has a default, so `{}` is a
/// valid configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub w: usize,
    pub h: usize,
    pub oversample_factor: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub source: DataSource,
    /// Keep only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` test images.
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
    pub backend: Backend,
    pub embed_dim: usize,
    pub ae_epochs: usize,
    /// Separate from `seed` so that runs with different seeds can share one
    /// pretrained encoder.
    pub ae_seed: u64,
    pub ae_hyper: AutoencoderHyper,
    pub kmeans: KmeansConfig,
    /// Per-cluster distance quantiles trusted at each inference step.
    pub radius_schedule: Vec<f64>,
    pub cnn_epochs: usize,
    pub cnn_hyper: CnnHyper,
    /// MNIST IDX directory. Falls back to `$SUMLABEL_DATA_DIR`, then `data/mnist`.
    pub data_dir: Option<PathBuf>,
    pub artifacts_dir: PathBuf,
    pub reports_dir: PathBuf,
    /// Reuse persisted stage artifacts instead of recomputing them.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            w: 2,
            h: 2,
            oversample_factor: 1,
            seed: 0,
            batch_size: 100,
            source: DataSource::Mnist,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
            backend: Backend::Autoencoder,
            embed_dim: 10,
            ae_epochs: 50,
            ae_seed: 0,
            ae_hyper: AutoencoderHyper::default(),
            kmeans: KmeansConfig::default(),
            radius_schedule: default_schedule(),
            cnn_epochs: 10,
            cnn_hyper: CnnHyper::default(),
            data_dir: None,
            artifacts_dir: PathBuf::from("artifacts"),
            reports_dir: PathBuf::from("reports"),
            resume: false,
        }
    }
}

fn short_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Inputs that determine the training-set embedding.
#[derive(Serialize)]
struct EmbedKey<'a> {
    source: DataSource,
    train_limit: Option<usize>,
    synthetic: Option<(&'a SyntheticConfig, u64)>,
    backend: Backend,
    embed_dim: usize,
    ae: Option<(usize, u64, &'a AutoencoderHyper)>,
}

impl RunConfig {
    /// Rejects configurations no stage could run with; warns outside the
    /// tested envelope of `w <= 10`, `h <= 6`.
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Argument("w and h must be positive".into()));
        }
        crate::dataset::positional_weight(self.w, 1)?;
        if self.w > 10 || self.h > 6 {
            warn!(
                "w = {}, h = {} is outside the tested range w <= 10, h <= 6",
                self.w, self.h
            );
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if self.oversample_factor == 0 {
            return Err(Error::Argument("oversample_factor must be at least 1".into()));
        }
        if self.kmeans.k == 0 || self.kmeans.k > 10 {
            return Err(Error::Argument(format!("k = {} outside 1..=10", self.kmeans.k)));
        }
        if self.radius_schedule.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Argument("radius schedule entries must lie in [0, 1]".into()));
        }
        if self.backend == Backend::Autoencoder && self.ae_epochs == 0 {
            return Err(Error::Argument("ae_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash over every field that affects results; paths and `resume` are
    /// excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = None;
        c.artifacts_dir = PathBuf::new();
        c.reports_dir = PathBuf::new();
        c.resume = false;
        short_hash(&c)
    }

    pub fn run_id(&self) -> String {
        format!(
            "w{}h{}f{}s{}-{}",
            self.w,
            self.h,
            self.oversample_factor,
            self.seed,
            self.config_hash()
        )
    }

    pub fn embed_hash(&self) -> String {
        short_hash(&EmbedKey {
            source: self.source,
            train_limit: self.train_limit,
            synthetic: (self.source == DataSource::Synthetic).then_some((&self.synthetic, self.seed)),
            backend: self.backend,
            embed_dim: self.embed_dim,
            ae: (self.backend == Backend::Autoencoder).then_some((self.ae_epochs, self.ae_seed, &self.ae_hyper)),
        })
    }

    /// Like `embed_hash` but blind to the epoch count, so autoencoder
    /// checkpoints of one training run share it.
    pub fn embed_lineage(&self) -> String {
        let mut c = self.clone();
        c.ae_epochs = 0;
        c.embed_hash()
    }

    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.artifacts_dir.join(self.run_id())
    }

    pub fn shared_dir(&self) -> PathBuf {
        self.artifacts_dir.join("shared")
    }

    /// Same data source, limits and synthetic parameters.
    fn same_data(&self, other: &RunConfig) -> bool {
        self.source == other.source
            && self.train_limit == other.train_limit
            && self.test_limit == other.test_limit
            && self.resolved_data_dir() == other.resolved_data_dir()
            && (self.source == DataSource::Mnist || (self.synthetic == other.synthetic && self.seed == other.seed))
    }
}

/// Train and test images for a run.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: ImageStore,
    pub test: ImageStore,
}

pub fn load_data(config: &RunConfig) -> Result<Data> {
    let (train, test) = match config.source {
        DataSource::Mnist => {
            let dir = config.resolved_data_dir();
            (load_mnist_dir(&dir, Split::Train)?, load_mnist_dir(&dir, Split::Test)?)
        }
        DataSource::Synthetic => {
            let s = &config.synthetic;
            let blobs = GaussianBlobs::new(10, s.separation, MNIST_PIXELS, config.seed)?;
            let train = blobs.sample(s.n_train, config.seed.wrapping_add(1), Split::Train)?;
            let test = blobs.sample(s.n_test, config.seed.wrapping_add(3), Split::Test)?;
            // Pixel-like range, fixed by the training split.
            let (lo, hi) = train
                .pixels()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
            (rescale(&train, lo, scale)?, rescale(&test, lo, scale)?)
        }
    };
    let limit = |store: ImageStore, n: Option<usize>| match n {
        Some(n) if n < store.len() => store.head(n),
        _ => store,
    };
    Ok(Data {
        train: limit(train, config.train_limit),
        test: limit(test, config.test_limit),
    })
}

fn rescale(store: &ImageStore, offset: f32, scale: f32) -> Result<ImageStore> {
    let pixels = store.pixels().iter().map(|&v| (v - offset) * scale).collect();
    ImageStore::from_parts(pixels, store.dim(), store.eval_labels().to_vec(), store.split())
}

/// Fraction of images whose assigned label equals the true label.
pub fn label_accuracy(labels: &[u8], store: &ImageStore) -> Result<f64> {
    if labels.len() != store.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} images",
            labels.len(),
            store.len()
        )));
    }
    if labels.is_empty() {
        return Ok(1.0);
    }
    let hits = labels.iter().zip(store.eval_labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Embed,
    Cluster,
    Assign,
    Infer,
    Train,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    /// Encoder pretraining plus encoding; not part of `total`.
    pub embed: f64,
    pub cluster: f64,
    pub assign: f64,
    pub infer: f64,
    pub train: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub n_train_images: usize,
    pub n_examples: usize,
    pub times: StageTimes,
    pub purity: Option<f64>,
    pub cluster_sizes: Option<Vec<usize>>,
    pub digits: Option<Vec<u8>>,
    pub objective: Option<u64>,
    pub satisfied: Option<usize>,
    pub winning_batch: Option<usize>,
    pub label_acc_pre: Option<f64>,
    pub label_acc_post: Option<f64>,
    pub inference: Option<LabelSummary>,
    pub inconsistencies: Option<usize>,
    pub cls_acc: Option<f64>,
    pub add_acc: Option<f64>,
    pub failure: Option<StageFailure>,
}

impl RunReport {
    fn new(config: &RunConfig) -> Self {
        RunReport {
            run_id: config.run_id(),
            config_hash: config.config_hash(),
            config: config.clone(),
            n_train_images: 0,
            n_examples: 0,
            times: StageTimes::default(),
            purity: None,
            cluster_sizes: None,
            digits: None,
            objective: None,
            satisfied: None,
            winning_batch: None,
            label_acc_pre: None,
            label_acc_post: None,
            inference: None,
            inconsistencies: None,
            cls_acc: None,
            add_acc: None,
            failure: None,
        }
    }

    pub fn row(&self) -> SweepRow {
        SweepRow {
            w: self.config.w,
            h: self.config.h,
            factor: self.config.oversample_factor,
            seed: self.config.seed,
            purity: self.purity,
            label_acc_pre: self.label_acc_pre,
            label_acc_post: self.label_acc_post,
            cls_acc: self.cls_acc,
            add_acc: self.add_acc,
            t_cluster: self.times.cluster,
            t_assign: self.times.assign,
            t_infer: self.times.infer,
            t_train: self.times.train,
            t_total: self.times.total,
        }
    }

    /// The report with every wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            times: StageTimes::default(),
            ..self.clone()
        }
    }

    /// Writes `report.json` and a one-row `report.csv` under the reports
    /// directory.
    pub fn write(&self) -> Result<PathBuf> {
        let dir = self.config.reports_dir.join(&self.run_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        write_rows(&dir.join("report.csv"), std::slice::from_ref(self))?;
        Ok(json)
    }
}

/// One line of `sweep.csv`. Metrics of stages that did not run are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: usize,
    pub h: usize,
    pub factor: usize,
    pub seed: u64,
    pub purity: Option<f64>,
    pub label_acc_pre: Option<f64>,
    pub label_acc_post: Option<f64>,
    pub cls_acc: Option<f64>,
    pub add_acc: Option<f64>,
    pub t_cluster: f64,
    pub t_assign: f64,
    pub t_infer: f64,
    pub t_train: f64,
    pub t_total: f64,
}

pub fn write_rows(path: &Path, reports: &[RunReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = csv::Writer::from_path(path)?;
    for r in reports {
        out.serialize(r.row())?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn with_hash(hash: &str, stage: Stage) -> serde_json::Value {
    serde_json::json!({ "config_hash": hash, "stage": stage })
}

fn check_hash(path: &Path, meta: &serde_json::Value, expected: &str) -> Result<()> {
    let found = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
    if found != expected {
        return Err(Error::ArtifactMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AssignmentArtifact {
    config_hash: String,
    #[serde(default)]
    seconds: f64,
    assignment: DigitAssignment,
}

/// Compute time recorded in an artifact's meta; resumed runs report it in
/// place of the time spent loading.
fn stored_seconds(meta: &serde_json::Value) -> f64 {
    meta.get("seconds").and_then(|v| v.as_f64()).unwrap_or(0.0)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Training-set embedding, cached under the shared artifact directory by
/// its own hash so that runs differing only downstream reuse it.
pub fn embed_stage(config: &RunConfig, data: &Data) -> Result<EmbeddingMatrix> {
    let hash = config.embed_hash();
    let dir = config.shared_dir();
    let path = dir.join(format!("embedding-{hash}.sltf"));
    if path.exists() {
        let file = TensorFile::read(&path)?;
        check_hash(&path, &file.meta, &hash)?;
        let emb = EmbeddingMatrix::from_tensor_file(file)?;
        if emb.rows == data.train.len() {
            info!("reusing embedding {}", path.display());
            return Ok(emb);
        }
        warn!(
            "cached embedding has {} rows, expected {}; recomputing",
            emb.rows,
            data.train.len()
        );
    }
    ensure_dir(&dir)?;
    let emb = match config.backend {
        Backend::Pca => pca_embed(&data.train, config.embed_dim)?,
        Backend::Autoencoder => {
            let params = autoencoder_checkpoint(config, data, &dir)?;
            encode(&params, &data.train)?
        }
    };
    emb.to_tensor_file(with_hash(&hash, Stage::Embed)).write(&path)?;
    Ok(emb)
}

/// Trains the autoencoder to `config.ae_epochs`, continuing from the longest
/// cached checkpoint of the same lineage. A checkpoint is kept every
/// `AE_CHECKPOINT_EVERY` epochs and at the end.
fn autoencoder_checkpoint(config: &RunConfig, data: &Data, dir: &Path) -> Result<AutoencoderParams> {
    let lineage = config.embed_lineage();
    let path_for = |epochs: usize| dir.join(format!("autoencoder-{lineage}-e{epochs}.sltf"));
    let prefix = format!("autoencoder-{lineage}-e");
    let mut best: Option<usize> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry
            .map_err(|e| Error::io(dir, e))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        let epochs = name
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".sltf"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(n) = epochs.filter(|&n| n <= config.ae_epochs) {
            best = best.max(Some(n));
        }
    }
    let mut trainer = match best {
        Some(n) => {
            let path = path_for(n);
            let file = TensorFile::read(&path)?;
            check_hash(&path, &file.meta, &lineage)?;
            info!("resuming autoencoder from {}", path.display());
            AutoencoderTrainer::from_tensor_file(file)?
        }
        None => {
            let mut widths = MNIST_ENCODER_WIDTHS.to_vec();
            widths[0] = data.train.dim();
            *widths.last_mut().unwrap() = config.embed_dim;
            AutoencoderTrainer::fresh(&widths, config.ae_seed, &config.ae_hyper)?
        }
    };
    if trainer.epochs_done() == config.ae_epochs {
        return Ok(trainer.params);
    }
    while trainer.epochs_done() < config.ae_epochs {
        let next = ((trainer.epochs_done() / AE_CHECKPOINT_EVERY + 1) * AE_CHECKPOINT_EVERY).min(config.ae_epochs);
        trainer.train_to(&data.train, next)?;
        let mut meta = with_hash(&lineage, Stage::Embed);
        meta["ae_seed"] = config.ae_seed.into();
        trainer.save(&path_for(next), meta)?;
    }
    Ok(trainer.params)
}

/// A run in progress. Stage methods load the persisted artifact when
/// resuming and compute (then persist) it otherwise.
pub struct Run<'a> {
    pub config: RunConfig,
    pub data: &'a Data,
    pub report: RunReport,
    hash: String,
    dir: PathBuf,
    corpus: Option<Corpus>,
    embedding: Option<EmbeddingMatrix>,
    model: Option<ClusterModel>,
    assignment: Option<DigitAssignment>,
    labels: Option<Vec<u8>>,
    cnn: Option<CnnParams>,
}

impl<'a> Run<'a> {
    pub fn new(config: RunConfig, data: &'a Data) -> Result<Self> {
        config.validate()?;
        let hash = config.config_hash();
        let dir = config.run_dir();
        ensure_dir(&dir)?;
        let mut report = RunReport::new(&config);
        report.n_train_images = data.train.len();
        Ok(Run {
            config,
            data,
            report,
            hash,
            dir,
            corpus: None,
            embedding: None,
            model: None,
            assignment: None,
            labels: None,
            cnn: None,
        })
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn reuse(&self, path: &Path) -> bool {
        self.config.resume && path.exists()
    }

    pub fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            let c = &self.config;
            let corpus = build_corpus(&self.data.train, c.w, c.h, c.oversample_factor, c.seed)?;
            self.report.n_examples = corpus.len();
            self.corpus = Some(corpus);
        }
        Ok(self.corpus.as_ref().unwrap())
    }

    pub fn embedding(&mut self) -> Result<&EmbeddingMatrix> {
        if self.embedding.is_none() {
            let start = Instant::now();
            let emb = embed_stage(&self.config, self.data)?;
            self.report.times.embed = start.elapsed().as_secs_f64();
            self.embedding = Some(emb);
        }
        Ok(self.embedding.as_ref().unwrap())
    }

    pub fn cluster(&mut self) -> Result<&ClusterModel> {
        if self.model.is_none() {
            self.embedding()?;
            let emb = self.embedding.as_ref().unwrap();
            let model_path = self.artifact("clusters.sltf");
            let assign_path = self.artifact("clusters.u32");
            let start = Instant::now();
            let model = if self.reuse(&model_path) {
                let meta = TensorFile::read(&model_path)?.meta;
                check_hash(&model_path, &meta, &self.hash)?;
                self.report.times.cluster = stored_seconds(&meta);
                ClusterModel::load(&model_path, &assign_path, emb)?
            } else {
                let k = &self.config.kmeans;
                let model = kmeans_restarts(emb, k.k, self.config.seed, k.max_iter, k.tol, k.n_init)?;
                self.report.times.cluster = start.elapsed().as_secs_f64();
                let mut meta = with_hash(&self.hash, Stage::Cluster);
                meta["seconds"] = self.report.times.cluster.into();
                model.save(&model_path, &assign_path, meta)?;
                model
            };
            self.report.purity = Some(purity(&model, self.data.train.eval_labels())?);
            self.report.cluster_sizes = Some(model.cluster_sizes());
            self.model = Some(model);
        }
        Ok(self.model.as_ref().unwrap())
    }

    pub fn assign(&mut self) -> Result<&DigitAssignment> {
        if self.assignment.is_none() {
            self.cluster()?;
            self.corpus()?;
            let path = self.artifact("assignment.json");
            let start = Instant::now();
            let assignment = if self.reuse(&path) {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let art: AssignmentArtifact = serde_json::from_str(&text)?;
                if art.config_hash != self.hash {
                    return Err(Error::ArtifactMismatch {
                        path,
                        expected: self.hash.clone(),
                        found: art.config_hash,
                    });
                }
                self.report.times.assign = art.seconds;
                art.assignment
            } else {
                let a = solve_corpus(
                    self.corpus.as_ref().unwrap(),
                    self.model.as_ref().unwrap(),
                    self.config.batch_size,
                )?;
                self.report.times.assign = start.elapsed().as_secs_f64();
                let art = AssignmentArtifact {
                    config_hash: self.hash.clone(),
                    seconds: self.report.times.assign,
                    assignment: a.clone(),
                };
                std::fs::write(&path, serde_json::to_string_pretty(&art)?).map_err(|e| Error::io(&path, e))?;
                a
            };
            let model = self.model.as_ref().unwrap();
            let pre: Vec<u8> = model.assignment.iter().map(|&c| assignment.digits[c]).collect();
            self.report.label_acc_pre = Some(label_accuracy(&pre, &self.data.train)?);
            self.report.digits = Some(assignment.digits.clone());
            self.report.objective = Some(assignment.objective);
            self.report.satisfied = Some(assignment.satisfied);
            self.report.winning_batch = Some(assignment.batch_index);
            self.assignment = Some(assignment);
        }
        Ok(self.assignment.as_ref().unwrap())
    }

    pub fn infer(&mut self) -> Result<&[u8]> {
        if self.labels.is_none() {
            self.assign()?;
            let path = self.artifact("labels.sltf");
            let start = Instant::now();
            let labels = if self.reuse(&path) {
                let mut file = TensorFile::read(&path)?;
                check_hash(&path, &file.meta, &self.hash)?;
                let summary: LabelSummary = serde_json::from_value(file.meta["summary"].clone())?;
                self.report.inference = Some(summary);
                self.report.times.infer = stored_seconds(&file.meta);
                let t = file.take("labels")?;
                t.data.iter().map(|&v| v as u8).collect()
            } else {
                let model = self.model.as_ref().unwrap();
                let state = init_labels(model, self.assignment.as_ref().unwrap())?;
                let state = run_inference_with_schedule(
                    state,
                    self.corpus.as_ref().unwrap(),
                    model,
                    &self.config.radius_schedule,
                )?;
                let labels = final_labels(&state);
                let summary = state.summary();
                self.report.times.infer = start.elapsed().as_secs_f64();
                let mut meta = with_hash(&self.hash, Stage::Infer);
                meta["summary"] = serde_json::to_value(&summary)?;
                meta["seconds"] = self.report.times.infer.into();
                TensorFile {
                    meta,
                    tensors: vec![Tensor::new(
                        "labels",
                        vec![labels.len()],
                        labels.iter().map(|&l| l as f32).collect(),
                    )],
                }
                .write(&path)?;
                self.report.inference = Some(summary);
                labels
            };
            self.report.inconsistencies = self.report.inference.as_ref().map(|s| s.inconsistent_examples);
            self.report.label_acc_post = Some(label_accuracy(&labels, &self.data.train)?);
            self.labels = Some(labels);
        }
        Ok(self.labels.as_ref().unwrap())
    }

    pub fn train(&mut self) -> Result<&CnnParams> {
        if self.cnn.is_none() {
            self.infer()?;
            let path = self.artifact("classifier.sltf");
            let start = Instant::now();
            let cnn = if self.reuse(&path) {
                let file = TensorFile::read(&path)?;
                check_hash(&path, &file.meta, &self.hash)?;
                self.report.times.train = stored_seconds(&file.meta);
                CnnParams::from_tensor_file(file)?
            } else {
                let cnn = train_cnn(
                    init_cnn(self.config.seed),
                    &self.data.train,
                    self.labels.as_ref().unwrap(),
                    self.config.cnn_epochs,
                    self.config.seed.wrapping_add(1),
                    &self.config.cnn_hyper,
                )?;
                self.report.times.train = start.elapsed().as_secs_f64();
                let mut meta = with_hash(&self.hash, Stage::Train);
                meta["seconds"] = self.report.times.train.into();
                cnn.save(&path, meta)?;
                cnn
            };
            self.cnn = Some(cnn);
        }
        Ok(self.cnn.as_ref().unwrap())
    }

    pub fn evaluate(&mut self) -> Result<()> {
        self.train()?;
        let cnn = self.cnn.as_ref().unwrap();
        let c = &self.config;
        self.report.cls_acc = Some(eval_classification(cnn, &self.data.test)?);
        let test_corpus = build_corpus(&self.data.test, c.w, c.h, 1, c.seed.wrapping_add(1))?;
        self.report.add_acc = Some(eval_addition(cnn, &test_corpus, &self.data.test)?);
        Ok(())
    }

    /// Runs every stage up to and including `last`. A failing stage is
    /// recorded in the report and stops the run; it is not returned as an
    /// error.
    pub fn run_until(&mut self, last: Stage) -> &RunReport {
        let stages = [
            Stage::Embed,
            Stage::Cluster,
            Stage::Assign,
            Stage::Infer,
            Stage::Train,
            Stage::Evaluate,
        ];
        for stage in stages.into_iter().filter(|&s| s <= last) {
            let result = match stage {
                Stage::Embed => self.embedding().map(drop),
                Stage::Cluster => self.cluster().map(drop),
                Stage::Assign => self.assign().map(drop),
                Stage::Infer => self.infer().map(drop),
                Stage::Train => self.train().map(drop),
                Stage::Evaluate => self.evaluate(),
            };
            if let Err(e) = result {
                warn!("{} failed at {:?}: {e}", self.report.run_id, stage);
                self.report.failure = Some(StageFailure {
                    stage,
                    message: e.to_string(),
                });
                break;
            }
        }
        let t = &mut self.report.times;
        t.total = t.cluster + t.assign + t.infer + t.train;
        &self.report
    }
}

/// Runs all stages on already loaded data and writes the report.
pub fn run_with_data(config: &RunConfig, data: &Data) -> Result<RunReport> {
    let mut run = Run::new(config.clone(), data)?;
    run.run_until(Stage::Evaluate);
    run.report.write()?;
    Ok(run.report)
}

pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let data = load_data(config)?;
    run_with_data(config, &data)
}

/// Runs every configuration with up to `workers` runs in flight and writes
/// `sweep.csv` into the first configuration's reports directory. Each
/// distinct dataset is loaded once and each distinct embedding is computed
/// once before any run starts. A failing run yields a report with a failure marker.
pub fn sweep(configs: &[RunConfig], workers: usize) -> Result<Vec<RunReport>> {
    let Some(first) = configs.first() else {
        return Ok(Vec::new());
    };
    let mut datasets: Vec<(&RunConfig, Data)> = Vec::new();
    let mut data_of = Vec::with_capacity(configs.len());
    for c in configs {
        match datasets.iter().position(|(rep, _)| rep.same_data(c)) {
            Some(j) => data_of.push(j),
            None => {
                datasets.push((c, load_data(c)?));
                data_of.push(datasets.len() - 1);
            }
        }
    }
    let mut seen = Vec::new();
    for (c, &j) in configs.iter().zip(&data_of) {
        let key = (c.embed_hash(), c.artifacts_dir.clone());
        if !seen.contains(&key) {
            embed_stage(c, &datasets[j].1)?;
            seen.push(key);
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunReport>>> = Mutex::new(vec![None; configs.len()]);
    let write_lock = Mutex::new(());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let report = match Run::new(config.clone(), &datasets[data_of[i]].1) {
                    Ok(mut run) => {
                        run.run_until(Stage::Evaluate);
                        run.report
                    }
                    Err(e) => {
                        let mut r = RunReport::new(config);
                        r.failure = Some(StageFailure {
                            stage: Stage::Embed,
                            message: e.to_string(),
                        });
                        r
                    }
                };
                {
                    let _guard = write_lock.lock().unwrap();
                    if let Err(e) = report.write() {
                        warn!("could not write report for {}: {e}", report.run_id);
                    }
                }
                results.lock().unwrap()[i] = Some(report);
            });
        }
    });
    let reports: Vec<RunReport> = results.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    write_rows(&first.reports_dir.join("sweep.csv"), &reports)?;
    Ok(reports)
}
