//! Image stores, sum-supervised examples and corpora.
//!
//! An [`Example`] is an `h x w` grid of image ids read as `h` numbers of `w`
//! digits each, supervised only by the sum of those numbers. Held-out digit
//! labels live inside [`ImageStore`] and are reachable only through
//! [`ImageStore::eval_labels`], which training stages never call.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `N` flattened images with their held-out digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStore {
    dim: usize,
    pixels: Vec<f32>,
    true_labels: Vec<u8>,
    split: Split,
}

impl ImageStore {
    pub fn from_parts(pixels: Vec<f32>, dim: usize, labels: Vec<u8>, split: Split) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("image dimension must be positive".into()));
        }
        if pixels.len() != dim * labels.len() {
            return Err(Error::Consistency(format!(
                "{} pixel values do not form {} images of dimension {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Consistency(format!("label {bad} outside 0..=9")));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite pixel value".into()));
        }
        Ok(ImageStore {
            dim,
            pixels,
            true_labels: labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, id: usize) -> &[f32] {
        &self.pixels[id * self.dim..(id + 1) * self.dim]
    }

    /// Held-out labels. Evaluation only: no training stage may call this.
    pub fn eval_labels(&self) -> &[u8] {
        &self.true_labels
    }

    /// The first `n` images (or all of them if `n` exceeds the store size).
    pub fn head(&self, n: usize) -> ImageStore {
        let n = n.min(self.len());
        ImageStore {
            dim: self.dim,
            pixels: self.pixels[..n * self.dim].to_vec(),
            true_labels: self.true_labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Store restricted to `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> ImageStore {
        let mut pixels = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            pixels.extend_from_slice(self.image(id));
        }
        ImageStore {
            dim: self.dim,
            pixels,
            true_labels: ids.iter().map(|&i| self.true_labels[i]).collect(),
            split: self.split,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header: missing {what}")))
}

/// Reads an IDX image/label file pair (MNIST layout) into an [`ImageStore`].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<ImageStore> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&img, &lbl, split)
}

/// Parses in-memory IDX image and label buffers.
pub fn parse_idx(img: &[u8], lbl: &[u8], split: Split) -> Result<ImageStore> {
    let magic = read_u32_be(img, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(img, 4, "image count")? as usize;
    let rows = read_u32_be(img, 8, "row count")? as usize;
    let cols = read_u32_be(img, 12, "column count")? as usize;
    let dim = rows * cols;
    let body = &img[16..];
    if body.len() != count * dim {
        return Err(Error::Format(format!(
            "image body holds {} bytes, header promises {count} x {rows} x {cols}",
            body.len()
        )));
    }

    let magic = read_u32_be(lbl, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(lbl, 4, "label count")? as usize;
    let labels = &lbl[8..];
    if labels.len() != label_count {
        return Err(Error::Format(format!(
            "label body holds {} bytes, header promises {label_count}",
            labels.len()
        )));
    }
    if label_count != count {
        return Err(Error::Consistency(format!("{count} images but {label_count} labels")));
    }

    let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
    ImageStore::from_parts(pixels, dim, labels.to_vec(), split)
}

/// Serializes a store in IDX form. Intensities are quantized back to bytes,
/// so only stores with values in `[0, 1]` round-trip.
pub fn write_idx(store: &ImageStore, images_path: &Path, labels_path: &Path, side: (u32, u32)) -> Result<()> {
    if (side.0 * side.1) as usize != store.dim() {
        return Err(Error::shape(store.dim(), format!("{} x {}", side.0, side.1)));
    }
    let mut img = Vec::with_capacity(16 + store.pixels.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(store.len() as u32).to_be_bytes());
    img.extend_from_slice(&side.0.to_be_bytes());
    img.extend_from_slice(&side.1.to_be_bytes());
    img.extend(store.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + store.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(store.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&store.true_labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lbl).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Loads the standard MNIST file names from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<ImageStore> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// `10^(w - j)` for the 1-based column `j` of a `w`-digit number.
pub fn positional_weight(w: usize, j: usize) -> Result<u64> {
    if j == 0 || j > w {
        return Err(Error::Argument(format!("column {j} outside 1..={w}")));
    }
    10u64
        .checked_pow((w - j) as u32)
        .ok_or_else(|| Error::Argument(format!("10^{} overflows", w - j)))
}

/// One training instance: `height` numbers of `width` digits, and their sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width` image ids.
    pub grid: Vec<usize>,
    pub sum: u64,
}

impl Example {
    pub fn new(width: usize, height: usize, grid: Vec<usize>, sum: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument("width and height must be positive".into()));
        }
        if grid.len() != width * height {
            return Err(Error::shape(width * height, grid.len()));
        }
        positional_weight(width, 1)?;
        Ok(Example {
            width,
            height,
            grid,
            sum,
        })
    }

    /// Image id at 0-based row `i`, column `j`.
    pub fn cell(&self, i: usize, j: usize) -> usize {
        self.grid[i * self.width + j]
    }

    /// Positional weight of the cell at flat index `idx`.
    pub fn weight_at(&self, idx: usize) -> u64 {
        let j = idx % self.width;
        10u64.pow((self.width - 1 - j) as u32)
    }

    /// `(image id, positional weight)` for every cell.
    pub fn weighted_cells(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.grid.iter().enumerate().map(|(idx, &id)| (id, self.weight_at(idx)))
    }

    /// The sum these cells would have under `labels`.
    pub fn sum_under(&self, labels: &[u8]) -> u64 {
        self.weighted_cells().map(|(id, wgt)| labels[id] as u64 * wgt).sum()
    }

    /// `h * (10^w - 1)`, the largest representable sum.
    pub fn max_sum(&self) -> u64 {
        self.height as u64 * (10u64.pow(self.width as u32) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub width: usize,
    pub height: usize,
    pub oversample_factor: usize,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Serialized as one `w h s id_11 ... id_hw` line per example.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            write!(out, "{} {} {}", ex.width, ex.height, ex.sum).unwrap();
            for id in &ex.grid {
                write!(out, " {id}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_lines().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the line format. The oversample factor is not part of the format
    /// and is reported as 1.
    pub fn parse(text: &str) -> Result<Corpus> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<u64> = line
                .split_ascii_whitespace()
                .map(|t| t.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() < 3 {
                return Err(Error::Format(format!("line {}: too few fields", lineno + 1)));
            }
            let (w, h, s) = (fields[0] as usize, fields[1] as usize, fields[2]);
            let grid: Vec<usize> = fields[3..].iter().map(|&v| v as usize).collect();
            examples.push(Example::new(w, h, grid, s).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?);
        }
        let (width, height) = examples.first().map(|e| (e.width, e.height)).unwrap_or((1, 1));
        if examples.iter().any(|e| e.width != width || e.height != height) {
            return Err(Error::Format("examples with mixed shapes".into()));
        }
        Ok(Corpus {
            width,
            height,
            oversample_factor: 1,
            examples,
        })
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Corpus::parse(&text)
    }

    /// Checks every image id against a store of `n_images`.
    pub fn validate_ids(&self, n_images: usize) -> Result<()> {
        for (e, ex) in self.examples.iter().enumerate() {
            if let Some(bad) = ex.grid.iter().find(|&&id| id >= n_images) {
                return Err(Error::Consistency(format!(
                    "example {e} references image {bad} but store holds {n_images}"
                )));
            }
        }
        Ok(())
    }
}

/// Shuffles image ids by `seed` and bundles them into `w x h` examples.
///
/// With `oversample_factor = f`, `f` independent shuffles are concatenated
/// before partitioning. Leftover ids that do not fill a grid are dropped.
pub fn build_corpus(store: &ImageStore, w: usize, h: usize, oversample_factor: usize, seed: u64) -> Result<Corpus> {
    if w == 0 || h == 0 {
        return Err(Error::Argument("width and height must be positive".into()));
    }
    if oversample_factor == 0 {
        return Err(Error::Argument("oversample factor must be positive".into()));
    }
    positional_weight(w, 1)?;
    let cells = w * h;
    if cells > store.len() {
        return Err(Error::InsufficientData {
            needed: cells,
            available: store.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(store.len() * oversample_factor);
    for _ in 0..oversample_factor {
        let mut pass: Vec<usize> = (0..store.len()).collect();
        pass.shuffle(&mut rng);
        ids.extend(pass);
    }

    let examples = ids
        .chunks_exact(cells)
        .map(|grid| {
            let mut ex = Example {
                width: w,
                height: h,
                grid: grid.to_vec(),
                sum: 0,
            };
            ex.sum = ex.sum_under(&store.true_labels);
            ex
        })
        .collect();

    Ok(Corpus {
        width: w,
        height: h,
        oversample_factor,
        examples,
    })
}

/// Isotropic unit-variance Gaussian blobs whose centres are pairwise at least
/// `separation` apart.
#[derive(Debug, Clone)]
pub struct GaussianBlobs {
    pub dim: usize,
    /// `n_clusters x dim`, row-major.
    pub centroids: Vec<f32>,
}

impl GaussianBlobs {
    pub fn new(n_clusters: usize, separation: f64, dim: usize, seed: u64) -> Result<Self> {
        if n_clusters == 0 || n_clusters > 10 {
            return Err(Error::Argument(format!("n_clusters = {n_clusters} outside 1..=10")));
        }
        if separation.is_nan() || separation <= 0.0 {
            return Err(Error::Argument("separation must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::Argument("dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<f64> = (0..n_clusters * dim).map(|_| rng.random::<f64>()).collect();

        let mut min_dist = f64::INFINITY;
        for a in 0..n_clusters {
            for b in a + 1..n_clusters {
                let d: f64 = (0..dim)
                    .map(|t| (centroids[a * dim + t] - centroids[b * dim + t]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        if min_dist.is_finite() {
            if min_dist == 0.0 {
                return Err(Error::Argument("degenerate centroid draw".into()));
            }
            // Small margin so f32 rounding cannot pull a pair under the bound.
            let scale = (separation / min_dist).max(1.0) * (1.0 + 1e-6);
            centroids.iter_mut().for_each(|c| *c *= scale);
        }
        Ok(GaussianBlobs {
            dim,
            centroids: centroids.into_iter().map(|c| c as f32).collect(),
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len() / self.dim
    }

    /// Draws `n` points; point `i` belongs to blob `i mod n_clusters`.
    pub fn sample(&self, n: usize, seed: u64, split: Split) -> Result<ImageStore> {
        let k = self.n_clusters();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            labels.push(c as u8);
            let centre = &self.centroids[c * self.dim..(c + 1) * self.dim];
            pixels.extend(centre.iter().map(|&m| m + rng.sample::<f32, _>(StandardNormal)));
        }
        ImageStore::from_parts(pixels, self.dim, labels, split)
    }
}

/// Synthetic store of `n_images` Gaussian-blob points plus a corpus over it.
pub fn generate_synthetic(
    n_images: usize,
    n_clusters: usize,
    separation: f64,
    dim: usize,
    w: usize,
    h: usize,
    seed: u64,
) -> Result<(ImageStore, Corpus)> {
    let blobs = GaussianBlobs::new(n_clusters, separation, dim, seed)?;
    let store = blobs.sample(n_images, seed.wrapping_add(1), Split::Train)?;
    let corpus = build_corpus(&store, w, h, 1, seed.wrapping_add(2))?;
    Ok((store, corpus))
}
