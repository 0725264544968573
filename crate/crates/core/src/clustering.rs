//! Lloyd's k-means with k-means++ seeding, purity, and per-cluster distance
//! quantiles.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::tensorfile::{read_u32_array, write_u32_array, Tensor, TensorFile};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignment: Vec<usize>,
    /// Euclidean distance of each image to its assigned centroid.
    pub distance: Vec<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn inertia(&self) -> f64 {
        self.distance.iter().map(|d| d * d).sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Distances of the members of cluster `c`, in image order.
    pub fn member_distances(&self, c: usize) -> Vec<f64> {
        self.assignment
            .iter()
            .zip(&self.distance)
            .filter(|(a, _)| **a == c)
            .map(|(_, d)| *d)
            .collect()
    }

    /// Assigns each embedding row to its nearest centroid (ties to the lowest
    /// index), returning the assignment and Euclidean distances.
    pub fn nearest(&self, emb: &EmbeddingMatrix) -> (Vec<usize>, Vec<f64>) {
        nearest_centroids(emb, &self.centroids, self.k)
    }

    pub fn save(&self, model_path: &Path, assignment_path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut meta = meta;
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("k".into(), self.k.into());
            map.insert("dim".into(), self.dim.into());
        }
        TensorFile {
            meta,
            tensors: vec![
                Tensor::new("centroids", vec![self.k, self.dim], self.centroids.clone()),
                Tensor::new(
                    "distance",
                    vec![self.distance.len()],
                    self.distance.iter().map(|&d| d as f32).collect(),
                ),
                Tensor::new(
                    "inertia_history",
                    vec![self.inertia_history.len()],
                    self.inertia_history.iter().map(|&d| d as f32).collect(),
                ),
            ],
        }
        .write(model_path)?;
        let assignment: Vec<u32> = self.assignment.iter().map(|&c| c as u32).collect();
        write_u32_array(assignment_path, &assignment)
    }

    /// Loads a saved model. Distances are recomputed from `emb` so that they
    /// match the centroids exactly rather than their `f32` serialization.
    pub fn load(model_path: &Path, assignment_path: &Path, emb: &EmbeddingMatrix) -> Result<ClusterModel> {
        let mut file = TensorFile::read(model_path)?;
        let centroids = file.take("centroids")?;
        let history = file.take("inertia_history")?;
        if centroids.shape.len() != 2 || centroids.shape[1] != emb.cols {
            return Err(Error::shape(
                format!("[k, {}]", emb.cols),
                format!("{:?}", centroids.shape),
            ));
        }
        let k = centroids.shape[0];
        let assignment: Vec<usize> = read_u32_array(assignment_path)?
            .into_iter()
            .map(|c| c as usize)
            .collect();
        if assignment.len() != emb.rows {
            return Err(Error::Consistency(format!(
                "{} assignments for {} embeddings",
                assignment.len(),
                emb.rows
            )));
        }
        if assignment.iter().any(|&c| c >= k) {
            return Err(Error::Consistency("assignment outside 0..k".into()));
        }
        let distance = assignment
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist(emb.row(i), &centroids.data[c * emb.cols..(c + 1) * emb.cols]).sqrt())
            .collect();
        Ok(ClusterModel {
            k,
            dim: emb.cols,
            centroids: centroids.data,
            assignment,
            distance,
            inertia_history: history.data.into_iter().map(|v| v as f64).collect(),
        })
    }
}

fn nearest_centroids(emb: &EmbeddingMatrix, centroids: &[f32], k: usize) -> (Vec<usize>, Vec<f64>) {
    let dim = emb.cols;
    let mut assignment = Vec::with_capacity(emb.rows);
    let mut distance = Vec::with_capacity(emb.rows);
    for i in 0..emb.rows {
        let row = emb.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let d = sq_dist(row, &centroids[c * dim..(c + 1) * dim]);
            if d < best.1 {
                best = (c, d);
            }
        }
        assignment.push(best.0);
        distance.push(best.1.sqrt());
    }
    (assignment, distance)
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance to the nearest chosen centre.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(emb: &EmbeddingMatrix, k: usize, rng: &mut R) -> Vec<f32> {
    let n = emb.rows;
    let dim = emb.cols;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(emb.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), emb.row(first))).collect();

    for _ in 1..k {
        let next = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a chosen centre.
            Err(_) => rng.random_range(0..n),
        };
        let start = centroids.len();
        centroids.extend_from_slice(emb.row(next));
        let centre = centroids[start..].to_vec();
        for (i, c) in closest.iter_mut().enumerate() {
            let d = sq_dist(emb.row(i), &centre);
            if d < *c {
                *c = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds.
///
/// Stops when no centroid moves by `tol` or more (Euclidean), or after
/// `max_iter` updates. A cluster that empties is reseeded with the point
/// farthest from its own centroid.
pub fn kmeans(emb: &EmbeddingMatrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    if k == 0 || k > emb.rows {
        return Err(Error::Argument(format!("k = {k} with {} points", emb.rows)));
    }
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be at least 1".into()));
    }
    let dim = emb.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(emb, k, &mut rng);
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let (mut assignment, mut distance) = nearest_centroids(emb, &centroids, k);

        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let far = distance
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[assignment[*i]] > 1)
                .fold((usize::MAX, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                .0;
            if far == usize::MAX {
                break;
            }
            counts[assignment[far]] -= 1;
            counts[empty] += 1;
            assignment[far] = empty;
            distance[far] = 0.0;
            centroids[empty * dim..(empty + 1) * dim].copy_from_slice(emb.row(far));
        }
        history.push(distance.iter().map(|d| d * d).sum());

        let mut sums = vec![0.0f64; k * dim];
        for (i, &c) in assignment.iter().enumerate() {
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(emb.row(i)) {
                *s += *v as f64;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut shift = 0.0;
            for t in 0..dim {
                let new = (sums[c * dim + t] / counts[c] as f64) as f32;
                shift += ((new - centroids[c * dim + t]) as f64).powi(2);
                centroids[c * dim + t] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < tol {
            break;
        }
    }

    let (assignment, distance) = nearest_centroids(emb, &centroids, k);
    history.push(distance.iter().map(|d| d * d).sum());
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignment,
        distance,
        inertia_history: history,
    })
}

/// Runs [`kmeans`] from `n_init` seeds derived from `seed` and keeps the fit
/// with the lowest inertia (earliest run on ties).
pub fn kmeans_restarts(
    emb: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    n_init: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for run in 0..n_init.max(1) as u64 {
        let model = kmeans(emb, k, seed.wrapping_mul(1000).wrapping_add(run), max_iter, tol)?;
        if best.as_ref().is_none_or(|b| model.inertia() < b.inertia()) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

/// Fraction of points belonging to the majority digit of their cluster.
pub fn purity(model: &ClusterModel, true_labels: &[u8]) -> Result<f64> {
    if true_labels.len() != model.assignment.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} clustered points",
            true_labels.len(),
            model.assignment.len()
        )));
    }
    if true_labels.is_empty() {
        return Ok(1.0);
    }
    let mut table = vec![[0usize; 10]; model.k];
    for (&c, &l) in model.assignment.iter().zip(true_labels) {
        table[c][l as usize] += 1;
    }
    let majority: usize = table.iter().map(|row| *row.iter().max().unwrap()).sum();
    Ok(majority as f64 / true_labels.len() as f64)
}

/// Linear-interpolation quantile of sorted values (numpy's default rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `q`-quantile of the member distances of `cluster`.
pub fn distance_percentile(model: &ClusterModel, cluster: usize, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("quantile {q} outside [0, 1]")));
    }
    let mut d = model.member_distances(cluster);
    if d.is_empty() {
        return Err(Error::Query(format!("cluster {cluster} has no members")));
    }
    d.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&d, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::embedding::pca_embed;
    use proptest::prelude::*;

    fn emb_from(points: &[[f32; 2]]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(points.len(), 2, points.iter().flatten().copied().collect()).unwrap()
    }

    fn model_with(assignment: Vec<usize>, distance: Vec<f64>, k: usize) -> ClusterModel {
        ClusterModel {
            k,
            dim: 1,
            centroids: vec![0.0; k],
            assignment,
            distance,
            inertia_history: vec![],
        }
    }

    #[test]
    fn k_points_k_clusters_is_exact() {
        let emb = emb_from(&[[0.0, 0.0], [5.0, 1.0], [-3.0, 7.0]]);
        let model = kmeans(&emb, 3, 1, 10, 1e-4).unwrap();
        assert_eq!(model.inertia(), 0.0);
        let mut seen = model.assignment.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn k_above_n_is_rejected() {
        let emb = emb_from(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&emb, 2, 0, 10, 1e-4), Err(Error::Argument(_))));
    }

    #[test]
    fn separated_blobs_cluster_perfectly() {
        let (store, _) = generate_synthetic(1000, 10, 100.0, 10, 1, 1, 3).unwrap();
        let emb = pca_embed(&store, 10).unwrap();
        let model = kmeans_restarts(&emb, 10, 0, DEFAULT_MAX_ITER, DEFAULT_TOL, 3).unwrap();
        assert_eq!(purity(&model, store.eval_labels()).unwrap(), 1.0);
    }

    #[test]
    fn purity_edge_cases() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let same = model_with(labels.iter().map(|&l| l as usize).collect(), vec![0.0; 100], 10);
        assert_eq!(purity(&same, &labels).unwrap(), 1.0);
        let lump = model_with(vec![0; 100], vec![0.0; 100], 10);
        assert!((purity(&lump, &labels).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(purity(&lump, &labels[..5]), Err(Error::Consistency(_))));
    }

    #[test]
    fn percentiles() {
        let m = model_with(vec![0, 0, 0, 1], vec![3.0, 1.0, 2.0, 4.0], 3);
        assert_eq!(distance_percentile(&m, 0, 0.5).unwrap(), 2.0);
        assert_eq!(distance_percentile(&m, 0, 1.0).unwrap(), 3.0);
        assert_eq!(distance_percentile(&m, 0, 0.25).unwrap(), 1.5);
        assert!(matches!(distance_percentile(&m, 2, 0.5), Err(Error::Query(_))));
        let flat = model_with(vec![0; 4], vec![2.5; 4], 1);
        for q in [0.0, 0.3, 0.9, 1.0] {
            assert_eq!(distance_percentile(&flat, 0, q).unwrap(), 2.5);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let (store, _) = generate_synthetic(200, 4, 20.0, 5, 1, 1, 1).unwrap();
        let emb = pca_embed(&store, 3).unwrap();
        let model = kmeans(&emb, 4, 2, 50, 1e-4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (mp, ap) = (dir.path().join("m.bin"), dir.path().join("a.bin"));
        model.save(&mp, &ap, serde_json::json!({})).unwrap();
        let back = ClusterModel::load(&mp, &ap, &emb).unwrap();
        assert_eq!(back.assignment, model.assignment);
        assert_eq!(back.centroids, model.centroids);
        for (a, b) in back.distance.iter().zip(&model.distance) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn arb_points() -> impl Strategy<Value = Vec<[f32; 2]>> {
        prop::collection::vec([-50.0f32..50.0, -50.0f32..50.0], 6..60)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lloyd_invariants(points in arb_points(), k in 1usize..6, seed in 0u64..1000) {
            let emb = emb_from(&points);
            let k = k.min(points.len());
            let model = kmeans(&emb, k, seed, 100, 1e-6).unwrap();

            for w in model.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "inertia rose: {:?}", model.inertia_history);
            }
            for i in 0..emb.rows {
                let own = model.assignment[i];
                prop_assert!(own < k);
                let d_own = sq_dist(emb.row(i), model.centroid(own));
                prop_assert!((d_own.sqrt() - model.distance[i]).abs() < 1e-9);
                for c in 0..k {
                    let d = sq_dist(emb.row(i), model.centroid(c));
                    prop_assert!(d >= d_own);
                    if d == d_own {
                        prop_assert!(own <= c);
                    }
                }
            }
            prop_assert_eq!(kmeans(&emb, k, seed, 100, 1e-6).unwrap(), model);
        }
    }
}
