//! Label repair by propagating sum constraints.
//!
//! Images near their cluster centroid are trusted first. Whenever an example
//! has exactly one untrusted image left, its sum pins that image's digit, and
//! the image joins the trusted set. Trust is widened in radius steps and
//! propagation runs to a fixpoint after each step.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::DigitAssignment;
use crate::clustering::{quantile_sorted, ClusterModel};
use crate::dataset::{Corpus, Example};
use crate::error::{Error, Result};
use crate::tensorfile::{read_u32_array, write_u32_array};

/// Radius `r` admits images within the `r / RADIUS_STEPS` quantile of their
/// cluster's centroid distances.
pub const RADIUS_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Label copied from the cluster's digit.
    Cluster,
    /// Trusted because the image lies within the current radius.
    Radius,
    /// Solved from an example's sum.
    Inferred,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelState {
    pub label: Vec<u8>,
    pub correct: Vec<bool>,
    pub provenance: Vec<Provenance>,
    /// Examples whose single unknown resolved to a non-digit.
    pub inconsistent_examples: BTreeSet<usize>,
}

impl LabelState {
    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    pub fn correct_count(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }

    pub fn summary(&self) -> LabelSummary {
        let count = |p| self.provenance.iter().filter(|&&q| q == p).count();
        LabelSummary {
            images: self.len(),
            correct: self.correct_count(),
            cluster: count(Provenance::Cluster),
            radius: count(Provenance::Radius),
            inferred: count(Provenance::Inferred),
            inconsistent_examples: self.inconsistent_examples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub images: usize,
    pub correct: usize,
    pub cluster: usize,
    pub radius: usize,
    pub inferred: usize,
    pub inconsistent_examples: usize,
}

/// Every image starts with its cluster's digit; nothing is trusted yet.
pub fn init_labels(model: &ClusterModel, assignment: &DigitAssignment) -> Result<LabelState> {
    if assignment.digits.len() != model.k {
        return Err(Error::Consistency(format!(
            "{} digits for {} clusters",
            assignment.digits.len(),
            model.k
        )));
    }
    let n = model.len();
    Ok(LabelState {
        label: model.assignment.iter().map(|&c| assignment.digits[c]).collect(),
        correct: vec![false; n],
        provenance: vec![Provenance::Cluster; n],
        inconsistent_examples: BTreeSet::new(),
    })
}

/// Images whose centroid distance is at most the `q`-quantile of their own
/// cluster's distances.
pub fn images_within_quantile(model: &ClusterModel, q: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("quantile {q} outside [0, 1]")));
    }
    let mut per_cluster: Vec<Vec<f64>> = vec![Vec::new(); model.k];
    for (&c, &d) in model.assignment.iter().zip(&model.distance) {
        per_cluster[c].push(d);
    }
    let thresholds: Vec<f64> = per_cluster
        .iter_mut()
        .map(|d| {
            if d.is_empty() {
                f64::NEG_INFINITY
            } else {
                d.sort_by(f64::total_cmp);
                quantile_sorted(d, q)
            }
        })
        .collect();
    Ok((0..model.len())
        .filter(|&i| model.distance[i] <= thresholds[model.assignment[i]])
        .collect())
}

/// Radius `r` in `1..=5` maps to the `(20 r)`-th percentile.
pub fn images_within_radius(model: &ClusterModel, radius: usize) -> Result<Vec<usize>> {
    if radius == 0 || radius > RADIUS_STEPS {
        return Err(Error::Argument(format!("radius {radius} outside 1..={RADIUS_STEPS}")));
    }
    images_within_quantile(model, radius as f64 / RADIUS_STEPS as f64)
}

/// Distinct untrusted images of `ex`, stopping early once more than `limit`
/// are found.
fn unresolved_images(state: &LabelState, ex: &Example, limit: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(limit + 1);
    for &id in &ex.grid {
        if !state.correct[id] && !out.contains(&id) {
            out.push(id);
            if out.len() > limit {
                break;
            }
        }
    }
    out
}

/// Solves `ex`'s equation for its single untrusted image `img`, with every
/// other image fixed at its current label.
///
/// Returns `Ok(None)` when the solution is not a digit in `0..=9`.
pub fn resolve_image_label(state: &LabelState, ex: &Example, img: usize) -> Result<Option<u8>> {
    let unresolved = unresolved_images(state, ex, 1);
    if unresolved != [img] {
        return Err(Error::Precondition(format!(
            "image {img} is not the only unresolved image of the example (unresolved: {unresolved:?})"
        )));
    }
    let mut others = 0i64;
    let mut coeff = 0i64;
    for (id, w) in ex.weighted_cells() {
        if id == img {
            coeff += w as i64;
        } else {
            others += state.label[id] as i64 * w as i64;
        }
    }
    let rest = ex.sum as i64 - others;
    if rest < 0 || rest % coeff != 0 {
        return Ok(None);
    }
    let d = rest / coeff;
    Ok((d <= 9).then_some(d as u8))
}

/// One sequential pass of single-unknown resolution over the corpus.
/// Returns whether any image was newly resolved.
pub fn infer_correct_labels(state: &mut LabelState, corpus: &Corpus) -> bool {
    let mut changed = false;
    for (idx, ex) in corpus.examples.iter().enumerate() {
        let unresolved = unresolved_images(state, ex, 1);
        if unresolved.len() != 1 {
            continue;
        }
        let img = unresolved[0];
        match resolve_image_label(state, ex, img) {
            Ok(Some(d)) => {
                state.label[img] = d;
                state.correct[img] = true;
                state.provenance[img] = Provenance::Inferred;
                changed = true;
            }
            Ok(None) => {
                state.inconsistent_examples.insert(idx);
            }
            Err(_) => unreachable!("exactly one unresolved image"),
        }
    }
    changed
}

/// Trusts images radius by radius, running propagation to a fixpoint after
/// each widening. `quantiles` is the radius schedule; the default is
/// `[0.2, 0.4, 0.6, 0.8, 1.0]`.
pub fn run_inference_with_schedule(
    mut state: LabelState,
    corpus: &Corpus,
    model: &ClusterModel,
    quantiles: &[f64],
) -> Result<LabelState> {
    if state.len() != model.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} clustered images",
            state.len(),
            model.len()
        )));
    }
    corpus.validate_ids(state.len())?;
    for &q in quantiles {
        for img in images_within_quantile(model, q)? {
            if !state.correct[img] {
                state.correct[img] = true;
                state.provenance[img] = Provenance::Radius;
            }
        }
        while infer_correct_labels(&mut state, corpus) {}
    }
    Ok(state)
}

pub fn default_schedule() -> Vec<f64> {
    (1..=RADIUS_STEPS).map(|r| r as f64 / RADIUS_STEPS as f64).collect()
}

pub fn run_inference(state: LabelState, corpus: &Corpus, model: &ClusterModel) -> Result<LabelState> {
    run_inference_with_schedule(state, corpus, model, &default_schedule())
}

/// Final per-image labels: inferred where available, cluster-derived otherwise.
pub fn final_labels(state: &LabelState) -> Vec<u8> {
    state.label.clone()
}

pub fn save_labels(labels: &[u8], path: &Path) -> Result<()> {
    let values: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    write_u32_array(path, &values)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    read_u32_array(path)?
        .into_iter()
        .map(|v| {
            u8::try_from(v)
                .ok()
                .filter(|&d| d <= 9)
                .ok_or_else(|| Error::Format(format!("label {v} outside 0..=9")))
        })
        .collect()
}
