//! Held-out evaluation. This is the only place ground-truth labels are read
//! by the classifier.

use super::{classify, CnnParams};
use crate::dataset::{Corpus, ImageStore};
use crate::error::{Error, Result};

/// Predicted digit for every image in the store.
pub fn predict_store(params: &CnnParams, store: &ImageStore) -> Result<Vec<u8>> {
    Ok(classify(params, store.pixels(), store.len())?
        .into_iter()
        .map(|p| p.digit)
        .collect())
}

/// Fraction of images whose predicted digit equals the true label.
pub fn eval_classification(params: &CnnParams, store: &ImageStore) -> Result<f64> {
    if store.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let pred = predict_store(params, store)?;
    let hits = pred.iter().zip(store.eval_labels()).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / store.len() as f64)
}

/// Fraction of examples whose sum, recomputed from per-image predictions,
/// equals the stated target.
pub fn eval_addition(params: &CnnParams, corpus: &Corpus, store: &ImageStore) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    corpus.validate_ids(store.len())?;
    let pred = predict_store(params, store)?;
    let hits = corpus
        .examples
        .iter()
        .filter(|ex| ex.sum_under(&pred) == ex.sum)
        .count();
    Ok(hits as f64 / corpus.len() as f64)
}
