//! Repairs cluster-derived labels using the sums.
//!
//! Overlapping blobs give imperfect clusters. After the digit map is solved,
//! images near their centroid are trusted first; any example with a single
//! untrusted image then determines that image's label from its sum. The
//! trusted radius widens step by step.
//!
//!     cargo run --release --example propagate_labels

use sumlabel::assignment::solve_corpus;
use sumlabel::clustering::{kmeans_restarts, purity, DEFAULT_MAX_ITER, DEFAULT_TOL};
use sumlabel::dataset::{build_corpus, GaussianBlobs, Split};
use sumlabel::embedding::EmbeddingMatrix;
use sumlabel::inference::{default_schedule, final_labels, init_labels, run_inference_with_schedule};
use sumlabel::pipeline::label_accuracy;

fn main() -> sumlabel::Result<()> {
    let dim = 8;
    let store = GaussianBlobs::new(10, 4.0, dim, 3)?.sample(3000, 4, Split::Train)?;
    let corpus = build_corpus(&store, 1, 2, 3, 5)?;
    let emb = EmbeddingMatrix::new(store.len(), dim, store.pixels().to_vec())?;
    let model = kmeans_restarts(&emb, 10, 0, DEFAULT_MAX_ITER, DEFAULT_TOL, 5)?;
    println!("purity {:.4}", purity(&model, store.eval_labels())?);

    let digits = solve_corpus(&corpus, &model, 100)?;
    println!(
        "digit map {:?}, satisfies {}/{}",
        digits.digits,
        digits.satisfied,
        corpus.len()
    );

    let state = init_labels(&model, &digits)?;
    println!(
        "label accuracy from clusters: {:.4}",
        label_accuracy(&state.label, &store)?
    );
    let state = run_inference_with_schedule(state, &corpus, &model, &default_schedule())?;
    println!(
        "label accuracy after propagation: {:.4}",
        label_accuracy(&final_labels(&state), &store)?
    );
    println!("{:?}", state.summary());
    Ok(())
}
