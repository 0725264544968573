//! Recovers the cluster-to-digit map from sums alone.
//!
//! Clusters are taken to be perfect (cluster c holds digit `perm[c]`), so the
//! only unknown is the permutation. Each batch is solved exactly by
//! branch-and-bound and the corpus-wide vote picks the winner.
//!
//!     cargo run --release --example solve_digits

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sumlabel::assignment::{build_batch_system, solve_batch_with_stats, solve_batches, solve_corpus};
use sumlabel::clustering::ClusterModel;
use sumlabel::dataset::{Corpus, Example};

fn main() -> sumlabel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut perm: Vec<u8> = (0..10).collect();
    perm.shuffle(&mut rng);

    let n_images = 2000;
    let cluster_of: Vec<usize> = (0..n_images).map(|_| rng.random_range(0..10)).collect();
    let (w, h) = (2, 2);
    let examples: Vec<Example> = (0..n_images / (w * h))
        .map(|e| {
            let grid: Vec<usize> = (e * w * h..(e + 1) * w * h).collect();
            let mut ex = Example::new(w, h, grid, 0).unwrap();
            let digits: Vec<u8> = (0..n_images).map(|i| perm[cluster_of[i]]).collect();
            ex.sum = ex.sum_under(&digits);
            ex
        })
        .collect();
    let corpus = Corpus {
        width: w,
        height: h,
        oversample_factor: 1,
        examples,
    };
    let model = ClusterModel {
        k: 10,
        dim: 1,
        centroids: vec![0.0; 10],
        assignment: cluster_of,
        distance: vec![0.0; n_images],
        inertia_history: vec![],
    };

    let sys = build_batch_system(&corpus.examples[..100], &model)?;
    let (first, stats) = solve_batch_with_stats(&sys);
    println!(
        "batch 0: digits {:?}, objective {}, {} nodes, {} pruned",
        first.digits, first.objective, stats.nodes, stats.pruned
    );

    let candidates = solve_batches(&corpus, &model, 100)?;
    let agreeing = candidates.iter().filter(|c| c.digits == perm).count();
    println!("{agreeing} of {} batches found the true map", candidates.len());

    let win = solve_corpus(&corpus, &model, 100)?;
    println!(
        "vote winner {:?} (truth {:?}), satisfies {}/{}",
        win.digits,
        perm,
        win.satisfied,
        corpus.len()
    );
    Ok(())
}
