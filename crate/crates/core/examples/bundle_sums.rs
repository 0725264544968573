//! Bundles images into w x h grids labelled only by their sum.
//!
//! Uses MNIST from `$SUMLABEL_DATA_DIR` (default `data/mnist`) when present,
//! otherwise synthetic Gaussian blobs.
//!
//!     cargo run --release --example bundle_sums -- 3 2

use std::path::PathBuf;

use sumlabel::dataset::{build_corpus, generate_synthetic, load_mnist_dir, Split};
use sumlabel::pipeline::{DATA_DIR_ENV, DEFAULT_DATA_DIR};

fn main() -> sumlabel::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let w = args.next().unwrap_or(2);
    let h = args.next().unwrap_or(2);

    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| DEFAULT_DATA_DIR.into());
    let (store, corpus) = match load_mnist_dir(&dir, Split::Train) {
        Ok(store) => {
            let corpus = build_corpus(&store, w, h, 1, 0)?;
            (store, corpus)
        }
        Err(e) => {
            println!("no MNIST at {} ({e}); using synthetic blobs", dir.display());
            generate_synthetic(1000, 10, 20.0, 16, w, h, 0)?
        }
    };

    println!("{} images -> {} examples of {w}x{h}", store.len(), corpus.len());
    for ex in corpus.examples.iter().take(3) {
        let rows: Vec<String> = (0..ex.height)
            .map(|i| {
                let ids: Vec<String> = (0..ex.width).map(|j| format!("{:>5}", ex.cell(i, j))).collect();
                ids.join(" ")
            })
            .collect();
        println!("image ids:\n  {}\nsum = {}\n", rows.join("\n  "), ex.sum);
    }
    println!(
        "first line of the corpus file format:\n{}",
        corpus.to_lines().lines().next().unwrap_or("")
    );
    Ok(())
}
