//! Embeds images and clusters them with k-means++, reporting purity.
//!
//!     cargo run --release --example embed_and_cluster -- pca 10000
//!     cargo run --release --example embed_and_cluster -- autoencoder 10000 5
//!
//! Falls back to synthetic blobs when MNIST is not available.

use std::path::PathBuf;

use sumlabel::clustering::{kmeans_restarts, purity, DEFAULT_MAX_ITER, DEFAULT_TOL};
use sumlabel::dataset::{load_mnist_dir, GaussianBlobs, Split};
use sumlabel::embedding::{encode, pca_embed, train_autoencoder, AutoencoderHyper, MNIST_ENCODER_WIDTHS};
use sumlabel::pipeline::{DATA_DIR_ENV, DEFAULT_DATA_DIR};

fn main() -> sumlabel::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let backend = args.first().map(String::as_str).unwrap_or("pca");
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10_000);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);

    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| DEFAULT_DATA_DIR.into());
    let store = match load_mnist_dir(&dir, Split::Train) {
        Ok(s) => s.head(n),
        Err(_) => GaussianBlobs::new(10, 30.0, 784, 0)?.sample(n.min(2000), 1, Split::Train)?,
    };

    let start = std::time::Instant::now();
    let emb = match backend {
        "autoencoder" => {
            let params = train_autoencoder(&store, &MNIST_ENCODER_WIDTHS, epochs, 0, &AutoencoderHyper::default())?;
            encode(&params, &store)?
        }
        _ => pca_embed(&store, 10)?,
    };
    println!("{backend} embedding of {} images in {:.1?}", emb.rows, start.elapsed());

    let model = kmeans_restarts(&emb, 10, 0, DEFAULT_MAX_ITER, DEFAULT_TOL, 10)?;
    println!("cluster sizes: {:?}", model.cluster_sizes());
    println!("inertia: {:.2}", model.inertia());
    println!("purity: {:.4}", purity(&model, store.eval_labels())?);
    Ok(())
}
