//! Trains the convolutional classifier on a slice of MNIST with its given
//! labels, then scores digit and addition accuracy on the test split.
//!
//!     cargo run --release --example train_classifier -- 6000 2

use std::path::PathBuf;

use sumlabel::classifier::{eval_addition, eval_classification, init_cnn, train_cnn, CnnHyper};
use sumlabel::dataset::{build_corpus, load_mnist_dir, Split};
use sumlabel::pipeline::{DATA_DIR_ENV, DEFAULT_DATA_DIR};

fn main() -> sumlabel::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let n = args.next().unwrap_or(6000);
    let epochs = args.next().unwrap_or(2);

    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| DEFAULT_DATA_DIR.into());
    let train = load_mnist_dir(&dir, Split::Train)?.head(n);
    let test = load_mnist_dir(&dir, Split::Test)?;

    let labels = train.eval_labels().to_vec();
    let params = train_cnn(init_cnn(0), &train, &labels, epochs, 1, &CnnHyper::default())?;
    println!("test digit accuracy: {:.4}", eval_classification(&params, &test)?);
    for w in 1..=3 {
        let corpus = build_corpus(&test, w, 2, 1, 0)?;
        println!(
            "addition of two {w}-digit numbers: {:.4}",
            eval_addition(&params, &corpus, &test)?
        );
    }
    Ok(())
}
