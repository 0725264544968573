//! The full pipeline: embed, cluster, solve digits, propagate labels, train,
//! evaluate. Without arguments it runs on synthetic data in a temporary
//! directory; pass `mnist` for a reduced MNIST run (10k training images,
//! PCA embedding, 2 classifier epochs).
//!
//!     cargo run --release --example end_to_end
//!     cargo run --release --example end_to_end -- mnist

use sumlabel::pipeline::{run_pipeline, Backend, DataSource, RunConfig, SyntheticConfig};

fn main() -> sumlabel::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::temp_dir().join("sumlabel-end-to-end");
    let base = RunConfig {
        artifacts_dir: out.join("artifacts"),
        reports_dir: out.join("reports"),
        ..RunConfig::default()
    };
    let config = match std::env::args().nth(1).as_deref() {
        Some("mnist") => RunConfig {
            train_limit: Some(10_000),
            backend: Backend::Pca,
            cnn_epochs: 2,
            ..base
        },
        _ => RunConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig {
                n_train: 1000,
                n_test: 200,
                ..SyntheticConfig::default()
            },
            backend: Backend::Pca,
            cnn_epochs: 4,
            ..base
        },
    };

    let report = run_pipeline(&config)?;
    if let Some(f) = &report.failure {
        println!("failed at {:?}: {}", f.stage, f.message);
    }
    let show = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("purity          {}", show(report.purity));
    println!("labels (map)    {}", show(report.label_acc_pre));
    println!("labels (final)  {}", show(report.label_acc_post));
    println!("classification  {}", show(report.cls_acc));
    println!("addition        {}", show(report.add_acc));
    println!("stage seconds   {:?}", report.times);
    println!("report in {}", config.reports_dir.join(&report.run_id).display());
    Ok(())
}
