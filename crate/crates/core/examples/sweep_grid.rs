//! Sweeps a small w x h grid on synthetic data and prints the CSV table.
//! The embedding is computed once and shared by every run.
//!
//!     cargo run --release --example sweep_grid

use sumlabel::pipeline::{sweep, Backend, DataSource, RunConfig, SyntheticConfig};

fn main() -> sumlabel::Result<()> {
    let out = std::env::temp_dir().join("sumlabel-sweep");
    let base = RunConfig {
        source: DataSource::Synthetic,
        synthetic: SyntheticConfig {
            n_train: 600,
            n_test: 200,
            ..SyntheticConfig::default()
        },
        backend: Backend::Pca,
        cnn_epochs: 4,
        artifacts_dir: out.join("artifacts"),
        reports_dir: out.join("reports"),
        ..RunConfig::default()
    };
    let mut configs = Vec::new();
    for w in [1, 2, 4] {
        for h in [1, 2] {
            configs.push(RunConfig { w, h, ..base.clone() });
        }
    }
    let reports = sweep(&configs, 2)?;
    let failed = reports.iter().filter(|r| r.failure.is_some()).count();
    println!("{} runs, {failed} failed", reports.len());
    print!(
        "{}",
        std::fs::read_to_string(out.join("reports/sweep.csv")).expect("sweep.csv written")
    );
    Ok(())
}
