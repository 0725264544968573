//! Drives the `sumlabel` binary on synthetic data.

use std::path::Path;
use std::process::Command;

fn sumlabel(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sumlabel"))
        .args(args)
        .args([
            "--source",
            "synthetic",
            "--backend",
            "pca",
            "--cnn-epochs",
            "4",
            "--train-limit",
            "600",
        ])
        .arg("--artifacts")
        .arg(dir.join("artifacts"))
        .arg("--reports")
        .arg(dir.join("reports"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn report(out: &std::process::Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("report on stdout")
}

#[test]
fn stages_then_run_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let embed = report(&sumlabel(dir, &["embed", "--w", "2", "--h", "2"]));
    assert!(embed["purity"].is_null());
    let cluster = report(&sumlabel(dir, &["cluster", "--w", "2", "--h", "2"]));
    assert_eq!(cluster["purity"], 1.0);
    assert!(cluster["digits"].is_null());
    for stage in ["assign", "infer", "train"] {
        sumlabel(dir, &[stage, "--w", "2", "--h", "2"]);
    }
    let staged = report(&sumlabel(dir, &["evaluate", "--w", "2", "--h", "2"]));
    let cold = report(&sumlabel(dir, &["run", "--w", "2", "--h", "2"]));
    for key in ["purity", "digits", "objective", "label_acc_post", "cls_acc", "add_acc"] {
        assert_eq!(staged[key], cold[key], "{key}");
    }
    assert_eq!(cold["cls_acc"], 1.0);
}

#[test]
fn generate_data_writes_idx_and_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    sumlabel(
        tmp.path(),
        &["generate-data", "--w", "3", "--h", "2", "--out", out.to_str().unwrap()],
    );
    for name in [
        "train-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        "train-corpus.txt",
        "test-corpus.txt",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let corpus = sumlabel::dataset::Corpus::read(&out.join("train-corpus.txt")).unwrap();
    assert_eq!(corpus.len(), 100);
    let store = sumlabel::dataset::load_mnist_dir(&out, sumlabel::dataset::Split::Train).unwrap();
    assert_eq!(store.len(), 600);
}

#[test]
fn sweep_csv_has_header_and_rows() {
    let tmp = tempfile::tempdir().unwrap();
    sumlabel(tmp.path(), &["sweep", "--ws", "1,2", "--hs", "2", "--seeds", "0,1"]);
    let csv = std::fs::read_to_string(tmp.path().join("reports/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "w,h,factor,seed,purity,label_acc_pre,label_acc_post,cls_acc,add_acc,t_cluster,t_assign,t_infer,t_train,t_total");
    assert_eq!(lines.len(), 5);
}

#[test]
fn bad_flag_values_fail() {
    let out = Command::new(env!("CARGO_BIN_EXE_sumlabel"))
        .args(["run", "--backend", "spectral"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
