//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 5 to 9 need MNIST (`SUMLABEL_DATA_DIR`, else `data/mnist` at the
//! workspace root). Their artifacts are cached under the cargo target tmp
//! directory, so only the first run pays for training.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sumlabel::assignment::{build_batch_system, solve_batch, solve_corpus};
use sumlabel::classifier::{flatten_grads, CnnParams, CnnSpec, Layer, LayerSpec};
use sumlabel::clustering::{kmeans_restarts, purity, ClusterModel, DEFAULT_MAX_ITER, DEFAULT_TOL};
use sumlabel::dataset::{generate_synthetic, positional_weight, Corpus, Example};
use sumlabel::embedding::{AutoencoderParams, EmbeddingMatrix};
use sumlabel::inference::{
    final_labels, images_within_radius, infer_correct_labels, init_labels, run_inference, LabelState, Provenance,
};
use sumlabel::nn::max_relative_error;
use sumlabel::pipeline::{load_data, sweep, Data, Run, RunConfig, RunReport, DATA_DIR_ENV};

/// Autoencoder epochs of the desk-scale runs. Purity does not improve past
/// 50 epochs (0.817, 0.813, 0.814, 0.811 at 50, 100, 150, 200), so longer
/// reduced runs buy nothing.
const REDUCED_AE_EPOCHS: usize = 50;
const FULL_AE_EPOCHS: usize = 300;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn model_from(assignment: Vec<usize>, distance: Vec<f64>, k: usize) -> ClusterModel {
    ClusterModel {
        k,
        dim: 1,
        centroids: vec![0.0; k],
        assignment,
        distance,
        inertia_history: vec![],
    }
}

/// Sum of digits `labels` laid out on the grid of `ex`.
fn grid_sum(ex: &Example, labels: &[u8]) -> u64 {
    let w = ex.width;
    ex.grid
        .iter()
        .enumerate()
        .map(|(idx, &img)| labels[img] as u64 * 10u64.pow((w - 1 - idx % w) as u32))
        .sum()
}

// 1. Branch-and-bound against exhaustive search.

fn criterion_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..100 {
        let k = rng.random_range(1..=4);
        let w = rng.random_range(1..=3);
        let h = rng.random_range(1..=2);
        let b = rng.random_range(1..=50);
        let n_images = b * w * h;
        let cluster: Vec<usize> = (0..n_images).map(|_| rng.random_range(0..k)).collect();
        let hidden: Vec<u8> = (0..k).map(|_| rng.random_range(0..10)).collect();
        let mut order: Vec<usize> = (0..n_images).collect();
        for i in (1..n_images).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let examples: Vec<Example> = order
            .chunks(w * h)
            .map(|grid| {
                let exact: u64 = grid
                    .iter()
                    .enumerate()
                    .map(|(idx, &img)| hidden[cluster[img]] as u64 * 10u64.pow((w - 1 - idx % w) as u32))
                    .sum();
                // A third of the sums are perturbed so the optimum is not always zero.
                let sum = if rng.random_bool(1.0 / 3.0) {
                    let max = h as u64 * (10u64.pow(w as u32) - 1);
                    rng.random_range(0..=max)
                } else {
                    exact
                };
                Example::new(w, h, grid.to_vec(), sum).unwrap()
            })
            .collect();
        let model = model_from(cluster.clone(), vec![0.0; n_images], k);

        // Oracle: every digit vector in lexicographic order.
        let mut best: Option<(u64, Vec<u8>)> = None;
        for code in 0..10usize.pow(k as u32) {
            let digits: Vec<u8> = (0..k)
                .map(|c| ((code / 10usize.pow((k - 1 - c) as u32)) % 10) as u8)
                .collect();
            let labels: Vec<u8> = cluster.iter().map(|&c| digits[c]).collect();
            let obj: u64 = examples.iter().map(|ex| grid_sum(ex, &labels).abs_diff(ex.sum)).sum();
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, digits));
            }
        }
        let (want_obj, want_digits) = best.unwrap();
        let got = solve_batch(&build_batch_system(&examples, &model).unwrap());
        if got.objective != want_obj || got.digits != want_digits {
            return outcome(
                false,
                format!(
                    "instance {instance} (k={k}, w={w}, h={h}, B={b}): solver {:?}/{} vs oracle {:?}/{}",
                    got.digits, got.objective, want_digits, want_obj
                ),
            );
        }
    }
    outcome(true, "100 instances match the 10^k enumeration")
}

// 2. Synthetic end-to-end recovery.

fn criterion_synthetic() -> Outcome {
    for seed in 0..10u64 {
        let (store, corpus) = generate_synthetic(1000, 10, 40.0, 16, 2, 2, seed).unwrap();
        let emb = EmbeddingMatrix::new(store.len(), store.dim(), store.pixels().to_vec()).unwrap();
        let model = kmeans_restarts(&emb, 10, seed, DEFAULT_MAX_ITER, DEFAULT_TOL, 10).unwrap();
        let truth = store.eval_labels();
        let p = purity(&model, truth).unwrap();
        // Generator map: the label every member of a cluster carries.
        let mut generator = vec![u8::MAX; 10];
        for (img, &c) in model.assignment.iter().enumerate() {
            generator[c] = truth[img];
        }
        let assignment = solve_corpus(&corpus, &model, 100).unwrap();
        let state = run_inference(init_labels(&model, &assignment).unwrap(), &corpus, &model).unwrap();
        let labels = final_labels(&state);
        let correct = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        if p != 1.0 || assignment.digits != generator || assignment.objective != 0 || correct != labels.len() {
            return outcome(
                false,
                format!(
                    "seed {seed}: purity {p}, digits {:?} vs generator {generator:?}, objective {}, label accuracy {}",
                    assignment.digits,
                    assignment.objective,
                    correct as f64 / labels.len() as f64
                ),
            );
        }
    }
    outcome(
        true,
        "10 seeds: generator map recovered, objective 0, label accuracy 1.0",
    )
}

// 3. Inference soundness and fixpoint.

fn criterion_inference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut total_fixed = 0;
    let mut checked = 0;
    for trial in 0..20 {
        let w = rng.random_range(1..=3);
        let h = rng.random_range(1..=3);
        let n_examples = rng.random_range(30..=80);
        let n = n_examples * w * h;
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let mut ids: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let examples: Vec<Example> = ids
            .chunks(w * h)
            .map(|grid| {
                let sum = grid
                    .iter()
                    .enumerate()
                    .map(|(idx, &img)| truth[img] as u64 * positional_weight(w, idx % w + 1).unwrap())
                    .sum();
                Example::new(w, h, grid.to_vec(), sum).unwrap()
            })
            .collect();
        // At most one perturbed image per example, about one example in ten.
        let mut cluster: Vec<usize> = truth.iter().map(|&d| d as usize).collect();
        let mut distance = vec![0.0; n];
        let mut perturbed = Vec::new();
        for ex in &examples {
            if rng.random_bool(0.1) {
                let img = ex.grid[rng.random_range(0..ex.grid.len())];
                cluster[img] = (truth[img] as usize + rng.random_range(1..10)) % 10;
                distance[img] = 1.0;
                perturbed.push(img);
            }
        }
        let model = model_from(cluster, distance, 10);
        let identity = sumlabel::assignment::DigitAssignment {
            digits: (0..10).collect(),
            objective: 0,
            satisfied: 0,
            batch_index: 0,
        };
        let inner = images_within_radius(&model, 1).unwrap();
        let clean_trusted = (0..n).filter(|i| !perturbed.contains(i)).all(|i| inner.contains(&i));
        if !clean_trusted {
            // Construction guard: too many perturbed images in one cluster.
            continue;
        }
        let corpus = Corpus {
            width: w,
            height: h,
            oversample_factor: 1,
            examples,
        };
        let mut state: LabelState = run_inference(init_labels(&model, &identity).unwrap(), &corpus, &model).unwrap();
        let labels = final_labels(&state);
        if labels != truth {
            let wrong = labels.iter().zip(&truth).filter(|(a, b)| a != b).count();
            return outcome(
                false,
                format!("trial {trial} (w={w}, h={h}): {wrong} labels still wrong"),
            );
        }
        if infer_correct_labels(&mut state, &corpus) {
            return outcome(
                false,
                format!("trial {trial}: propagation changed state after the fixpoint"),
            );
        }
        checked += 1;
        total_fixed += perturbed
            .iter()
            .filter(|&&i| state.provenance[i] == Provenance::Inferred)
            .count();
    }
    outcome(
        checked > 0,
        format!(
            "{checked} corpora restored to accuracy 1.0 ({total_fixed} perturbed labels repaired), fixpoint stable"
        ),
    )
}

// 4. Gradient checks.

fn autoencoder_gradient_error() -> f64 {
    let params = AutoencoderParams::<f64>::new(&[6, 8, 8, 3], 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..5 * 6).map(|_| rng.random::<f64>()).collect();
    let (_, grads) = params.loss_and_gradients(&x, 5);
    // Some gradients are near 1e-7; a smaller step lets f64 roundoff dominate.
    let eps = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (l, g) in grads.iter().enumerate() {
        for which in 0..2 {
            let len = if which == 0 {
                params.layers()[l].weight.len()
            } else {
                params.layers()[l].bias.len()
            };
            for i in 0..len {
                let mut p = params.clone();
                let nudge = |p: &mut AutoencoderParams<f64>, by: f64| {
                    let layer = &mut p.layers_mut()[l];
                    if which == 0 {
                        layer.weight[i] += by
                    } else {
                        layer.bias[i] += by
                    }
                };
                nudge(&mut p, eps);
                let up = p.reconstruction_loss(&x, 5);
                nudge(&mut p, -2.0 * eps);
                let down = p.reconstruction_loss(&x, 5);
                numeric.push((up - down) / (2.0 * eps));
                analytic.push(if which == 0 { g.weight[i] } else { g.bias[i] });
            }
        }
    }
    max_relative_error(&analytic, &numeric, 1e-7)
}

fn cnn_gradient_error() -> f64 {
    let spec = CnnSpec {
        side: 8,
        channels: 1,
        layers: vec![
            LayerSpec::Conv { filters: 2 },
            LayerSpec::Pool,
            LayerSpec::Conv { filters: 2 },
            LayerSpec::Dense { units: 4 },
        ],
        classes: 10,
    };
    let mut params = CnnParams::<f64>::new(spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Nonzero biases keep pre-activations off the ReLU kink.
    for layer in &mut params.layers {
        let bias = match layer {
            Layer::Conv(c) => &mut c.bias,
            Layer::Dense(d) => &mut d.bias,
            Layer::Pool(_) => continue,
        };
        bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
    }
    let x: Vec<f64> = (0..4 * 64).map(|_| rng.random::<f64>()).collect();
    let y = [3u8, 0, 7, 3];
    let (_, grads) = params.loss_and_gradients(&x, &y, 4);
    let analytic: Vec<f64> = flatten_grads(&grads).into_iter().flatten().copied().collect();
    let eps = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    for t in 0..params.params().len() {
        for i in 0..params.params()[t].len() {
            let mut p = params.clone();
            p.params_mut()[t][i] += eps;
            let up = p.loss(&x, &y, 4);
            p.params_mut()[t][i] -= 2.0 * eps;
            let down = p.loss(&x, &y, 4);
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    max_relative_error(&analytic, &numeric, 1e-7)
}

fn criterion_gradients() -> Outcome {
    let ae = autoencoder_gradient_error();
    let cnn = cnn_gradient_error();
    outcome(
        ae < 1e-4 && cnn < 1e-3,
        format!("autoencoder max rel err {ae:.2e} (< 1e-4), cnn {cnn:.2e} (< 1e-3)"),
    )
}

// 5 to 9: MNIST pipeline runs.

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn base_config() -> RunConfig {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    RunConfig {
        ae_epochs: REDUCED_AE_EPOCHS,
        data_dir: Some(data_dir()),
        artifacts_dir: root.join("artifacts"),
        reports_dir: root.join("reports"),
        resume: true,
        ..RunConfig::default()
    }
}

fn cell(w: usize, h: usize, factor: usize) -> RunConfig {
    RunConfig {
        w,
        h,
        oversample_factor: factor,
        ..base_config()
    }
}

struct Mnist {
    data: Data,
    reports: BTreeMap<(usize, usize, usize), RunReport>,
}

fn mnist_runs() -> Result<Mnist, String> {
    let base = base_config();
    let data = load_data(&base).map_err(|e| format!("MNIST unavailable at {}: {e}", data_dir().display()))?;
    let mut keys = vec![(2, 2, 1), (3, 2, 1), (5, 2, 1), (5, 2, 3)];
    for w in [1, 2, 4, 8] {
        for h in [2, 4] {
            keys.push((w, h, 1));
        }
    }
    keys.sort();
    keys.dedup();
    let configs: Vec<RunConfig> = keys.iter().map(|&(w, h, f)| cell(w, h, f)).collect();
    let start = Instant::now();
    let reports = sweep(&configs, 1).map_err(|e| e.to_string())?;
    eprintln!("pipeline runs ready after {:.0} s", start.elapsed().as_secs_f64());
    Ok(Mnist {
        data,
        reports: keys.into_iter().zip(reports).collect(),
    })
}

fn failed(r: &RunReport) -> Option<String> {
    r.failure
        .as_ref()
        .map(|f| format!("{} failed at {:?}: {}", r.run_id, f.stage, f.message))
}

fn criterion_purity(m: &Mnist) -> Outcome {
    let reduced = &m.reports[&(2, 2, 1)];
    if let Some(e) = failed(reduced) {
        return outcome(false, e);
    }
    let full_config = RunConfig {
        ae_epochs: FULL_AE_EPOCHS,
        ..cell(2, 2, 1)
    };
    let full = Run::new(full_config, &m.data).and_then(|mut run| {
        run.cluster()?;
        Ok(run.report.purity.unwrap())
    });
    let reduced_purity = reduced.purity.unwrap_or(0.0);
    match full {
        Ok(full_purity) => outcome(
            reduced_purity >= 0.85 && full_purity >= 0.90,
            format!(
                "purity {reduced_purity:.4} at {REDUCED_AE_EPOCHS} epochs (>= 0.85), {full_purity:.4} at {FULL_AE_EPOCHS} epochs (>= 0.90)"
            ),
        ),
        Err(e) => outcome(false, format!("{FULL_AE_EPOCHS}-epoch run failed: {e}")),
    }
}

fn criterion_classification(m: &Mnist) -> Outcome {
    let r = &m.reports[&(2, 2, 1)];
    match (failed(r), r.cls_acc) {
        (None, Some(acc)) => outcome(
            acc >= 0.90,
            format!("w=2 h=2 test classification accuracy {acc:.4} (>= 0.90)"),
        ),
        (e, _) => outcome(false, e.unwrap_or_else(|| "no accuracy".into())),
    }
}

fn criterion_addition(m: &Mnist) -> Outcome {
    let reference = [0.95, 0.87, 0.785, 0.72];
    let mut accs = Vec::new();
    for w in 1..=4 {
        let r = &m.reports[&(w, 2, 1)];
        if let Some(e) = failed(r) {
            return outcome(false, e);
        }
        accs.push(r.add_acc.unwrap_or(0.0));
    }
    let decreasing = accs.windows(2).all(|p| p[1] < p[0]);
    let near = accs.iter().zip(reference).all(|(a, r)| (a - r).abs() <= 0.05);
    let shown: Vec<String> = accs
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (a, r))| format!("w={} {a:.4} (ref {r})", i + 1))
        .collect();
    outcome(
        decreasing && accs[0] > 0.90 && near,
        format!(
            "h=2 addition accuracy {}; strictly decreasing {decreasing}, within 0.05 of reference {near}",
            shown.join(", ")
        ),
    )
}

fn criterion_timing(m: &Mnist) -> Outcome {
    let mut totals = Vec::new();
    for w in [1, 2, 4, 8] {
        for h in [2, 4] {
            let r = &m.reports[&(w, h, 1)];
            if let Some(e) = failed(r) {
                return outcome(false, e);
            }
            totals.push((w, h, r.times.total));
        }
    }
    let min = totals.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
    let max = totals.iter().map(|t| t.2).fold(0.0, f64::max);
    let shown: Vec<String> = totals.iter().map(|(w, h, t)| format!("w{w}h{h} {t:.0}s")).collect();
    outcome(
        max / min < 3.0,
        format!("max/min total time {:.2} (< 3): {}", max / min, shown.join(", ")),
    )
}

fn criterion_oversampling(m: &Mnist) -> Outcome {
    let one = &m.reports[&(5, 2, 1)];
    let three = &m.reports[&(5, 2, 3)];
    if let Some(e) = failed(one).or_else(|| failed(three)) {
        return outcome(false, e);
    }
    let a1 = one.label_acc_post.unwrap_or(0.0);
    let a3 = three.label_acc_post.unwrap_or(0.0);
    outcome(
        a3 > a1,
        format!("w=5 h=2 final label accuracy: factor 1 {a1:.4}, factor 3 {a3:.4}"),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let timed = |f: fn() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        o.detail = format!("{} [{:.1} s]", o.detail, start.elapsed().as_secs_f64());
        o
    };
    results.push((1, "solver exactness", timed(criterion_solver)));
    results.push((2, "synthetic recovery", timed(criterion_synthetic)));
    results.push((3, "inference soundness", timed(criterion_inference)));
    results.push((4, "gradient checks", timed(criterion_gradients)));

    type Check = fn(&Mnist) -> Outcome;
    let mnist: [(usize, &str, Check); 5] = [
        (5, "mnist purity", criterion_purity),
        (6, "classification accuracy", criterion_classification),
        (7, "addition accuracy trend", criterion_addition),
        (8, "timing flatness", criterion_timing),
        (9, "oversampling effect", criterion_oversampling),
    ];
    match mnist_runs() {
        Ok(m) => {
            for (n, name, f) in mnist {
                results.push((n, name, f(&m)));
            }
        }
        Err(e) => {
            for (n, name, _) in mnist {
                results.push((n, name, outcome(false, e.clone())));
            }
        }
    }

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!(
            "criterion {n} ({name}): {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if !all {
        std::process::exit(1);
    }
}
