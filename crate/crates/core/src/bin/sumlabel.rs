use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sumlabel::dataset::{build_corpus, write_idx, Split, MNIST_SIDE};
use sumlabel::pipeline::{self, load_data, Backend, DataSource, RunConfig, RunReport, Stage};

#[derive(Parser)]
#[command(version, about = "Train a digit classifier from sums of digit grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bundle images into sum examples; synthetic sources also write IDX files.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute (or reuse) the training-set embedding.
    Embed(ConfigArgs),
    /// Run k-means on the embedding.
    Cluster(ConfigArgs),
    /// Solve for the cluster-to-digit map.
    Assign(ConfigArgs),
    /// Propagate labels through the sum constraints.
    Infer(ConfigArgs),
    /// Train the classifier on inferred labels.
    Train(ConfigArgs),
    /// Score the trained classifier on the test split.
    Evaluate(ConfigArgs),
    /// All stages, from scratch unless --resume is given.
    Run(ConfigArgs),
    /// Grid over w, h, oversampling factor and seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ws: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        hs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        factors: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

/// Flags override fields of `--config`, which overrides the defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with any subset of the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `mnist` or `synthetic`.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// `autoencoder` or `pca`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long)]
    ae_seed: Option<u64>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    cnn_epochs: Option<usize>,
    /// MNIST IDX directory.
    #[arg(long, env = pipeline::DATA_DIR_ENV)]
    data: Option<PathBuf>,
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Reuse persisted stage artifacts.
    #[arg(long)]
    resume: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_lowercase()))
        .map_err(|_| format!("unknown value {value:?}"))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident, $value:expr) => {
                if let Some(v) = $value.clone() {
                    c.$field = v;
                }
            };
        }
        set!(w, self.w);
        set!(h, self.h);
        set!(oversample_factor, self.factor);
        set!(seed, self.seed);
        set!(batch_size, self.batch_size);
        set!(ae_epochs, self.ae_epochs);
        set!(ae_seed, self.ae_seed);
        set!(cnn_epochs, self.cnn_epochs);
        set!(artifacts_dir, self.artifacts);
        set!(reports_dir, self.reports);
        if let Some(n) = self.kmeans_restarts {
            c.kmeans.n_init = n;
        }
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        if self.data.is_some() {
            c.data_dir = self.data.clone();
        }
        if let Some(s) = &self.source {
            c.source = parse_enum::<DataSource>(s)?;
        }
        if let Some(b) = &self.backend {
            c.backend = parse_enum::<Backend>(b)?;
        }
        c.resume |= self.resume;
        Ok(c)
    }
}

fn print_report(report: &RunReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
}

fn stage(args: &ConfigArgs, last: Stage, resume: bool) -> Result<bool, Box<dyn std::error::Error>> {
    let mut config = args.resolve()?;
    config.resume |= resume;
    config.validate()?;
    let data = load_data(&config)?;
    let mut run = pipeline::Run::new(config, &data)?;
    run.run_until(last);
    run.report.write()?;
    print_report(&run.report);
    Ok(run.report.failure.is_none())
}

fn generate(args: &ConfigArgs, out: &PathBuf) -> Result<bool, Box<dyn std::error::Error>> {
    let config = args.resolve()?;
    config.validate()?;
    let data = load_data(&config)?;
    std::fs::create_dir_all(out)?;
    let side = (MNIST_SIDE as u32, MNIST_SIDE as u32);
    if config.source == DataSource::Synthetic {
        for (store, prefix) in [(&data.train, "train"), (&data.test, "t10k")] {
            write_idx(
                store,
                &out.join(format!("{prefix}-images-idx3-ubyte")),
                &out.join(format!("{prefix}-labels-idx1-ubyte")),
                side,
            )?;
        }
    }
    for (store, name, factor, seed) in [
        (&data.train, "train-corpus.txt", config.oversample_factor, config.seed),
        (&data.test, "test-corpus.txt", 1, config.seed.wrapping_add(1)),
    ] {
        let corpus = build_corpus(store, config.w, config.h, factor, seed)?;
        corpus.write(&out.join(name))?;
        let split = if store.split() == Split::Train { "train" } else { "test" };
        println!("{split}: {} examples -> {}", corpus.len(), out.join(name).display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData { config, out } => generate(config, out),
        Command::Embed(a) => stage(a, Stage::Embed, true),
        Command::Cluster(a) => stage(a, Stage::Cluster, true),
        Command::Assign(a) => stage(a, Stage::Assign, true),
        Command::Infer(a) => stage(a, Stage::Infer, true),
        Command::Train(a) => stage(a, Stage::Train, true),
        Command::Evaluate(a) => stage(a, Stage::Evaluate, true),
        Command::Run(a) => stage(a, Stage::Evaluate, false),
        Command::Sweep {
            config,
            ws,
            hs,
            factors,
            seeds,
            workers,
        } => (|| -> Result<bool, Box<dyn std::error::Error>> {
            let base = config.resolve()?;
            let mut configs = Vec::new();
            for &w in ws {
                for &h in hs {
                    for &oversample_factor in factors {
                        for &seed in seeds {
                            configs.push(RunConfig {
                                w,
                                h,
                                oversample_factor,
                                seed,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
            let reports = pipeline::sweep(&configs, *workers)?;
            println!("{}", base.reports_dir.join("sweep.csv").display());
            Ok(reports.iter().all(|r| r.failure.is_none()))
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
