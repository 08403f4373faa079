//! `ldb`: train a fingerprint generator, sample synthetic distractors, score
//! fidelity, build and query IVF-PQ indexes, and run scaling sweeps.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ldb_core::ann::{IvfPqConfig, IvfPqIndex, Metric};
use ldb_core::bench::{
    calibrate_noise_sigma, emit_report, perturb_queries, run_sweep, DistractorSource, SearchBackend,
};
use ldb_core::fidelity::{export_projection_2d, gaussian_noise, write_projection_csv, FidelityReport};
use ldb_core::fixtures::GaussianMixture;
use ldb_core::flow::{load_checkpoint, load_checkpoint_stats, save_checkpoint, CheckpointMeta, FlowNetConfig};
use ldb_core::rng::derive_seed;
use ldb_core::sampler::{generate_streaming, SamplerConfig};
use ldb_core::store::{load_embeddings, save_embeddings, stats_sidecar_path, EmbeddingMatrix};
use ldb_core::train::{train_with_observer, TrainConfig};
use ldb_core::Error;

use crate::config::{BenchmarkConfig, FidelityConfig, RunConfig};

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Prefixes errors with the file they concern unless they already name it.
fn at<T>(path: &Path, r: ldb_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        let shown = path.display().to_string();
        if !f.message.contains(&shown) {
            f.message = format!("{shown}: {}", f.message);
        }
        f
    })
}

fn read_matrix(path: &Path) -> CliResult<EmbeddingMatrix> {
    at(path, load_embeddings(path))
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| usage(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn required(flag: Option<PathBuf>, from_file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| from_file.clone())
        .ok_or_else(|| usage(format!("missing --{name} (or paths.{name} in the config file)")))
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Copies `src` over `dst` when the flag `id` was given explicitly.
fn set<T: Clone>(m: &ArgMatches, id: &str, dst: &mut T, src: &T) {
    if given(m, id) {
        *dst = src.clone();
    }
}

#[derive(Parser, Debug)]
#[command(name = "ldb", version, about = "Synthetic fingerprint distractors and retrieval scaling benchmarks")]
struct Cli {
    /// Worker threads for parallel stages; 0 lets the runtime decide
    #[arg(long, global = true, env = "LDB_THREADS", default_value_t = 0)]
    threads: usize,

    /// Increase log verbosity (-v info, -vv debug) [default: warnings only]
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the flow network on an FPE1 corpus
    Train(TrainArgs),
    /// Stream synthetic fingerprints from a checkpoint into an FPE1 file
    Sample(SampleArgs),
    /// Compare a synthetic set with real data and Gaussian noise
    Fidelity(FidelityArgs),
    /// Build or query an IVF-PQ index
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run a distractor scaling sweep and write JSON and CSV reports
    Benchmark(BenchmarkArgs),
    /// Write the Gaussian-mixture desk corpus
    #[command(hide = true)]
    MakeFixtures(FixtureArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// FPE1 training corpus [default: paths.corpus from --config]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for model.json, model.bin, model.stats.json and train_log.jsonl [default: paths.out from --config]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Passes over the training split
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    /// Rows per optimizer step
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Peak learning rate of the cosine schedule
    #[arg(long, default_value_t = TrainConfig::default().lr_max)]
    lr_max: f64,
    /// Final learning rate of the cosine schedule
    #[arg(long, default_value_t = TrainConfig::default().lr_min)]
    lr_min: f64,
    /// Decoupled AdamW weight decay
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the residual blocks
    #[arg(long, default_value_t = FlowNetConfig::default().width)]
    width: usize,
    /// Inner width of each block's MLP
    #[arg(long, default_value_t = FlowNetConfig::default().expansion)]
    expansion: usize,
    /// Number of residual blocks
    #[arg(long, default_value_t = FlowNetConfig::default().depth)]
    depth: usize,
    /// Size of the sinusoidal time embedding
    #[arg(long, default_value_t = FlowNetConfig::default().time_dim)]
    time_dim: usize,
    /// Epochs between FD validations and checkpoints; 0 disables validation
    #[arg(long, default_value_t = TrainConfig::default().validate_every)]
    validate_every: usize,
    /// Samples generated for each FD validation
    #[arg(long, default_value_t = TrainConfig::default().validation_sample_count)]
    validation_samples: usize,
    /// Euler steps used by validation sampling
    #[arg(long, default_value_t = TrainConfig::default().validation_steps)]
    validation_steps: usize,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint manifest written by `train` [default: paths.checkpoint from --config]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of fingerprints to generate
    #[arg(short, long, default_value_t = 1000)]
    n: usize,
    /// Output FPE1 file [default: paths.out from --config]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Euler steps
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    steps: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows generated per batch
    #[arg(long, default_value_t = SamplerConfig::default().batch_size)]
    batch_size: usize,
    /// Id of the first generated row
    #[arg(long, default_value_t = 0)]
    id_base: u64,
    /// L2-normalize every generated row [default: off]
    #[arg(long)]
    unit_norm: bool,
}

#[derive(Args, Debug)]
struct FidelityArgs {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// FPE1 file of real embeddings
    #[arg(long)]
    real: PathBuf,
    /// FPE1 file of synthetic embeddings
    #[arg(long)]
    synthetic: PathBuf,
    /// FPE1 noise baseline [default: N(0, I) with the synthetic set's shape]
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Principal components used for the JS estimate (capped at the dimension)
    #[arg(long, default_value_t = FidelityConfig::default().k)]
    k: usize,
    /// Monte Carlo points drawn from each density
    #[arg(long, default_value_t = FidelityConfig::default().eval_samples)]
    eval_samples: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON path [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a 2D PCA projection CSV (x,y,label) [default: not written]
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum IndexCommand {
    /// Train an index and add every row of an FPE1 file
    Build(IndexBuildArgs),
    /// Query a saved index
    Search(IndexSearchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    L2,
    InnerProduct,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L2 => Metric::L2,
            MetricArg::InnerProduct => Metric::InnerProduct,
        }
    }
}

#[derive(Args, Debug)]
struct IndexParams {
    /// Coarse clusters
    #[arg(long, default_value_t = IvfPqConfig::default().nlist)]
    nlist: usize,
    /// PQ subspaces; must divide the dimension
    #[arg(long, default_value_t = IvfPqConfig::default().m)]
    m: usize,
    /// Clusters scanned per query
    #[arg(long, default_value_t = IvfPqConfig::default().nprobe)]
    nprobe: usize,
    /// Distance used for search
    #[arg(long, value_enum, default_value_t = MetricArg::L2)]
    metric: MetricArg,
    /// Lloyd iterations for coarse and PQ k-means
    #[arg(long, default_value_t = IvfPqConfig::default().kmeans_iters)]
    kmeans_iters: usize,
    /// Store raw vectors instead of PQ codes (exact distances, for testing) [default: off]
    #[arg(long)]
    exact_codes: bool,
}

impl IndexParams {
    fn apply(&self, m: &ArgMatches, cfg: &mut IvfPqConfig) {
        set(m, "nlist", &mut cfg.nlist, &self.nlist);
        set(m, "m", &mut cfg.m, &self.m);
        set(m, "nprobe", &mut cfg.nprobe, &self.nprobe);
        set(m, "metric", &mut cfg.metric, &self.metric.into());
        set(m, "kmeans_iters", &mut cfg.kmeans_iters, &self.kmeans_iters);
        set(m, "exact_codes", &mut cfg.exact_codes, &self.exact_codes);
    }
}

#[derive(Args, Debug)]
struct IndexBuildArgs {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// FPE1 vectors to index
    #[arg(long)]
    data: PathBuf,
    /// FPE1 training sample [default: the indexed data]
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Output index file
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: IndexParams,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows read per chunk while adding
    #[arg(long, default_value_t = 65_536)]
    chunk_rows: usize,
}

#[derive(Args, Debug)]
struct IndexSearchArgs {
    /// Index file written by `index build`
    #[arg(long)]
    index: PathBuf,
    /// FPE1 query vectors
    #[arg(long)]
    queries: PathBuf,
    /// Neighbours per query
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Clusters scanned per query [default: the value stored in the index]
    #[arg(long)]
    nprobe: Option<usize>,
    /// Results JSON path [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Exact,
    IvfPq,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// JSON run configuration; flags override its values [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// FPE1 reference fingerprints [default: paths.refs from --config]
    #[arg(long)]
    refs: Option<PathBuf>,
    /// FPE1 pool of real distractors [default: paths.pool from --config]
    #[arg(long, conflicts_with = "checkpoint")]
    pool: Option<PathBuf>,
    /// Generator checkpoint used to synthesize distractors [default: paths.checkpoint from --config]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Strictly ascending distractor counts
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = ldb_core::bench::SweepConfig::default().distractor_sizes)]
    sizes: Vec<usize>,
    /// Resampled distractor sets per size
    #[arg(long, default_value_t = ldb_core::bench::SweepConfig::default().trials)]
    trials: usize,
    /// Base seed for distractor draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Queries perturbed from the references
    #[arg(long, default_value_t = BenchmarkConfig::default().n_queries)]
    n_queries: usize,
    /// Query noise relative to the reference per-dimension std [default: calibrated to --target-hr]
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// HR@1 without distractors that noise calibration aims for
    #[arg(long, default_value_t = BenchmarkConfig::default().target_hr)]
    target_hr: f64,
    /// Seed for query selection and noise
    #[arg(long, default_value_t = 0)]
    query_seed: u64,
    /// Search backend used for every trial
    #[arg(long, value_enum, default_value_t = BackendArg::Exact)]
    backend: BackendArg,
    #[command(flatten)]
    index: IndexParams,
    /// Euler steps when distractors come from a checkpoint
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    steps: usize,
    /// Report path stem; writes <stem>.json and <stem>.csv [default: paths.out from --config]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Rows in the generator training split
    #[arg(long, default_value_t = 20_000)]
    train: usize,
    /// Reference rows
    #[arg(long, default_value_t = 1_000)]
    refs: usize,
    /// Real distractor pool rows
    #[arg(long, default_value_t = 50_000)]
    pool: usize,
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> CliResult {
    let file = RunConfig::load_or_default(a.config.as_deref())?;
    let corpus_path = required(a.corpus.clone(), &file.paths.corpus, "corpus")?;
    let out = required(a.out.clone(), &file.paths.out, "out")?;
    let mut cfg = file.train;
    set(m, "epochs", &mut cfg.epochs, &a.epochs);
    set(m, "batch_size", &mut cfg.batch_size, &a.batch_size);
    set(m, "lr_max", &mut cfg.lr_max, &a.lr_max);
    set(m, "lr_min", &mut cfg.lr_min, &a.lr_min);
    set(m, "weight_decay", &mut cfg.weight_decay, &a.weight_decay);
    set(m, "seed", &mut cfg.seed, &a.seed);
    set(m, "width", &mut cfg.model.width, &a.width);
    set(m, "expansion", &mut cfg.model.expansion, &a.expansion);
    set(m, "depth", &mut cfg.model.depth, &a.depth);
    set(m, "time_dim", &mut cfg.model.time_dim, &a.time_dim);
    set(m, "validate_every", &mut cfg.validate_every, &a.validate_every);
    set(m, "validation_samples", &mut cfg.validation_sample_count, &a.validation_samples);
    set(m, "validation_steps", &mut cfg.validation_steps, &a.validation_steps);

    let corpus = read_matrix(&corpus_path)?;
    cfg.model.dim = corpus.dim();
    std::fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let manifest = out.join("model.json");
    let stats_path = stats_sidecar_path(&manifest);
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| usage(format!("{}: {e}", log_path.display())))?);
    let stats_name = stats_path.file_name().map(|n| n.to_string_lossy().into_owned());

    let outcome = train_with_observer(&corpus, &cfg, |ev| {
        let line = serde_json::to_string(ev.record).expect("epoch records serialize");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        if ev.checkpoint {
            ev.stats.save(&stats_path)?;
            let meta = CheckpointMeta {
                epoch: Some(ev.record.epoch),
                seed: Some(cfg.seed),
                stats: stats_name.clone(),
            };
            save_checkpoint(ev.params, &meta, &manifest)?;
        }
        Ok(())
    })?;
    let last = outcome.log.last().expect("at least one epoch");
    write_json(
        &serde_json::json!({
            "checkpoint": manifest,
            "epochs": outcome.log.len(),
            "final_loss": last.mean_loss,
            "parameters": outcome.params.len(),
        }),
        None,
    )
}

fn cmd_sample(a: &SampleArgs, m: &ArgMatches) -> CliResult {
    let file = RunConfig::load_or_default(a.config.as_deref())?;
    let checkpoint = required(a.checkpoint.clone(), &file.paths.checkpoint, "checkpoint")?;
    let out = required(a.out.clone(), &file.paths.out, "out")?;
    let mut cfg = file.sample;
    set(m, "steps", &mut cfg.steps, &a.steps);
    set(m, "seed", &mut cfg.seed, &a.seed);
    set(m, "batch_size", &mut cfg.batch_size, &a.batch_size);
    set(m, "id_base", &mut cfg.id_base, &a.id_base);
    set(m, "unit_norm", &mut cfg.unit_norm, &a.unit_norm);
    let (params, meta) = at(&checkpoint, load_checkpoint(&checkpoint))?;
    let stats = at(&checkpoint, load_checkpoint_stats(&checkpoint, &meta))?;
    let summary = generate_streaming(&params, &stats, a.n, &cfg, &out)?;
    log::info!("{} rows in {:.2}s ({:.0} rows/s)", summary.rows, summary.seconds, summary.rows_per_second);
    write_json(&summary, None)
}

fn cmd_fidelity(a: &FidelityArgs, m: &ArgMatches) -> CliResult {
    let file = RunConfig::load_or_default(a.config.as_deref())?;
    let mut cfg = file.fidelity;
    set(m, "k", &mut cfg.k, &a.k);
    set(m, "eval_samples", &mut cfg.eval_samples, &a.eval_samples);
    set(m, "seed", &mut cfg.seed, &a.seed);
    let real = read_matrix(&a.real)?;
    let synthetic = read_matrix(&a.synthetic)?;
    if real.dim() != synthetic.dim() {
        return Err(usage(format!(
            "dimension mismatch: {} has {}, {} has {}",
            a.real.display(),
            real.dim(),
            a.synthetic.display(),
            synthetic.dim()
        )));
    }
    let noise = match &a.noise {
        Some(p) => read_matrix(p)?,
        None => gaussian_noise(real.dim(), synthetic.count(), derive_seed(cfg.seed, &[0x6e6f]))
    };
    let report = FidelityReport::compute(&real, &synthetic, &noise, cfg.k, cfg.eval_samples, cfg.seed)?;
    if let Some(path) = &a.projection {
        let points = export_projection_2d(&real, &synthetic, &noise)?;
        let f = File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        write_projection_csv(&points, BufWriter::new(f)).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    write_json(&report, a.out.as_deref())
}

fn cmd_index_build(a: &IndexBuildArgs, m: &ArgMatches) -> CliResult {
    let file = RunConfig::load_or_default(a.config.as_deref())?;
    let mut cfg = file.index;
    a.params.apply(m, &mut cfg);
    set(m, "seed", &mut cfg.train_seed, &a.seed);
    let train_path = a.train_data.as_ref().unwrap_or(&a.data);
    let training = read_matrix(train_path)?;
    let mut index = IvfPqIndex::new(cfg, training.dim())?;
    at(train_path, index.train(&training))?;
    drop(training);
    let added = at(&a.data, index.add_from_file(&a.data, a.chunk_rows))?;
    index.save(&a.out)?;
    write_json(
        &serde_json::json!({
            "index": a.out,
            "vectors": added,
            "nlist": cfg.nlist,
            "m": cfg.m,
            "nprobe": cfg.nprobe,
        }),
        None,
    )
}

fn cmd_index_search(a: &IndexSearchArgs) -> CliResult {
    let mut index = IvfPqIndex::load(&a.index)?;
    if let Some(nprobe) = a.nprobe {
        index.set_nprobe(nprobe)?;
    }
    let queries = read_matrix(&a.queries)?;
    let results = index.search(&queries, a.k)?;
    write_json(&results, a.out.as_deref())
}

fn cmd_benchmark(a: &BenchmarkArgs, m: &ArgMatches) -> CliResult {
    let file = RunConfig::load_or_default(a.config.as_deref())?;
    let refs_path = required(a.refs.clone(), &file.paths.refs, "refs")?;
    let out = required(a.out.clone(), &file.paths.out, "out")?;
    let mut cfg = file.benchmark;
    set(m, "sizes", &mut cfg.sweep.distractor_sizes, &a.sizes);
    set(m, "trials", &mut cfg.sweep.trials, &a.trials);
    set(m, "seed", &mut cfg.sweep.trial_seed_base, &a.seed);
    set(m, "n_queries", &mut cfg.n_queries, &a.n_queries);
    if a.noise_sigma.is_some() {
        cfg.noise_sigma = a.noise_sigma;
    }
    set(m, "target_hr", &mut cfg.target_hr, &a.target_hr);
    set(m, "query_seed", &mut cfg.query_seed, &a.query_seed);
    let mut index_cfg = match cfg.sweep.backend {
        SearchBackend::IvfPq(c) => c,
        SearchBackend::Exact { .. } => file.index,
    };
    a.index.apply(m, &mut index_cfg);
    if given(m, "backend") {
        cfg.sweep.backend = match a.backend {
            BackendArg::Exact => SearchBackend::Exact {
                metric: a.index.metric.into(),
            },
            BackendArg::IvfPq => SearchBackend::IvfPq(index_cfg),
        };
    } else if let SearchBackend::IvfPq(_) = cfg.sweep.backend {
        cfg.sweep.backend = SearchBackend::IvfPq(index_cfg);
    }

    let refs = read_matrix(&refs_path)?;
    let sigma = match cfg.noise_sigma {
        Some(s) => s,
        None => {
            let s = calibrate_noise_sigma(&refs, cfg.n_queries, cfg.target_hr, cfg.query_seed)?;
            log::info!("calibrated noise_sigma = {s:.5} for HR@1 ≈ {}", cfg.target_hr);
            s
        }
    };
    let queries = perturb_queries(&refs, cfg.n_queries, sigma, cfg.query_seed)?;

    let pool_path = a.pool.clone().or(file.paths.pool.clone());
    let checkpoint_path = a.checkpoint.clone().or(file.paths.checkpoint.clone());
    let report = match (pool_path, checkpoint_path) {
        (Some(pool), None) => {
            let pool_m = read_matrix(&pool)?;
            run_sweep(&refs, &queries, &cfg.sweep, &DistractorSource::RealPool(&pool_m))?
        }
        (None, Some(ckpt)) => {
            let (params, meta) = at(&ckpt, load_checkpoint(&ckpt))?;
            let stats = at(&ckpt, load_checkpoint_stats(&ckpt, &meta))?;
            let mut sampler = file.sample;
            set(m, "steps", &mut sampler.steps, &a.steps);
            let source = DistractorSource::Generator {
                params: &params,
                stats: &stats,
                sampler,
            };
            run_sweep(&refs, &queries, &cfg.sweep, &source)?
        }
        (Some(_), Some(_)) => return Err(usage("give either --pool or --checkpoint, not both")),
        (None, None) => return Err(usage("missing distractor source: --pool or --checkpoint")),
    };
    emit_report(&report, &out)?;
    for p in &report.points {
        println!("{:>10}  hr@1 {:.4} ± {:.4}", p.n_distractors, p.hr1_mean, p.hr1_std);
    }
    let (first, last) = (&report.points[0], &report.points[report.points.len() - 1]);
    match report.degradation() {
        Ok(d) => println!(
            "degradation {} -> {} distractors: {d:.2}%",
            first.n_distractors, last.n_distractors
        ),
        Err(Error::UndefinedDegradation) => println!("degradation undefined: baseline HR@1 is zero"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn cmd_make_fixtures(a: &FixtureArgs) -> CliResult {
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    let mixture = GaussianMixture::frozen();
    let seed = ldb_core::fixtures::MIXTURE_SEED;
    let mut start = 0u64;
    for (name, n) in [("train", a.train), ("refs", a.refs), ("pool", a.pool)] {
        let (m, _) = mixture.sample_range(start, n, seed)?;
        let path = a.out.join(format!("mixture_{name}.fpe"));
        save_embeddings(&m, &path)?;
        println!("{}\t{n}", path.display());
        start += n as u64;
    }
    Ok(())
}

fn run(cli: &Cli, matches: &ArgMatches) -> CliResult {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::Train(a) => cmd_train(a, sub),
        Command::Sample(a) => cmd_sample(a, sub),
        Command::Fidelity(a) => cmd_fidelity(a, sub),
        Command::Index(IndexCommand::Build(a)) => cmd_index_build(a, sub.subcommand().expect("build").1),
        Command::Index(IndexCommand::Search(a)) => cmd_index_search(a),
        Command::Benchmark(a) => cmd_benchmark(a, sub),
        Command::MakeFixtures(a) => cmd_make_fixtures(a),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
