use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use radon_cbir::imaging::{normalize_features, normalize_image, radon_transform, ImagingError};
use radon_cbir::pipeline::{
    self, load_image, load_samples, run_benchmark, Manifest, PipelineError, RetrievalSystem, RunConfig,
    SearchMode,
};
use radon_cbir::svm::{DEFAULT_C, DEFAULT_GAMMA};
use radon_cbir::synthetic::{self, SyntheticSpec};
use radon_cbir::{generate_barcode, RadonConfig, SvmParams};

/// Radon barcode image retrieval with SVM class gating.
#[derive(Parser)]
#[command(name = "radon-cbir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features from a labeled manifest, train the classifier and write the index.
    Train(TrainArgs),
    /// Classify a query image and list its nearest indexed barcodes.
    Retrieve(RetrieveArgs),
    /// Run every image of a test manifest through retrieval and score the results.
    Evaluate(EvaluateArgs),
    /// Print the barcode of one image.
    Barcode(BarcodeArgs),
    /// Retrain and evaluate over a grid of sizes and projection counts.
    Benchmark(BenchmarkArgs),
    /// Write a procedurally generated shape corpus with train and test manifests.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LayoutArgs {
    /// Normalized image side N (16, 32 or 64).
    #[arg(long, default_value_t = pipeline::DEFAULT_SIDE)]
    size: usize,
    /// Number of projection angles n_p.
    #[arg(long, default_value_t = pipeline::DEFAULT_PROJECTIONS)]
    projections: usize,
}

#[derive(Args)]
struct SvmArgs {
    /// Soft-margin penalty.
    #[arg(long, default_value_t = DEFAULT_C)]
    c: f64,
    /// RBF kernel width.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Args)]
struct WorkerArgs {
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Args)]
struct TrainArgs {
    /// CSV with header `path,class,irma_code`.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
    #[command(flatten)]
    svm: SvmArgs,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    /// Output index file.
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args)]
struct ArtifactArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Query image (PNG, BMP or PGM).
    query: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Number of results.
    #[arg(long, default_value_t = pipeline::DEFAULT_K)]
    k: usize,
    /// Search every class instead of only the predicted one.
    #[arg(long)]
    direct: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Test manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = pipeline::DEFAULT_K)]
    k: usize,
    /// Output report CSV.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    direct: bool,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args)]
struct BarcodeArgs {
    image: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Training manifest, used to retrain every grid cell.
    #[arg(long)]
    manifest: PathBuf,
    /// Test manifest.
    #[arg(long)]
    test_manifest: PathBuf,
    /// Comma-separated `NxP` cells; defaults to {16,32,64} x {8,16,32}.
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    svm: SvmArgs,
    #[arg(long, default_value_t = pipeline::DEFAULT_K)]
    k: usize,
    /// Output CSV; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticSpec::default().train_per_class)]
    train_per_class: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().test_per_class)]
    test_per_class: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = SyntheticSpec::default().noise)]
    noise: f64,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::Imaging(ImagingError::UnsupportedSide(_) | ImagingError::Config(_))
            | PipelineError::Svm(radon_cbir::svm::SvmError::Params(_)) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run_config(layout: Option<&LayoutArgs>, svm: Option<&SvmArgs>, k: usize, workers: usize) -> Result<RunConfig, Failure> {
    let defaults = RunConfig::default();
    let rc = RunConfig {
        side: layout.map_or(defaults.side, |l| l.size),
        projections: layout.map_or(defaults.projections, |l| l.projections),
        svm: svm.map_or(defaults.svm, |s| SvmParams::new(s.c, s.gamma)),
        k,
        workers,
    };
    rc.validate()?;
    Ok(rc)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T, Failure> + Send) -> Result<T, Failure> {
    pipeline::with_workers(workers, f)?
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let rc = run_config(Some(&args.layout), Some(&args.svm), pipeline::DEFAULT_K, args.workers.workers)?;
    let cfg = rc.radon()?;
    let start = Instant::now();
    let manifest = Manifest::load(&args.manifest)?;
    let classes = manifest.class_count();
    if classes < 2 {
        return Err(PipelineError::TooFewClasses(classes).into());
    }
    let system = in_pool(rc.workers, || {
        let samples = load_samples(&manifest, &cfg)?;
        Ok(RetrievalSystem::train(&samples, &cfg, &rc.svm)?)
    })?;
    write_file(&args.model, system.model_bytes()?)?;
    write_file(&args.index, system.index.to_bytes())?;
    println!("classes: {classes}");
    println!("images: {}", system.index.total());
    println!("skipped rows: {}", manifest.skipped);
    println!("pairwise machines: {}", system.model.machines().len());
    println!("support vectors: {}", system.model.support_vector_count());
    if !system.model.all_converged() {
        eprintln!("warning: at least one pairwise machine hit its update budget before converging");
    }
    println!("wall time: {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn mode(direct: bool) -> SearchMode {
    if direct {
        SearchMode::Direct
    } else {
        SearchMode::Gated
    }
}

fn retrieve(args: RetrieveArgs) -> Result<(), Failure> {
    run_config(None, None, args.k, 1)?;
    let system = RetrievalSystem::load(&args.artifacts.model, &args.artifacts.index)?;
    let img = load_image(&args.query)?;
    let start = Instant::now();
    let r = system.retrieve_image(&img, args.k, mode(args.direct))?;
    let elapsed = start.elapsed();
    println!("predicted class: {}", r.predicted_class);
    println!("rank,id,class,distance");
    for (rank, n) in r.result.entries.iter().enumerate() {
        println!("{},{},{},{}", rank + 1, n.id, n.class_label, n.distance);
    }
    eprintln!("retrieval time: {:.2} ms", elapsed.as_secs_f64() * 1000.0);
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let rc = run_config(None, None, args.k, args.workers.workers)?;
    let system = RetrievalSystem::load(&args.artifacts.model, &args.artifacts.index)?;
    let manifest = Manifest::load(&args.manifest)?;
    let (evaluation, extract_ms) = in_pool(rc.workers, || {
        let start = Instant::now();
        let queries = load_samples(&manifest, system.config())?;
        let extract_ms = start.elapsed().as_secs_f64() * 1000.0 / queries.len().max(1) as f64;
        Ok((system.evaluate(&queries, rc.k, mode(args.direct))?, extract_ms))
    })?;
    write_file(&args.report, evaluation.report.to_csv())?;
    let report = &evaluation.report;
    println!("queries: {}", report.rows.len());
    println!("skipped rows: {}", manifest.skipped);
    println!("scored queries: {}", report.scored_queries());
    println!("accuracy: {:.2}%", report.accuracy);
    println!("total error: {:.2}", report.total_error);
    println!(
        "mean latency: {:.2} ms/image (decode and extract {:.2}, classify and search {:.2})",
        extract_ms + evaluation.ms_per_query,
        extract_ms,
        evaluation.ms_per_query
    );
    Ok(())
}

fn barcode(args: BarcodeArgs) -> Result<(), Failure> {
    let rc = run_config(Some(&args.layout), None, pipeline::DEFAULT_K, 1)?;
    let cfg: RadonConfig = rc.radon()?;
    let img = load_image(&args.image)?;
    let features = normalize_features(
        radon_transform(&normalize_image(&img, cfg.side()).map_err(PipelineError::from)?, &cfg)
            .map_err(PipelineError::from)?,
    );
    let code = generate_barcode(&features);
    print!("{}", code.to_text());
    println!("packed size: {} bytes", code.shape().packed_len());
    Ok(())
}

fn benchmark(args: BenchmarkArgs) -> Result<(), Failure> {
    let rc = run_config(None, Some(&args.svm), args.k, args.workers.workers)?;
    let grid = match &args.grid {
        Some(spec) => pipeline::parse_grid(spec).map_err(Failure::Usage)?,
        None => pipeline::default_grid(),
    };
    let train = Manifest::load(&args.manifest)?;
    let test = Manifest::load(&args.test_manifest)?;
    let rows = in_pool(rc.workers, || Ok(run_benchmark(&train, &test, &grid, &rc.svm, rc.k)))?;
    let csv = pipeline::benchmark_csv(&rows);
    match &args.report {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    for row in &rows {
        match &row.outcome {
            Ok(c) => eprintln!(
                "N={} n_p={}: accuracy {:.2}%, total error gated {:.2} direct {:.2}, {:.2} ms/query",
                row.side, row.projections, c.accuracy, c.gated_total_error, c.direct_total_error, c.ms_per_query
            ),
            Err(e) => eprintln!("N={} n_p={}: failed: {e}", row.side, row.projections),
        }
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        return Err(Failure::Usage(format!("noise must be a non-negative number, got {}", args.noise)));
    }
    let spec = SyntheticSpec {
        seed: args.seed,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        noise: args.noise,
    };
    let corpus = synthetic::generate(&spec);
    let paths = synthetic::write_corpus(&args.out, &corpus)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.out.display())))?;
    println!("train manifest: {} ({} images)", paths.train_manifest.display(), corpus.train.len());
    println!("test manifest: {} ({} images)", paths.test_manifest.display(), corpus.test.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Barcode(a) => barcode(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
