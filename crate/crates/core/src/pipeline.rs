//! Training and retrieval stages over manifest-described corpora.
//!
//! Training: decode → normalize to `N×N` → Radon → normalize features →
//! barcode, for every image; then train the multi-class SVM on the flattened
//! features and bucket the barcodes by class.
//!
//! Retrieval: the same extraction on the query, SVM prediction, then a
//! Hamming kNN inside the predicted class (or across the whole index in
//! direct mode).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::barcode::{generate_barcode, RadonBarcode};
use crate::eval::{self, AxisAlphabets, EvalError, IrmaCode, RetrievalReport, RetrievalRow};
use crate::imaging::{self, GrayImage, ImagingError, NormalizedImage, RadonConfig};
use crate::index::{build_index, BarcodeIndex, IndexError, IndexedImage, RankedResult};
use crate::svm::{self, MulticlassSvm, SvmError, SvmParams};

pub const DEFAULT_SIDE: usize = 32;
pub const DEFAULT_PROJECTIONS: usize = 16;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{} row(s) failed:\n{}", .0.len(), format_rows(.0))]
    Rows(Vec<RowError>),
    #[error("model and index disagree: model has {model}, index has {index}")]
    ConfigMismatch { model: RadonConfig, index: RadonConfig },
    #[error("training needs at least 2 classes, manifest has {0}")]
    TooFewClasses(usize),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One failed manifest row.
#[derive(Debug)]
pub struct RowError {
    /// 1-based line number in the manifest, header being line 1.
    pub line: usize,
    pub path: PathBuf,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.path.display(), self.reason)
    }
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter().map(|r| format!("  {r}")).collect::<Vec<_>>().join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Manifest line, for error reporting.
    pub line: usize,
    /// Path exactly as written in the manifest; doubles as the image id.
    pub id: String,
    /// `id` resolved against the manifest's directory.
    pub path: PathBuf,
    pub class_label: String,
    pub irma_code: Option<IrmaCode>,
}

/// Parsed `path,class,irma_code` CSV. Rows without a class are skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub skipped: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|reason| PipelineError::Manifest {
            path: path.to_owned(),
            reason,
        })
    }

    /// Parses manifest text; relative image paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let expected = ["path", "class", "irma_code"];
        if headers.len() < 2
            || headers.iter().zip(expected).any(|(h, e)| h != e)
            || headers.len() > 3
        {
            return Err(format!(
                "expected header `path,class,irma_code`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ));
        }
        let mut rows = Vec::new();
        let mut skipped = 0;
        let mut problems = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| format!("line {line}: {e}"))?;
            let id = record.get(0).unwrap_or("").to_owned();
            let class_label = record.get(1).unwrap_or("").to_owned();
            let code = record.get(2).unwrap_or("");
            if id.is_empty() {
                problems.push(format!("line {line}: empty path"));
                continue;
            }
            if class_label.is_empty() {
                skipped += 1;
                continue;
            }
            let irma_code = if code.is_empty() {
                None
            } else {
                match IrmaCode::parse(code) {
                    Ok(c) => Some(c),
                    Err(e) => {
                        problems.push(format!("line {line}: {e}"));
                        continue;
                    }
                }
            };
            rows.push(ManifestRow {
                line,
                path: base.join(&id),
                id,
                class_label,
                irma_code,
            });
        }
        if !problems.is_empty() {
            return Err(problems.join("; "));
        }
        Ok(Self { rows, skipped })
    }

    pub fn class_count(&self) -> usize {
        let mut classes: Vec<&str> = self.rows.iter().map(|r| r.class_label.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        classes.len()
    }
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub side: usize,
    pub projections: usize,
    pub svm: SvmParams,
    pub k: usize,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            side: DEFAULT_SIDE,
            projections: DEFAULT_PROJECTIONS,
            svm: SvmParams::default(),
            k: DEFAULT_K,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn radon(&self) -> Result<RadonConfig, PipelineError> {
        if !imaging::SUPPORTED_SIDES.contains(&self.side) {
            return Err(ImagingError::UnsupportedSide(self.side).into());
        }
        Ok(RadonConfig::new(self.projections, self.side)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.radon()?;
        self.svm.validate()?;
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated rayon pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Normalized Radon features and barcode of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub features: Vec<f64>,
    pub barcode: RadonBarcode,
}

/// Radon features (max-normalized) and barcode of an already resized image.
pub fn extract_normalized(img: &NormalizedImage, cfg: &RadonConfig) -> Result<Extracted, PipelineError> {
    let features = imaging::normalize_features(imaging::radon_transform(img, cfg)?);
    let barcode = generate_barcode(&features);
    Ok(Extracted {
        features: features.into_values(),
        barcode,
    })
}

pub fn extract(img: &GrayImage, cfg: &RadonConfig) -> Result<Extracted, PipelineError> {
    extract_normalized(&imaging::normalize_image(img, cfg.side())?, cfg)
}

pub fn load_image(path: &Path) -> Result<GrayImage, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(imaging::to_grayscale(&bytes)?)
}

/// A manifest row after feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class_label: String,
    pub irma_code: Option<IrmaCode>,
    pub extracted: Extracted,
}

/// Decodes and normalizes every row on the ambient pool, collecting all
/// failures instead of stopping at the first.
pub fn load_normalized(manifest: &Manifest, side: usize) -> Result<Vec<NormalizedImage>, PipelineError> {
    let results: Vec<Result<NormalizedImage, RowError>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            load_image(&row.path)
                .and_then(|img| Ok(imaging::normalize_image(&img, side)?))
                .map_err(|e| RowError {
                    line: row.line,
                    path: row.path.clone(),
                    reason: e.to_string(),
                })
        })
        .collect();
    collect_rows(results)
}

fn collect_rows<T>(results: Vec<Result<T, RowError>>) -> Result<Vec<T>, PipelineError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push(e),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(PipelineError::Rows(failed))
    }
}

/// Projects pre-normalized images for one Radon configuration.
pub fn samples_from(
    manifest: &Manifest,
    images: &[NormalizedImage],
    cfg: &RadonConfig,
) -> Result<Vec<Sample>, PipelineError> {
    manifest
        .rows
        .par_iter()
        .zip(images)
        .map(|(row, img)| {
            Ok(Sample {
                id: row.id.clone(),
                class_label: row.class_label.clone(),
                irma_code: row.irma_code,
                extracted: extract_normalized(img, cfg)?,
            })
        })
        .collect()
}

pub fn load_samples(manifest: &Manifest, cfg: &RadonConfig) -> Result<Vec<Sample>, PipelineError> {
    let images = load_normalized(manifest, cfg.side())?;
    samples_from(manifest, &images, cfg)
}

/// The trained classifier and barcode index, which always share a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSystem {
    pub model: MulticlassSvm,
    pub index: BarcodeIndex,
    /// Per-position alphabet sizes of the indexed IRMA codes, if any were given.
    pub alphabets: Option<AxisAlphabets>,
}

/// Whether retrieval is restricted to the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Gated,
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub predicted_class: String,
    pub result: RankedResult,
}

fn alphabets_of(index: &BarcodeIndex) -> Option<AxisAlphabets> {
    let codes: Vec<IrmaCode> = index.records().filter_map(|r| r.irma_code).collect();
    eval::compute_alphabets(&codes).ok()
}

impl RetrievalSystem {
    /// Training stage over already extracted samples. Runs on the ambient pool.
    pub fn train(samples: &[Sample], cfg: &RadonConfig, params: &SvmParams) -> Result<Self, PipelineError> {
        let mut classes: Vec<&str> = samples.iter().map(|s| s.class_label.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(PipelineError::TooFewClasses(classes.len()));
        }
        let features: Vec<&[f64]> = samples.iter().map(|s| s.extracted.features.as_slice()).collect();
        let labels: Vec<&str> = samples.iter().map(|s| s.class_label.as_str()).collect();
        let model = svm::train_multiclass(&features, &labels, params)?;
        let records = samples
            .iter()
            .map(|s| IndexedImage {
                id: s.id.clone(),
                class_label: s.class_label.clone(),
                irma_code: s.irma_code,
                barcode: s.extracted.barcode.clone(),
            })
            .collect();
        let index = build_index(records, cfg)?;
        let alphabets = alphabets_of(&index);
        Ok(Self {
            model,
            index,
            alphabets,
        })
    }

    pub fn from_parts(model: MulticlassSvm, model_layout: RadonConfig, index: BarcodeIndex) -> Result<Self, PipelineError> {
        if &model_layout != index.config() {
            return Err(PipelineError::ConfigMismatch {
                model: model_layout,
                index: index.config().clone(),
            });
        }
        let alphabets = alphabets_of(&index);
        Ok(Self {
            model,
            index,
            alphabets,
        })
    }

    pub fn config(&self) -> &RadonConfig {
        self.index.config()
    }

    pub fn model_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        Ok(self.model.to_bytes(self.config())?)
    }

    pub fn save(&self, model_path: &Path, index_path: &Path) -> Result<(), PipelineError> {
        fs::write(model_path, self.model_bytes()?).map_err(io_err(model_path))?;
        fs::write(index_path, self.index.to_bytes()).map_err(io_err(index_path))?;
        Ok(())
    }

    pub fn load(model_path: &Path, index_path: &Path) -> Result<Self, PipelineError> {
        let model_bytes = fs::read(model_path).map_err(io_err(model_path))?;
        let index_bytes = fs::read(index_path).map_err(io_err(index_path))?;
        let (model, layout) = MulticlassSvm::from_bytes(&model_bytes)?;
        let index = BarcodeIndex::from_bytes(&index_bytes)?;
        Self::from_parts(model, layout, index)
    }

    /// Retrieval stage for an extracted query.
    pub fn retrieve(&self, query: &Extracted, k: usize, mode: SearchMode) -> Result<Retrieval, PipelineError> {
        let predicted_class = self.model.predict_class(&query.features)?.to_owned();
        let result = match mode {
            SearchMode::Gated => self.index.knn_within_class(&predicted_class, &query.barcode, k)?,
            SearchMode::Direct => self.index.knn_direct(&query.barcode, k)?,
        };
        Ok(Retrieval {
            predicted_class,
            result,
        })
    }

    pub fn retrieve_image(&self, img: &GrayImage, k: usize, mode: SearchMode) -> Result<Retrieval, PipelineError> {
        self.retrieve(&extract(img, self.config())?, k, mode)
    }

    /// Classifies and retrieves every query on the ambient pool, scoring the
    /// top-1 hit against the query's IRMA code. Rows keep query order.
    pub fn evaluate(&self, queries: &[Sample], k: usize, mode: SearchMode) -> Result<Evaluation, PipelineError> {
        let start = Instant::now();
        let rows: Vec<RetrievalRow> = queries
            .par_iter()
            .map(|q| {
                let r = self.retrieve(&q.extracted, k, mode)?;
                let top = r.result.first();
                let error = match (&self.alphabets, q.irma_code, top.and_then(|t| t.irma_code)) {
                    (Some(alph), Some(truth), Some(found)) => Some(eval::irma_error(&truth, &found, alph)),
                    _ => None,
                };
                Ok(RetrievalRow {
                    query_id: q.id.clone(),
                    true_class: q.class_label.clone(),
                    true_code: q.irma_code,
                    predicted_class: r.predicted_class,
                    top1_id: top.map(|t| t.id.clone()),
                    top1_code: top.and_then(|t| t.irma_code),
                    error,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        let elapsed = start.elapsed();
        let report = RetrievalReport::from_rows(rows)?;
        Ok(Evaluation {
            report,
            ms_per_query: elapsed.as_secs_f64() * 1000.0 / queries.len().max(1) as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: RetrievalReport,
    /// Wall time of the query loop divided by the query count.
    pub ms_per_query: f64,
}

/// Parses `16x8,32x16` into `(side, projections)` pairs.
pub fn parse_grid(spec: &str) -> Result<Vec<(usize, usize)>, String> {
    let cells: Result<Vec<(usize, usize)>, String> = spec
        .split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|cell| {
            let (n, p) = cell
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("grid cell {cell:?} is not of the form NxP"))?;
            let n = n.trim().parse().map_err(|_| format!("bad size in {cell:?}"))?;
            let p = p.trim().parse().map_err(|_| format!("bad projection count in {cell:?}"))?;
            Ok((n, p))
        })
        .collect();
    let cells = cells?;
    if cells.is_empty() {
        return Err("grid is empty".into());
    }
    Ok(cells)
}

/// The size × projection grid of the original accuracy table.
pub fn default_grid() -> Vec<(usize, usize)> {
    [16, 32, 64]
        .into_iter()
        .flat_map(|n| [8, 16, 32].into_iter().map(move |p| (n, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub side: usize,
    pub projections: usize,
    pub outcome: Result<BenchmarkCell, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCell {
    pub accuracy: f64,
    pub gated_total_error: f64,
    pub direct_total_error: f64,
    pub ms_per_query: f64,
}

/// Retrains and re-evaluates for every grid cell. Images are decoded once per
/// distinct size. A failing cell is recorded and the run continues.
pub fn run_benchmark(
    train: &Manifest,
    test: &Manifest,
    grid: &[(usize, usize)],
    params: &SvmParams,
    k: usize,
) -> Vec<BenchmarkRow> {
    let mut sides: Vec<usize> = grid.iter().map(|c| c.0).collect();
    sides.sort_unstable();
    sides.dedup();
    let mut normalized = std::collections::HashMap::new();
    for side in sides {
        let loaded = if imaging::SUPPORTED_SIDES.contains(&side) {
            load_normalized(train, side)
                .and_then(|tr| Ok((tr, load_normalized(test, side)?)))
                .map_err(|e| e.to_string())
        } else {
            Err(ImagingError::UnsupportedSide(side).to_string())
        };
        normalized.insert(side, loaded);
    }
    grid.iter()
        .map(|&(side, projections)| {
            let outcome = match &normalized[&side] {
                Err(e) => Err(e.clone()),
                Ok((tr, te)) => benchmark_cell(train, tr, test, te, side, projections, params, k)
                    .map_err(|e| e.to_string()),
            };
            BenchmarkRow {
                side,
                projections,
                outcome,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn benchmark_cell(
    train: &Manifest,
    train_images: &[NormalizedImage],
    test: &Manifest,
    test_images: &[NormalizedImage],
    side: usize,
    projections: usize,
    params: &SvmParams,
    k: usize,
) -> Result<BenchmarkCell, PipelineError> {
    let cfg = RadonConfig::new(projections, side)?;
    let train_samples = samples_from(train, train_images, &cfg)?;
    let test_samples = samples_from(test, test_images, &cfg)?;
    let system = RetrievalSystem::train(&train_samples, &cfg, params)?;
    let gated = system.evaluate(&test_samples, k, SearchMode::Gated)?;
    let direct = system.evaluate(&test_samples, k, SearchMode::Direct)?;
    Ok(BenchmarkCell {
        accuracy: gated.report.accuracy,
        gated_total_error: gated.report.total_error,
        direct_total_error: direct.report.total_error,
        ms_per_query: gated.ms_per_query,
    })
}

/// CSV with one row per grid cell; failed cells leave the numeric columns
/// empty and carry the message in `error`.
pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "size",
        "projections",
        "accuracy",
        "gated_total_error",
        "direct_total_error",
        "ms_per_query",
        "error",
    ])
    .expect("in-memory write");
    for row in rows {
        let mut fields = vec![row.side.to_string(), row.projections.to_string()];
        match &row.outcome {
            Ok(c) => {
                fields.extend([
                    c.accuracy.to_string(),
                    c.gated_total_error.to_string(),
                    c.direct_total_error.to_string(),
                    format!("{:.3}", c.ms_per_query),
                    String::new(),
                ]);
            }
            Err(e) => {
                fields.extend([String::new(), String::new(), String::new(), String::new(), e.clone()]);
            }
        }
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let text = "path,class,irma_code\n\
                    a.png,1,1121-127-700-500\n\
                    b.png,,\n\
                    sub/c.png,2,\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].path, Path::new("/data/a.png"));
        assert_eq!(m.rows[0].id, "a.png");
        assert_eq!(m.rows[1].line, 4);
        assert!(m.rows[1].irma_code.is_none());
        assert_eq!(m.class_count(), 2);
    }

    #[test]
    fn manifest_without_code_column() {
        let m = Manifest::parse("path,class\nx.png,a\n", Path::new("")).unwrap();
        assert_eq!(m.rows.len(), 1);
    }

    #[test]
    fn manifest_errors() {
        assert!(Manifest::parse("file,label\nx,y\n", Path::new("")).is_err());
        let err = Manifest::parse("path,class,irma_code\nx.png,a,12\n", Path::new("")).unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unreadable_rows_are_itemized() {
        let m = Manifest::parse(
            "path,class,irma_code\nmissing1.png,a,\nmissing2.png,b,\n",
            Path::new("/nonexistent-dir"),
        )
        .unwrap();
        match load_normalized(&m, 16) {
            Err(PipelineError::Rows(rows)) => {
                assert_eq!(rows.len(), 2);
                assert_eq!(rows[0].line, 2);
                assert_eq!(rows[1].line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("16x8, 32X16").unwrap(), vec![(16, 8), (32, 16)]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("16-8").is_err());
        assert_eq!(default_grid().len(), 9);
    }

    #[test]
    fn run_config_defaults() {
        let rc = RunConfig::default();
        assert_eq!((rc.side, rc.projections, rc.k), (32, 16, 5));
        assert_eq!(rc.svm.c, 16.0);
        assert_eq!(rc.svm.gamma, 0.0359);
        assert!(rc.validate().is_ok());
        let bad = RunConfig { side: 20, ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
