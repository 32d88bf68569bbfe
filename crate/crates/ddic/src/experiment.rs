//! Sweep runner: executes (method × ratio × run) cells on freshly masked
//! data, evaluates clustering quality, and writes per-run and aggregate
//! CSV tables.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ddic_core::eval::{acc, aggregate, nmi, purity, MetricsReport};
use ddic_core::incomplete::{
    apply_mask, generate_mask, knn_fill, mean_fill, zero_fill, MaskedDataset,
};
use ddic_core::rng::mix_seed;
use ddic_core::trainer::{fit_with_progress, kmeans, EpochRecord, FitResult, Phase, TrainConfig};
use ddic_core::Matrix;

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::data::{load_csv, load_idx, make_blobs, normalize_unit, Dataset};
use crate::error::{Error, Result};

/// Seed stream tag separating dataset synthesis from mask/run streams.
const TAG_DATASET: u64 = 11;

/// k-means settings shared by every fill-then-cluster baseline.
const BASELINE_KMEANS_ITERS: usize = 300;
const BASELINE_KMEANS_RESTARTS: usize = 10;

/// Metrics and cost of one successful cell.
#[derive(Clone, Debug)]
pub struct CellMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub purity: f64,
    /// Joint training epochs for ddic-ot; 0 for the fill baselines.
    pub epochs: usize,
    pub wall_time_s: f64,
}

/// Outcome of one grid cell; failures carry the error text.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub method: Method,
    pub ratio: f64,
    pub run: usize,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.outcome.is_err()
    }
}

/// Everything a single-cell invocation can hand back for inspection.
pub struct RunArtifacts {
    pub result: CellResult,
    pub masked: MaskedDataset,
    /// Present only for the ddic-ot method.
    pub fit: Option<FitResult>,
}

/// Materializes the configured data source and rescales features to unit
/// max-abs, the scale the default eps and learning rate are tuned for.
/// Blob synthesis and the mask stream draw from different seed tags so
/// they never alias.
pub fn load_dataset(spec: &DatasetSpec, base_seed: u64) -> Result<Dataset> {
    let mut ds = match spec {
        DatasetSpec::Blobs {
            n,
            d,
            k,
            separation,
            cluster_std,
        } => make_blobs(
            *n,
            *d,
            *k,
            *separation,
            *cluster_std,
            mix_seed(base_seed, TAG_DATASET),
        )?,
        DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
        DatasetSpec::Csv {
            path,
            label,
            has_header,
        } => load_csv(path, label, *has_header)?,
    };
    ds.features = normalize_unit(&ds.features);
    Ok(ds)
}

/// Per-cell seed: one stream per (base seed, ratio, run index).
pub fn cell_seed(base_seed: u64, ratio: f64, run: usize) -> u64 {
    mix_seed(mix_seed(base_seed, ratio.to_bits()), run as u64)
}

fn check_observed_untouched(ds: &MaskedDataset, candidate: &Matrix) -> Result<()> {
    let (n, d) = ds.observed.shape();
    for i in 0..n {
        for j in 0..d {
            let orig = ds.observed.get(i, j);
            if !orig.is_nan() && orig.to_bits() != candidate.get(i, j).to_bits() {
                return Err(Error::Consistency(format!(
                    "observed entry ({i}, {j}) was modified: {orig} became {}",
                    candidate.get(i, j)
                )));
            }
        }
    }
    Ok(())
}

fn progress_printer(prefix: String) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        let phase = match r.phase {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        };
        match r.label_change {
            Some(change) => eprintln!(
                "{prefix} {phase} {:>4}  L_s {:.6}  L_c {:.6}  L {:.6}  changed {:.4}",
                r.epoch, r.recon_loss, r.cluster_loss, r.total_loss, change
            ),
            None => eprintln!(
                "{prefix} {phase} {:>4}  L_s {:.6}",
                r.epoch, r.recon_loss
            ),
        }
    }
}

fn execute_cell(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    method: Method,
    ratio: f64,
    run: usize,
) -> Result<(CellMetrics, MaskedDataset, Option<FitResult>)> {
    let seed = cell_seed(cfg.train.seed, ratio, run);
    let (n, d) = dataset.features.shape();
    let k = cfg.clusters.unwrap_or(dataset.class_count);

    let mask = generate_mask(n, d, ratio, seed)?;
    let mut masked = apply_mask(&dataset.features, &mask)?;
    masked.labels = Some(dataset.labels.clone());

    let started = Instant::now();
    let (labels, epochs, fit) = match method {
        Method::DdicOt => {
            let mut tc: TrainConfig = cfg.train.clone();
            tc.seed = seed;
            tc.cluster_count = k;
            tc.validate()?;
            let mut sink;
            let progress: Option<&mut dyn FnMut(&EpochRecord)> = if cfg.verbose {
                sink = progress_printer(format!(
                    "[{} ratio {ratio} run {run}]",
                    method.name()
                ));
                Some(&mut sink)
            } else {
                None
            };
            let result = fit_with_progress(&masked, &tc, progress)?;
            check_observed_untouched(&masked, &result.imputed)?;
            (result.labels.clone(), result.epochs_run, Some(result))
        }
        Method::MfKmeans | Method::ZfKmeans | Method::KnnKmeans => {
            let filled = match method {
                Method::MfKmeans => mean_fill(&masked),
                Method::ZfKmeans => zero_fill(&masked),
                Method::KnnKmeans => knn_fill(&masked, cfg.knn_k)?,
                Method::DdicOt => unreachable!(),
            };
            check_observed_untouched(&masked, &filled)?;
            let (labels, _) = kmeans(
                &filled,
                k,
                seed,
                BASELINE_KMEANS_ITERS,
                BASELINE_KMEANS_RESTARTS,
            )?;
            (labels, 0, None)
        }
    };
    let wall_time_s = started.elapsed().as_secs_f64();

    let metrics = CellMetrics {
        acc: acc(&dataset.labels, &labels)?,
        nmi: nmi(&dataset.labels, &labels)?,
        purity: purity(&dataset.labels, &labels)?,
        epochs,
        wall_time_s,
    };
    Ok((metrics, masked, fit))
}

/// Runs one grid cell. Training or fill failures become a failed cell
/// rather than an error, so a sweep can continue past them.
pub fn run_cell(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    method: Method,
    ratio: f64,
    run: usize,
) -> CellResult {
    let seed = cell_seed(cfg.train.seed, ratio, run);
    let outcome = execute_cell(dataset, cfg, method, ratio, run)
        .map(|(metrics, _, _)| metrics)
        .map_err(|e| e.to_string());
    CellResult {
        method,
        ratio,
        run,
        seed,
        outcome,
    }
}

/// Like [`run_cell`] but keeps the masked data and fit output so callers
/// can checkpoint the model or dump reconstructions.
pub fn run_cell_with_artifacts(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    method: Method,
    ratio: f64,
    run: usize,
) -> Result<RunArtifacts> {
    let seed = cell_seed(cfg.train.seed, ratio, run);
    let (metrics, masked, fit) = execute_cell(dataset, cfg, method, ratio, run)?;
    Ok(RunArtifacts {
        result: CellResult {
            method,
            ratio,
            run,
            seed,
            outcome: Ok(metrics),
        },
        masked,
        fit,
    })
}

/// What [`sweep`] produced, in deterministic grid order.
pub struct SweepSummary {
    pub results: Vec<CellResult>,
    pub failures: usize,
    pub data_path: PathBuf,
    pub agg_path: PathBuf,
}

/// The aggregate table lands next to the data table as `<stem>_agg.csv`.
pub fn agg_path_for(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    out.with_file_name(format!("{stem}_agg.csv"))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_data_csv(path: &Path, dataset_name: &str, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record([
        "dataset",
        "method",
        "ratio",
        "seed",
        "run",
        "acc",
        "nmi",
        "purity",
        "epochs",
        "wall_time_s",
    ])
    .map_err(csv_io)?;
    for r in results {
        let (acc, nmi, purity, epochs, wall) = match &r.outcome {
            Ok(m) => (m.acc, m.nmi, m.purity, m.epochs, m.wall_time_s),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN, 0, 0.0),
        };
        w.write_record([
            dataset_name.to_string(),
            r.method.name().to_string(),
            fmt_f64(r.ratio),
            r.seed.to_string(),
            r.run.to_string(),
            fmt_f64(acc),
            fmt_f64(nmi),
            fmt_f64(purity),
            epochs.to_string(),
            fmt_f64(wall),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_agg_csv(
    path: &Path,
    dataset_name: &str,
    cfg: &ExperimentConfig,
    results: &[CellResult],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record([
        "dataset",
        "method",
        "ratio",
        "runs",
        "acc_mean",
        "acc_std",
        "nmi_mean",
        "nmi_std",
        "purity_mean",
        "purity_std",
    ])
    .map_err(csv_io)?;
    for &method in &cfg.methods {
        for &ratio in &cfg.ratios {
            let reports: Vec<MetricsReport> = results
                .iter()
                .filter(|r| r.method == method && r.ratio == ratio)
                .filter_map(|r| r.outcome.as_ref().ok().map(|m| (r, m)))
                .map(|(r, m)| MetricsReport {
                    acc: m.acc,
                    nmi: m.nmi,
                    purity: m.purity,
                    seed: r.seed,
                    ratio,
                    method: method.name().to_string(),
                    wall_time_s: m.wall_time_s,
                })
                .collect();
            let (runs, row) = if reports.is_empty() {
                (0, None)
            } else {
                let agg = aggregate(&reports)?;
                (agg.runs, Some(agg))
            };
            let get = |f: fn(&ddic_core::eval::AggregateRow) -> f64| {
                row.as_ref().map(f).unwrap_or(f64::NAN)
            };
            w.write_record([
                dataset_name.to_string(),
                method.name().to_string(),
                fmt_f64(ratio),
                runs.to_string(),
                fmt_f64(get(|a| a.acc_mean)),
                fmt_f64(get(|a| a.acc_std)),
                fmt_f64(get(|a| a.nmi_mean)),
                fmt_f64(get(|a| a.nmi_std)),
                fmt_f64(get(|a| a.purity_mean)),
                fmt_f64(get(|a| a.purity_std)),
            ])
            .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Format(format!("csv write: {e}"))
}

/// Runs the full (method × ratio × run) grid and writes both CSV tables.
/// Failed cells appear as NaN metric rows; the caller decides the exit
/// code from `failures`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let name = dataset.name.clone();

    let mut specs = Vec::new();
    for &method in &cfg.methods {
        for &ratio in &cfg.ratios {
            for run in 0..cfg.runs {
                specs.push((method, ratio, run));
            }
        }
    }

    let slots: Vec<Mutex<Option<CellResult>>> =
        specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.workers.min(specs.len()).max(1);

    let work = |_worker: usize| loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= specs.len() {
            break;
        }
        let (method, ratio, run) = specs[i];
        let result = run_cell(&dataset, cfg, method, ratio, run);
        if cfg.verbose {
            match &result.outcome {
                Ok(m) => eprintln!(
                    "[{} ratio {ratio} run {run}] acc {:.4} nmi {:.4} purity {:.4} ({:.2}s)",
                    method.name(),
                    m.acc,
                    m.nmi,
                    m.purity,
                    m.wall_time_s
                ),
                Err(e) => {
                    eprintln!("[{} ratio {ratio} run {run}] FAILED: {e}", method.name())
                }
            }
        } else if let Err(e) = &result.outcome {
            eprintln!("[{} ratio {ratio} run {run}] FAILED: {e}", method.name());
        }
        *slots[i].lock().unwrap() = Some(result);
    };

    if workers == 1 {
        work(0);
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                scope.spawn(move || work(w));
            }
        });
    }

    let results: Vec<CellResult> = slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("cell executed"))
        .collect();
    let failures = results.iter().filter(|r| r.failed()).count();

    let data_path = cfg.out.clone();
    let agg_path = agg_path_for(&data_path);
    write_data_csv(&data_path, &name, &results)?;
    write_agg_csv(&agg_path, &name, cfg, &results)?;

    Ok(SweepSummary {
        results,
        failures,
        data_path,
        agg_path,
    })
}

/// Writes selected rows as CSV, one record per (row, variant) with the
/// original (NaN where missing), the filled input, and the imputation.
pub fn dump_reconstructions(
    ds: &MaskedDataset,
    filled: &Matrix,
    fit: &FitResult,
    rows: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let (n, d) = ds.observed.shape();
    if filled.shape() != (n, d) || fit.imputed.shape() != (n, d) {
        return Err(Error::Consistency(format!(
            "filled {:?} and imputed {:?} must both match the data shape {:?}",
            filled.shape(),
            fit.imputed.shape(),
            (n, d)
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["row".to_string(), "variant".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;

    for &r in rows {
        if r >= n {
            return Err(Error::Config(format!("row {r} out of range (n = {n})")));
        }
        for (variant, source) in [
            ("original", &ds.observed),
            ("filled", filled),
            ("imputed", &fit.imputed),
        ] {
            let mut record = vec![r.to_string(), variant.to_string()];
            record.extend(source.row(r).iter().map(|&v| fmt_f64(v)));
            w.write_record(&record).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
