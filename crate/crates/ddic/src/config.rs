//! Experiment configuration: a `key = value` file format with `#` comments,
//! strict unknown-key rejection, and typed defaults for every knob.

use std::fs;
use std::path::{Path, PathBuf};

use ddic_core::dec::LossMode;
use ddic_core::trainer::{FillStrategy, TrainConfig};

use crate::data::LabelColumn;
use crate::error::{Error, Result};

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// Seeded synthetic Gaussian blobs.
    Blobs {
        n: usize,
        d: usize,
        k: usize,
        separation: f64,
        cluster_std: f64,
    },
    /// IDX image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
    /// Labeled numeric CSV.
    Csv {
        path: PathBuf,
        label: LabelColumn,
        has_header: bool,
    },
}

impl DatasetSpec {
    /// Short name used in result tables.
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Blobs { .. } => "blobs".into(),
            DatasetSpec::Idx { images, .. } => stem_of(images),
            DatasetSpec::Csv { path, .. } => stem_of(path),
        }
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Clustering pipeline to run on each masked instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Joint autoencoder training with the transport loss.
    DdicOt,
    /// Mean fill followed by k-means.
    MfKmeans,
    /// Zero fill followed by k-means.
    ZfKmeans,
    /// k-nearest-neighbor fill followed by k-means.
    KnnKmeans,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DdicOt,
        Method::MfKmeans,
        Method::ZfKmeans,
        Method::KnnKmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DdicOt => "ddic-ot",
            Method::MfKmeans => "mf-kmeans",
            Method::ZfKmeans => "zf-kmeans",
            Method::KnnKmeans => "knn-kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "ddic-ot" => Ok(Method::DdicOt),
            "mf-kmeans" => Ok(Method::MfKmeans),
            "zf-kmeans" => Ok(Method::ZfKmeans),
            "knn-kmeans" => Ok(Method::KnnKmeans),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected ddic-ot, mf-kmeans, zf-kmeans, or knn-kmeans)"
            ))),
        }
    }
}

/// The seven-step missing-ratio grid 0.1, 0.2, ..., 0.7.
pub fn default_ratios() -> Vec<f64> {
    (1..=7).map(|i| i as f64 / 10.0).collect()
}

/// Everything a sweep needs: data source, methods, grid, training knobs,
/// and output location.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    /// Missing ratios, each in [0, 1].
    pub ratios: Vec<f64>,
    /// Independent runs per (method, ratio) cell.
    pub runs: usize,
    /// Training knobs; `cluster_count` here is a placeholder that the
    /// runner overwrites with `clusters` or the dataset's class count.
    pub train: TrainConfig,
    /// Explicit cluster count; defaults to the dataset's class count.
    pub clusters: Option<usize>,
    /// Neighbor count for the knn-fill baseline.
    pub knn_k: usize,
    /// Path of the per-run CSV; the aggregate table lands next to it.
    pub out: PathBuf,
    pub verbose: bool,
    /// Worker threads for the sweep grid.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Blobs {
                n: 600,
                d: 50,
                k: 3,
                separation: 10.0,
                cluster_std: 1.0,
            },
            methods: vec![Method::DdicOt, Method::MfKmeans],
            ratios: default_ratios(),
            runs: 10,
            train: TrainConfig::new(1),
            clusters: None,
            knn_k: 5,
            out: PathBuf::from("results.csv"),
            verbose: false,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.ratios.is_empty() {
            return Err(Error::Config("at least one ratio is required".into()));
        }
        for &r in &self.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
            }
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        let mut probe = self.train.clone();
        probe.cluster_count = self.clusters.unwrap_or(1);
        probe.validate()?;
        Ok(())
    }
}

fn parse_num<T>(key: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|part| parse_num(key, part.trim()))
        .collect()
}

/// Parses a comma-separated method list; `all` expands to every method.
pub fn parse_methods(value: &str) -> Result<Vec<Method>> {
    if value.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let methods: Vec<Method> = value
        .split(',')
        .map(Method::parse)
        .collect::<Result<_>>()?;
    Ok(methods)
}

/// The `csv.label` value: a zero-based index if numeric, else a header name.
pub fn parse_label_column(value: &str) -> LabelColumn {
    match value.parse::<usize>() {
        Ok(idx) => LabelColumn::Index(idx),
        Err(_) => LabelColumn::Name(value.to_string()),
    }
}

/// Dataset fields gathered during parsing, assembled once the kind is known.
#[derive(Default)]
struct DatasetParts {
    kind: Option<String>,
    blobs_n: Option<usize>,
    blobs_d: Option<usize>,
    blobs_k: Option<usize>,
    blobs_separation: Option<f64>,
    blobs_std: Option<f64>,
    idx_images: Option<PathBuf>,
    idx_labels: Option<PathBuf>,
    csv_path: Option<PathBuf>,
    csv_label: Option<LabelColumn>,
    csv_header: Option<bool>,
}

impl DatasetParts {
    fn assemble(self, base: DatasetSpec) -> Result<DatasetSpec> {
        let kind = match &self.kind {
            Some(k) => k.as_str(),
            None => {
                self.ensure_unused("blobs", matches!(base, DatasetSpec::Blobs { .. }))?;
                self.ensure_unused("idx", matches!(base, DatasetSpec::Idx { .. }))?;
                self.ensure_unused("csv", matches!(base, DatasetSpec::Csv { .. }))?;
                return self.fill_in(base);
            }
        };
        match kind {
            "blobs" => {
                self.ensure_unused("idx", false)?;
                self.ensure_unused("csv", false)?;
                self.fill_in(DatasetSpec::Blobs {
                    n: 600,
                    d: 50,
                    k: 3,
                    separation: 10.0,
                    cluster_std: 1.0,
                })
            }
            "idx" => {
                self.ensure_unused("blobs", false)?;
                self.ensure_unused("csv", false)?;
                let images = self
                    .idx_images
                    .ok_or_else(|| Error::Config("dataset=idx requires idx.images".into()))?;
                let labels = self
                    .idx_labels
                    .ok_or_else(|| Error::Config("dataset=idx requires idx.labels".into()))?;
                Ok(DatasetSpec::Idx { images, labels })
            }
            "csv" => {
                self.ensure_unused("blobs", false)?;
                self.ensure_unused("idx", false)?;
                let path = self
                    .csv_path
                    .ok_or_else(|| Error::Config("dataset=csv requires csv.path".into()))?;
                let label = self
                    .csv_label
                    .ok_or_else(|| Error::Config("dataset=csv requires csv.label".into()))?;
                Ok(DatasetSpec::Csv {
                    path,
                    label,
                    has_header: self.csv_header.unwrap_or(true),
                })
            }
            other => Err(Error::Config(format!(
                "unknown dataset kind '{other}' (expected blobs, idx, or csv)"
            ))),
        }
    }

    /// Rejects keys from `group` when the chosen kind (`allowed`) differs.
    fn ensure_unused(&self, group: &str, allowed: bool) -> Result<()> {
        if allowed {
            return Ok(());
        }
        let used = match group {
            "blobs" => {
                self.blobs_n.is_some()
                    || self.blobs_d.is_some()
                    || self.blobs_k.is_some()
                    || self.blobs_separation.is_some()
                    || self.blobs_std.is_some()
            }
            "idx" => self.idx_images.is_some() || self.idx_labels.is_some(),
            "csv" => {
                self.csv_path.is_some() || self.csv_label.is_some() || self.csv_header.is_some()
            }
            _ => unreachable!(),
        };
        if used {
            return Err(Error::Config(format!(
                "{group}.* keys are only valid with dataset = {group}"
            )));
        }
        Ok(())
    }

    fn fill_in(self, base: DatasetSpec) -> Result<DatasetSpec> {
        match base {
            DatasetSpec::Blobs {
                n,
                d,
                k,
                separation,
                cluster_std,
            } => Ok(DatasetSpec::Blobs {
                n: self.blobs_n.unwrap_or(n),
                d: self.blobs_d.unwrap_or(d),
                k: self.blobs_k.unwrap_or(k),
                separation: self.blobs_separation.unwrap_or(separation),
                cluster_std: self.blobs_std.unwrap_or(cluster_std),
            }),
            other => Ok(other),
        }
    }
}

/// Applies `key = value` lines from `text` on top of `base`. Lines are
/// trimmed, `#` starts a comment, blank lines are skipped, and any
/// unrecognized key is an error. Later occurrences of a key win.
pub fn apply_config_str(base: ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let mut cfg = base;
    let mut parts = DatasetParts::default();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "dataset" => parts.kind = Some(value.to_string()),
            "blobs.n" => parts.blobs_n = Some(parse_num(key, value)?),
            "blobs.d" => parts.blobs_d = Some(parse_num(key, value)?),
            "blobs.k" => parts.blobs_k = Some(parse_num(key, value)?),
            "blobs.separation" => parts.blobs_separation = Some(parse_num(key, value)?),
            "blobs.std" => parts.blobs_std = Some(parse_num(key, value)?),
            "idx.images" => parts.idx_images = Some(PathBuf::from(value)),
            "idx.labels" => parts.idx_labels = Some(PathBuf::from(value)),
            "csv.path" => parts.csv_path = Some(PathBuf::from(value)),
            "csv.label" => parts.csv_label = Some(parse_label_column(value)),
            "csv.header" => parts.csv_header = Some(parse_bool(key, value)?),
            "methods" => cfg.methods = parse_methods(value)?,
            "ratios" => cfg.ratios = parse_list(key, value)?,
            "runs" => cfg.runs = parse_num(key, value)?,
            "gamma" => cfg.train.gamma = parse_num(key, value)?,
            "eps" => cfg.train.eps = parse_num(key, value)?,
            "lr" => cfg.train.lr = parse_num(key, value)?,
            "batch_size" => cfg.train.batch_size = parse_num(key, value)?,
            "max_iter" => cfg.train.max_iter = parse_num(key, value)?,
            "delta" => cfg.train.delta = parse_num(key, value)?,
            "pretrain_epochs" => cfg.train.pretrain_epochs = parse_num(key, value)?,
            "sinkhorn_unroll" => cfg.train.sinkhorn_unroll = parse_num(key, value)?,
            "seed" => cfg.train.seed = parse_num(key, value)?,
            "fill" => {
                cfg.train.fill = match value {
                    "mean" => FillStrategy::Mean,
                    "zero" => FillStrategy::Zero,
                    other => {
                        return Err(Error::Config(format!(
                            "fill: expected mean or zero, got '{other}'"
                        )))
                    }
                }
            }
            "loss" => {
                cfg.train.loss_mode = match value {
                    "joint" => LossMode::Joint,
                    "reconstruction" => LossMode::ReconstructionOnly,
                    "clustering" => LossMode::ClusteringOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "loss: expected joint, reconstruction, or clustering, got '{other}'"
                        )))
                    }
                }
            }
            "hidden" => cfg.train.hidden_dims = parse_list(key, value)?,
            "embedding" => cfg.train.embedding_dim = parse_num(key, value)?,
            "clusters" => cfg.clusters = Some(parse_num(key, value)?),
            "knn_k" => cfg.knn_k = parse_num(key, value)?,
            "out" => cfg.out = PathBuf::from(value),
            "verbose" => cfg.verbose = parse_bool(key, value)?,
            "workers" => cfg.workers = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    cfg.dataset = parts.assemble(cfg.dataset)?;
    Ok(cfg)
}

/// Reads a config file and applies it on top of the defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    apply_config_str(ExperimentConfig::default(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ratios.len(), 7);
        assert_eq!(cfg.ratios[0], 0.1);
        assert_eq!(cfg.ratios[6], 0.7);
        assert_eq!(cfg.runs, 10);
    }

    #[test]
    fn full_file_round_trip() {
        let text = "\
# sweep settings
dataset = blobs
blobs.n = 120          # tiny
blobs.d = 8
blobs.k = 4
blobs.separation = 6.5
blobs.std = 0.5

methods = ddic-ot, mf-kmeans, zf-kmeans, knn-kmeans
ratios = 0.1, 0.3
runs = 2
gamma = 50
eps = 0.05
lr = 0.01
batch_size = 32
max_iter = 20
delta = 0.01
pretrain_epochs = 5
sinkhorn_unroll = 100
seed = 42
fill = zero
loss = clustering
hidden = 16, 8
embedding = 3
clusters = 4
knn_k = 3
out = /tmp/rows.csv
verbose = true
workers = 2
";
        let cfg = apply_config_str(ExperimentConfig::default(), text).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Blobs {
                n: 120,
                d: 8,
                k: 4,
                separation: 6.5,
                cluster_std: 0.5
            }
        );
        assert_eq!(cfg.methods, Method::ALL.to_vec());
        assert_eq!(cfg.ratios, vec![0.1, 0.3]);
        assert_eq!(cfg.runs, 2);
        assert_eq!(cfg.train.gamma, 50.0);
        assert_eq!(cfg.train.eps, 0.05);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.max_iter, 20);
        assert_eq!(cfg.train.delta, 0.01);
        assert_eq!(cfg.train.pretrain_epochs, 5);
        assert_eq!(cfg.train.sinkhorn_unroll, 100);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.fill, FillStrategy::Zero);
        assert_eq!(cfg.train.loss_mode, LossMode::ClusteringOnly);
        assert_eq!(cfg.train.hidden_dims, vec![16, 8]);
        assert_eq!(cfg.train.embedding_dim, 3);
        assert_eq!(cfg.clusters, Some(4));
        assert_eq!(cfg.knn_k, 3);
        assert_eq!(cfg.out, PathBuf::from("/tmp/rows.csv"));
        assert!(cfg.verbose);
        assert_eq!(cfg.workers, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = apply_config_str(ExperimentConfig::default(), "momentum = 0.9").unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("momentum")));
    }

    #[test]
    fn missing_equals_is_rejected() {
        let err = apply_config_str(ExperimentConfig::default(), "runs 5").unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("key = value")));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = apply_config_str(
            ExperimentConfig::default(),
            "\n# full-line comment\n  \nruns = 3 # trailing comment\n",
        )
        .unwrap();
        assert_eq!(cfg.runs, 3);
    }

    #[test]
    fn later_keys_win() {
        let cfg = apply_config_str(ExperimentConfig::default(), "runs = 3\nruns = 9").unwrap();
        assert_eq!(cfg.runs, 9);
    }

    #[test]
    fn csv_dataset_requires_path_and_label() {
        let err = apply_config_str(ExperimentConfig::default(), "dataset = csv").unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("csv.path")));

        let cfg = apply_config_str(
            ExperimentConfig::default(),
            "dataset = csv\ncsv.path = in.csv\ncsv.label = class\ncsv.header = false",
        )
        .unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Csv {
                path: PathBuf::from("in.csv"),
                label: LabelColumn::Name("class".into()),
                has_header: false,
            }
        );
    }

    #[test]
    fn numeric_label_becomes_index() {
        let cfg = apply_config_str(
            ExperimentConfig::default(),
            "dataset = csv\ncsv.path = in.csv\ncsv.label = 0",
        )
        .unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Csv {
                path: PathBuf::from("in.csv"),
                label: LabelColumn::Index(0),
                has_header: true,
            }
        );
    }

    #[test]
    fn cross_kind_keys_are_rejected() {
        let err = apply_config_str(
            ExperimentConfig::default(),
            "dataset = blobs\ncsv.path = in.csv",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("csv.*")));
    }

    #[test]
    fn idx_dataset_requires_both_paths() {
        let err = apply_config_str(
            ExperimentConfig::default(),
            "dataset = idx\nidx.images = img.idx",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("idx.labels")));
    }

    #[test]
    fn bad_ratio_fails_validation() {
        let cfg = apply_config_str(ExperimentConfig::default(), "ratios = 0.1, 1.5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn methods_all_expands() {
        assert_eq!(parse_methods("all").unwrap(), Method::ALL.to_vec());
        assert!(parse_methods("ddic-ot, nope").is_err());
    }
}
