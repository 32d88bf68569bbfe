//! Dataset ingestion: IDX image/label pairs, labeled numeric CSV with a NaN
//! missing sentinel, global unit normalization, and seeded synthetic blobs.

use std::fs;
use std::path::Path;

use ddic_core::rng::rng_from_seed;
use ddic_core::Matrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A fully labeled feature matrix.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// n×d features; entries may hold the NaN missing sentinel.
    pub features: Matrix,
    /// Dense class ids in [0, class_count), one per row.
    pub labels: Vec<usize>,
    pub name: String,
    pub class_count: usize,
}

/// Remaps arbitrary raw label values to dense ids in first-appearance order.
fn densify_labels(raw: &[u64]) -> (Vec<usize>, usize) {
    let mut seen: Vec<u64> = Vec::new();
    let dense = raw
        .iter()
        .map(|&l| match seen.iter().position(|&s| s == l) {
            Some(pos) => pos,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        })
        .collect();
    (dense, seen.len())
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8], path: &'a Path) -> Self {
        Self { data, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let slice = &self.data[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Format(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.path.display(),
                self.pos
            ))),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let bytes = self.take(4)?;
        Ok(u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))
    }
}

fn expect_magic(reader: &mut ByteReader, expected: u32) -> Result<()> {
    let got = reader.u32_be()?;
    if got != expected {
        return Err(Error::Format(format!(
            "{}: bad magic {got:#010x}, expected {expected:#010x}",
            reader.path.display()
        )));
    }
    Ok(())
}

/// Loads an IDX image file and its companion IDX label file. Image tensors
/// are flattened row-major to n×(rows·cols); labels are remapped to dense
/// ids.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = fs::read(images_path)?;
    let mut r = ByteReader::new(&image_bytes, images_path);
    expect_magic(&mut r, IDX_IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let dim = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{}: image size overflow", images_path.display())))?;
    let pixels = r.take(count * dim)?;
    let features = Matrix::from_vec(count, dim, pixels.iter().map(|&b| b as f64).collect())
        .map_err(Error::Core)?;

    let label_bytes = fs::read(labels_path)?;
    let mut r = ByteReader::new(&label_bytes, labels_path);
    expect_magic(&mut r, IDX_LABELS_MAGIC)?;
    let label_count = r.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {label_count} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let raw: Vec<u64> = r.take(label_count)?.iter().map(|&b| b as u64).collect();
    let (labels, class_count) = densify_labels(&raw);

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| String::from("idx"));
    Ok(Dataset {
        features,
        labels,
        name,
        class_count,
    })
}

/// Writes a dataset back out as an IDX image/label pair. Feature entries
/// must already be byte-valued (in [0, 255], whole numbers); `image_shape`
/// must multiply out to the feature dimension.
pub fn write_idx(
    ds: &Dataset,
    image_shape: (u32, u32),
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols) = image_shape;
    let dim = rows as usize * cols as usize;
    if dim != ds.features.cols() {
        return Err(Error::Config(format!(
            "image shape {rows}x{cols} does not match feature dimension {}",
            ds.features.cols()
        )));
    }
    if ds.class_count > 256 {
        return Err(Error::Config(format!(
            "{} classes cannot be stored as byte labels",
            ds.class_count
        )));
    }
    for &v in ds.features.as_slice() {
        if !(v.fract() == 0.0 && (0.0..=255.0).contains(&v)) {
            return Err(Error::Config(format!(
                "feature value {v} is not a byte; normalize only after writing"
            )));
        }
    }

    let n = ds.features.rows() as u32;
    let mut image_bytes = Vec::with_capacity(16 + ds.features.as_slice().len());
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&n.to_be_bytes());
    image_bytes.extend_from_slice(&rows.to_be_bytes());
    image_bytes.extend_from_slice(&cols.to_be_bytes());
    image_bytes.extend(ds.features.as_slice().iter().map(|&v| v as u8));
    fs::write(images_path, image_bytes)?;

    let mut label_bytes = Vec::with_capacity(8 + ds.labels.len());
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&n.to_be_bytes());
    label_bytes.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

/// Which CSV column holds the class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    /// Header name; requires a header row.
    Name(String),
    /// Zero-based column index.
    Index(usize),
}

/// Loads a rectangular numeric CSV. The label column is split off; every
/// other cell parses as f64, with the literal `NaN` becoming the missing
/// sentinel.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error(path))?;

    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::Config(String::from(
                    "label column by name requires a header row",
                )));
            }
            let headers = reader.headers().map_err(csv_error(path))?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("no column named {name:?} in header")))?
        }
    };

    let mut data: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<u64> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let row_number = idx + 1 + usize::from(has_header);
        let record = record.map_err(csv_error(path))?;
        match width {
            None => {
                if label_idx >= record.len() {
                    return Err(Error::Config(format!(
                        "label column {label_idx} out of range for {} columns",
                        record.len()
                    )));
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(Error::Format(format!(
                    "{}: row {row_number} has {} fields, expected {w}",
                    path.display(),
                    record.len()
                )));
            }
            _ => {}
        }
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {row_number}, column {col}: {field:?} is not numeric",
                    path.display()
                ))
            })?;
            if col == label_idx {
                if !(value.fract() == 0.0 && value >= 0.0) {
                    return Err(Error::Format(format!(
                        "{}: row {row_number}: label {field:?} is not a nonnegative integer",
                        path.display()
                    )));
                }
                raw_labels.push(value as u64);
            } else {
                data.push(value);
            }
        }
    }

    let n = raw_labels.len();
    let d = width.map_or(0, |w| w - 1);
    let features = Matrix::from_vec(n, d, data).map_err(Error::Core)?;
    let (labels, class_count) = densify_labels(&raw_labels);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| String::from("csv"));
    Ok(Dataset {
        features,
        labels,
        name,
        class_count,
    })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        let row = e
            .position()
            .map(|p| format!(" at line {}", p.line()))
            .unwrap_or_default();
        Error::Format(format!("{}: {e}{row}", path.display()))
    }
}

/// Divides every observed entry by the global maximum absolute observed
/// value, mapping nonnegative data into [0, 1]. Sentinels pass through; an
/// all-sentinel or all-zero matrix is returned unchanged.
pub fn normalize_unit(x: &Matrix) -> Matrix {
    let max_abs = x
        .as_slice()
        .iter()
        .filter(|v| !v.is_nan())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return x.clone();
    }
    x.map(|v| if v.is_nan() { v } else { v / max_abs })
}

/// Draws k isotropic Gaussian clusters of near-equal sizes with means at
/// mutually distant random directions of length `separation`, then shuffles
/// the rows. Deterministic per seed.
pub fn make_blobs(
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
    cluster_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "need n ≥ k ≥ 1, got n = {n}, k = {k}"
        )));
    }
    if d == 0 {
        return Err(Error::Config(String::from("d must be at least 1")));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Config(format!("separation {separation} invalid")));
    }
    if !(cluster_std.is_finite() && cluster_std >= 0.0) {
        return Err(Error::Config(format!("cluster_std {cluster_std} invalid")));
    }

    let mut rng = rng_from_seed(seed);
    let normal = StandardNormal;
    let draw_direction = |rng: &mut ddic_core::rng::SeededRng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.iter().map(|x| x / norm * separation).collect();
            }
        }
    };

    // Means at random directions, re-drawn until mutually `separation` apart.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    while means.len() < k {
        let mut placed = false;
        for _ in 0..10_000 {
            let candidate = draw_direction(&mut rng);
            let far_enough = means.iter().all(|m| {
                let sq: f64 = m
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sq >= separation * separation
            });
            if far_enough {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {k} mutually separated centers in {d} dimensions"
            )));
        }
    }

    let base = n / k;
    let extra = n % k;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        let size = base + usize::from(c < extra);
        for _ in 0..size {
            let point: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let g: f64 = normal.sample(&mut rng);
                    m + cluster_std * g
                })
                .collect();
            rows.push((point, c));
        }
    }
    rows.shuffle(&mut rng);

    let labels: Vec<usize> = rows.iter().map(|(_, c)| *c).collect();
    let flat: Vec<f64> = rows.into_iter().flat_map(|(p, _)| p).collect();
    let features = Matrix::from_vec(n, d, flat).map_err(Error::Core)?;
    Ok(Dataset {
        features,
        labels,
        name: format!("blobs-n{n}-d{d}-k{k}"),
        class_count: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    fn idx_fixture(dir: &tempfile::TempDir) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 9]);
        (
            write_temp(dir, "imgs.idx", &images),
            write_temp(dir, "lbls.idx", &labels),
        )
    }

    #[test]
    fn idx_fixture_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = idx_fixture(&dir);
        let ds = load_idx(&imgs, &lbls).unwrap();
        let expected =
            Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]).unwrap();
        assert_eq!(ds.features, expected);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.name, "imgs");
    }

    #[test]
    fn idx_bad_magic_names_expected_value() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = idx_fixture(&dir);
        let mut broken = fs::read(&imgs).unwrap();
        broken[3] = 0x99;
        let bad = write_temp(&dir, "bad.idx", &broken);
        let err = load_idx(&bad, &lbls).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("0x00000803"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, _) = idx_fixture(&dir);
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        let lbls = write_temp(&dir, "thr.idx", &labels);
        assert!(matches!(
            load_idx(&imgs, &lbls),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn idx_truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = idx_fixture(&dir);
        let full = fs::read(&imgs).unwrap();
        let cut = write_temp(&dir, "cut.idx", &full[..full.len() - 3]);
        assert!(matches!(load_idx(&cut, &lbls), Err(Error::Format(_))));
    }

    #[test]
    fn idx_zero_images_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&0u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&0u32.to_be_bytes());
        let imgs = write_temp(&dir, "none.idx", &images);
        let lbls = write_temp(&dir, "nonel.idx", &labels);
        let ds = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(ds.features.rows(), 0);
        assert!(ds.labels.is_empty());
        assert_eq!(ds.class_count, 0);
    }

    #[test]
    fn idx_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = idx_fixture(&dir);
        let ds = load_idx(&imgs, &lbls).unwrap();
        let out_imgs = dir.path().join("out.idx");
        let out_lbls = dir.path().join("outl.idx");
        write_idx(&ds, (2, 2), &out_imgs, &out_lbls).unwrap();
        let reloaded = load_idx(&out_imgs, &out_lbls).unwrap();
        assert!(ds.features.bits_eq(&reloaded.features));
        assert_eq!(ds.labels, reloaded.labels);
    }

    #[test]
    fn csv_fixture_with_header_and_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(
            &dir,
            "data.csv",
            b"f0,f1,label\n1.5,2.0,0\n3.0,NaN,1\n-1.0,0.5,0\n",
        );
        let ds = load_csv(&path, &LabelColumn::Name(String::from("label")), true).unwrap();
        assert_eq!(ds.features.shape(), (3, 2));
        assert_eq!(ds.features.get(0, 0), 1.5);
        assert!(ds.features.get(1, 1).is_nan());
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.class_count, 2);

        let by_index = load_csv(&path, &LabelColumn::Index(2), true).unwrap();
        assert_eq!(by_index.labels, ds.labels);
        assert!(by_index.features.bits_eq(&ds.features));
    }

    #[test]
    fn csv_without_header_uses_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "plain.csv", b"0,1.5,2.5\n1,3.5,4.5\n");
        let ds = load_csv(&path, &LabelColumn::Index(0), false).unwrap();
        assert_eq!(ds.features.shape(), (2, 2));
        assert_eq!(ds.features.get(1, 0), 3.5);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn csv_missing_label_column_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "data.csv", b"a,b\n1,2\n");
        assert!(matches!(
            load_csv(&path, &LabelColumn::Name(String::from("label")), true),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_csv(&path, &LabelColumn::Name(String::from("a")), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_ragged_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "ragged.csv", b"a,b,label\n1,2,0\n1,2\n");
        let err = load_csv(&path, &LabelColumn::Index(2), true).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains('3') || msg.contains("line 3"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_unit_scales_to_unit_range() {
        let x = Matrix::from_rows(&[&[0.0, 51.0], &[255.0, 102.0]]).unwrap();
        let out = normalize_unit(&x);
        assert_eq!(out.get(1, 0), 1.0);
        assert_eq!(out.get(0, 1), 0.2);

        let zeros = Matrix::zeros(2, 2);
        assert_eq!(normalize_unit(&zeros), zeros);

        let with_nan = Matrix::from_rows(&[&[f64::NAN, 4.0]]).unwrap();
        let out = normalize_unit(&with_nan);
        assert!(out.get(0, 0).is_nan());
        assert_eq!(out.get(0, 1), 1.0);

        let all_nan = Matrix::filled(1, 2, f64::NAN);
        assert!(normalize_unit(&all_nan).as_slice().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn blobs_are_deterministic_and_near_equal() {
        let a = make_blobs(31, 4, 3, 10.0, 1.0, 5).unwrap();
        let b = make_blobs(31, 4, 3, 10.0, 1.0, 5).unwrap();
        assert!(a.features.bits_eq(&b.features));
        assert_eq!(a.labels, b.labels);
        for c in 0..3 {
            let size = a.labels.iter().filter(|&&l| l == c).count();
            assert!((10..=11).contains(&size), "cluster {c} has {size} points");
        }
        assert_eq!(a.class_count, 3);

        let one = make_blobs(12, 2, 1, 5.0, 0.5, 6).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn blobs_reject_bad_parameters() {
        assert!(make_blobs(2, 2, 3, 5.0, 1.0, 0).is_err());
        assert!(make_blobs(10, 2, 0, 5.0, 1.0, 0).is_err());
        assert!(make_blobs(10, 2, 2, 0.0, 1.0, 0).is_err());
        assert!(make_blobs(10, 0, 2, 5.0, 1.0, 0).is_err());
    }

    #[test]
    fn clean_blobs_are_trivially_clusterable() {
        let ds = make_blobs(150, 5, 3, 20.0, 1.0, 7).unwrap();
        let (pred, _) = ddic_core::trainer::kmeans(&ds.features, 3, 11, 300, 10).unwrap();
        let score = ddic_core::eval::acc(&ds.labels, &pred).unwrap();
        assert!(score >= 0.99, "accuracy {score}");
    }
}
