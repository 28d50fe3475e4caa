//! Feature datasets: file formats, synthetic blobs and train/test splits.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const PACKED_MAGIC: &[u8; 4] = b"NGPT";
const PACKED_VERSION: u16 = 1;

/// Instances as rows of `features` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl FeatureDataset {
    /// Checks the label range and row count. Class names default to
    /// `class0, class1, ...` when `class_names` is `None`.
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), found: labels.len() });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidParameter(format!("label {bad} out of range for {num_classes} classes")));
        }
        let class_names = class_names.unwrap_or_else(|| default_names(num_classes));
        if class_names.len() != num_classes {
            return Err(Error::DimensionMismatch { expected: num_classes, found: class_names.len() });
        }
        Ok(FeatureDataset { features, labels, class_names })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureDataset {
        let features = DMatrix::from_fn(idx.len(), self.d(), |i, j| self.features[(idx[i], j)]);
        FeatureDataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn default_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class{i}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Packed,
}

impl DataFormat {
    /// `.csv` is CSV, anything else is the packed binary format.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Packed,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "packed" => Ok(DataFormat::Packed),
            other => Err(Error::InvalidParameter(format!("unknown data format {other:?} (expected csv or packed)"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::Packed => "packed",
        })
    }
}

pub fn load_features(path: &Path, format: DataFormat) -> Result<FeatureDataset> {
    let file = File::open(path)?;
    match format {
        DataFormat::Csv => read_csv(BufReader::new(file)),
        DataFormat::Packed => read_packed(BufReader::new(file)),
    }
}

pub fn write_features(path: &Path, data: &FeatureDataset, format: DataFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Csv => write_csv(&mut w, data)?,
        DataFormat::Packed => write_packed(&mut w, data)?,
    }
    w.flush()?;
    Ok(())
}

/// CSV with header `label,f0,...,f{d-1}`. The class count is the largest
/// label plus one.
pub fn read_csv<R: Read>(reader: R) -> Result<FeatureDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::NoRows),
        Some(h) => h.map_err(|e| csv_error(1, e))?,
    };
    if header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse { line: 1, message: "header must start with `label`".into() });
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(Error::Parse { line: 1, message: "header lists no feature columns".into() });
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("f{j}") {
            return Err(Error::Parse { line: 1, message: format!("expected column `f{j}`, found `{name}`") });
        }
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(0, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != d + 1 {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", d + 1, rec.len()) });
        }
        let label = rec[0].trim();
        let label: usize = label
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("label `{label}` is not a nonnegative integer") })?;
        if label > u32::MAX as usize {
            return Err(Error::Parse { line, message: format!("label {label} out of range") });
        }
        labels.push(label);
        for cell in rec.iter().skip(1) {
            let v: f64 =
                cell.trim().parse().map_err(|_| Error::Parse { line, message: format!("`{cell}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value `{cell}`") });
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::NoRows);
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let features = DMatrix::from_row_slice(labels.len(), d, &values);
    FeatureDataset::new(features, labels, c, None)
}

fn csv_error(fallback_line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse { line, message: e.to_string() }
}

pub fn write_csv<W: Write>(w: W, data: &FeatureDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string()];
    header.extend((0..data.d()).map(|j| format!("f{j}")));
    wtr.write_record(&header).map_err(csv_io)?;
    for (i, label) in data.labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(data.features.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Magic `NGPT`, u16 version, then `n`, `d`, `C` as u32, the labels as u32
/// and the features as f64, row-major, all little-endian.
pub fn read_packed<R: Read>(mut r: R) -> Result<FeatureDataset> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic)? {
        0 => return Err(Error::NoRows),
        4 => {}
        k => r.read_exact(&mut magic[k..]).map_err(|_| Error::Format("truncated header".into()))?,
    }
    if &magic != PACKED_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb).map_err(|_| Error::Format("truncated header".into()))?;
    let version = u16::from_le_bytes(vb);
    if version != PACKED_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r, "row count")? as usize;
    let d = read_u32(&mut r, "dimension")? as usize;
    let c = read_u32(&mut r, "class count")? as usize;
    if n == 0 {
        return Err(Error::NoRows);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = read_u32(&mut r, "labels")? as usize;
        if l >= c {
            return Err(Error::Format(format!("row {i}: label {l} out of range for {c} classes")));
        }
        labels.push(l);
    }
    let mut bytes = vec![0u8; n * d * 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated feature block".into()))?;
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8"))).collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after feature block".into()));
    }
    FeatureDataset::new(DMatrix::from_row_slice(n, d, &values), labels, c, None)
}

pub fn write_packed<W: Write>(mut w: W, data: &FeatureDataset) -> Result<()> {
    let as_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{what} {v} exceeds u32")));
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&PACKED_VERSION.to_le_bytes())?;
    for (v, what) in [(data.n(), "row count"), (data.d(), "dimension"), (data.num_classes(), "class count")] {
        w.write_all(&as_u32(v, what)?.to_le_bytes())?;
    }
    for &l in &data.labels {
        w.write_all(&as_u32(l, "label")?.to_le_bytes())?;
    }
    for i in 0..data.n() {
        for v in data.features.row(i).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parameters of [`synth_blobs`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Gaussian blobs with the clean signal confined to a random
/// `(C-1)`-dimensional subspace: centroids form a regular simplex with edge
/// `separation`, each instance adds unit isotropic spread inside that
/// subspace, and observation noise `N(0, noise_sigma²)` is added to every
/// coordinate. Needs `dim >= C - 1`.
pub fn synth_blobs(spec: &BlobSpec) -> Result<FeatureDataset> {
    synth_blobs_with_centroids(spec).map(|(d, _)| d)
}

/// As [`synth_blobs`], also returning the `C × dim` centroid matrix.
pub fn synth_blobs_with_centroids(spec: &BlobSpec) -> Result<(FeatureDataset, DMatrix<f64>)> {
    let BlobSpec { classes: c, per_class, dim: d, separation, noise_sigma, seed } = *spec;
    if c < 2 || per_class < 2 || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "blobs need at least 2 classes, 2 instances per class and 1 dimension \
             (got C={c}, per_class={per_class}, d={d})"
        )));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::InvalidParameter(format!("separation must be positive, got {separation}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be nonnegative, got {noise_sigma}")));
    }
    let k = c - 1;
    if d < k {
        return Err(Error::InvalidParameter(format!(
            "{c} centroids at equal separation need at least {k} dimensions, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    // orthonormal basis of a random k-dimensional subspace
    let g = DMatrix::from_fn(d, k, |_, _| normal());
    let basis = g.qr().q();

    // regular simplex in Helmert coordinates: vertex i of the standard simplex
    // projected onto the orthonormal complement of the all-ones vector
    let helmert = DMatrix::from_fn(c, k, |i, j| {
        let j1 = (j + 1) as f64;
        let norm = (j1 * (j1 + 1.0)).sqrt();
        if i <= j {
            1.0 / norm
        } else if i == j + 1 {
            -j1 / norm
        } else {
            0.0
        }
    });
    let simplex = helmert * (separation / std::f64::consts::SQRT_2);
    let centroids = &simplex * basis.transpose();

    let n = c * per_class;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        for r in 0..per_class {
            let i = class * per_class + r;
            let spread: Vec<f64> = (0..k).map(|_| normal()).collect();
            for col in 0..d {
                let inner: f64 = (0..k).map(|j| basis[(col, j)] * spread[j]).sum();
                features[(i, col)] = centroids[(class, col)] + inner + noise_sigma * normal();
            }
            labels.push(class);
        }
    }
    Ok((FeatureDataset::new(features, labels, c, None)?, centroids))
}

fn per_class_indices(data: &FeatureDataset) -> Vec<Vec<usize>> {
    let mut idx = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels.iter().enumerate() {
        idx[l].push(i);
    }
    idx
}

fn check_fraction(test_fraction: f64) -> Result<()> {
    if test_fraction > 0.0 && test_fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("test fraction must lie in (0, 1), got {test_fraction}")))
    }
}

/// Test-set size for a class of `n` instances: the rounded target, kept
/// within `1..n` so both sides see the class.
fn test_count(n: usize, test_fraction: f64) -> usize {
    ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1)
}

fn check_class_sizes(groups: &[Vec<usize>]) -> Result<()> {
    match groups.iter().position(|g| g.len() == 1) {
        Some(c) => Err(Error::InvalidParameter(format!("class {c} has a single instance and cannot be split"))),
        None => Ok(()),
    }
}

/// Stratified random split. Each class contributes `round(n_c·fraction)`
/// instances to the test set (at least one, and at least one left for
/// training). Both halves keep the original row order.
pub fn split(data: &FeatureDataset, test_fraction: f64, seed: u64) -> Result<(FeatureDataset, FeatureDataset)> {
    check_fraction(test_fraction)?;
    let mut groups = per_class_indices(data);
    check_class_sizes(&groups)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for g in groups.iter_mut().filter(|g| !g.is_empty()) {
        g.shuffle(&mut rng);
        let t = test_count(g.len(), test_fraction);
        test.extend_from_slice(&g[..t]);
        train.extend_from_slice(&g[t..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train), data.select(&test)))
}

/// Per class, the earliest rows (in file order) train and the later rows
/// test, for temporally ordered frame features.
pub fn split_sequential(data: &FeatureDataset, test_fraction: f64) -> Result<(FeatureDataset, FeatureDataset)> {
    check_fraction(test_fraction)?;
    let groups = per_class_indices(data);
    check_class_sizes(&groups)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let cut = g.len() - test_count(g.len(), test_fraction);
        train.extend_from_slice(&g[..cut]);
        test.extend_from_slice(&g[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train), data.select(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> BlobSpec {
        BlobSpec { classes: 3, per_class: 60, dim: 8, separation: 6.0, noise_sigma: 0.0, seed }
    }

    #[test]
    fn csv_three_rows() {
        let text = "label,f0,f1\n0,1.5,2\n1,-3,4e-2\n2,0,0\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!((ds.n(), ds.d(), ds.num_classes()), (3, 2, 3));
        assert_eq!(ds.features[(1, 1)], 0.04);
    }

    #[test]
    fn empty_inputs_have_no_rows() {
        assert!(matches!(read_csv("".as_bytes()), Err(Error::NoRows)));
        assert!(matches!(read_csv("label,f0\n".as_bytes()), Err(Error::NoRows)));
        assert!(matches!(read_packed(&[][..]), Err(Error::NoRows)));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let ragged = "label,f0,f1\n0,1,2\n1,3\n";
        assert!(matches!(read_csv(ragged.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let text = "label,f0\n0,1\n1,abc\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let label = "label,f0\n-1,1\n";
        assert!(matches!(read_csv(label.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn packed_round_trip_is_exact() {
        let ds = synth_blobs(&BlobSpec { noise_sigma: 0.3, ..blobs(4) }).unwrap();
        let mut buf = Vec::new();
        write_packed(&mut buf, &ds).unwrap();
        let back = read_packed(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = synth_blobs(&BlobSpec { noise_sigma: 0.3, ..blobs(5) }).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &ds).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn packed_rejects_out_of_range_label() {
        let ds = FeatureDataset::new(DMatrix::zeros(2, 1), vec![0, 1], 2, None).unwrap();
        let mut buf = Vec::new();
        write_packed(&mut buf, &ds).unwrap();
        buf[22..26].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_packed(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn centroids_are_separated() {
        let (ds, centroids) = synth_blobs_with_centroids(&blobs(1)).unwrap();
        assert_eq!(ds.n(), 180);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let dist = (centroids.row(i) - centroids.row(j)).norm();
                assert!(dist >= 6.0 - 1e-9, "{dist}");
            }
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(synth_blobs(&blobs(9)).unwrap(), synth_blobs(&blobs(9)).unwrap());
        assert_ne!(synth_blobs(&blobs(9)).unwrap(), synth_blobs(&blobs(10)).unwrap());
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let spec = BlobSpec { classes: 5, dim: 3, ..blobs(0) };
        assert!(synth_blobs(&spec).is_err());
    }

    #[test]
    fn stratified_halves() {
        let ds = synth_blobs(&BlobSpec { per_class: 10, ..blobs(2) }).unwrap();
        let (train, test) = split(&ds, 0.5, 3).unwrap();
        assert_eq!(train.class_counts(), vec![5, 5, 5]);
        assert_eq!(test.class_counts(), vec![5, 5, 5]);
    }

    #[test]
    fn bad_fractions_and_singletons() {
        let ds = synth_blobs(&blobs(2)).unwrap();
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        let single = FeatureDataset::new(DMatrix::zeros(3, 1), vec![0, 0, 1], 2, None).unwrap();
        assert!(split(&single, 0.5, 1).is_err());
    }

    #[test]
    fn sequential_split_keeps_order() {
        let ds = FeatureDataset::new(DMatrix::from_fn(8, 1, |i, _| i as f64), vec![0, 0, 0, 0, 1, 1, 1, 1], 2, None)
            .unwrap();
        let (train, test) = split_sequential(&ds, 0.5).unwrap();
        assert_eq!(train.features.as_slice(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(test.features.as_slice(), &[2.0, 3.0, 6.0, 7.0]);
    }
}
