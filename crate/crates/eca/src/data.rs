//! Dataset generation (the 2D/3D Gaussian benchmarks), ingestion (IDX image
//! files, the two UCI breast-cancer CSV layouts), preprocessing to unit-norm
//! samples, and deterministic splits.

use flate2::read::GzDecoder;
use ndarray::{s, Array1, Array2, ArrayView2};
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::linalg::cholesky;
use crate::model_io::{self, JsonWriter};
use crate::rng::{derive_rng, standard_normal, uniform01};
use crate::{EcaError, Result};

/// Loaded data before preparation: raw features, contiguous integer labels,
/// optional feature names, and the count of rows dropped during parsing
/// (missing-value policy).
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub feature_names: Option<Vec<String>>,
    pub dropped_rows: usize,
}

/// Unit-norm samples ready for training; `dropped` counts samples removed
/// because they were all-zero before normalization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    PerFeatureMax,
    Divide255,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct PrepareOptions {
    pub scale: ScaleKind,
    pub add_aux_dim: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            scale: ScaleKind::None,
            add_aux_dim: false,
        }
    }
}

fn gaussian_block(
    rng: &mut rand_chacha::ChaCha12Rng,
    n: usize,
    cov: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let l = cholesky(cov)?;
    let mut out = Array2::<f64>::zeros((n, d));
    for mut row in out.rows_mut() {
        let z: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..=i {
                s += l[[i, k]] * z[k];
            }
            row[i] = s;
        }
    }
    Ok(out)
}

/// The intersecting 2D benchmark: two zero-mean Gaussians whose covariances
/// differ only in the sign of the cross term (+0.8 / -0.8).
pub fn gen_2d(n_per_class: usize, seed: u64) -> Result<RawDataset> {
    if n_per_class < 2 {
        return Err(EcaError::Config("n_per_class must be at least 2".into()));
    }
    let mut rng = derive_rng(seed, "gen-2d");
    let cov0 = ndarray::array![[1.0, 0.8], [0.8, 1.0]];
    let cov1 = ndarray::array![[1.0, -0.8], [-0.8, 1.0]];
    let a = gaussian_block(&mut rng, n_per_class, &cov0)?;
    let b = gaussian_block(&mut rng, n_per_class, &cov1)?;
    let mut x = Array2::<f64>::zeros((2 * n_per_class, 2));
    x.slice_mut(s![..n_per_class, ..]).assign(&a);
    x.slice_mut(s![n_per_class.., ..]).assign(&b);
    let mut y = vec![0usize; n_per_class];
    y.extend(std::iter::repeat(1).take(n_per_class));
    Ok(RawDataset {
        x,
        y,
        classes: 2,
        feature_names: None,
        dropped_rows: 0,
    })
}

pub(crate) fn gen_3d_impl(n_per_class: usize, seed: u64) -> Result<(RawDataset, Vec<u8>)> {
    let mut rng = derive_rng(seed, "gen-3d");
    let cov0 = Array2::from_diag(&ndarray::arr1(&[0.1, 10.0, 10.0]));
    let cov1a = Array2::from_diag(&ndarray::arr1(&[10.0, 0.1, 10.0]));
    let cov1b = Array2::from_diag(&ndarray::arr1(&[10.0, 10.0, 0.1]));
    let l0 = cholesky(&cov0)?;
    let l1a = cholesky(&cov1a)?;
    let l1b = cholesky(&cov1b)?;

    let mut x = Array2::<f64>::zeros((2 * n_per_class, 3));
    let mut components = Vec::with_capacity(n_per_class);
    for i in 0..n_per_class {
        let z: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
        for d in 0..3 {
            x[[i, d]] = l0[[d, d]] * z[d];
        }
    }
    // class 1 is an equal mixture of the two remaining pancake covariances
    for i in 0..n_per_class {
        let pick_b = uniform01(&mut rng) < 0.5;
        components.push(u8::from(pick_b));
        let l = if pick_b { &l1b } else { &l1a };
        let z: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
        for d in 0..3 {
            x[[n_per_class + i, d]] = l[[d, d]] * z[d];
        }
    }
    let mut y = vec![0usize; n_per_class];
    y.extend(std::iter::repeat(1).take(n_per_class));
    Ok((
        RawDataset {
            x,
            y,
            classes: 2,
            feature_names: None,
            dropped_rows: 0,
        },
        components,
    ))
}

/// The 3D benchmark: class 0 is thin along the first axis; class 1 mixes
/// the two covariances that are thin along the other two axes, half and half.
pub fn gen_3d(n_per_class: usize, seed: u64) -> Result<RawDataset> {
    if n_per_class < 2 {
        return Err(EcaError::Config("n_per_class must be at least 2".into()));
    }
    Ok(gen_3d_impl(n_per_class, seed)?.0)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| EcaError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| EcaError::Format(format!("truncated IDX file while reading {what}")))
}

/// Load an IDX image/label pair (plain or gzipped). Pixels stay in
/// [0, 255]; scaling belongs to [`preprocess`].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(EcaError::Format(format!(
            "{}: bad image magic {magic:#010x}, expected 0x00000803",
            images_path.display()
        )));
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "row count")? as usize;
    let cols = be_u32(&img, 12, "column count")? as usize;
    let pixels = rows * cols;
    if img.len() < 16 + n * pixels {
        return Err(EcaError::Format(format!(
            "{}: truncated pixel data ({} bytes for {n} images of {pixels} pixels)",
            images_path.display(),
            img.len() - 16
        )));
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, "label magic")?;
    if magic != 0x0000_0801 {
        return Err(EcaError::Format(format!(
            "{}: bad label magic {magic:#010x}, expected 0x00000801",
            labels_path.display()
        )));
    }
    let n_labels = be_u32(&lab, 4, "label count")? as usize;
    if n_labels != n {
        return Err(EcaError::Mismatch(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    if lab.len() < 8 + n_labels {
        return Err(EcaError::Format(format!(
            "{}: truncated label data",
            labels_path.display()
        )));
    }

    let mut x = Array2::<f64>::zeros((n, pixels));
    for i in 0..n {
        let base = 16 + i * pixels;
        for j in 0..pixels {
            x[[i, j]] = f64::from(img[base + j]);
        }
    }
    let y: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = y.iter().copied().max().map_or(0, |m| m + 1);
    Ok(RawDataset {
        x,
        y,
        classes,
        feature_names: None,
        dropped_rows: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UciSchema {
    /// 1992 layout: id, 9 integer features, class in {2, 4}; missing values
    /// marked '?'.
    Wis1992,
    /// 1995 layout (WDBC): id, diagnosis in {M, B}, 30 real features.
    Wis1995,
}

const WIS1992_FEATURES: [&str; 9] = [
    "Clump Thickness",
    "Uniformity of Cell Size",
    "Uniformity of Cell Shape",
    "Marginal Adhesion",
    "Single Epithelial Cell Size",
    "Bare Nuclei",
    "Bland Chromatin",
    "Normal Nucleoli",
    "Mitoses",
];

/// Load one of the two UCI breast-cancer layouts. Rows containing the
/// missing-value marker '?' are dropped and counted.
pub fn load_uci_csv(path: &Path, schema: UciSchema) -> Result<RawDataset> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match schema {
            UciSchema::Wis1992 => {
                if fields.len() != 11 {
                    return Err(EcaError::Format(format!(
                        "{}:{}: expected 11 comma-separated fields, found {}",
                        path.display(),
                        lineno + 1,
                        fields.len()
                    )));
                }
                if fields.iter().any(|f| f.trim() == "?") {
                    dropped += 1;
                    continue;
                }
                let mut feats = Vec::with_capacity(9);
                for (col, f) in fields[1..10].iter().enumerate() {
                    feats.push(f.trim().parse::<f64>().map_err(|_| {
                        EcaError::Format(format!(
                            "{}:{}: column {} is not numeric: '{f}'",
                            path.display(),
                            lineno + 1,
                            col + 2
                        ))
                    })?);
                }
                let label = match fields[10].trim() {
                    "2" => 0, // benign
                    "4" => 1, // malignant
                    other => {
                        return Err(EcaError::Format(format!(
                            "{}:{}: class must be 2 or 4, found '{other}'",
                            path.display(),
                            lineno + 1
                        )))
                    }
                };
                rows.push(feats);
                labels.push(label);
            }
            UciSchema::Wis1995 => {
                if fields.len() != 32 {
                    return Err(EcaError::Format(format!(
                        "{}:{}: expected 32 comma-separated fields, found {}",
                        path.display(),
                        lineno + 1,
                        fields.len()
                    )));
                }
                if fields.iter().any(|f| f.trim() == "?") {
                    dropped += 1;
                    continue;
                }
                let label = match fields[1].trim() {
                    "B" => 0,
                    "M" => 1,
                    other => {
                        return Err(EcaError::Format(format!(
                            "{}:{}: diagnosis must be M or B, found '{other}'",
                            path.display(),
                            lineno + 1
                        )))
                    }
                };
                let mut feats = Vec::with_capacity(30);
                for (col, f) in fields[2..].iter().enumerate() {
                    feats.push(f.trim().parse::<f64>().map_err(|_| {
                        EcaError::Format(format!(
                            "{}:{}: column {} is not numeric: '{f}'",
                            path.display(),
                            lineno + 1,
                            col + 3
                        ))
                    })?);
                }
                rows.push(feats);
                labels.push(label);
            }
        }
    }
    if rows.is_empty() {
        return Err(EcaError::Format(format!(
            "{}: no usable rows",
            path.display()
        )));
    }
    let m = rows[0].len();
    let mut x = Array2::<f64>::zeros((rows.len(), m));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let feature_names = match schema {
        UciSchema::Wis1992 => Some(WIS1992_FEATURES.iter().map(|s| s.to_string()).collect()),
        UciSchema::Wis1995 => None,
    };
    Ok(RawDataset {
        x,
        y: labels,
        classes: 2,
        feature_names,
        dropped_rows: dropped,
    })
}

/// Scale, optionally append the constant auxiliary coordinate, drop all-zero
/// samples, and normalize each row to unit length.
pub fn preprocess(raw: &RawDataset, options: &PrepareOptions) -> Result<Prepared> {
    let (n, m) = raw.x.dim();
    let mut scaled = raw.x.clone();
    match options.scale {
        ScaleKind::None => {}
        ScaleKind::Divide255 => scaled.mapv_inplace(|v| v / 255.0),
        ScaleKind::PerFeatureMax => {
            for j in 0..m {
                let mx = scaled
                    .column(j)
                    .iter()
                    .fold(0.0f64, |acc, v| acc.max(v.abs()));
                if mx > 0.0 {
                    scaled.column_mut(j).mapv_inplace(|v| v / mx);
                }
            }
        }
    }
    let out_m = if options.add_aux_dim { m + 1 } else { m };
    let mut kept_rows: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let norm_sq: f64 = scaled.row(i).iter().map(|v| v * v).sum::<f64>()
            + if options.add_aux_dim { 1.0 } else { 0.0 };
        if norm_sq.sqrt() >= 1e-12 {
            kept_rows.push(i);
        }
    }
    if kept_rows.is_empty() {
        return Err(EcaError::EmptyAfterFilter);
    }
    let mut x = Array2::<f64>::zeros((kept_rows.len(), out_m));
    let mut y = Vec::with_capacity(kept_rows.len());
    for (row, &src) in kept_rows.iter().enumerate() {
        let mut norm_sq: f64 = scaled.row(src).iter().map(|v| v * v).sum();
        if options.add_aux_dim {
            norm_sq += 1.0;
        }
        let norm = norm_sq.sqrt();
        for j in 0..m {
            x[[row, j]] = scaled[[src, j]] / norm;
        }
        if options.add_aux_dim {
            x[[row, m]] = 1.0 / norm;
        }
        y.push(raw.y[src]);
    }
    Ok(Prepared {
        x,
        y,
        classes: raw.classes,
        dropped: n - kept_rows.len(),
    })
}

/// Seeded shuffle-then-partition split; errors if either side loses a class.
pub fn split(data: &Prepared, fraction: f64, seed: u64) -> Result<(Prepared, Prepared)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(EcaError::Config(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let n = data.x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, "split");
    crate::trainer::shuffle_indices(&mut order, &mut rng);
    let n_train = ((n as f64) * fraction).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let take = |idx: &[usize]| {
        let mut x = Array2::<f64>::zeros((idx.len(), data.x.ncols()));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &src) in idx.iter().enumerate() {
            x.slice_mut(s![row, ..]).assign(&data.x.row(src));
            y.push(data.y[src]);
        }
        Prepared {
            x,
            y,
            classes: data.classes,
            dropped: 0,
        }
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..]);
    for k in 0..data.classes {
        if !train.y.contains(&k) {
            return Err(EcaError::DegenerateSplit(k, "train"));
        }
        if !val.y.contains(&k) {
            return Err(EcaError::DegenerateSplit(k, "validation"));
        }
    }
    Ok((train, val))
}

/// Seeded random subsample without replacement; errors if a class would
/// vanish.
pub fn subsample(data: &Prepared, n: usize, seed: u64) -> Result<Prepared> {
    let total = data.x.nrows();
    if n == 0 || n > total {
        return Err(EcaError::Config(format!(
            "cannot subsample {n} of {total} rows"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = derive_rng(seed, "subsample");
    crate::trainer::shuffle_indices(&mut order, &mut rng);
    let mut x = Array2::<f64>::zeros((n, data.x.ncols()));
    let mut y = Vec::with_capacity(n);
    for (row, &src) in order[..n].iter().enumerate() {
        x.slice_mut(s![row, ..]).assign(&data.x.row(src));
        y.push(data.y[src]);
    }
    for k in 0..data.classes {
        if !y.contains(&k) {
            return Err(EcaError::DegenerateSplit(k, "subsample"));
        }
    }
    Ok(Prepared {
        x,
        y,
        classes: data.classes,
        dropped: 0,
    })
}

/// Column means and covariance of a block of rows.
pub fn empirical_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, m) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(m));
    let mut cov = Array2::<f64>::zeros((m, m));
    for row in x.rows() {
        for i in 0..m {
            let di = row[i] - mean[i];
            for j in 0..m {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    if n > 1 {
        cov.mapv_inplace(|v| v / (n as f64 - 1.0));
    }
    (mean, cov)
}

/// Serialize a prepared dataset with the same number conventions as model
/// files.
pub fn save_dataset(data: &Prepared, path: &Path) -> Result<()> {
    fs::write(path, render_dataset(data))?;
    Ok(())
}

pub fn render_dataset(data: &Prepared) -> String {
    let mut w = JsonWriter::new();
    w.field_u64("format_version", model_io::FORMAT_VERSION);
    w.field_u64("n", data.x.nrows() as u64);
    w.field_u64("m", data.x.ncols() as u64);
    w.field_u64("classes", data.classes as u64);
    w.field_matrix("X", &data.x);
    let labels: Vec<f64> = data.y.iter().map(|&v| v as f64).collect();
    w.field_vector("y", &labels);
    w.finish()
}

pub fn load_dataset(path: &Path) -> Result<Prepared> {
    let text = fs::read_to_string(path)?;
    let doc = model_io::parse_document(&text)?;
    let n = model_io::get_u64(&doc, "n")? as usize;
    let m = model_io::get_u64(&doc, "m")? as usize;
    let classes = model_io::get_u64(&doc, "classes")? as usize;
    let x = model_io::get_matrix(&doc, "X", n, m)?;
    let y_raw = model_io::get_vector(&doc, "y", n)?;
    let y: Vec<usize> = y_raw.iter().map(|&v| v as usize).collect();
    if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
        return Err(EcaError::Format(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(Prepared {
        x,
        y,
        classes,
        dropped: 0,
    })
}
