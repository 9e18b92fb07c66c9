//! Datasets: synthetic multimodal mixtures, MNIST IDX files, CSV features,
//! even/odd relabeling, and SVG scatter plots of 2-D embeddings.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::par;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features with a class label and an optional finer mode label per sample,
/// plus the indices used for training and for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub class_labels: Vec<usize>,
    pub mode_labels: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Dataset whose train and test splits both cover every sample.
    pub fn new(features: Array2<f64>, class_labels: Vec<usize>, mode_labels: Option<Vec<usize>>) -> Result<Self> {
        let n = features.nrows();
        if class_labels.len() != n {
            return Err(Error::Shape { expected: format!("{n} class labels"), actual: class_labels.len().to_string() });
        }
        if let Some(m) = &mode_labels {
            if m.len() != n {
                return Err(Error::Shape { expected: format!("{n} mode labels"), actual: m.len().to_string() });
            }
        }
        if let Some((i, v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { sample: i.0, dim: i.1, value: *v });
        }
        Ok(Self { features, class_labels, mode_labels, train: (0..n).collect(), test: (0..n).collect() })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Mode labels, falling back to class labels.
    pub fn modes(&self) -> &[usize] {
        self.mode_labels.as_deref().unwrap_or(&self.class_labels)
    }

    /// Stacks two datasets; the first supplies the train split and the
    /// second the test split.
    pub fn concat_split(train: &Dataset, test: &Dataset) -> Result<Self> {
        if train.feature_dim() != test.feature_dim() {
            return Err(Error::Shape {
                expected: format!("{} features", train.feature_dim()),
                actual: test.feature_dim().to_string(),
            });
        }
        let features = ndarray::concatenate(ndarray::Axis(0), &[train.features.view(), test.features.view()])
            .expect("column counts checked");
        let class_labels = [train.class_labels.as_slice(), test.class_labels.as_slice()].concat();
        let mode_labels = match (&train.mode_labels, &test.mode_labels) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        let offset = train.len();
        let mut out = Dataset::new(features, class_labels, mode_labels)?;
        out.train = train.train.clone();
        out.test = test.test.iter().map(|i| i + offset).collect();
        Ok(out)
    }

    /// Sub-dataset with the given rows; its splits cover all of it.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&i) = rows.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        Dataset::new(
            self.features.select(ndarray::Axis(0), rows),
            rows.iter().map(|&i| self.class_labels[i]).collect(),
            self.mode_labels.as_ref().map(|m| rows.iter().map(|&i| m[i]).collect()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultimodalConfig {
    pub classes: usize,
    pub modes_per_class: usize,
    pub samples_per_mode: usize,
    pub feature_dim: usize,
    pub mode_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MultimodalConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            modes_per_class: 3,
            samples_per_mode: 20,
            feature_dim: 8,
            mode_separation: 10.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Gaussian clusters around mode centers drawn uniformly on the sphere of
/// radius `mode_separation`. Mode `g` belongs to class `g mod classes`.
/// Samples are stored mode by mode.
pub fn gen_multimodal(cfg: &MultimodalConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.modes_per_class == 0 || cfg.samples_per_mode == 0 || cfg.feature_dim == 0 {
        return Err(Error::invalid(format!("all counts must be at least 1: {cfg:?}")));
    }
    if !(cfg.mode_separation > 0.0 && cfg.mode_separation.is_finite()) {
        return Err(Error::invalid(format!("mode_separation must be positive, got {}", cfg.mode_separation)));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise_sigma must be non-negative, got {}", cfg.noise_sigma)));
    }
    let (d, s) = (cfg.feature_dim, cfg.samples_per_mode);
    let modes = cfg.classes * cfg.modes_per_class;
    let blocks = par::map_range(modes, |g| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(g as u64);
        let center = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| cfg.mode_separation * x / norm).collect::<Vec<_>>();
            }
        };
        Array2::from_shape_fn((s, d), |(_, k)| center[k] + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
    });
    let mut features = Array2::zeros((modes * s, d));
    for (g, block) in blocks.iter().enumerate() {
        features.slice_mut(s![g * s..(g + 1) * s, ..]).assign(block);
    }
    let mode_labels: Vec<usize> = (0..modes * s).map(|i| i / s).collect();
    let class_labels = mode_labels.iter().map(|g| g % cfg.classes).collect();
    Dataset::new(features, class_labels, Some(mode_labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(buf[at..at + 4].try_into().unwrap())
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the digit
/// becomes both class and mode label.
pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let short = |path: &Path, expected: usize, buf: &[u8]| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: buf.len() as u64,
    };
    if img.len() < 4 {
        return Err(short(images_path, 16, &img));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { path: images_path.to_path_buf(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    if lab.len() < 4 {
        return Err(short(labels_path, 8, &lab));
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { path: labels_path.to_path_buf(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    if img.len() < 16 {
        return Err(short(images_path, 16, &img));
    }
    if lab.len() < 8 {
        return Err(short(labels_path, 8, &lab));
    }
    let (n_img, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let n_lab = be_u32(&lab, 4) as usize;
    if n_img != n_lab {
        return Err(Error::CountMismatch { images: n_img, labels: n_lab });
    }
    let d = rows * cols;
    let need = 16 + n_img * d;
    if img.len() != need {
        return Err(short(images_path, need, &img));
    }
    if lab.len() != 8 + n_lab {
        return Err(short(labels_path, 8 + n_lab, &lab));
    }
    let features = Array2::from_shape_fn((n_img, d), |(i, k)| img[16 + i * d + k] as f64 / 255.0);
    let labels: Vec<usize> = lab[8..].iter().map(|&v| v as usize).collect();
    Dataset::new(features, labels.clone(), Some(labels))
}

/// Writes an IDX image/label pair; `pixels` holds `labels.len()·rows·cols`
/// bytes in row-major order.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::Shape {
            expected: format!("{} pixels", labels.len() * rows * cols),
            actual: pixels.len().to_string(),
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Class = digit parity, mode = digit. The train split keeps samples whose
/// digit is in `train_digits`, the test split those in `test_digits`.
pub fn relabel_even_odd(ds: &Dataset, train_digits: &[usize], test_digits: &[usize]) -> Result<Dataset> {
    if let Some(d) = train_digits.iter().chain(test_digits).find(|&&d| d > 9) {
        return Err(Error::invalid(format!("digit {d} is not in 0–9")));
    }
    if let Some(d) = train_digits.iter().find(|d| test_digits.contains(d)) {
        return Err(Error::invalid(format!("digit {d} is in both the train and the test set")));
    }
    let digits = ds.modes().to_vec();
    let train: Vec<usize> = ds.train.iter().copied().filter(|&i| train_digits.contains(&digits[i])).collect();
    let test: Vec<usize> = ds.test.iter().copied().filter(|&i| test_digits.contains(&digits[i])).collect();
    if train.is_empty() {
        return Err(Error::Empty("train split is empty after relabeling"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test split is empty after relabeling"));
    }
    Ok(Dataset {
        features: ds.features.clone(),
        class_labels: digits.iter().map(|d| d % 2).collect(),
        mode_labels: Some(digits),
        train,
        test,
    })
}

/// Reads `feature_0,…,feature_{d−1},class[,mode]` with a header row.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let fmt = |message: String| Error::Format { path: path.to_path_buf(), message };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let d = headers.iter().take_while(|h| h.starts_with("feature_")).count();
    for (k, h) in headers.iter().take(d).enumerate() {
        if h != format!("feature_{k}") {
            return Err(fmt(format!("column {k} is `{h}`, expected `feature_{k}`")));
        }
    }
    let rest: Vec<&str> = headers.iter().skip(d).collect();
    let has_mode = match rest.as_slice() {
        ["class"] => false,
        ["class", "mode"] => true,
        _ => return Err(fmt(format!("expected `class[,mode]` after {d} feature columns, found {rest:?}"))),
    };
    if d == 0 {
        return Err(fmt("no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut classes = Vec::new();
    let mut modes = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let bad = |col: usize| fmt(format!("record {}: column {col} is not a number: `{}`", line + 1, &rec[col]));
        for k in 0..d {
            values.push(rec[k].trim().parse::<f64>().map_err(|_| bad(k))?);
        }
        classes.push(rec[d].trim().parse::<usize>().map_err(|_| bad(d))?);
        if has_mode {
            modes.push(rec[d + 1].trim().parse::<usize>().map_err(|_| bad(d + 1))?);
        }
    }
    if classes.is_empty() {
        return Err(Error::Empty("csv file has no records"));
    }
    let features = Array2::from_shape_vec((classes.len(), d), values).expect("row lengths checked by csv");
    Dataset::new(features, classes, has_mode.then_some(modes))
}

/// Writes the layout read by [`read_csv`]; the mode column is present when
/// the dataset has mode labels.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    let mut header: Vec<String> = (0..ds.feature_dim()).map(|k| format!("feature_{k}")).collect();
    header.push("class".into());
    if ds.mode_labels.is_some() {
        header.push("mode".into());
    }
    w.write_record(&header).map_err(fmt)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.class_labels[i].to_string());
        if let Some(m) = &ds.mode_labels {
            rec.push(m[i].to_string());
        }
        w.write_record(&rec).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// SVG scatter of a 2-D embedding: fill color from the mode label, marker
/// shape from the class label.
pub fn scatter_svg(emb: &EmbeddingSet, classes: &[usize], modes: &[usize]) -> Result<String> {
    if emb.dim() != 2 {
        return Err(Error::invalid(format!("scatter plots need 2-D embeddings, got {}", emb.dim())));
    }
    let n = emb.len();
    if classes.len() != n || modes.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} labels"),
            actual: format!("{}/{}", classes.len(), modes.len()),
        });
    }
    let x = emb.coords();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..n {
        for k in 0..2 {
            // y grows upwards in the plot.
            let v = if k == 0 { x[[i, 0]] } else { -x[[i, 1]] };
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let pad = 0.05 * span;
    let (w, h) = (hi[0] - lo[0] + 2.0 * pad, hi[1] - lo[1] + 2.0 * pad);
    let r = 0.01 * span;
    let mut out = String::new();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="600" height="{:.0}" viewBox="{:.6} {:.6} {:.6} {:.6}">"#,
        600.0 * h / w,
        lo[0] - pad,
        lo[1] - pad,
        w,
        h
    )
    .unwrap();
    writeln!(
        out,
        r#"<rect x="{:.6}" y="{:.6}" width="{w:.6}" height="{h:.6}" fill="white"/>"#,
        lo[0] - pad,
        lo[1] - pad
    )
    .unwrap();
    for i in 0..n {
        let (cx, cy) = (x[[i, 0]], -x[[i, 1]]);
        let color = PALETTE[modes[i] % PALETTE.len()];
        let attrs =
            format!(r#"fill="{color}" fill-opacity="0.8" data-class="{}" data-mode="{}""#, classes[i], modes[i]);
        match classes[i] % 4 {
            0 => writeln!(out, r#"<circle cx="{cx:.6}" cy="{cy:.6}" r="{r:.6}" {attrs}/>"#),
            1 => writeln!(
                out,
                r#"<rect x="{:.6}" y="{:.6}" width="{:.6}" height="{:.6}" {attrs}/>"#,
                cx - r,
                cy - r,
                2.0 * r,
                2.0 * r
            ),
            2 => writeln!(
                out,
                r#"<polygon points="{:.6},{:.6} {:.6},{:.6} {:.6},{:.6}" {attrs}/>"#,
                cx,
                cy - r,
                cx - r,
                cy + r,
                cx + r,
                cy + r
            ),
            _ => writeln!(
                out,
                r#"<polygon points="{:.6},{:.6} {:.6},{:.6} {:.6},{:.6} {:.6},{:.6}" {attrs}/>"#,
                cx,
                cy - r,
                cx + r,
                cy,
                cx,
                cy + r,
                cx - r,
                cy
            ),
        }
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_scatter_svg(emb: &EmbeddingSet, classes: &[usize], modes: &[usize], path: &Path) -> Result<()> {
    let svg = scatter_svg(emb, classes, modes)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
