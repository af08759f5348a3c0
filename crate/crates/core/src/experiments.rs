//! Dataset ingestion and the prediction-decomposition study.
//!
//! A prediction `F(x) = W·x + b` splits into an input-driven term `W·x` and an
//! instance's aggregated bias `b`. `decompose_eval` scores all three as
//! classifiers and reports label flip rates of the two parts against the full
//! prediction.

use crate::linearize::{linearize_model, LinearizeError};
use crate::model::{Model, ModelError};
use crate::tensor::Shape;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// IDX container problems: wrong magic, truncation, count mismatch.
    Idx { detail: String },
    /// CSV problems: missing column, non-numeric feature cell.
    Csv { detail: String },
    /// Bad arguments (for example mismatched prediction lists).
    Invalid { detail: String },
    Model(ModelError),
    Linearize(LinearizeError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Idx { detail } => write!(f, "idx error: {detail}"),
            DataError::Csv { detail } => write!(f, "csv error: {detail}"),
            DataError::Invalid { detail } => write!(f, "{detail}"),
            DataError::Model(e) => write!(f, "{e}"),
            DataError::Linearize(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<ModelError> for DataError {
    fn from(e: ModelError) -> Self {
        DataError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for DataError {
    fn from(e: crate::tensor::TensorError) -> Self {
        DataError::Model(ModelError::Tensor(e))
    }
}

impl From<LinearizeError> for DataError {
    fn from(e: LinearizeError) -> Self {
        DataError::Linearize(e)
    }
}

fn idx_err(detail: impl Into<String>) -> DataError {
    DataError::Idx { detail: detail.into() }
}

fn csv_err(detail: impl Into<String>) -> DataError {
    DataError::Csv { detail: detail.into() }
}

/// Labeled instances in the crate's flat input layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub input_shape: Shape,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Keep only `range`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            inputs: self.inputs[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(idx_err("truncated header"));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

pub(crate) fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(format!("wrong magic {magic:#010x} for images (expected {IDX_IMAGES_MAGIC:#010x})")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let data = &bytes[16..];
    if data.len() != n * h * w {
        return Err(idx_err(format!(
            "truncated image data: {} bytes for {n} x {h} x {w}",
            data.len()
        )));
    }
    Ok((n, h, w, data))
}

pub(crate) fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(format!("wrong magic {magic:#010x} for labels (expected {IDX_LABELS_MAGIC:#010x})")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let data = &bytes[8..];
    if data.len() != n {
        return Err(idx_err(format!("truncated label data: {} bytes for {n} labels", data.len())));
    }
    Ok(data)
}

/// Load a big-endian IDX image/label pair. Pixels are scaled to [0, 1] by
/// dividing by 255; the input shape is `[1, H, W]`. Files must already be
/// decompressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (n, h, w, pixels) = parse_idx_images(&image_bytes)?;
    let labels_raw = parse_idx_labels(&label_bytes)?;
    if labels_raw.len() != n {
        return Err(idx_err(format!(
            "count mismatch: {n} images but {} labels",
            labels_raw.len()
        )));
    }
    let size = h * w;
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|i| pixels[i * size..(i + 1) * size].iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset { inputs, labels, input_shape: Shape::new(vec![1, h, w])?, num_classes })
}

/// Load a headed CSV. Features are all non-label columns in header order;
/// labels map to dense indices by first appearance. The input shape is `[D]`.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| csv_err(format!("label column \"{label_column}\" not found")))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|(i, _)| *i != label_pos).map(|(_, h)| h.to_string()).collect();

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let mut features = Vec::with_capacity(feature_names.len());
        for (col, cell) in record.iter().enumerate() {
            if col == label_pos {
                let name = cell.to_string();
                let idx = label_names.iter().position(|l| l == &name).unwrap_or_else(|| {
                    label_names.push(name);
                    label_names.len() - 1
                });
                labels.push(idx);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    csv_err(format!(
                        "row {}: non-numeric feature value \"{cell}\" in column \"{}\"",
                        row_idx + 1,
                        headers.get(col).unwrap_or("?")
                    ))
                })?;
                features.push(v);
            }
        }
        if features.len() != feature_names.len() {
            return Err(csv_err(format!("row {}: wrong field count", row_idx + 1)));
        }
        inputs.push(features);
    }
    if inputs.is_empty() {
        return Err(csv_err("no data rows"));
    }
    let dim = inputs[0].len();
    Ok(Dataset {
        inputs,
        labels,
        input_shape: Shape::new(vec![dim])?,
        num_classes: label_names.len(),
    })
}

/// Fraction of positions where the two prediction lists disagree.
pub fn lfr(preds_a: &[usize], preds_b: &[usize]) -> Result<f64, DataError> {
    if preds_a.len() != preds_b.len() || preds_a.is_empty() {
        return Err(DataError::Invalid {
            detail: format!(
                "label flip rate needs equal nonzero lengths, got {} and {}",
                preds_a.len(),
                preds_b.len()
            ),
        });
    }
    let flips = preds_a.iter().zip(preds_b).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / preds_a.len() as f64)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and label-flip-rate comparison of `F(x)`, `W·x`, and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub acc_full: f64,
    pub acc_wx: f64,
    pub acc_b: f64,
    pub lfr_wx: f64,
    pub lfr_b: f64,
    pub n: usize,
}

/// Score the full prediction and its two parts over a dataset.
pub fn decompose_eval(model: &Model, ds: &Dataset) -> Result<DecompositionReport, DataError> {
    if ds.is_empty() {
        return Err(DataError::Invalid { detail: "empty dataset".into() });
    }
    let out_dim = model.output_dim()?;
    if out_dim != ds.num_classes {
        return Err(DataError::Invalid {
            detail: format!("model has {out_dim} outputs for {} classes", ds.num_classes),
        });
    }
    let mut full_preds = Vec::with_capacity(ds.len());
    let mut wx_preds = Vec::with_capacity(ds.len());
    let mut b_preds = Vec::with_capacity(ds.len());
    for x in &ds.inputs {
        let f = model.forward(x)?;
        let lin = linearize_model(model, x)?;
        let wx = lin.w.matvec(x).map_err(|e| DataError::Linearize(e.into()))?;
        full_preds.push(argmax(&f));
        wx_preds.push(argmax(&wx));
        b_preds.push(argmax(&lin.b));
    }
    let accuracy = |preds: &[usize]| {
        preds.iter().zip(&ds.labels).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64
    };
    Ok(DecompositionReport {
        acc_full: accuracy(&full_preds),
        acc_wx: accuracy(&wx_preds),
        acc_b: accuracy(&b_preds),
        lfr_wx: lfr(&full_preds, &wx_preds)?,
        lfr_b: lfr(&full_preds, &b_preds)?,
        n: ds.len(),
    })
}

/// Round to 4 decimal places, halves away from zero.
fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

pub const REPORT_HEADER: &str = "model\tacc_wx\tlfr_wx\tacc_b\tlfr_b\tacc_full";

/// Two TSV lines: the fixed header and one row for this model.
pub fn report_table(report: &DecompositionReport, model_name: &str) -> String {
    format!(
        "{REPORT_HEADER}\n{model_name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        round4(report.acc_wx),
        round4(report.lfr_wx),
        round4(report.acc_b),
        round4(report.lfr_b),
        round4(report.acc_full),
    )
}
