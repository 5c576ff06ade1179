//! On-disk formats.
//!
//! A tensor bundle is a JSON manifest `<stem>.json` next to a raw payload
//! `<stem>.bin`. The manifest lists every tensor with its shape, element
//! type and byte offset; the payload is the concatenation of row-major
//! little-endian values with no padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{FixationRecord, MetricsReport, SaliencyMap};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::pipeline::{AblationTable, LogRow, TrainConfig, TrainState};
use crate::tensor::{numel, DType, Element, Tensor};

pub const BYTE_ORDER: &str = "little";

/// Tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn from_tensor<F: Element>(t: &Tensor<F>) -> Self {
        match F::DTYPE {
            DType::F32 => DynTensor::F32(t.cast()),
            DType::F64 => DynTensor::F64(t.cast()),
        }
    }

    /// The tensor as `F`; fails unless the stored element type is `F`.
    pub fn to_tensor<F: Element>(&self) -> Option<Tensor<F>> {
        (self.dtype() == F::DTYPE).then(|| match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        })
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            DynTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            DynTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    fn byte_len(&self) -> usize {
        numel(self.shape()) * self.dtype().size()
    }
}

fn read_tensor<F: Element>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<F>> {
    let data = bytes
        .chunks_exact(F::DTYPE.size())
        .map(F::read_le)
        .collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub byte_order: String,
    pub payload: String,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub tensors: Vec<(String, DynTensor)>,
    pub meta: serde_json::Value,
}

/// Payload path paired with a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, t: DynTensor) -> Self {
        self.tensors.push((name.into(), t));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: DynTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&DynTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensor `name` as `F`, with errors naming `path`.
    pub fn get_as<F: Element>(&self, path: &Path, name: &str) -> Result<Tensor<F>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        t.to_tensor().ok_or_else(|| {
            Error::format(
                path,
                format!("tensor `{name}` is {}, expected {}", t.dtype(), F::DTYPE),
            )
        })
    }

    /// Write `<stem>.json` and `<stem>.bin`; `path` is the manifest path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = payload_path(path);
        let mut payload = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.byte_len()).sum());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
                offset: payload.len(),
            });
            t.write(&mut payload);
        }
        let manifest = Manifest {
            byte_order: BYTE_ORDER.into(),
            payload: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
        write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        if manifest.byte_order != BYTE_ORDER {
            return Err(Error::format(
                path,
                format!("unsupported byte order `{}`", manifest.byte_order),
            ));
        }
        let bin = path.with_file_name(&manifest.payload);
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let len = numel(&e.shape) * e.dtype.size();
            if e.offset != expected_offset {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor `{}` at offset {}, expected {expected_offset}",
                        e.name, e.offset
                    ),
                ));
            }
            let end = e.offset + len;
            if end > payload.len() {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor `{}` {:?} needs bytes {}..{end}, payload has {}",
                        e.name,
                        e.shape,
                        e.offset,
                        payload.len()
                    ),
                ));
            }
            let bytes = &payload[e.offset..end];
            let t = match e.dtype {
                DType::F32 => DynTensor::F32(read_tensor(e.shape, bytes)?),
                DType::F64 => DynTensor::F64(read_tensor(e.shape, bytes)?),
            };
            tensors.push((e.name, t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::format(
                path,
                format!(
                    "payload has {} bytes, manifest accounts for {expected_offset}",
                    payload.len()
                ),
            ));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }
}

pub fn save_tensor<F: Element>(path: &Path, name: &str, t: &Tensor<F>) -> Result<()> {
    TensorBundle::new()
        .with(name, DynTensor::from_tensor(t))
        .save(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("serialisation failed: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Line {
        path: path.to_path_buf(),
        line: e.line() as u64,
        detail: e.to_string(),
    })
}

/// Per-video, per-frame fixation coordinates.
pub type FixationTable = BTreeMap<String, BTreeMap<usize, Vec<(usize, usize)>>>;

const FIXATION_HEADER: [&str; 4] = ["video", "frame", "row", "col"];

/// Read `video,frame,row,col` rows; coordinates must lie inside `height × width`.
pub fn load_fixations(path: &Path, height: usize, width: usize) -> Result<FixationTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != FIXATION_HEADER {
        return Err(Error::Line {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("header must be `{}`", FIXATION_HEADER.join(",")),
        });
    }
    let mut table = FixationTable::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |detail: String| Error::Line {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let field = |i: usize, name: &str| -> Result<usize> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse()
                .map_err(|_| bad(format!("{name} `{raw}` is not a non-negative integer")))
        };
        let video = record.get(0).unwrap_or("").trim().to_string();
        if video.is_empty() {
            return Err(bad("empty video name".into()));
        }
        let (frame, row, col) = (field(1, "frame")?, field(2, "row")?, field(3, "col")?);
        if row >= height || col >= width {
            return Err(bad(format!(
                "fixation ({row}, {col}) outside the {height}×{width} frame"
            )));
        }
        table
            .entry(video)
            .or_default()
            .entry(frame)
            .or_default()
            .push((row, col));
    }
    Ok(table)
}

pub fn save_fixations(path: &Path, rows: &[(String, &FixationRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(FIXATION_HEADER).map_err(|e| csv_error(path, e))?;
    for (video, rec) in rows {
        for &(r, c) in &rec.points {
            w.write_record([video.clone(), rec.frame.to_string(), r.to_string(), c.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, Some(line)) => Error::Line {
            path: path.to_path_buf(),
            line,
            detail: format!("{kind:?}"),
        },
        (kind, None) => Error::format(path, format!("{kind:?}")),
    }
}

/// 8-bit grayscale value for a saliency in `[0, 1]`; values outside are clamped.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PGM (P5).
pub fn export_pgm(path: &Path, map: &SaliencyMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(map.data.iter().map(|&v| to_gray(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_COLUMNS: [&str; 7] = ["video", "frame", "auc_j", "s_auc", "nss", "cc", "sim"];

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    write_csv_rows(
        path,
        &METRICS_COLUMNS,
        report.frames.iter().map(|f| {
            vec![
                f.video.clone(),
                f.frame.to_string(),
                fmt_opt(f.auc_j),
                fmt_opt(f.s_auc),
                fmt_opt(f.nss),
                fmt_opt(f.cc),
                fmt_opt(f.sim),
            ]
        }),
    )
}

pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}

pub const LOG_COLUMNS: [&str; 5] = ["iteration", "cc_term", "kl_term", "total", "val_total"];

pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_csv_rows(
        path,
        &LOG_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.cc_term.to_string(),
                r.kl_term.to_string(),
                r.total.to_string(),
                fmt_opt(r.val_total),
            ]
        }),
    )
}

pub const ABLATION_COLUMNS: [&str; 6] = ["variant", "params", "cc", "nss", "sim", "auc_j"];

pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    write_csv_rows(
        path,
        &ABLATION_COLUMNS,
        table.rows.iter().map(|r| {
            vec![
                r.variant.to_string(),
                r.params.to_string(),
                fmt_opt(r.cc),
                fmt_opt(r.nss),
                fmt_opt(r.sim),
                fmt_opt(r.auc_j),
            ]
        }),
    )
}

/// Scalar training bookkeeping stored in a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    train: TrainConfig,
    iteration: u64,
    adam_step: u64,
    best_val_loss: Option<f64>,
    best_iteration: Option<u64>,
    evals_since_best: usize,
    stopped: bool,
}

const CHECKPOINT_FORMAT: &str = "thtd-checkpoint-v1";

/// Element type a checkpoint was written with, read from the manifest alone.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let m: Manifest = read_json(path)?;
    m.tensors
        .first()
        .map(|e| e.dtype)
        .ok_or_else(|| Error::format(path, "checkpoint holds no tensors"))
}

/// Everything needed to run the best model or to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub names: Vec<String>,
    /// Weights after the last completed iteration.
    pub current: Vec<Tensor<F>>,
    pub state: TrainState<F>,
}

impl<F: Element> Checkpoint<F> {
    pub fn new(model: &Model<F>, train: &TrainConfig, state: TrainState<F>) -> Self {
        Self {
            config: model.config.clone(),
            train: train.clone(),
            names: model.params.names().to_vec(),
            current: model.params.tensors().to_vec(),
            state,
        }
    }

    /// Weights with the lowest validation loss, or the current ones if no
    /// validation has run.
    pub fn best_params(&self) -> &[Tensor<F>] {
        self.state.best_params.as_deref().unwrap_or(&self.current)
    }

    fn build(&self, expected: Option<&ModelConfig>, weights: &[Tensor<F>]) -> Result<Model<F>> {
        if let Some(cfg) = expected {
            if cfg != &self.config {
                return Err(Error::config(format!(
                    "checkpoint was trained with {:?}, requested model is {:?}",
                    self.config, cfg
                )));
            }
        }
        let mut model = Model::new(self.config.clone(), 0)?;
        let named: Vec<_> = self.names.iter().cloned().zip(weights.iter().cloned()).collect();
        model.load_params(&named)?;
        Ok(model)
    }

    /// Model holding the best weights. With `expected`, the stored
    /// configuration must match it.
    pub fn best_model(&self, expected: Option<&ModelConfig>) -> Result<Model<F>> {
        self.build(expected, self.best_params())
    }

    /// Model holding the weights training would continue from.
    pub fn current_model(&self, expected: Option<&ModelConfig>) -> Result<Model<F>> {
        self.build(expected, &self.current)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bundle = TensorBundle::new();
        let groups: [(&str, Option<&[Tensor<F>]>); 2] = [
            ("current", Some(&self.current)),
            ("best", self.state.best_params.as_deref()),
        ];
        for (prefix, tensors) in groups {
            for (name, t) in self.names.iter().zip(tensors.into_iter().flatten()) {
                bundle.push(format!("{prefix}/{name}"), DynTensor::from_tensor(t));
            }
        }
        let adam = &self.state.adam;
        for (prefix, moments) in [("adam.m", &adam.first_moment), ("adam.v", &adam.second_moment)] {
            for ((name, m), p) in self.names.iter().zip(moments).zip(&self.current) {
                let t = Tensor::new(p.shape().to_vec(), m.clone())?;
                bundle.push(format!("{prefix}/{name}"), DynTensor::from_tensor(&t));
            }
        }
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            train: self.train.clone(),
            iteration: self.state.iteration,
            adam_step: adam.step,
            best_val_loss: self.state.best_val,
            best_iteration: self.state.best_iteration,
            evals_since_best: self.state.evals_since_best,
            stopped: self.state.stopped,
        };
        bundle.meta = serde_json::to_value(meta)
            .map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        bundle.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(bundle.meta.clone())
            .map_err(|e| Error::format(path, format!("not a checkpoint manifest: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown checkpoint format `{}`", meta.format)));
        }
        let names: Vec<String> = bundle
            .tensors
            .iter()
            .filter_map(|(n, _)| n.strip_prefix("current/").map(str::to_string))
            .collect();
        let group = |prefix: &str| -> Result<Vec<Tensor<F>>> {
            names
                .iter()
                .map(|n| bundle.get_as(path, &format!("{prefix}/{n}")))
                .collect()
        };
        let current = group("current")?;
        let best_params = if bundle.tensors.iter().any(|(n, _)| n.starts_with("best/")) {
            Some(group("best")?)
        } else {
            None
        };
        let flat = |ts: Vec<Tensor<F>>| ts.into_iter().map(Tensor::into_data).collect();
        let adam = AdamState {
            step: meta.adam_step,
            hyper: meta.train.adam(),
            first_moment: flat(group("adam.m")?),
            second_moment: flat(group("adam.v")?),
        };
        Ok(Self {
            config: meta.config,
            train: meta.train,
            names,
            current,
            state: TrainState {
                iteration: meta.iteration,
                adam,
                best_params,
                best_val: meta.best_val_loss,
                best_iteration: meta.best_iteration,
                evals_since_best: meta.evals_since_best,
                stopped: meta.stopped,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_rounds_half_up() {
        assert_eq!(to_gray(0.5), 128);
        assert_eq!(to_gray(0.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(-3.0), 0);
        assert_eq!(to_gray(7.0), 255);
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let b = TensorBundle::new().with("x", DynTensor::F32(Tensor::zeros(vec![2])));
        let err = b.get_as::<f64>(Path::new("b.json"), "x").unwrap_err();
        assert!(err.to_string().contains("expected f64"), "{err}");
    }
}
