//! On-disk formats. Every binary blob is little-endian and row-major; every
//! JSON header carries a `kind` field naming what it describes.

use std::fs;
use std::path::{Path, PathBuf};

use anchorlab_core::datasets::{LabeledDataset, Transform};
use anchorlab_core::losses::LossSpec;
use anchorlab_core::prototypes::{self, Generator, PrototypeSet};
use anchorlab_core::trainer::{Dense, EpochMetrics, ModelConfig, Parameters, RngState, TrainState};
use anchorlab_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Location, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::json(path, e))
}

fn f64_matrix(path: &Path, rows: usize, cols: usize, bytes: &[u8]) -> Result<Matrix> {
    let want = rows * cols * 8;
    if bytes.len() != want {
        let at = bytes.len().min(want) as u64;
        return Err(CliError::format(
            path,
            Location::Byte(at),
            format!("expected {want} bytes for a {rows}x{cols} f64 matrix, found {}", bytes.len()),
        ));
    }
    Ok(Matrix::from_le_bytes(rows, cols, bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoHeader {
    pub kind: String,
    pub k: usize,
    pub d: usize,
    pub generator: Generator,
    pub seed: Option<u64>,
    pub tolerance: f64,
    pub max_gram_dev: f64,
    pub max_norm_dev: f64,
    pub min_angle_deg: f64,
    /// File name of the row-major f64 blob, relative to the header.
    pub data_file: String,
}

/// Writes `<stem>.proto.json` and `<stem>.proto.bin` into `dir`.
pub fn write_prototypes(dir: &Path, stem: &str, p: &PrototypeSet) -> Result<(PathBuf, PathBuf)> {
    let rep = prototypes::verify_equiangular(p, p.tolerance());
    let bin_name = format!("{stem}.proto.bin");
    let header = ProtoHeader {
        kind: "prototype_set".into(),
        k: p.k(),
        d: p.d(),
        generator: p.generator(),
        seed: p.seed(),
        tolerance: p.tolerance(),
        max_gram_dev: rep.max_gram_dev,
        max_norm_dev: rep.max_norm_dev,
        min_angle_deg: rep.min_angle_deg,
        data_file: bin_name.clone(),
    };
    let json_path = dir.join(format!("{stem}.proto.json"));
    let bin_path = dir.join(bin_name);
    write_bytes(&bin_path, &p.vectors().to_le_bytes())?;
    write_json(&json_path, &header)?;
    Ok((json_path, bin_path))
}

/// Accepts the header or the blob path; the other is found next to it.
pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    let json_path = match path.to_str().and_then(|s| s.strip_suffix(".proto.bin")) {
        Some(stem) => PathBuf::from(format!("{stem}.proto.json")),
        None => path.to_path_buf(),
    };
    let header: ProtoHeader = read_json(&json_path)?;
    let bin_path = json_path.parent().unwrap_or(Path::new("")).join(&header.data_file);
    let bytes = read_bytes(&bin_path)?;
    let m = f64_matrix(&bin_path, header.k, header.d, &bytes)?;
    Ok(PrototypeSet::from_matrix(m, header.generator, header.seed, header.tolerance)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub kind: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub has_clean_labels: bool,
    pub class_counts: Vec<usize>,
    pub clean_class_counts: Vec<usize>,
    pub provenance: Vec<Transform>,
}

pub const BUNDLE_DATA: &str = "data.bin";
pub const BUNDLE_LABELS: &str = "labels.bin";
pub const BUNDLE_CLEAN: &str = "clean_labels.bin";
pub const BUNDLE_META: &str = "meta.json";
pub const BUNDLE_COUNTS: &str = "counts.csv";

fn labels_to_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as i32).to_le_bytes()).collect()
}

fn labels_from_bytes(path: &Path, n: usize, bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() != n * 4 {
        return Err(CliError::format(
            path,
            Location::Byte(bytes.len().min(n * 4) as u64),
            format!("expected {} bytes for {n} i32 labels, found {}", n * 4, bytes.len()),
        ));
    }
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = i32::from_le_bytes(c.try_into().expect("chunk of 4"));
            usize::try_from(v)
                .map_err(|_| CliError::format(path, Location::Byte(4 * i as u64), format!("negative label {v}")))
        })
        .collect()
}

/// A dataset as `data.bin` (f64), `labels.bin` and `clean_labels.bin`
/// (i32), `meta.json` and `counts.csv`.
pub fn write_bundle(dir: &Path, d: &LabeledDataset) -> Result<()> {
    write_bytes(&dir.join(BUNDLE_DATA), &d.features().to_le_bytes())?;
    write_bytes(&dir.join(BUNDLE_LABELS), &labels_to_bytes(d.labels()))?;
    let clean_path = dir.join(BUNDLE_CLEAN);
    match d.clean_labels() {
        Some(clean) => write_bytes(&clean_path, &labels_to_bytes(clean))?,
        None if clean_path.exists() => fs::remove_file(&clean_path).map_err(|e| CliError::io(&clean_path, e))?,
        None => {}
    }
    let meta = BundleMeta {
        kind: "dataset_bundle".into(),
        n: d.len(),
        m: d.input_dim(),
        k: d.k(),
        has_clean_labels: d.clean_labels().is_some(),
        class_counts: d.class_counts(),
        clean_class_counts: d.clean_class_counts(),
        provenance: d.provenance().to_vec(),
    };
    write_json(&dir.join(BUNDLE_META), &meta)?;
    write_counts_csv(&dir.join(BUNDLE_COUNTS), &meta.class_counts, &meta.clean_class_counts)
}

fn write_counts_csv(path: &Path, counts: &[usize], clean: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(["class", "count", "clean_count"]).map_err(csv_err)?;
    for (c, (n, cn)) in counts.iter().zip(clean).enumerate() {
        w.write_record([c.to_string(), n.to_string(), cn.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

pub fn read_bundle(dir: &Path) -> Result<LabeledDataset> {
    let meta: BundleMeta = read_json(&dir.join(BUNDLE_META))?;
    let data_path = dir.join(BUNDLE_DATA);
    let features = f64_matrix(&data_path, meta.n, meta.m, &read_bytes(&data_path)?)?;
    let labels_path = dir.join(BUNDLE_LABELS);
    let labels = labels_from_bytes(&labels_path, meta.n, &read_bytes(&labels_path)?)?;
    let clean = if meta.has_clean_labels {
        let p = dir.join(BUNDLE_CLEAN);
        Some(labels_from_bytes(&p, meta.n, &read_bytes(&p)?)?)
    } else {
        None
    };
    Ok(LabeledDataset::new(features, labels, clean, meta.k, meta.provenance)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub epoch: u64,
    pub init_seed: u64,
    /// Observed class counts of the training set, used for group accuracy.
    pub train_class_counts: Vec<usize>,
    pub rng: RngState,
    pub data_file: String,
    /// Layer weights and biases in forward order, then the classifier, then
    /// the momentum buffers in the same order.
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CHECKPOINT_BIN: &str = "checkpoint.bin";

fn tensors_of<'a>(prefix: &str, p: &'a Parameters) -> Vec<(String, &'a Matrix, Option<&'a [f64]>)> {
    let mut out = Vec::new();
    for (l, layer) in p.layers.iter().enumerate() {
        out.push((format!("{prefix}layer{l}.weights"), &layer.weights, None));
        out.push((format!("{prefix}layer{l}.bias"), &layer.weights, Some(layer.bias.as_slice())));
    }
    out.push((format!("{prefix}classifier"), &p.classifier, None));
    out
}

pub fn write_checkpoint(
    dir: &Path,
    state: &TrainState,
    loss: &LossSpec,
    init_seed: u64,
    train_class_counts: &[usize],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let all = tensors_of("", state.parameters())
        .into_iter()
        .chain(tensors_of("momentum.", state.momentum()));
    for (name, m, bias) in all {
        let (rows, cols, bytes) = match bias {
            Some(b) => (1, b.len(), b.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            None => (m.rows(), m.cols(), m.to_le_bytes()),
        };
        entries.push(TensorEntry {
            name,
            offset: blob.len(),
            rows,
            cols,
        });
        blob.extend_from_slice(&bytes);
    }
    write_bytes(&dir.join(CHECKPOINT_BIN), &blob)?;
    let header = CheckpointHeader {
        kind: "checkpoint".into(),
        model: state.config().clone(),
        loss: loss.clone(),
        epoch: state.epoch(),
        init_seed,
        train_class_counts: train_class_counts.to_vec(),
        rng: state.rng_state(),
        data_file: CHECKPOINT_BIN.into(),
        tensors: entries,
    };
    write_json(&dir.join(CHECKPOINT_JSON), &header)
}

/// Byte range of a named tensor inside the checkpoint blob.
pub fn tensor_range(header: &CheckpointHeader, name: &str) -> Option<std::ops::Range<usize>> {
    header
        .tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| t.offset..t.offset + t.rows * t.cols * 8)
}

pub fn read_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointHeader)> {
    let header: CheckpointHeader = read_json(&dir.join(CHECKPOINT_JSON))?;
    let bin_path = dir.join(&header.data_file);
    let blob = read_bytes(&bin_path)?;
    let get = |name: &str| -> Result<Matrix> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::format(&bin_path, Location::Byte(0), format!("missing tensor {name}")))?;
        let end = entry.offset + entry.rows * entry.cols * 8;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            CliError::format(&bin_path, Location::Byte(blob.len() as u64), format!("tensor {name} runs past the end"))
        })?;
        f64_matrix(&bin_path, entry.rows, entry.cols, bytes)
    };
    let layers = header.model.hidden_dims.len() + usize::from(!header.model.hidden_dims.is_empty());
    let load = |prefix: &str| -> Result<Parameters> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            out.push(Dense {
                weights: get(&format!("{prefix}layer{l}.weights"))?,
                bias: get(&format!("{prefix}layer{l}.bias"))?.into_vec(),
            });
        }
        Ok(Parameters {
            layers: out,
            classifier: get(&format!("{prefix}classifier"))?,
        })
    };
    let params = load("")?;
    let momentum = load("momentum.")?;
    let state = TrainState::from_parts(header.model.clone(), params, Some(momentum), header.epoch, &header.rng)?;
    Ok((state, header))
}

/// Column names of `metrics.csv` for `k` classes.
pub fn metrics_header(k: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "epoch",
        "train_loss",
        "train_acc",
        "eval_acc",
        "min_sample_margin",
        "max_sample_margin",
        "mean_feature_norm",
        "mean_prototype_norm",
        "min_prototype_angle_deg",
        "learning_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..k).map(|c| format!("acc_class_{c}")));
    cols
}

/// One row per epoch; a class absent from the evaluation set leaves its
/// accuracy cell empty.
pub fn metrics_csv(k: usize, rows: &[EpochMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(metrics_header(k)).expect("in-memory write");
    for m in rows {
        let mut rec = vec![
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
            m.eval_acc.to_string(),
            m.min_sample_margin.to_string(),
            m.max_sample_margin.to_string(),
            m.mean_feature_norm.to_string(),
            m.mean_prototype_norm.to_string(),
            m.min_prototype_angle_deg.to_string(),
            m.learning_rate.to_string(),
        ];
        rec.extend(m.per_class_acc.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// A tidy CSV: one header row then one row per record.
pub fn tidy_csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
