//! Readers for external datasets: IDX (the MNIST container) and CSV.

use std::path::Path;

use anchorlab_core::datasets::{LabeledDataset, Transform};
use anchorlab_core::Matrix;

use crate::error::{CliError, Location, Result};
use crate::formats::read_bytes;

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

/// Parse an IDX file: two zero bytes, a type code, the rank, one big-endian
/// `u32` per dimension, then the payload. Only the unsigned-byte type is
/// accepted.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxArray> {
    let bad = |at: usize, msg: String| CliError::format(path, Location::Byte(at as u64), msg);
    if bytes.len() < 4 {
        return Err(bad(bytes.len(), "file ends inside the magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(bad(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(bad(3, "rank must be at least 1".into()));
    }
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(bad(bytes.len(), format!("file ends inside the {rank} dimension sizes")));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let payload = &bytes[header_len..];
    match expected {
        Some(n) if n == payload.len() => Ok(IdxArray {
            dims,
            data: payload.to_vec(),
        }),
        Some(n) if payload.len() < n => Err(bad(bytes.len(), format!("payload truncated: {n} bytes expected"))),
        Some(n) => Err(bad(header_len + n, "trailing bytes after the payload".into())),
        None => Err(bad(4, "dimension product overflows".into())),
    }
}

/// Images (rank >= 2, flattened per sample, scaled to [0, 1]) plus a rank-1
/// label file. Without `k` the class count is the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path, k: Option<usize>) -> Result<LabeledDataset> {
    let img = parse_idx(images, &read_bytes(images)?)?;
    let lab = parse_idx(labels, &read_bytes(labels)?)?;
    if img.dims.len() < 2 {
        return Err(CliError::format(images, Location::Byte(3), "image file needs rank >= 2"));
    }
    if lab.dims.len() != 1 {
        return Err(CliError::format(labels, Location::Byte(3), "label file must have rank 1"));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(CliError::format(
            labels,
            Location::Byte(4),
            format!("{} labels for {n} images", lab.dims[0]),
        ));
    }
    let m: usize = img.dims[1..].iter().product();
    let features = Matrix::from_vec(n, m, img.data.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let y: Vec<usize> = lab.data.iter().map(|&v| v as usize).collect();
    let k = resolve_k(labels, &y, k, |i| Location::Byte(8 + i as u64))?;
    let source = images.display().to_string();
    Ok(LabeledDataset::new(
        features,
        y,
        None,
        k,
        vec![Transform::Loaded {
            format: "idx".into(),
            source,
        }],
    )?)
}

fn resolve_k(path: &Path, y: &[usize], k: Option<usize>, at: impl Fn(usize) -> Location) -> Result<usize> {
    match k {
        Some(k) => match y.iter().position(|&l| l >= k) {
            Some(i) => Err(CliError::format(path, at(i), format!("label {} outside {k} classes", y[i]))),
            None => Ok(k),
        },
        None => Ok(y.iter().max().map_or(0, |m| m + 1)),
    }
}

/// A headed CSV with an integer `label` column; every other column is a
/// numeric feature.
pub fn load_csv(path: &Path, label_column: &str, k: Option<usize>) -> Result<LabeledDataset> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line());
    let headers = reader
        .headers()
        .map_err(|e| CliError::format(path, Location::Line(line_of(&e).max(1)), e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| CliError::format(path, Location::Line(1), format!("no `{label_column}` column")))?;
    let m = headers.len() - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::format(path, Location::Line(line_of(&e)), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (i, field) in rec.iter().enumerate() {
            let field = field.trim();
            if i == label_idx {
                let l: usize = field
                    .parse()
                    .map_err(|_| CliError::format(path, Location::Line(line), format!("bad label `{field}`")))?;
                y.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| CliError::format(path, Location::Line(line), format!("bad number `{field}`")))?;
                data.push(v);
            }
        }
        lines.push(line);
    }
    let k = resolve_k(path, &y, k, |i| Location::Line(lines[i]))?;
    let features = Matrix::from_vec(y.len(), m, data)?;
    Ok(LabeledDataset::new(
        features,
        y,
        None,
        k,
        vec![Transform::Loaded {
            format: "csv".into(),
            source: path.display().to_string(),
        }],
    )?)
}
