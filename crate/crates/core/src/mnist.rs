//! MNIST IDX parsing and the 32-superpixel coarse-grained data set.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IdxError, Result};
use crate::sampler::stream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const FEATURES: usize = 32;
pub const PIPELINE_VERSION: &str = "cg-mnist/1";

const TRIM: usize = 2;
const BLOCK: usize = 4;
const GRID: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMnist {
    /// Row-major 28×28 images.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawMnist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or(IdxError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::WrongMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Vec<Vec<u8>>, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(IdxError::BadDimensions { rows, cols });
    }
    let expected = 16 + count * SIDE * SIDE;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[16..expected]
        .chunks_exact(SIDE * SIDE)
        .map(<[u8]>::to_vec)
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::BadLabel(bad));
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses a matching pair of IDX files and returns them with their digests.
pub fn load_idx_with_digests(images_path: &Path, labels_path: &Path) -> Result<(RawMnist, Provenance)> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let images =
        parse_idx_images(&image_bytes).map_err(|e| Error::from(e).context(images_path.display().to_string()))?;
    let labels =
        parse_idx_labels(&label_bytes).map_err(|e| Error::from(e).context(labels_path.display().to_string()))?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        }
        .into());
    }
    let provenance = Provenance {
        images_sha256: sha256_hex(&image_bytes),
        labels_sha256: sha256_hex(&label_bytes),
        images_file: file_name(images_path),
        labels_file: file_name(labels_path),
        pipeline_version: PIPELINE_VERSION.into(),
    };
    Ok((RawMnist { images, labels }, provenance))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawMnist> {
    load_idx_with_digests(images_path, labels_path).map(|(raw, _)| raw)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Whether block `(r, c)` of the 6×6 grid is one of the four dropped corners.
fn is_corner(r: usize, c: usize) -> bool {
    (r == 0 || r == GRID - 1) && (c == 0 || c == GRID - 1)
}

/// Mean of every 4×4 block of the central 24×24 region, in row-major block
/// order, scaled to `[0, 1]`. All 36 blocks, corners included.
pub fn block_means(image: &[u8]) -> [f64; GRID * GRID] {
    assert_eq!(image.len(), SIDE * SIDE, "image must be 28x28");
    let mut out = [0.0; GRID * GRID];
    for (k, mean) in out.iter_mut().enumerate() {
        let (br, bc) = (k / GRID, k % GRID);
        let mut sum = 0u32;
        for r in 0..BLOCK {
            for c in 0..BLOCK {
                let (y, x) = (TRIM + br * BLOCK + r, TRIM + bc * BLOCK + c);
                sum += u32::from(image[y * SIDE + x]);
            }
        }
        *mean = f64::from(sum) / (BLOCK * BLOCK) as f64 / 255.0;
    }
    out
}

/// The 32 superpixels: block means with the four corner blocks removed,
/// row-major over the remaining blocks.
pub fn coarse_grain(image: &[u8]) -> [f64; FEATURES] {
    let blocks = block_means(image);
    let mut out = [0.0; FEATURES];
    let kept = (0..GRID * GRID).filter(|&k| !is_corner(k / GRID, k % GRID));
    for (slot, k) in out.iter_mut().zip(kept) {
        *slot = blocks[k];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub images_sha256: String,
    pub labels_sha256: String,
    pub images_file: String,
    pub labels_file: String,
    pub pipeline_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub provenance: Option<Provenance>,
}

const HEADER_PREFIX: &str = "cgmnist-dataset v1";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    rows: usize,
    features: usize,
    data_sha256: String,
    provenance: Option<Provenance>,
}

impl CgDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.ncols() != FEATURES {
            return Err(Error::Dimension(format!(
                "expected {FEATURES} features, got {}",
                features.ncols()
            )));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(x) = features.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidArgument(format!("feature {x} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::InvalidArgument(format!("label {l} out of range 0..=9")));
        }
        Ok(Self {
            features,
            labels,
            provenance: None,
        })
    }

    pub fn from_raw(raw: &RawMnist, provenance: Option<Provenance>) -> Self {
        let mut features = Array2::zeros((raw.len(), FEATURES));
        for (mut row, image) in features.outer_iter_mut().zip(&raw.images) {
            row.assign(&ndarray::ArrayView1::from(&coarse_grain(image)));
        }
        Self {
            features,
            labels: raw.labels.iter().map(|&l| usize::from(l)).collect(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn head(&self, rows: usize) -> Self {
        self.subset(&(0..rows.min(self.len())).collect::<Vec<_>>())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    /// Header line, then `label,f1,...,f32` per row with round-trip exact
    /// decimal features; metadata goes to `<path>.meta.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut body = Vec::new();
        writeln!(body, "{HEADER_PREFIX} features={FEATURES} rows={}", self.len()).map_err(io)?;
        {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut body);
            for (row, &label) in self.features.outer_iter().zip(&self.labels) {
                let record = std::iter::once(label.to_string()).chain(row.iter().map(|x| x.to_string()));
                w.write_record(record)
                    .map_err(|e| Error::DatasetFormat(e.to_string()))?;
            }
            w.flush().map_err(io)?;
        }
        let file = std::fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        out.write_all(&body).map_err(io)?;
        out.flush().map_err(io)?;

        let sidecar = Sidecar {
            format: HEADER_PREFIX.into(),
            rows: self.len(),
            features: FEATURES,
            data_sha256: sha256_hex(&body),
            provenance: self.provenance.clone(),
        };
        let meta_path = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&meta_path, text + "\n").map_err(|source| Error::Io {
            path: meta_path,
            source,
        })
    }

    /// Reads a data set file; provenance comes from the sidecar if present.
    pub fn read(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::DatasetFormat(format!("{}: {msg}", path.display()));
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let rows =
            parse_header(header.trim_end()).ok_or_else(|| bad(format!("bad header line '{}'", header.trim_end())))?;

        let mut features = Vec::with_capacity(rows * FEATURES);
        let mut labels = Vec::with_capacity(rows);
        let mut csv = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        for (n, record) in csv.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != FEATURES + 1 {
                return Err(bad(format!(
                    "row {n} has {} fields, expected {}",
                    record.len(),
                    FEATURES + 1
                )));
            }
            labels.push(
                record[0]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("row {n} label: {e}")))?,
            );
            for field in record.iter().skip(1) {
                features.push(field.parse::<f64>().map_err(|e| bad(format!("row {n}: {e}")))?);
            }
        }
        if labels.len() != rows {
            return Err(bad(format!("header says {rows} rows, found {}", labels.len())));
        }
        let features = Array2::from_shape_vec((rows, FEATURES), features).map_err(|e| bad(e.to_string()))?;
        let mut data = Self::new(features, labels).map_err(|e| bad(e.to_string()))?;

        let meta_path = Self::sidecar_path(path);
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|source| Error::Io {
                path: meta_path.clone(),
                source,
            })?;
            let sidecar: Sidecar = serde_json::from_str(&text)
                .map_err(|e| Error::DatasetFormat(format!("{}: {e}", meta_path.display())))?;
            if sidecar.rows != rows {
                return Err(bad(format!("sidecar records {} rows, file has {rows}", sidecar.rows)));
            }
            data.provenance = sidecar.provenance;
        }
        Ok(data)
    }

    /// Digest of the labels and feature bits, independent of provenance.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (row, label) in self.features.outer_iter().zip(&self.labels) {
            hasher.update(label.to_le_bytes());
            for x in row {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn parse_header(line: &str) -> Option<usize> {
    let rest = line.strip_prefix(HEADER_PREFIX)?.trim();
    let mut parts = rest.split_whitespace();
    if parts.next()? != format!("features={FEATURES}") {
        return None;
    }
    let rows = parts.next()?.strip_prefix("rows=")?.parse().ok()?;
    parts.next().is_none().then_some(rows)
}

/// Disjoint contiguous parts; the last one absorbs the remainder. With a
/// seed, rows are shuffled first.
pub fn split_training_sets(data: &CgDataset, n_splits: usize, shuffle_seed: Option<u64>) -> Result<Vec<CgDataset>> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("n_splits must be at least 1".into()));
    }
    if n_splits > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows into {n_splits} sets",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut stream(seed, &[]));
    }
    let size = data.len() / n_splits;
    Ok((0..n_splits)
        .map(|k| {
            let end = if k + 1 == n_splits { data.len() } else { (k + 1) * size };
            data.subset(&order[k * size..end])
        })
        .collect())
}
