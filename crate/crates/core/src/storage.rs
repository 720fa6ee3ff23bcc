//! On-disk formats: binary embedding files, patch tables, manifests and
//! prediction tables.
//!
//! Embedding file layout, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `WSIE`                           |
//! | 4      | 2    | version (1)                            |
//! | 6      | 1    | kind (0 = float32, 1 = barcode)        |
//! | 7      | 1    | reserved (0)                           |
//! | 8      | 4    | dim                                    |
//! | 12     | 4    | count                                  |
//! | 16     | 2    | wsi_id length `L`                      |
//! | 18     | L    | wsi_id, UTF-8                          |
//! | 18 + L | ...  | payload                                |
//!
//! Float payloads are `count * dim` IEEE-754 binary32 values in row-major
//! order. Barcode payloads are `count * ceil(dim / 8)` bytes, each row packed
//! MSB first and zero padded to a byte boundary.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metric::{binarize_set, MetricError};
use crate::model::{
    DatasetManifest, EmbeddingKind, EmbeddingSet, ModelError, PatchRecord, PredictionRow,
};

pub const MAGIC: [u8; 4] = *b"WSIE";
pub const VERSION: u16 = 1;
pub const KIND_FLOAT32: u8 = 0;
pub const KIND_BARCODE: u8 = 1;
const FIXED_HEADER_LEN: usize = 18;

/// Default root for resolving relative `embedding_ref` paths.
pub const DATA_DIR_ENV: &str = "MOSAIX_DATA_DIR";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"WSIE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown embedding kind {0}")]
    UnknownKind(u8),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("file ends inside the header")]
    TruncatedHeader,
    #[error("payload has {found} bytes, expected {expected}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{extra} unexpected bytes after the payload")]
    TrailingBytes { extra: usize },
    #[error("expected a float32 embedding file")]
    NotFloat,
    #[error("{path}: {message}")]
    Table { path: String, message: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("slide {wsi_id}: {message}")]
    Mismatch { wsi_id: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl StorageError {
    /// True for failures of the underlying filesystem rather than of content.
    pub fn is_io(&self) -> bool {
        matches!(self, StorageError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes an embedding set into the binary file layout.
pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let id = set.wsi_id().as_bytes();
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + id.len() + set.len() * set.dim() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match set.kind() {
        EmbeddingKind::Float => KIND_FLOAT32,
        EmbeddingKind::Barcode => KIND_BARCODE,
    });
    out.push(0);
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    match set.kind() {
        EmbeddingKind::Float => {
            for v in set.float_data().expect("float set") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        EmbeddingKind::Barcode => out.extend_from_slice(set.packed_data().expect("barcode set")),
    }
    out
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses the binary file layout, validating every header field and the exact
/// payload length.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet, StorageError> {
    if bytes.len() < 4 {
        return Err(StorageError::TruncatedHeader);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(StorageError::BadMagic(magic));
    }
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(StorageError::TruncatedHeader);
    }
    let version = le_u16(&bytes[4..6]);
    if version != VERSION {
        return Err(StorageError::UnsupportedVersion(version));
    }
    let kind = bytes[6];
    if kind != KIND_FLOAT32 && kind != KIND_BARCODE {
        return Err(StorageError::UnknownKind(kind));
    }
    if bytes[7] != 0 {
        return Err(StorageError::BadHeader(format!(
            "reserved byte is {}",
            bytes[7]
        )));
    }
    let dim = le_u32(&bytes[8..12]) as usize;
    let count = le_u32(&bytes[12..16]) as usize;
    if dim == 0 || count == 0 {
        return Err(StorageError::BadHeader(format!(
            "dim {dim} and count {count} must both be at least 1"
        )));
    }
    let id_len = le_u16(&bytes[16..18]) as usize;
    let payload_start = FIXED_HEADER_LEN + id_len;
    if bytes.len() < payload_start {
        return Err(StorageError::TruncatedHeader);
    }
    let wsi_id = std::str::from_utf8(&bytes[FIXED_HEADER_LEN..payload_start])
        .map_err(|_| StorageError::BadHeader("wsi_id is not valid UTF-8".into()))?;

    let row_bytes = if kind == KIND_FLOAT32 {
        dim * 4
    } else {
        dim.div_ceil(8)
    };
    let expected = count * row_bytes;
    let payload = &bytes[payload_start..];
    if payload.len() < expected {
        return Err(StorageError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(StorageError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    let set = if kind == KIND_FLOAT32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingSet::from_float(wsi_id, dim, data)?
    } else {
        EmbeddingSet::from_packed(wsi_id, dim, payload.to_vec())?
    };
    Ok(set)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), StorageError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&encode_embeddings(set))
        .map_err(io_err(path))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, StorageError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_embeddings(&bytes)
}

/// Rewrites a float32 embedding file as min-max barcodes (`dim - 1` bits per row).
pub fn convert_to_barcodes(float_file: &Path, out_file: &Path) -> Result<(), StorageError> {
    let set = read_embeddings(float_file)?;
    if set.kind() != EmbeddingKind::Float {
        return Err(StorageError::NotFloat);
    }
    write_embeddings(&binarize_set(&set)?, out_file)
}

fn table_err(path: &str, message: impl Into<String>) -> StorageError {
    StorageError::Table {
        path: path.to_owned(),
        message: message.into(),
    }
}

/// Parses a patch table: header `patch_id,x,y,width,height,f0,...,f{F-1}`.
pub fn parse_patch_table<R: Read>(
    reader: R,
    source: &str,
) -> Result<Vec<PatchRecord>, StorageError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| table_err(source, e.to_string()))?
        .clone();
    let fixed = ["patch_id", "x", "y", "width", "height"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(table_err(
            source,
            "header must start with patch_id,x,y,width,height",
        ));
    }
    for (i, name) in header.iter().skip(fixed.len()).enumerate() {
        if name != format!("f{i}") {
            return Err(table_err(
                source,
                format!(
                    "feature column {} is named '{name}', expected 'f{i}'",
                    i + fixed.len()
                ),
            ));
        }
    }

    let mut patches = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| table_err(source, e.to_string()))?;
        let at = |field: &str| format!("row {}: bad {field}", line + 2);
        let get = |i: usize| record.get(i).unwrap_or("");
        let patch_id = get(0)
            .parse()
            .map_err(|_| table_err(source, at("patch_id")))?;
        let x = get(1).parse().map_err(|_| table_err(source, at("x")))?;
        let y = get(2).parse().map_err(|_| table_err(source, at("y")))?;
        let width = get(3).parse().map_err(|_| table_err(source, at("width")))?;
        let height = get(4)
            .parse()
            .map_err(|_| table_err(source, at("height")))?;
        let features = (fixed.len()..header.len())
            .map(|i| {
                get(i)
                    .parse::<f64>()
                    .map_err(|_| table_err(source, at(&header[i])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        patches.push(PatchRecord::new(patch_id, x, y, width, height, features)?);
    }
    Ok(patches)
}

pub fn read_patch_table(path: &Path) -> Result<Vec<PatchRecord>, StorageError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_patch_table(file, &path.display().to_string())
}

pub fn write_patch_table(patches: &[PatchRecord], path: &Path) -> Result<(), StorageError> {
    let n_features = patches.first().map_or(0, |p| p.color_features.len());
    let mut out = String::from("patch_id,x,y,width,height");
    for i in 0..n_features {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for p in patches {
        out.push_str(&format!(
            "{},{},{},{},{}",
            p.patch_id, p.x, p.y, p.width, p.height
        ));
        for f in &p.color_features {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StorageError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), StorageError> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|source| StorageError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Resolves an `embedding_ref`: absolute refs as-is, relative refs against
/// `data_dir` when given, otherwise against the manifest's directory.
pub fn resolve_embedding_ref(
    embedding_ref: &str,
    manifest_dir: &Path,
    data_dir: Option<&Path>,
) -> PathBuf {
    let p = Path::new(embedding_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_dir.unwrap_or(manifest_dir).join(p)
    }
}

/// `--data-dir` if given, else `MOSAIX_DATA_DIR` if set.
pub fn data_dir_from_env(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Loads every slide's embedding set, checking that the stored wsi_id matches
/// the manifest and that there is one row per mosaic patch.
pub fn load_embeddings(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    data_dir: Option<&Path>,
) -> Result<HashMap<String, EmbeddingSet>, StorageError> {
    let mut out = HashMap::with_capacity(manifest.wsis.len());
    for wsi in &manifest.wsis {
        let path = resolve_embedding_ref(&wsi.embedding_ref, manifest_dir, data_dir);
        let set = read_embeddings(&path)?;
        if set.wsi_id() != wsi.wsi_id {
            return Err(StorageError::Mismatch {
                wsi_id: wsi.wsi_id.clone(),
                message: format!(
                    "embedding file {} is for slide '{}'",
                    path.display(),
                    set.wsi_id()
                ),
            });
        }
        if set.len() != wsi.mosaic.len() {
            return Err(StorageError::Mismatch {
                wsi_id: wsi.wsi_id.clone(),
                message: format!(
                    "embedding file has {} rows but the mosaic lists {} patches",
                    set.len(),
                    wsi.mosaic.len()
                ),
            });
        }
        out.insert(wsi.wsi_id.clone(), set);
    }
    Ok(out)
}

const PREDICTION_HEADER: [&str; 6] = [
    "query_wsi_id",
    "k",
    "true_label",
    "predicted_label",
    "n_candidates",
    "tie_broken",
];

/// Writes predictions as
/// `query_wsi_id,k,true_label,predicted_label,n_candidates,tie_broken`.
pub fn write_predictions<W: Write>(rows: &[PredictionRow], writer: W) -> Result<(), StorageError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(PREDICTION_HEADER)
        .map_err(|e| table_err("predictions", e.to_string()))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| table_err("predictions", e.to_string()))?;
    }
    w.flush()
        .map_err(|e| table_err("predictions", e.to_string()))
}

pub fn write_predictions_file(rows: &[PredictionRow], path: &Path) -> Result<(), StorageError> {
    let mut buf = Vec::new();
    write_predictions(rows, &mut buf)?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_predictions<R: Read>(
    reader: R,
    source: &str,
) -> Result<Vec<PredictionRow>, StorageError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| table_err(source, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let expected = PREDICTION_HEADER;
    if header != expected {
        return Err(table_err(
            source,
            format!("header must be {}", expected.join(",")),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| table_err(source, e.to_string())))
        .collect()
}

pub fn read_predictions_file(path: &Path) -> Result<Vec<PredictionRow>, StorageError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_predictions(file, &path.display().to_string())
}
