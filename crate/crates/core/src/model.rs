//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::PatchDistanceMetric;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("embedding set must contain at least one row")]
    EmptySet,
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("row data length {len} is not a multiple of dim {dim}")]
    RowLength { len: usize, dim: usize },
    #[error("barcode entry at row {row}, column {col} is not 0 or 1")]
    NotBinary { row: usize, col: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("barcode row {row} has non-zero padding bits")]
    PaddingBits { row: usize },
    #[error("patch {patch_id} has non-positive extent {width}x{height}")]
    BadExtent {
        patch_id: u64,
        width: u32,
        height: u32,
    },
    #[error("k values must be non-empty and each at least 1")]
    BadKValues,
}

/// One tissue patch of a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: u64,
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
    /// Color descriptor used for mosaic clustering. Opaque to the engine.
    pub color_features: Vec<f64>,
}

impl PatchRecord {
    pub fn new(
        patch_id: u64,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
        color_features: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::BadExtent {
                patch_id,
                width,
                height,
            });
        }
        Ok(Self {
            patch_id,
            x,
            y,
            width,
            height,
            color_features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Float,
    Barcode,
}

#[derive(Debug, Clone)]
enum Rows {
    /// Row-major `count x dim` values.
    Float(Vec<f32>),
    /// Row-major bit-packed rows, `dim.div_ceil(8)` bytes each, MSB first.
    Barcode(Vec<u8>),
}

/// The embedded mosaic of one slide: one row per mosaic patch.
///
/// Float sets hold `f32` rows; barcode sets hold bit-packed rows with the most
/// significant bit of each byte first and zero padding at the end of a row.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    wsi_id: String,
    dim: usize,
    count: usize,
    rows: Rows,
}

impl EmbeddingSet {
    /// Builds a float set from row-major data.
    pub fn from_float(
        wsi_id: impl Into<String>,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ModelError::RowLength {
                len: data.len(),
                dim,
            });
        }
        let count = data.len() / dim;
        if count == 0 {
            return Err(ModelError::EmptySet);
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self {
            wsi_id: wsi_id.into(),
            dim,
            count,
            rows: Rows::Float(data),
        })
    }

    pub fn from_rows(wsi_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self, ModelError> {
        let dim = rows.first().ok_or(ModelError::EmptySet)?.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(ModelError::RowLength {
                    len: row.len(),
                    dim,
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_float(wsi_id, dim, data)
    }

    /// Builds a barcode set from unpacked rows of 0/1 entries.
    pub fn from_bits(wsi_id: impl Into<String>, rows: &[Vec<u8>]) -> Result<Self, ModelError> {
        let dim = rows.first().ok_or(ModelError::EmptySet)?.len();
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        let stride = dim.div_ceil(8);
        let mut packed = vec![0u8; stride * rows.len()];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(ModelError::RowLength {
                    len: row.len(),
                    dim,
                });
            }
            for (c, &bit) in row.iter().enumerate() {
                match bit {
                    0 => {}
                    1 => packed[r * stride + c / 8] |= 0x80 >> (c % 8),
                    _ => return Err(ModelError::NotBinary { row: r, col: c }),
                }
            }
        }
        Self::from_packed(wsi_id, dim, packed)
    }

    /// Builds a barcode set from already packed rows.
    pub fn from_packed(
        wsi_id: impl Into<String>,
        dim: usize,
        packed: Vec<u8>,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        let stride = dim.div_ceil(8);
        if !packed.len().is_multiple_of(stride) {
            return Err(ModelError::RowLength {
                len: packed.len(),
                dim,
            });
        }
        let count = packed.len() / stride;
        if count == 0 {
            return Err(ModelError::EmptySet);
        }
        let pad = stride * 8 - dim;
        if pad > 0 {
            let mask = (1u8 << pad) - 1;
            for row in 0..count {
                if packed[row * stride + stride - 1] & mask != 0 {
                    return Err(ModelError::PaddingBits { row });
                }
            }
        }
        Ok(Self {
            wsi_id: wsi_id.into(),
            dim,
            count,
            rows: Rows::Barcode(packed),
        })
    }

    pub fn wsi_id(&self) -> &str {
        &self.wsi_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows (mosaic patches).
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn kind(&self) -> EmbeddingKind {
        match self.rows {
            Rows::Float(_) => EmbeddingKind::Float,
            Rows::Barcode(_) => EmbeddingKind::Barcode,
        }
    }

    /// Bytes per packed barcode row.
    pub fn packed_stride(&self) -> usize {
        self.dim.div_ceil(8)
    }

    pub fn float_data(&self) -> Option<&[f32]> {
        match &self.rows {
            Rows::Float(data) => Some(data),
            Rows::Barcode(_) => None,
        }
    }

    pub fn packed_data(&self) -> Option<&[u8]> {
        match &self.rows {
            Rows::Float(_) => None,
            Rows::Barcode(data) => Some(data),
        }
    }

    pub fn float_row(&self, i: usize) -> Option<&[f32]> {
        let data = self.float_data()?;
        data.get(i * self.dim..(i + 1) * self.dim)
    }

    pub fn packed_row(&self, i: usize) -> Option<&[u8]> {
        let stride = self.packed_stride();
        self.packed_data()?.get(i * stride..(i + 1) * stride)
    }

    /// Unpacked 0/1 entries of barcode row `i`.
    pub fn bit_row(&self, i: usize) -> Option<Vec<u8>> {
        let row = self.packed_row(i)?;
        Some(
            (0..self.dim)
                .map(|c| (row[c / 8] >> (7 - c % 8)) & 1)
                .collect(),
        )
    }

    /// Copy of this set with every float entry multiplied by `factor`.
    /// Barcode sets are returned unchanged.
    pub fn scaled(&self, factor: f32) -> Result<Self, ModelError> {
        match &self.rows {
            Rows::Float(data) => Self::from_float(
                self.wsi_id.clone(),
                self.dim,
                data.iter().map(|v| v * factor).collect(),
            ),
            Rows::Barcode(_) => Ok(self.clone()),
        }
    }

    pub fn with_wsi_id(mut self, wsi_id: impl Into<String>) -> Self {
        self.wsi_id = wsi_id.into();
        self
    }
}

/// Equality is bitwise on float payloads.
impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        if self.wsi_id != other.wsi_id || self.dim != other.dim || self.count != other.count {
            return false;
        }
        match (&self.rows, &other.rows) {
            (Rows::Float(a), Rows::Float(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Rows::Barcode(a), Rows::Barcode(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for EmbeddingSet {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsiRecord {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: String,
    pub mosaic: Vec<u64>,
    pub embedding_ref: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelGranularity {
    /// All slides of a patient carry the patient's label.
    #[default]
    Patient,
    /// Slides of one patient may carry different labels.
    Slide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Class order here fixes the column order of reports.
    pub classes: Vec<String>,
    #[serde(default)]
    pub label_granularity: LabelGranularity,
    pub wsis: Vec<WsiRecord>,
}

impl DatasetManifest {
    pub fn wsi(&self, wsi_id: &str) -> Option<&WsiRecord> {
        self.wsis.iter().find(|w| w.wsi_id == wsi_id)
    }

    pub fn patient_count(&self) -> usize {
        self.wsis
            .iter()
            .map(|w| w.patient_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// A manifest rule broken by one slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationRule {
    ConflictingPatientLabel,
    DuplicateClass,
    DuplicateMosaicPatch,
    DuplicateWsiId,
    EmptyMosaic,
    UnknownLabel,
}

impl ViolationRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::ConflictingPatientLabel => "conflicting_patient_label",
            Self::DuplicateClass => "duplicate_class",
            Self::DuplicateMosaicPatch => "duplicate_mosaic_patch",
            Self::DuplicateWsiId => "duplicate_wsi_id",
            Self::EmptyMosaic => "empty_mosaic",
            Self::UnknownLabel => "unknown_label",
        }
    }
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    /// Offending slide. Empty for dataset-level rules such as duplicate classes.
    pub wsi_id: String,
    pub rule: ViolationRule,
}

impl Violation {
    pub fn new(rule: ViolationRule, wsi_id: impl Into<String>) -> Self {
        Self {
            wsi_id: wsi_id.into(),
            rule,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.wsi_id.is_empty() {
            write!(f, "{}", self.rule)
        } else {
            write!(f, "{}: {}", self.rule, self.wsi_id)
        }
    }
}

/// Lists every manifest rule violation, sorted by wsi_id and then rule name.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = BTreeSet::new();

    let mut seen_classes = BTreeSet::new();
    for class in &manifest.classes {
        if !seen_classes.insert(class.as_str()) {
            out.insert(Violation::new(ViolationRule::DuplicateClass, ""));
        }
    }

    let mut id_counts: HashMap<&str, usize> = HashMap::new();
    for wsi in &manifest.wsis {
        *id_counts.entry(wsi.wsi_id.as_str()).or_default() += 1;
    }

    let mut patient_labels: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for wsi in &manifest.wsis {
        if id_counts[wsi.wsi_id.as_str()] > 1 {
            out.insert(Violation::new(ViolationRule::DuplicateWsiId, &wsi.wsi_id));
        }
        if !seen_classes.contains(wsi.label.as_str()) {
            out.insert(Violation::new(ViolationRule::UnknownLabel, &wsi.wsi_id));
        }
        if wsi.mosaic.is_empty() {
            out.insert(Violation::new(ViolationRule::EmptyMosaic, &wsi.wsi_id));
        }
        let unique: BTreeSet<u64> = wsi.mosaic.iter().copied().collect();
        if unique.len() != wsi.mosaic.len() {
            out.insert(Violation::new(
                ViolationRule::DuplicateMosaicPatch,
                &wsi.wsi_id,
            ));
        }
        patient_labels
            .entry(wsi.patient_id.as_str())
            .or_default()
            .insert(wsi.label.as_str());
    }

    if manifest.label_granularity == LabelGranularity::Patient {
        for wsi in &manifest.wsis {
            if patient_labels[wsi.patient_id.as_str()].len() > 1 {
                out.insert(Violation::new(
                    ViolationRule::ConflictingPatientLabel,
                    &wsi.wsi_id,
                ));
            }
        }
    }

    let mut violations: Vec<Violation> = out.into_iter().collect();
    violations.sort_by(|a, b| {
        a.wsi_id
            .cmp(&b.wsi_id)
            .then_with(|| a.rule.name().cmp(b.rule.name()))
    });
    violations
}

/// One row of a prediction table: the vote for one query at one k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub query_wsi_id: String,
    pub k: usize,
    pub true_label: String,
    /// Empty when the query had no candidates.
    pub predicted_label: Option<String>,
    pub n_candidates: usize,
    pub tie_broken: bool,
}

/// How the median of an even number of per-patch minima is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MedianRule {
    /// Mean of the two middle values.
    #[default]
    MidpointAverage,
    /// The lower of the two middle values.
    LowerMedian,
}

impl std::str::FromStr for MedianRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "midpointaverage" | "midpoint" => Ok(Self::MidpointAverage),
            "lowermedian" | "lower" => Ok(Self::LowerMedian),
            _ => Err(format!(
                "unknown median rule '{s}' (expected midpoint or lower)"
            )),
        }
    }
}

impl fmt::Display for MedianRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MidpointAverage => "midpoint",
            Self::LowerMedian => "lower",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: PatchDistanceMetric,
    k_values: Vec<usize>,
    pub median_rule: MedianRule,
}

impl EvalConfig {
    /// `k_values` are sorted and deduplicated; zero or empty is rejected.
    pub fn new(
        metric: PatchDistanceMetric,
        mut k_values: Vec<usize>,
        median_rule: MedianRule,
    ) -> Result<Self, ModelError> {
        if k_values.is_empty() || k_values.contains(&0) {
            return Err(ModelError::BadKValues);
        }
        k_values.sort_unstable();
        k_values.dedup();
        Ok(Self {
            metric,
            k_values,
            median_rule,
        })
    }

    pub fn k_values(&self) -> &[usize] {
        &self.k_values
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: PatchDistanceMetric::Cosine,
            k_values: vec![1, 3, 5],
            median_rule: MedianRule::MidpointAverage,
        }
    }
}
