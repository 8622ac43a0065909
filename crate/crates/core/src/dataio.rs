//! On-disk cohort and checkpoint formats, plus temporal normalization of
//! recordings (TR resampling and cropping).
//!
//! A cohort directory holds a `manifest.json` and one `.f32` blob per
//! recording with `R * T` little-endian `f32` values in region-major order.
//! Checkpoints are single files: the `VCNC` magic, a `u32` version, a `u32`
//! header length, a JSON header and the concatenated `f32` tensor payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::HyperParams;
use crate::error::{Error, Result};

pub const COHORT_FORMAT_TAG: &str = "VCND";
pub const COHORT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCNC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One session's parcellated time series, `R` regions by `T` time points.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub session_index: u8,
    pub data: Array2<f64>,
    pub tr_seconds: f64,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        session_index: u8,
        data: Array2<f64>,
        tr_seconds: f64,
    ) -> Result<Self> {
        let rec = Recording {
            subject_id: subject_id.into(),
            session_index,
            data,
            tr_seconds,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_regions(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_timepoints(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let id = format!("{}/ses{}", self.subject_id, self.session_index);
        if self.n_regions() < 2 {
            return Err(Error::Invariant(format!("{id}: need at least 2 regions")));
        }
        if self.n_timepoints() < 1 {
            return Err(Error::Invariant(format!("{id}: empty time axis")));
        }
        if self.session_index > 1 {
            return Err(Error::Invariant(format!(
                "{id}: session index must be 0 or 1"
            )));
        }
        if !(self.tr_seconds.is_finite() && self.tr_seconds > 0.0) {
            return Err(Error::Invariant(format!("{id}: TR must be positive")));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{id}: data contains non-finite values")));
        }
        Ok(())
    }
}

/// A set of subjects with one or two recordings each and optional binary labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub recordings: Vec<Recording>,
    pub labels: Option<BTreeMap<String, u8>>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for rec in &self.recordings {
            rec.validate()?;
            if !seen.insert((rec.subject_id.as_str(), rec.session_index)) {
                return Err(Error::Invariant(format!(
                    "duplicate recording for subject {} session {}",
                    rec.subject_id, rec.session_index
                )));
            }
        }
        if let Some(labels) = &self.labels {
            for (subject, label) in labels {
                if *label > 1 {
                    return Err(Error::Invariant(format!(
                        "label of subject {subject} must be 0 or 1"
                    )));
                }
                if !self.recordings.iter().any(|r| &r.subject_id == subject) {
                    return Err(Error::Invariant(format!(
                        "labeled subject {subject} has no recording"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.recordings
            .iter()
            .filter(|r| seen.insert(r.subject_id.clone()))
            .map(|r| r.subject_id.clone())
            .collect()
    }

    pub fn recording(&self, subject_id: &str, session_index: u8) -> Option<&Recording> {
        self.recordings
            .iter()
            .find(|r| r.subject_id == subject_id && r.session_index == session_index)
    }

    pub fn label(&self, subject_id: &str) -> Option<u8> {
        self.labels.as_ref()?.get(subject_id).copied()
    }

    /// Subset restricted to the given subjects, keeping their labels.
    pub fn select_subjects(&self, subjects: &[String]) -> Cohort {
        let wanted: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
        let recordings = self
            .recordings
            .iter()
            .filter(|r| wanted.contains(r.subject_id.as_str()))
            .cloned()
            .collect();
        let labels = self.labels.as_ref().map(|l| {
            l.iter()
                .filter(|(k, _)| wanted.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect()
        });
        Cohort {
            recordings,
            labels,
            meta: self.meta.clone(),
        }
    }

    /// Subjects that have both session 0 and session 1.
    pub fn paired_subjects(&self) -> Vec<String> {
        self.subjects()
            .into_iter()
            .filter(|s| self.recording(s, 0).is_some() && self.recording(s, 1).is_some())
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_tag: String,
    version: u32,
    tr_seconds: f64,
    recordings: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, u8>>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    subject_id: String,
    session_index: u8,
    #[serde(rename = "R")]
    n_regions: usize,
    #[serde(rename = "T")]
    n_timepoints: usize,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tr_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

/// Encodes values as little-endian `f32`.
pub fn encode_f32_le<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Corrupt(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes a row-major `f64` matrix as an `f32` blob.
pub fn write_matrix_f32(path: &Path, m: &Array2<f64>) -> Result<()> {
    let bytes = encode_f32_le(m.iter());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_f32(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode_f32_le(&bytes)?;
    if values.len() != rows * cols {
        return Err(Error::Corrupt(format!(
            "{}: expected {}x{} = {} floats, found {}",
            path.display(),
            rows,
            cols,
            rows * cols,
            values.len()
        )));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Corrupt(e.to_string()))
}

fn blob_name(index: usize) -> String {
    format!("rec_{index:05}.f32")
}

pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    cohort.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let common_tr = cohort.recordings.first().map_or(1.5, |r| r.tr_seconds);
    let mut entries = Vec::with_capacity(cohort.recordings.len());
    for (i, rec) in cohort.recordings.iter().enumerate() {
        let file = blob_name(i);
        write_matrix_f32(&dir.join(&file), &rec.data)?;
        entries.push(ManifestEntry {
            subject_id: rec.subject_id.clone(),
            session_index: rec.session_index,
            n_regions: rec.n_regions(),
            n_timepoints: rec.n_timepoints(),
            file,
            tr_seconds: (rec.tr_seconds != common_tr).then_some(rec.tr_seconds),
            label: cohort.label(&rec.subject_id),
        });
    }
    let manifest = Manifest {
        format_tag: COHORT_FORMAT_TAG.to_string(),
        version: COHORT_FORMAT_VERSION,
        tr_seconds: common_tr,
        recordings: entries,
        labels: cohort.labels.clone(),
        meta: cohort.meta.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "missing {} in {}",
            MANIFEST_FILE,
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_tag != COHORT_FORMAT_TAG {
        return Err(Error::Format(format!(
            "unexpected format tag {:?}",
            manifest.format_tag
        )));
    }
    if manifest.version != COHORT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported cohort version {}",
            manifest.version
        )));
    }
    let mut recordings = Vec::with_capacity(manifest.recordings.len());
    let mut entry_labels = BTreeMap::new();
    for entry in &manifest.recordings {
        let data = read_matrix_f32(&dir.join(&entry.file), entry.n_regions, entry.n_timepoints)?;
        if let Some(label) = entry.label {
            entry_labels.insert(entry.subject_id.clone(), label);
        }
        recordings.push(Recording {
            subject_id: entry.subject_id.clone(),
            session_index: entry.session_index,
            data,
            tr_seconds: entry.tr_seconds.unwrap_or(manifest.tr_seconds),
        });
    }
    let labels = match manifest.labels {
        Some(map) => Some(map),
        None if !entry_labels.is_empty() => Some(entry_labels),
        None => None,
    };
    let cohort = Cohort {
        recordings,
        labels,
        meta: manifest.meta,
    };
    cohort.validate()?;
    Ok(cohort)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Linearly resamples a recording onto a uniform grid with spacing `target_tr`.
pub fn resample_tr(rec: &Recording, target_tr: f64) -> Result<Recording> {
    if !(target_tr.is_finite() && target_tr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target TR must be positive, got {target_tr}"
        )));
    }
    if rec.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}/ses{}: cannot resample non-finite data",
            rec.subject_id, rec.session_index
        )));
    }
    const SNAP: f64 = 1e-9;
    let t_in = rec.n_timepoints();
    let duration = (t_in - 1) as f64 * rec.tr_seconds;
    let t_out = (duration / target_tr + SNAP).floor() as usize + 1;
    let mut out = Array2::zeros((rec.n_regions(), t_out));
    for k in 0..t_out {
        let mut pos = k as f64 * target_tr / rec.tr_seconds;
        if (pos - pos.round()).abs() < SNAP {
            pos = pos.round();
        }
        let lo = (pos.floor() as usize).min(t_in - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= t_in {
            out.column_mut(k).assign(&rec.data.column(lo));
        } else {
            let a = rec.data.column(lo);
            let b = rec.data.column(lo + 1);
            for r in 0..rec.n_regions() {
                out[[r, k]] = a[r] + frac * (b[r] - a[r]);
            }
        }
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        session_index: rec.session_index,
        data: out,
        tr_seconds: target_tr,
    })
}

/// Keeps columns `[start, start + length)`.
pub fn crop_recording(rec: &Recording, start: usize, length: usize) -> Result<Recording> {
    if length == 0 || start + length > rec.n_timepoints() {
        return Err(Error::Bounds(format!(
            "crop [{start}, {}) outside recording of length {}",
            start + length,
            rec.n_timepoints()
        )));
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        session_index: rec.session_index,
        data: rec.data.slice(s![.., start..start + length]).to_owned(),
        tr_seconds: rec.tr_seconds,
    })
}

/// A named tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_tag: String,
    pub version: u32,
    pub tensor_directory: Vec<TensorEntry>,
    pub hyperparameters: HyperParams,
    pub epoch: usize,
}

/// Serializes tensors into the checkpoint byte layout. Offsets are relative
/// to the first payload byte.
pub fn encode_checkpoint(
    tensors: &[NamedTensor],
    hyperparameters: &HyperParams,
    epoch: usize,
) -> Result<Vec<u8>> {
    let mut names = BTreeSet::new();
    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Invariant(format!("duplicate tensor name {}", t.name)));
        }
        let numel: usize = t.shape.iter().product();
        if numel != t.values.len() {
            return Err(Error::Invariant(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        directory.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += 4 * numel as u64;
    }
    let header = CheckpointHeader {
        format_tag: "VCNC".to_string(),
        version: CHECKPOINT_VERSION,
        tensor_directory: directory,
        hyperparameters: hyperparameters.clone(),
        epoch,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tensors {
        out.extend_from_slice(&encode_f32_le(t.values.iter()));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<NamedTensor>)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing VCNC magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Corrupt("checkpoint header truncated".to_string()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensor_directory.len());
    let mut names = BTreeSet::new();
    let mut tensors = Vec::with_capacity(header.tensor_directory.len());
    for entry in &header.tensor_directory {
        if !names.insert(entry.name.as_str()) {
            return Err(Error::Corrupt(format!("duplicate tensor name {}", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * numel as u64;
        if end > payload.len() as u64 {
            return Err(Error::Corrupt(format!(
                "tensor {} extends past end of file",
                entry.name
            )));
        }
        spans.push((entry.offset, end, entry.name.as_str()));
        let values = decode_f32_le(&payload[entry.offset as usize..end as usize])?;
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            values,
        });
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Corrupt(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((header, tensors))
}

pub fn save_checkpoint(
    path: &Path,
    tensors: &[NamedTensor],
    hyperparameters: &HyperParams,
    epoch: usize,
) -> Result<()> {
    let bytes = encode_checkpoint(tensors, hyperparameters, epoch)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
