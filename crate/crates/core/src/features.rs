//! Feature matrices, the FMX interchange format and image/metadata fusion.
//!
//! FMX layout, all little-endian:
//!
//! ```text
//! bytes 0..4    magic "FMX1"
//! bytes 4..8    row count N (u32)
//! bytes 8..12   column count d (u32)
//! bytes 12..    N*d IEEE-754 f32 values, row-major
//! ```
//!
//! A JSON sidecar `<file>.json` (e.g. `feats.fmx.json`) carries
//! `{sample_ids, labels, source, split_point}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const FMX_MAGIC: &[u8; 4] = b"FMX1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature matrix: {0}")]
    Invalid(String),
    #[error("FMX format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("sample alignment failed: missing from metadata {missing:?}, missing from image features {extra:?}, duplicated {duplicated:?}")]
    Alignment {
        missing: Vec<String>,
        extra: Vec<String>,
        duplicated: Vec<String>,
    },
    #[error("metadata block has zero columns; fusion must add at least one")]
    EmptyMetadata,
    #[error("unknown sample id(s): {0:?}")]
    UnknownIds(Vec<String>),
    #[error("feature store corrupt: {0}")]
    Corrupt(String),
    #[error("extractor failed: {0}")]
    Extractor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// N x d matrix of per-sample features with ids, optional labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<String>>,
    pub source: String,
    /// Image/metadata column boundary when the matrix is a fusion result.
    pub split_point: Option<usize>,
}

impl FeatureMatrix {
    pub fn new(
        data: Array2<f32>,
        sample_ids: Vec<String>,
        labels: Option<Vec<String>>,
        source: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        let m = Self {
            data,
            sample_ids,
            labels,
            source: source.into(),
            split_point: None,
        };
        m.validate()?;
        Ok(m)
    }

    /// Converts an `f64` block (e.g. encoded metadata) to on-disk precision.
    pub fn from_f64(
        data: &Array2<f64>,
        sample_ids: Vec<String>,
        labels: Option<Vec<String>>,
        source: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        Self::new(data.mapv(|v| v as f32), sample_ids, labels, source)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let n = self.data.nrows();
        if self.sample_ids.len() != n {
            return Err(FeatureError::Invalid(format!(
                "{} rows but {} sample ids",
                n,
                self.sample_ids.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(FeatureError::Invalid(format!(
                    "{} rows but {} labels",
                    n,
                    labels.len()
                )));
            }
        }
        if let Some(((r, c), v)) = self.data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::Invalid(format!("non-finite value {v} at ({r}, {c})")));
        }
        if let Some(sp) = self.split_point {
            if sp > self.data.ncols() {
                return Err(FeatureError::Invalid(format!(
                    "split point {sp} beyond width {}",
                    self.data.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    /// Upcast copy of the data for training.
    pub fn to_scalar<T: Scalar>(&self) -> Array2<T> {
        self.data.mapv(|v| T::of(v as f64))
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select(Axis(0), indices),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            source: self.source.clone(),
            split_point: self.split_point,
        }
    }

    /// Rows for `ids`, in request order.
    pub fn select_ids(&self, ids: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let index = id_index(&self.sample_ids);
        let unknown: Vec<String> = ids.iter().filter(|id| !index.contains_key(id.as_str())).cloned().collect();
        if !unknown.is_empty() {
            return Err(FeatureError::UnknownIds(unknown));
        }
        let rows: Vec<usize> = ids.iter().map(|id| index[id.as_str()]).collect();
        Ok(self.select_rows(&rows))
    }
}

fn id_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// A fusion result: `[image | metadata]` with the boundary column recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMatrix {
    matrix: FeatureMatrix,
    split_point: usize,
}

impl FusedMatrix {
    pub fn split_point(&self) -> usize {
        self.split_point
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> FeatureMatrix {
        self.matrix
    }

    pub fn image_block(&self) -> ArrayView2<'_, f32> {
        self.matrix.data.slice(s![.., ..self.split_point])
    }

    pub fn metadata_block(&self) -> ArrayView2<'_, f32> {
        self.matrix.data.slice(s![.., self.split_point..])
    }
}

impl TryFrom<FeatureMatrix> for FusedMatrix {
    type Error = FeatureError;

    fn try_from(matrix: FeatureMatrix) -> Result<Self, Self::Error> {
        let split_point = matrix
            .split_point
            .ok_or_else(|| FeatureError::Invalid("matrix has no split point".into()))?;
        matrix.validate()?;
        Ok(Self { matrix, split_point })
    }
}

/// Concatenates image features with metadata, aligning metadata rows by sample id.
///
/// Row order and labels follow `image`.
pub fn fuse(image: &FeatureMatrix, metadata: &FeatureMatrix) -> Result<FusedMatrix, FeatureError> {
    image.validate()?;
    metadata.validate()?;
    if metadata.ncols() == 0 {
        return Err(FeatureError::EmptyMetadata);
    }

    let mut duplicated = duplicates(&image.sample_ids);
    duplicated.extend(duplicates(&metadata.sample_ids));
    let meta_index = id_index(&metadata.sample_ids);
    let image_index = id_index(&image.sample_ids);
    let missing: Vec<String> = image
        .sample_ids
        .iter()
        .filter(|id| !meta_index.contains_key(id.as_str()))
        .cloned()
        .collect();
    let extra: Vec<String> = metadata
        .sample_ids
        .iter()
        .filter(|id| !image_index.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() || !duplicated.is_empty() {
        return Err(FeatureError::Alignment {
            missing,
            extra,
            duplicated,
        });
    }

    let split_point = image.ncols();
    let width = split_point + metadata.ncols();
    let mut data = Array2::<f32>::zeros((image.nrows(), width));
    for (i, id) in image.sample_ids.iter().enumerate() {
        let mut row = data.row_mut(i);
        row.slice_mut(s![..split_point]).assign(&image.data.row(i));
        row.slice_mut(s![split_point..])
            .assign(&metadata.data.row(meta_index[id.as_str()]));
    }

    let source = if metadata.source.is_empty() {
        format!("{} + metadata", image.source)
    } else {
        format!("{} + {}", image.source, metadata.source)
    };
    Ok(FusedMatrix {
        matrix: FeatureMatrix {
            data,
            sample_ids: image.sample_ids.clone(),
            labels: image.labels.clone(),
            source,
            split_point: Some(split_point),
        },
        split_point,
    })
}

fn duplicates(ids: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in ids {
        *counts.entry(id).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(id, _)| id.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmxSidecar {
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<String>>,
    pub source: String,
    pub split_point: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Serializes the FMX payload (header + data) without the sidecar.
pub fn encode_fmx(m: &FeatureMatrix) -> Result<Vec<u8>, FeatureError> {
    m.validate()?;
    let (n, d) = m.data.dim();
    let overflow = || FeatureError::Invalid(format!("dimensions {n}x{d} exceed the FMX limits"));
    let n32 = u32::try_from(n).map_err(|_| overflow())?;
    let d32 = u32::try_from(d).map_err(|_| overflow())?;
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(overflow)?;
    let mut bytes = Vec::with_capacity(payload);
    bytes.extend_from_slice(FMX_MAGIC);
    bytes.extend_from_slice(&n32.to_le_bytes());
    bytes.extend_from_slice(&d32.to_le_bytes());
    for v in m.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Parses an FMX payload into its data block.
pub fn decode_fmx(bytes: &[u8], path: &Path) -> Result<Array2<f32>, FeatureError> {
    let fail = |reason: String| FeatureError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != FMX_MAGIC {
        return Err(fail(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(format!("dimensions {n}x{d} overflow")))?;
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => {
            return Err(fail(format!(
                "truncated payload: {} of {} bytes",
                bytes.len(),
                expected
            )))
        }
        std::cmp::Ordering::Greater => {
            return Err(fail(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )))
        }
        std::cmp::Ordering::Equal => {}
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!("non-finite value at flat index {pos}")));
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked above"))
}

/// Writes `path` and its sidecar. The binary file is written under an
/// exclusive create of a temporary name and then renamed into place.
pub fn write_fmx(m: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    let bytes = encode_fmx(m)?;
    let sidecar = FmxSidecar {
        sample_ids: m.sample_ids.clone(),
        labels: m.labels.clone(),
        source: m.source.clone(),
        split_point: m.split_point,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let file = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_fmx(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let data = decode_fmx(&bytes, path)?;
    let side_path = sidecar_path(path);
    let sidecar: FmxSidecar = serde_json::from_reader(BufReader::new(
        File::open(&side_path).map_err(|e| FeatureError::Format {
            path: side_path.clone(),
            reason: format!("sidecar unreadable: {e}"),
        })?,
    ))?;
    let m = FeatureMatrix {
        data,
        sample_ids: sidecar.sample_ids,
        labels: sidecar.labels,
        source: sidecar.source,
        split_point: sidecar.split_point,
    };
    m.validate().map_err(|e| FeatureError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(m)
}

/// Source of image features for a set of sample ids.
pub trait FeatureProvider {
    /// Rows for exactly `ids`, in request order.
    fn get(&self, ids: &[String]) -> Result<FeatureMatrix, FeatureError>;

    fn width(&self) -> usize;
}

/// Where a provider finds its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderConfig {
    /// A single FMX file.
    File(PathBuf),
    /// Every `*.fmx` file in a directory, concatenated.
    Directory(PathBuf),
    /// External extractor invoked as `<command...> --images <manifest> --out <fmx>`.
    /// `images` is a CSV index with `sample_id,path` columns; the manifest
    /// handed to the extractor has the same layout, restricted to the request.
    Extractor { command: Vec<String>, images: PathBuf },
}

pub fn provider_get(ids: &[String], config: &ProviderConfig) -> Result<FeatureMatrix, FeatureError> {
    match config {
        ProviderConfig::File(path) => StoreProvider::from_matrix(read_fmx(path)?)?.get(ids),
        ProviderConfig::Directory(dir) => StoreProvider::open_dir(dir)?.get(ids),
        ProviderConfig::Extractor { command, images } => {
            ExtractorProvider::new(command.clone(), read_image_index(images)?).get(ids)
        }
    }
}

/// In-memory store built from one or more FMX files.
#[derive(Debug, Clone)]
pub struct StoreProvider {
    matrix: FeatureMatrix,
    index: HashMap<String, usize>,
}

impl StoreProvider {
    pub fn from_matrix(matrix: FeatureMatrix) -> Result<Self, FeatureError> {
        let dups = duplicates(&matrix.sample_ids);
        if !dups.is_empty() {
            return Err(FeatureError::Corrupt(format!("duplicate sample ids {dups:?}")));
        }
        let index = matrix
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self { matrix, index })
    }

    /// Loads every `*.fmx` file in `dir` in file-name order.
    pub fn open_dir(dir: &Path) -> Result<Self, FeatureError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "fmx"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(FeatureError::Corrupt(format!("no .fmx files in {}", dir.display())));
        }
        let parts = paths.iter().map(|p| read_fmx(p)).collect::<Result<Vec<_>, _>>()?;
        let width = parts[0].ncols();
        if let Some((p, m)) = paths.iter().zip(&parts).find(|(_, m)| m.ncols() != width) {
            return Err(FeatureError::Corrupt(format!(
                "{} has width {} but the store width is {width}",
                p.display(),
                m.ncols()
            )));
        }
        let has_labels = parts.iter().all(|m| m.labels.is_some());
        let views: Vec<_> = parts.iter().map(|m| m.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| FeatureError::Corrupt(e.to_string()))?;
        let matrix = FeatureMatrix {
            data,
            sample_ids: parts.iter().flat_map(|m| m.sample_ids.iter().cloned()).collect(),
            labels: has_labels.then(|| {
                parts
                    .iter()
                    .flat_map(|m| m.labels.as_ref().unwrap().iter().cloned())
                    .collect()
            }),
            source: parts[0].source.clone(),
            split_point: None,
        };
        Self::from_matrix(matrix)
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.matrix
    }
}

impl FeatureProvider for StoreProvider {
    fn get(&self, ids: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let unknown: Vec<String> = ids.iter().filter(|id| !self.index.contains_key(*id)).cloned().collect();
        if !unknown.is_empty() {
            return Err(FeatureError::UnknownIds(unknown));
        }
        let rows: Vec<usize> = ids.iter().map(|id| self.index[id]).collect();
        Ok(self.matrix.select_rows(&rows))
    }

    fn width(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Reads a `sample_id,path` CSV; relative paths resolve against the CSV's directory.
pub fn read_image_index(path: &Path) -> Result<BTreeMap<String, PathBuf>, FeatureError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| FeatureError::Corrupt(format!("{}: {e}", path.display())))?;
    let mut index = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| FeatureError::Corrupt(format!("{}: {e}", path.display())))?;
        if row.len() < 2 {
            return Err(FeatureError::Corrupt(format!("{}: expected sample_id,path rows", path.display())));
        }
        let id = row[0].to_string();
        if index.insert(id.clone(), base.join(&row[1])).is_some() {
            return Err(FeatureError::Corrupt(format!("{}: duplicate sample id `{id}`", path.display())));
        }
    }
    Ok(index)
}

/// Delegates extraction to an external program that writes FMX.
#[derive(Debug, Clone)]
pub struct ExtractorProvider {
    command: Vec<String>,
    images: BTreeMap<String, PathBuf>,
}

impl ExtractorProvider {
    pub fn new(command: Vec<String>, images: BTreeMap<String, PathBuf>) -> Self {
        Self { command, images }
    }

    fn run(&self, ids: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| FeatureError::Extractor("empty extractor command".into()))?;
        let unknown: Vec<String> = ids.iter().filter(|id| !self.images.contains_key(*id)).cloned().collect();
        if !unknown.is_empty() {
            return Err(FeatureError::UnknownIds(unknown));
        }
        let work = tempfile::tempdir()?;
        let manifest = work.path().join("manifest.csv");
        let out = work.path().join("features.fmx");
        let mut writer = csv::Writer::from_path(&manifest).map_err(|e| FeatureError::Extractor(e.to_string()))?;
        let io = |e: csv::Error| FeatureError::Extractor(e.to_string());
        writer.write_record(["sample_id", "path"]).map_err(io)?;
        for id in ids {
            writer
                .write_record([id.as_str(), &self.images[id].to_string_lossy()])
                .map_err(io)?;
        }
        writer.flush()?;
        drop(writer);
        let status = Command::new(program)
            .args(args)
            .arg("--images")
            .arg(&manifest)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| FeatureError::Extractor(format!("cannot launch `{program}`: {e}")))?;
        if !status.success() {
            return Err(FeatureError::Extractor(format!("`{program}` exited with {status}")));
        }
        read_fmx(&out)
    }
}

impl FeatureProvider for ExtractorProvider {
    fn get(&self, ids: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let produced = self.run(ids)?;
        StoreProvider::from_matrix(produced)?.get(ids)
    }

    /// Runs the extractor on the first indexed image.
    fn width(&self) -> usize {
        let first: Vec<String> = self.images.keys().take(1).cloned().collect();
        self.run(&first).map(|m| m.ncols()).unwrap_or(0)
    }
}
