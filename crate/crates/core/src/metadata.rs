//! Metadata encoding: heterogeneous per-sample metadata to fixed-width numeric vectors.
//!
//! Three column kinds are supported:
//!
//! - numeric values are copied verbatim;
//! - datetimes (`yyyy-MM-dd hh:mm:ss`, or a bare date) expand in place to
//!   `[year, month, day, hour, minute, second]`;
//! - categorical strings are replaced by a 0-based category index, assigned in
//!   ascending lexicographic order of the observed categories.
//!
//! Missing entries become `-1`, as does every slot of a missing datetime. A
//! legitimate `-1` in a numeric column passes through unchanged and is
//! indistinguishable from a missing value after encoding.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value written for missing entries.
pub const MISSING: f64 = -1.0;

/// Width of an expanded datetime column.
pub const DATETIME_WIDTH: usize = 6;

const DATETIME_PARTS: [&str; DATETIME_WIDTH] = ["year", "month", "day", "hour", "minute", "second"];

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("schema error in column `{column}`: {reason} (sample `{sample_id}`)")]
    Schema {
        column: String,
        sample_id: String,
        reason: String,
    },
    #[error("invalid schema declaration: {0}")]
    Declaration(String),
    #[error("cannot encode column `{column}` of sample `{sample_id}`: {reason}")]
    Encode {
        column: String,
        sample_id: String,
        reason: String,
    },
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<MetadataError>,
    },
    #[error("table error: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Datetime,
    Categorical,
}

impl ColumnKind {
    pub fn width(self) -> usize {
        match self {
            ColumnKind::Datetime => DATETIME_WIDTH,
            ColumnKind::Numeric | ColumnKind::Categorical => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// One raw metadata entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Number(f64),
    Text(String),
    Missing,
}

impl MetaValue {
    fn describe(&self) -> &'static str {
        match self {
            MetaValue::Number(_) => "number",
            MetaValue::Text(_) => "string",
            MetaValue::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetadataRecord {
    pub sample_id: String,
    pub values: BTreeMap<String, MetaValue>,
}

impl MetadataRecord {
    pub fn new<I, K>(sample_id: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = (K, MetaValue)>,
        K: Into<String>,
    {
        Self {
            sample_id: sample_id.into(),
            values: values.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMetadata {
    pub sample_id: String,
    pub vector: Vec<f64>,
}

/// User-facing declaration of which columns to encode and how.
///
/// On disk this is JSON of the form
/// `{"id_column": "sample_id", "columns": {"age": "numeric", ...}, "exclude": ["dx"]}`;
/// the column order in the file is the encoding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDeclaration {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    pub columns: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_id_column() -> String {
    "sample_id".to_string()
}

impl SchemaDeclaration {
    pub fn load(path: &Path) -> Result<Self, MetadataError> {
        let decl: SchemaDeclaration = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        decl.column_specs()?;
        Ok(decl)
    }

    pub fn column_specs(&self) -> Result<Vec<ColumnSpec>, MetadataError> {
        let mut specs = Vec::with_capacity(self.columns.len());
        for (name, kind) in &self.columns {
            if self.exclude.contains(name) {
                return Err(MetadataError::Declaration(format!(
                    "column `{name}` is both declared and excluded"
                )));
            }
            if name == &self.id_column {
                return Err(MetadataError::Declaration(format!(
                    "id column `{name}` cannot be encoded"
                )));
            }
            let kind: ColumnKind = serde_json::from_value(kind.clone()).map_err(|_| {
                MetadataError::Declaration(format!("column `{name}` has unknown kind {kind}"))
            })?;
            specs.push(ColumnSpec {
                name: name.clone(),
                kind,
            });
        }
        Ok(specs)
    }
}

/// Column layout plus category indices; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    columns: Vec<ColumnSpec>,
    category_index: BTreeMap<String, BTreeMap<String, usize>>,
    /// Always 0; recorded so stored schemas are self-describing.
    index_base: usize,
    width: usize,
}

impl MetadataSchema {
    /// Builds a schema, assigning category indices from the observed values.
    pub fn build(
        records: &[MetadataRecord],
        columns: &[ColumnSpec],
    ) -> Result<Self, MetadataError> {
        let mut seen = HashSet::new();
        for col in columns {
            if !seen.insert(col.name.as_str()) {
                return Err(MetadataError::Declaration(format!(
                    "duplicate column `{}`",
                    col.name
                )));
            }
        }

        if let Some(first) = records.first() {
            let expected: BTreeSet<&str> = first.values.keys().map(String::as_str).collect();
            for rec in records {
                let got: BTreeSet<&str> = rec.values.keys().map(String::as_str).collect();
                if got != expected {
                    let diff = got.symmetric_difference(&expected).next().copied().unwrap_or("");
                    return Err(MetadataError::Schema {
                        column: diff.to_string(),
                        sample_id: rec.sample_id.clone(),
                        reason: "records do not share the same column set".into(),
                    });
                }
            }
            for col in columns {
                if !expected.contains(col.name.as_str()) {
                    return Err(MetadataError::Schema {
                        column: col.name.clone(),
                        sample_id: first.sample_id.clone(),
                        reason: "declared column absent from records".into(),
                    });
                }
            }
        }

        let mut category_index = BTreeMap::new();
        for col in columns {
            let mut categories = BTreeSet::new();
            for rec in records {
                let value = &rec.values[&col.name];
                match (col.kind, value) {
                    (_, MetaValue::Missing) => {}
                    (ColumnKind::Numeric, MetaValue::Number(_)) => {}
                    (ColumnKind::Datetime, MetaValue::Text(_)) => {}
                    (ColumnKind::Categorical, MetaValue::Text(s)) => {
                        categories.insert(s.clone());
                    }
                    (kind, other) => {
                        return Err(MetadataError::Schema {
                            column: col.name.clone(),
                            sample_id: rec.sample_id.clone(),
                            reason: format!(
                                "{} value in a {:?} column",
                                other.describe(),
                                kind
                            ),
                        })
                    }
                }
            }
            if col.kind == ColumnKind::Categorical {
                let index = categories.into_iter().enumerate().map(|(i, c)| (c, i)).collect();
                category_index.insert(col.name.clone(), index);
            }
        }

        let width = columns.iter().map(|c| c.kind.width()).sum();
        Ok(Self {
            columns: columns.to_vec(),
            category_index,
            index_base: 0,
            width,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn category_index(&self, column: &str) -> Option<&BTreeMap<String, usize>> {
        self.category_index.get(column)
    }

    /// Encoded vector length.
    pub fn width(&self) -> usize {
        self.width
    }

    /// One name per encoded slot; datetime columns expand to `col.year` .. `col.second`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width);
        for col in &self.columns {
            match col.kind {
                ColumnKind::Datetime => {
                    names.extend(DATETIME_PARTS.iter().map(|p| format!("{}.{}", col.name, p)))
                }
                _ => names.push(col.name.clone()),
            }
        }
        names
    }

    pub fn save(&self, path: &Path) -> Result<(), MetadataError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetadataError> {
        let schema: MetadataSchema = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let width: usize = schema.columns.iter().map(|c| c.kind.width()).sum();
        if width != schema.width {
            return Err(MetadataError::Declaration(format!(
                "stored width {} disagrees with column layout ({width})",
                schema.width
            )));
        }
        Ok(schema)
    }
}

/// Parses `yyyy-MM-dd hh:mm:ss` (or `yyyy-MM-dd`, padded to midnight).
pub fn parse_datetime(text: &str) -> Option<[f64; DATETIME_WIDTH]> {
    let text = text.trim();
    let dt = NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S")
        .ok()
        .or_else(|| {
            NaiveDate::parse_from_str(text, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })?;
    Some([
        dt.year() as f64,
        dt.month() as f64,
        dt.day() as f64,
        dt.hour() as f64,
        dt.minute() as f64,
        dt.second() as f64,
    ])
}

pub fn encode_record(
    record: &MetadataRecord,
    schema: &MetadataSchema,
) -> Result<EncodedMetadata, MetadataError> {
    let mut vector = Vec::with_capacity(schema.width);
    for col in &schema.columns {
        let err = |reason: String| MetadataError::Encode {
            column: col.name.clone(),
            sample_id: record.sample_id.clone(),
            reason,
        };
        let value = record
            .values
            .get(&col.name)
            .ok_or_else(|| err("column absent from record".into()))?;
        match (col.kind, value) {
            (kind, MetaValue::Missing) => {
                vector.extend(std::iter::repeat_n(MISSING, kind.width()))
            }
            (ColumnKind::Numeric, MetaValue::Number(v)) => {
                if !v.is_finite() {
                    return Err(err(format!("non-finite number {v}")));
                }
                vector.push(*v)
            }
            (ColumnKind::Datetime, MetaValue::Text(s)) => {
                let parts = parse_datetime(s)
                    .ok_or_else(|| err(format!("unparseable datetime `{s}`")))?;
                vector.extend_from_slice(&parts);
            }
            (ColumnKind::Categorical, MetaValue::Text(s)) => {
                let index = schema.category_index[&col.name]
                    .get(s)
                    .ok_or_else(|| err(format!("category `{s}` not in schema")))?;
                vector.push(*index as f64);
            }
            (kind, other) => {
                return Err(err(format!("{} value in a {:?} column", other.describe(), kind)))
            }
        }
    }
    Ok(EncodedMetadata {
        sample_id: record.sample_id.clone(),
        vector,
    })
}

/// Encodes every record; row `i` of the result is `encode_record(records[i])`.
pub fn encode_table(
    records: &[MetadataRecord],
    schema: &MetadataSchema,
) -> Result<Array2<f64>, MetadataError> {
    let mut out = Array2::zeros((records.len(), schema.width));
    for (row, rec) in records.iter().enumerate() {
        let enc = encode_record(rec, schema).map_err(|e| MetadataError::Row {
            row,
            source: Box::new(e),
        })?;
        out.row_mut(row)
            .iter_mut()
            .zip(enc.vector)
            .for_each(|(o, v)| *o = v);
    }
    Ok(out)
}

fn is_missing_token(s: &str) -> bool {
    matches!(
        s.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none" | "unknown"
    )
}

fn check_header(
    header: &[String],
    decl: &SchemaDeclaration,
) -> Result<(), MetadataError> {
    if !header.contains(&decl.id_column) {
        return Err(MetadataError::Table(format!(
            "id column `{}` not found",
            decl.id_column
        )));
    }
    let undeclared: Vec<&str> = header
        .iter()
        .filter(|h| {
            *h != &decl.id_column && !decl.columns.contains_key(*h) && !decl.exclude.contains(h)
        })
        .map(String::as_str)
        .collect();
    if !undeclared.is_empty() {
        return Err(MetadataError::Table(format!(
            "columns neither declared nor excluded: {}",
            undeclared.join(", ")
        )));
    }
    for name in decl.columns.keys() {
        if !header.contains(name) {
            return Err(MetadataError::Table(format!("declared column `{name}` not found")));
        }
    }
    Ok(())
}

/// Reads a CSV metadata table. Numeric columns are parsed as numbers; empty
/// cells and `NA`/`NaN`/`null`/`unknown` tokens are missing.
pub fn read_csv_table(
    path: &Path,
    decl: &SchemaDeclaration,
) -> Result<Vec<MetadataRecord>, MetadataError> {
    let specs = decl.column_specs()?;
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    check_header(&header, decl)?;
    let position = |name: &str| header.iter().position(|h| h == name).unwrap();
    let id_pos = position(&decl.id_column);
    let positions: Vec<usize> = specs.iter().map(|s| position(&s.name)).collect();

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let sample_id = row[id_pos].to_string();
        let mut values = BTreeMap::new();
        for (spec, &pos) in specs.iter().zip(&positions) {
            let cell = &row[pos];
            let value = if is_missing_token(cell) {
                MetaValue::Missing
            } else if spec.kind == ColumnKind::Numeric {
                match cell.trim().parse::<f64>() {
                    Ok(v) => MetaValue::Number(v),
                    Err(_) => MetaValue::Text(cell.to_string()),
                }
            } else {
                MetaValue::Text(cell.to_string())
            };
            values.insert(spec.name.clone(), value);
        }
        records.push(MetadataRecord { sample_id, values });
    }
    Ok(records)
}

/// Reads a JSON-lines metadata table (one object per line).
pub fn read_jsonl_table(
    path: &Path,
    decl: &SchemaDeclaration,
) -> Result<Vec<MetadataRecord>, MetadataError> {
    let specs = decl.column_specs()?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
        let header: Vec<String> = obj.keys().cloned().collect();
        check_header(&header, decl)
            .map_err(|e| MetadataError::Table(format!("line {}: {e}", lineno + 1)))?;
        let sample_id = match &obj[&decl.id_column] {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let mut values = BTreeMap::new();
        for spec in &specs {
            let value = match &obj[&spec.name] {
                serde_json::Value::Null => MetaValue::Missing,
                serde_json::Value::Number(n) => MetaValue::Number(n.as_f64().unwrap_or(f64::NAN)),
                serde_json::Value::String(s) if is_missing_token(s) => MetaValue::Missing,
                serde_json::Value::String(s) => MetaValue::Text(s.clone()),
                other => MetaValue::Text(other.to_string()),
            };
            values.insert(spec.name.clone(), value);
        }
        records.push(MetadataRecord { sample_id, values });
    }
    Ok(records)
}

/// Dispatches on extension: `.jsonl`/`.ndjson` are JSON lines, anything else CSV.
pub fn read_table(
    path: &Path,
    decl: &SchemaDeclaration,
) -> Result<Vec<MetadataRecord>, MetadataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") => read_jsonl_table(path, decl),
        _ => read_csv_table(path, decl),
    }
}
