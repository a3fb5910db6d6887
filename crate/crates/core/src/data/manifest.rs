use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Environment variable overriding the directory relative CSV paths resolve against.
pub const DATA_DIR_ENV: &str = "FAIRX_DATA_DIR";

/// One value or a list of values, e.g. `"Male"` or `[">50K", ">50K."]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSet {
    One(String),
    Many(Vec<String>),
}

impl ValueSet {
    pub fn contains(&self, v: &str) -> bool {
        match self {
            ValueSet::One(s) => s == v,
            ValueSet::Many(all) => all.iter().any(|s| s == v),
        }
    }
}

impl From<&str> for ValueSet {
    fn from(s: &str) -> Self {
        ValueSet::One(s.to_string())
    }
}

/// Keeps a row only if the column's value passes every set bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_in: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl RowFilter {
    fn keeps(&self, value: &str) -> bool {
        if self.not_in.iter().any(|v| v == value) {
            return false;
        }
        if self.min.is_some() || self.max.is_some() {
            let Ok(x) = value.parse::<f64>() else {
                return false;
            };
            if self.min.is_some_and(|m| x < m) || self.max.is_some_and(|m| x > m) {
                return false;
            }
        }
        true
    }
}

fn default_delimiter() -> char {
    ','
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub csv_path: PathBuf,
    pub target_column: String,
    pub positive_label: ValueSet,
    pub protected_column: String,
    /// Raw values mapped to group 1; everything else is group 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group1_value: Option<ValueSet>,
    /// Numeric protected columns: group 1 iff value >= threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected_threshold: Option<f64>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Explicit feature list; when absent every remaining column is a feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Column names for files without a header row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_names: Option<Vec<String>>,
    #[serde(default = "default_missing")]
    pub missing_values: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub row_filters: Vec<RowFilter>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(
        csv_path: impl Into<PathBuf>,
        target_column: &str,
        positive_label: &str,
        protected_column: &str,
        group1_value: &str,
    ) -> Self {
        DatasetManifest {
            name: String::new(),
            csv_path: csv_path.into(),
            target_column: target_column.into(),
            positive_label: positive_label.into(),
            protected_column: protected_column.into(),
            group1_value: Some(group1_value.into()),
            protected_threshold: None,
            drop_columns: Vec::new(),
            categorical_columns: Vec::new(),
            feature_columns: None,
            delimiter: ',',
            column_names: None,
            missing_values: default_missing(),
            row_filters: Vec::new(),
            notes: String::new(),
            base_dir: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if m.group1_value.is_none() && m.protected_threshold.is_none() {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                message: "one of group1_value or protected_threshold is required".into(),
            });
        }
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    /// Absolute paths are used as-is; relative ones resolve against
    /// `FAIRX_DATA_DIR` when set, else the manifest's own directory.
    pub fn resolved_csv_path(&self) -> PathBuf {
        if self.csv_path.is_absolute() {
            return self.csv_path.clone();
        }
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            return PathBuf::from(root).join(&self.csv_path);
        }
        match &self.base_dir {
            Some(dir) => dir.join(&self.csv_path),
            None => self.csv_path.clone(),
        }
    }

    fn is_missing(&self, v: &str) -> bool {
        self.missing_values.iter().any(|m| m == v)
    }

    fn group_of(&self, v: &str) -> Option<u8> {
        if let Some(t) = self.protected_threshold {
            return v.parse::<f64>().ok().map(|x| u8::from(x >= t));
        }
        self.group1_value
            .as_ref()
            .map(|set| u8::from(set.contains(v)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<String>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Continuous(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub data: ColumnData,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_retained: usize,
    pub dropped_missing_target: usize,
    pub dropped_missing_protected: usize,
    pub dropped_by_filter: usize,
}

/// Feature columns plus binary labels and groups, before any encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub labels: Vec<u8>,
    pub groups: Vec<u8>,
    /// 1-based source line of every retained row.
    pub source_lines: Vec<usize>,
    pub report: LoadReport,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&RawColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Table whose every feature is continuous and fully observed.
    pub fn from_dense(
        names: Vec<String>,
        rows: &[Vec<f64>],
        labels: Vec<u8>,
        groups: Vec<u8>,
    ) -> Self {
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| RawColumn {
                name,
                data: ColumnData::Continuous(rows.iter().map(|r| Some(r[j])).collect()),
            })
            .collect();
        let n = labels.len();
        RawTable {
            columns,
            labels,
            groups,
            source_lines: (2..n + 2).collect(),
            report: LoadReport {
                rows_read: n,
                rows_retained: n,
                ..Default::default()
            },
        }
    }
}

pub fn load_csv(manifest: &DatasetManifest) -> Result<RawTable, DataError> {
    let path = manifest.resolved_csv_path();
    let file = fs::File::open(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(manifest.delimiter as u8)
        .has_headers(manifest.column_names.is_none())
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Vec<String> = match &manifest.column_names {
        Some(names) => names.clone(),
        None => reader.headers()?.iter().map(str::to_string).collect(),
    };
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let col = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let target = col(&manifest.target_column)?;
    let protected = col(&manifest.protected_column)?;
    let filters = manifest
        .row_filters
        .iter()
        .map(|f| Ok((col(&f.column)?, f)))
        .collect::<Result<Vec<_>, DataError>>()?;
    for c in &manifest.drop_columns {
        col(c)?;
    }
    for c in &manifest.categorical_columns {
        col(c)?;
    }
    let feature_names: Vec<String> = match &manifest.feature_columns {
        Some(list) => list.clone(),
        None => header
            .iter()
            .filter(|h| {
                **h != manifest.target_column
                    && **h != manifest.protected_column
                    && !manifest.drop_columns.contains(h)
            })
            .cloned()
            .collect(),
    };
    let feature_idx = feature_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>, _>>()?;
    let categorical: Vec<bool> = feature_names
        .iter()
        .map(|n| manifest.categorical_columns.contains(n))
        .collect();

    let mut report = LoadReport::default();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut source_lines = Vec::new();
    let mut cont: Vec<Vec<Option<f64>>> = vec![Vec::new(); feature_names.len()];
    let mut cat: Vec<Vec<String>> = vec![Vec::new(); feature_names.len()];
    let mut bad_lines = Vec::new();
    let mut bad_reason = String::new();

    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row_no + 1 + usize::from(manifest.column_names.is_none()));
        report.rows_read += 1;
        if record.len() != header.len() {
            if bad_reason.is_empty() {
                bad_reason = format!("expected {} fields, got {}", header.len(), record.len());
            }
            bad_lines.push(line);
            continue;
        }
        if !filters.iter().all(|(i, f)| f.keeps(&record[*i])) {
            report.dropped_by_filter += 1;
            continue;
        }
        let y_raw = &record[target];
        if manifest.is_missing(y_raw) {
            report.dropped_missing_target += 1;
            continue;
        }
        let a_raw = &record[protected];
        let group = if manifest.is_missing(a_raw) {
            None
        } else {
            manifest.group_of(a_raw)
        };
        let Some(group) = group else {
            report.dropped_missing_protected += 1;
            continue;
        };

        let mut parsed = Vec::with_capacity(feature_idx.len());
        let mut row_ok = true;
        for (k, &fi) in feature_idx.iter().enumerate() {
            let cell = &record[fi];
            if categorical[k] || manifest.is_missing(cell) {
                parsed.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(Some(v)),
                _ => {
                    if bad_reason.is_empty() {
                        bad_reason = format!(
                            "column `{}` is continuous but holds `{cell}`",
                            feature_names[k]
                        );
                    }
                    row_ok = false;
                    break;
                }
            }
        }
        if !row_ok {
            bad_lines.push(line);
            continue;
        }
        for (k, &fi) in feature_idx.iter().enumerate() {
            if categorical[k] {
                cat[k].push(record[fi].to_string());
            } else {
                cont[k].push(parsed[k]);
            }
        }
        labels.push(u8::from(manifest.positive_label.contains(y_raw)));
        groups.push(group);
        source_lines.push(line);
    }

    if !bad_lines.is_empty() {
        return Err(DataError::BadRows {
            lines: bad_lines,
            reason: bad_reason,
        });
    }
    report.rows_retained = labels.len();
    if labels.is_empty() {
        return Err(DataError::Empty);
    }

    let columns = feature_names
        .into_iter()
        .enumerate()
        .map(|(k, name)| RawColumn {
            name,
            data: if categorical[k] {
                ColumnData::Categorical(std::mem::take(&mut cat[k]))
            } else {
                ColumnData::Continuous(std::mem::take(&mut cont[k]))
            },
        })
        .collect();
    Ok(RawTable {
        columns,
        labels,
        groups,
        source_lines,
        report,
    })
}
