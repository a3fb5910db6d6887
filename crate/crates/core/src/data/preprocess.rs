use serde::{Deserialize, Serialize};

use super::{cell_counts, CellCounts, ColumnData, DataError, RawTable};

/// Encoding statistics fitted on one index set and applied to any table with
/// the same feature columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnStats {
    Continuous {
        name: String,
        mean: f64,
        std: f64,
        median: f64,
    },
    Categorical {
        name: String,
        categories: Vec<String>,
    },
}

impl ColumnStats {
    pub fn name(&self) -> &str {
        match self {
            ColumnStats::Continuous { name, .. } | ColumnStats::Categorical { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            ColumnStats::Continuous { .. } => 1,
            ColumnStats::Categorical { categories, .. } => categories.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub columns: Vec<ColumnStats>,
    /// Columns removed at fit time (zero variance or never observed).
    #[serde(default)]
    pub dropped: Vec<String>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl PreprocessStats {
    /// Fits statistics on the rows in `fit` only.
    pub fn fit(table: &RawTable, fit: &[usize]) -> Result<Self, DataError> {
        if fit.is_empty() {
            return Err(DataError::InvalidSplit("fitting indices are empty".into()));
        }
        let mut columns = Vec::new();
        let mut dropped = Vec::new();
        for col in &table.columns {
            match &col.data {
                ColumnData::Continuous(values) => {
                    let mut observed: Vec<f64> = fit.iter().filter_map(|&i| values[i]).collect();
                    if observed.is_empty() {
                        log::warn!(
                            "column `{}` has no observed values in the fitting split; dropped",
                            col.name
                        );
                        dropped.push(col.name.clone());
                        continue;
                    }
                    let med = median(&mut observed);
                    let imputed: Vec<f64> = fit.iter().map(|&i| values[i].unwrap_or(med)).collect();
                    let n = imputed.len() as f64;
                    let mean = imputed.iter().sum::<f64>() / n;
                    let var = imputed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    if !(std > 1e-12 * mean.abs().max(1.0)) {
                        log::warn!(
                            "column `{}` has zero variance in the fitting split; dropped",
                            col.name
                        );
                        dropped.push(col.name.clone());
                        continue;
                    }
                    columns.push(ColumnStats::Continuous {
                        name: col.name.clone(),
                        mean,
                        std,
                        median: med,
                    });
                }
                ColumnData::Categorical(values) => {
                    let mut categories: Vec<String> =
                        fit.iter().map(|&i| values[i].clone()).collect();
                    categories.sort();
                    categories.dedup();
                    columns.push(ColumnStats::Categorical {
                        name: col.name.clone(),
                        categories,
                    });
                }
            }
        }
        Ok(PreprocessStats { columns, dropped })
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnStats::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .flat_map(|c| match c {
                ColumnStats::Continuous { name, .. } => vec![name.clone()],
                ColumnStats::Categorical { name, categories } => {
                    categories.iter().map(|k| format!("{name}={k}")).collect()
                }
            })
            .collect()
    }

    /// Encodes every row of `table`. Categories unseen at fit time encode as
    /// an all-zero block; missing continuous values take the fitted median.
    pub fn transform(&self, table: &RawTable) -> Result<Dataset, DataError> {
        let n = table.len();
        let width = self.width();
        let mut features = vec![0.0; n * width];
        let mut offset = 0;
        for stats in &self.columns {
            let col = table
                .column(stats.name())
                .ok_or_else(|| DataError::SchemaMismatch {
                    column: stats.name().to_string(),
                    reason: "column absent from data".into(),
                })?;
            match (stats, &col.data) {
                (
                    ColumnStats::Continuous {
                        mean, std, median, ..
                    },
                    ColumnData::Continuous(values),
                ) => {
                    for (i, v) in values.iter().enumerate() {
                        features[i * width + offset] = (v.unwrap_or(*median) - mean) / std;
                    }
                }
                (ColumnStats::Categorical { categories, .. }, ColumnData::Categorical(values)) => {
                    for (i, v) in values.iter().enumerate() {
                        if let Ok(k) = categories.binary_search(v) {
                            features[i * width + offset + k] = 1.0;
                        }
                    }
                }
                _ => {
                    return Err(DataError::SchemaMismatch {
                        column: stats.name().to_string(),
                        reason: "continuous/categorical kind differs from the fitted schema".into(),
                    })
                }
            }
            offset += stats.width();
        }
        Ok(Dataset {
            features,
            n_features: width,
            labels: table.labels.clone(),
            groups: table.groups.clone(),
            feature_names: self.feature_names(),
            stats: Some(self.clone()),
        })
    }
}

/// Fits on `fit` and encodes the whole table. Rows outside `fit` never
/// influence the statistics.
pub fn preprocess(table: &RawTable, fit: &[usize]) -> Result<Dataset, DataError> {
    PreprocessStats::fit(table, fit)?.transform(table)
}

/// Encoded feature matrix (row-major) with labels and protected groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<u8>,
    pub groups: Vec<u8>,
    pub feature_names: Vec<String>,
    pub stats: Option<PreprocessStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn cell_counts(&self, indices: &[usize]) -> CellCounts {
        cell_counts(&self.labels, &self.groups, indices)
    }

    /// Same rows as a raw table of continuous columns, for pipelines that refit
    /// preprocessing per fold.
    pub fn to_raw_table(&self) -> RawTable {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| self.row(i).to_vec()).collect();
        RawTable::from_dense(
            self.feature_names.clone(),
            &rows,
            self.labels.clone(),
            self.groups.clone(),
        )
    }
}
