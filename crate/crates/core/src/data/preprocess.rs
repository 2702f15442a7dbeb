use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::table::{LongitudinalTable, TableRow};
use crate::error::{Error, Result};
use crate::types::{Task, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Subtract the per-timepoint training mean from the targets. The model
    /// has no intercept, so this is what lets it fit targets with a nonzero
    /// mean.
    pub center_targets: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            center_targets: true,
        }
    }
}

/// Statistics fitted on one timepoint of the training table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimepointParams {
    /// Feature means over observed values; used for imputation and centering.
    pub means: Vec<f64>,
    /// Sample standard deviations after imputation; 0 marks a constant feature.
    pub stds: Vec<f64>,
    pub target_mean: f64,
}

/// Everything needed to apply the training preprocessing to new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub feature_names: Vec<String>,
    pub timepoints: Vec<String>,
    pub per_timepoint: Vec<TimepointParams>,
    pub options: PreprocessOptions,
}

impl PreprocessParams {
    /// Applies the fitted imputation and scaling to `table`. Rows without a
    /// target are dropped.
    pub fn transform(&self, table: &LongitudinalTable) -> Result<TaskDataset> {
        self.check_schema(table)?;
        let tasks = (0..self.timepoints.len())
            .map(|t| {
                let rows: Vec<&TableRow> = labelled_rows(table, t).collect();
                Ok(self.apply(t, &rows))
            })
            .collect::<Result<Vec<_>>>()?;
        TaskDataset::new(tasks, self.feature_names.clone(), self.timepoints.clone())
    }

    /// Like [`transform`](Self::transform) but keeps rows with a missing
    /// target (their target is 0), for prediction.
    pub fn transform_for_prediction(&self, table: &LongitudinalTable) -> Result<Vec<Task>> {
        self.check_schema(table)?;
        Ok((0..self.timepoints.len())
            .map(|t| {
                let rows: Vec<&TableRow> = table.rows.iter().filter(|r| r.timepoint == t).collect();
                self.apply(t, &rows)
            })
            .collect())
    }

    /// Undoes target centering for predictions of task `t`.
    pub fn restore_target(&self, t: usize, centered: f64) -> f64 {
        if self.options.center_targets {
            centered + self.per_timepoint[t].target_mean
        } else {
            centered
        }
    }

    fn check_schema(&self, table: &LongitudinalTable) -> Result<()> {
        if table.feature_names != self.feature_names {
            return Err(Error::InvalidData(format!(
                "feature columns do not match the fitted schema ({} vs {} features)",
                table.feature_names.len(),
                self.feature_names.len()
            )));
        }
        if table.timepoints != self.timepoints {
            return Err(Error::InvalidData("timepoint labels do not match the fitted schema".into()));
        }
        Ok(())
    }

    fn apply(&self, t: usize, rows: &[&TableRow]) -> Task {
        let params = &self.per_timepoint[t];
        let p = self.feature_names.len();
        let design = DMatrix::from_fn(rows.len(), p, |r, m| {
            let x = rows[r].features[m].unwrap_or(params.means[m]);
            standardize(x, params.means[m], params.stds[m])
        });
        let shift = if self.options.center_targets { params.target_mean } else { 0.0 };
        let target = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|r| r.target.unwrap_or(shift) - shift),
        );
        Task {
            design,
            target,
            patient_ids: rows.iter().map(|r| r.patient_id.clone()).collect(),
        }
    }
}

fn standardize(x: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (x - mean) / std
    } else {
        0.0
    }
}

fn labelled_rows(table: &LongitudinalTable, t: usize) -> impl Iterator<Item = &TableRow> {
    table
        .rows
        .iter()
        .filter(move |r| r.timepoint == t && r.target.is_some())
}

fn fit_timepoint(table: &LongitudinalTable, t: usize) -> Result<TimepointParams> {
    let rows: Vec<&TableRow> = labelled_rows(table, t).collect();
    let label = &table.timepoints[t];
    if rows.len() < 2 {
        return Err(Error::InvalidData(format!(
            "timepoint {label} has {} patients with a target, at least 2 required",
            rows.len()
        )));
    }
    let p = table.feature_names.len();
    let n = rows.len() as f64;
    let mut means = Vec::with_capacity(p);
    let mut stds = Vec::with_capacity(p);
    for m in 0..p {
        let observed: Vec<f64> = rows.iter().filter_map(|r| r.features[m]).collect();
        let mean = if observed.is_empty() {
            warn!(
                "feature {} has no observed values at {label}; imputing 0",
                table.feature_names[m]
            );
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        let ss: f64 = rows
            .iter()
            .map(|r| (r.features[m].unwrap_or(mean) - mean).powi(2))
            .sum();
        let mut std = (ss / (n - 1.0)).sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            warn!(
                "feature {} is constant at {label}; its standardized values are 0",
                table.feature_names[m]
            );
            std = 0.0;
        }
        means.push(mean);
        stds.push(std);
    }
    let target_mean = rows.iter().map(|r| r.target.unwrap_or(0.0)).sum::<f64>() / n;
    Ok(TimepointParams {
        means,
        stds,
        target_mean,
    })
}

/// Drops target-less rows per timepoint, imputes missing features with the
/// per-timepoint mean of the remaining rows, then z-scores each feature per
/// timepoint.
pub fn preprocess(
    table: &LongitudinalTable,
    options: PreprocessOptions,
) -> Result<(TaskDataset, PreprocessParams)> {
    let per_timepoint = (0..table.timepoints.len())
        .map(|t| fit_timepoint(table, t))
        .collect::<Result<Vec<_>>>()?;
    let params = PreprocessParams {
        feature_names: table.feature_names.clone(),
        timepoints: table.timepoints.clone(),
        per_timepoint,
        options,
    };
    let data = params.transform(table)?;
    Ok((data, params))
}

/// Fully observed table holding the rows of `data` unchanged.
pub fn dataset_to_table(data: &TaskDataset) -> LongitudinalTable {
    let mut rows = Vec::new();
    for (t, task) in data.tasks().iter().enumerate() {
        for (r, id) in task.patient_ids.iter().enumerate() {
            rows.push(TableRow {
                patient_id: id.clone(),
                timepoint: t,
                features: task.design.row(r).iter().map(|v| Some(*v)).collect(),
                target: Some(task.target[r]),
            });
        }
    }
    LongitudinalTable {
        feature_names: data.feature_names().to_vec(),
        timepoints: data.timepoint_labels().to_vec(),
        rows,
    }
}
