//! Shared domain types: per-timepoint datasets, the coefficient matrix,
//! penalty configuration and the temporal difference operator.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One regression task: the cohort observed at a single timepoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Patient identifier for each row of `design`.
    pub patient_ids: Vec<String>,
}

impl Task {
    pub fn n_samples(&self) -> usize {
        self.design.nrows()
    }

    /// Keeps only the rows whose patient is in `keep`, preserving row order.
    pub fn retain_patients(&self, keep: &HashSet<&str>) -> Task {
        let rows: Vec<usize> = self
            .patient_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| keep.contains(id.as_str()))
            .map(|(i, _)| i)
            .collect();
        self.select_rows(&rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Task {
        Task {
            design: self.design.select_rows(rows),
            target: self.target.select_rows(rows),
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
        }
    }
}

/// Per-timepoint design matrices and targets.
///
/// Tasks share the feature set but not the cohort: each timepoint carries
/// its own rows, so attrition shows up as shrinking `patient_counts`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    tasks: Vec<Task>,
    feature_names: Vec<String>,
    timepoint_labels: Vec<String>,
}

impl TaskDataset {
    pub fn new(
        tasks: Vec<Task>,
        feature_names: Vec<String>,
        timepoint_labels: Vec<String>,
    ) -> Result<Self> {
        let p = feature_names.len();
        if p == 0 {
            return Err(Error::Dimension("dataset needs at least one feature".into()));
        }
        if tasks.len() < 2 {
            return Err(Error::Dimension(format!(
                "dataset needs at least two tasks, got {}",
                tasks.len()
            )));
        }
        if timepoint_labels.len() != tasks.len() {
            return Err(Error::Dimension(format!(
                "{} timepoint labels for {} tasks",
                timepoint_labels.len(),
                tasks.len()
            )));
        }
        for (i, task) in tasks.iter().enumerate() {
            let label = &timepoint_labels[i];
            if task.design.ncols() != p {
                return Err(Error::Dimension(format!(
                    "task {label} has {} columns, expected {p}",
                    task.design.ncols()
                )));
            }
            let n = task.design.nrows();
            if task.target.len() != n || task.patient_ids.len() != n {
                return Err(Error::Dimension(format!(
                    "task {label}: {n} design rows, {} targets, {} patient ids",
                    task.target.len(),
                    task.patient_ids.len()
                )));
            }
            if n < 2 {
                return Err(Error::InvalidData(format!(
                    "task {label} has {n} samples, at least 2 required"
                )));
            }
            if task.design.iter().chain(task.target.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("task data"));
            }
            let mut seen = HashSet::with_capacity(n);
            for id in &task.patient_ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidData(format!(
                        "patient {id} appears twice in task {label}"
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            feature_names,
            timepoint_labels,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> &Task {
        &self.tasks[i]
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn timepoint_labels(&self) -> &[String] {
        &self.timepoint_labels
    }

    pub fn patient_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::n_samples).collect()
    }

    /// Sorted, de-duplicated list of every patient seen at any timepoint.
    pub fn patients(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .tasks
            .iter()
            .flat_map(|t| t.patient_ids.iter().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    }

    /// Restricts every task to the given patients. Fails if a task is left
    /// with fewer than two rows.
    pub fn restrict_to(&self, keep: &HashSet<&str>) -> Result<TaskDataset> {
        let tasks = self.tasks.iter().map(|t| t.retain_patients(keep)).collect();
        TaskDataset::new(tasks, self.feature_names.clone(), self.timepoint_labels.clone())
    }

    /// True when every task uses the same design matrix.
    pub fn has_shared_design(&self) -> bool {
        let first = &self.tasks[0].design;
        self.tasks[1..].iter().all(|t| &t.design == first)
    }

    /// Predictions `X_i w_i` for every task.
    pub fn predict(&self, w: &WeightMatrix) -> Result<Vec<DVector<f64>>> {
        w.check_shape(self.n_features(), self.n_tasks())?;
        Ok(self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| &t.design * w.values.column(i))
            .collect())
    }
}

/// Coefficient matrix `W` (p x t); column `i` is the model for task `i`.
/// Serializes as row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct WeightMatrix {
    pub values: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self { values })
    }

    pub fn zeros(p: usize, t: usize) -> Self {
        Self {
            values: DMatrix::zeros(p, t),
        }
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.values.ncols()
    }

    pub fn check_shape(&self, p: usize, t: usize) -> Result<()> {
        if self.values.shape() != (p, t) {
            return Err(Error::Dimension(format!(
                "weight matrix is {}x{}, expected {p}x{t}",
                self.values.nrows(),
                self.values.ncols()
            )));
        }
        Ok(())
    }

    /// Row-major nested vectors, the layout used in JSON model files.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }
}

impl From<WeightMatrix> for Vec<Vec<f64>> {
    fn from(w: WeightMatrix) -> Self {
        w.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for WeightMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

/// Which matrix the feature-similarity penalty multiplies `W` by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// The fused, thresholded correlation matrix as constructed.
    #[default]
    FusedCorrelation,
    /// Signed Laplacian of the fused correlation graph.
    SignedLaplacian,
}

/// Regularization weights, correlation threshold and ADMM penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Entrywise sparsity weight.
    pub lambda1: f64,
    /// Feature-similarity graph weight.
    pub lambda2: f64,
    /// Temporal fusion weight.
    pub lambda3: f64,
    /// Correlation threshold in [0, 1].
    pub tau: f64,
    /// ADMM penalty parameter.
    pub rho: f64,
    pub graph_mode: GraphMode,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
            lambda3: 1.0,
            tau: 0.5,
            rho: 1.0,
            graph_mode: GraphMode::FusedCorrelation,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The t x (t-1) forward-difference operator `H`: `(W H)_j = w_j - w_{j+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalDifferenceOperator {
    values: DMatrix<f64>,
}

impl TemporalDifferenceOperator {
    pub fn new(t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::Dimension(format!(
                "temporal operator needs at least two tasks, got {t}"
            )));
        }
        let values = DMatrix::from_fn(t, t - 1, |i, j| {
            if i == j {
                1.0
            } else if i == j + 1 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(Self { values })
    }

    pub fn n_tasks(&self) -> usize {
        self.values.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `W H`, computed as explicit adjacent-column differences.
    pub fn apply(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self.n_tasks();
        debug_assert_eq!(w.ncols(), t);
        DMatrix::from_fn(w.nrows(), t - 1, |m, j| w[(m, j)] - w[(m, j + 1)])
    }

    /// `V H^T` for a p x (t-1) matrix `V`: column i is `v_i - v_{i-1}` with
    /// out-of-range columns treated as zero.
    pub fn apply_transpose(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self.n_tasks();
        debug_assert_eq!(v.ncols(), t - 1);
        DMatrix::from_fn(v.nrows(), t, |m, i| {
            let own = if i < t - 1 { v[(m, i)] } else { 0.0 };
            let prev = if i > 0 { v[(m, i - 1)] } else { 0.0 };
            own - prev
        })
    }

    /// Diagonal entry `i` of `F = H H^T` (1 at the ends, 2 in the interior).
    pub fn gram_diagonal(&self, i: usize) -> f64 {
        let t = self.n_tasks();
        if i == 0 || i == t - 1 {
            1.0
        } else {
            2.0
        }
    }
}

pub fn build_temporal_operator(t: usize) -> Result<TemporalDifferenceOperator> {
    TemporalDifferenceOperator::new(t)
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
