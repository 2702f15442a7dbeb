//! Patient-level train/test splits and grid-search cross-validation.

use std::collections::HashSet;
use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, FusionGraph};
use crate::metrics::{evaluate, EvaluationReport, SpreadConvention};
use crate::solver::{solve, SolveStatus, SolverOptions};
use crate::types::{GraphMode, PenaltyConfig, TaskDataset, WeightMatrix};

/// Candidate values for the sparsity and temporal weights.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.01, 0.1, 1.0, 10.0, 50.0, 100.0, 500.0, 1000.0];
/// Candidate values for the graph weight.
pub const DEFAULT_LAMBDA2_GRID: [f64; 10] = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1];
pub const DEFAULT_TAU_GRID: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Nmse,
    Wr,
    MeanRmse,
}

impl SelectionMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, SelectionMetric::Wr)
    }

    pub fn read(self, report: &EvaluationReport) -> f64 {
        match self {
            SelectionMetric::Nmse => report.nmse,
            SelectionMetric::Wr => report.wr,
            SelectionMetric::MeanRmse => report.mean_rmse(),
        }
    }
}

/// One point of the hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl GridCell {
    pub fn config(&self, rho: f64, graph_mode: GraphMode) -> PenaltyConfig {
        PenaltyConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
            rho,
            graph_mode,
        }
    }

    fn key(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.tau]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    pub lambda3_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub folds: usize,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
    pub rho: f64,
    pub graph_mode: GraphMode,
    pub spread: SpreadConvention,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambda1_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            lambda2_grid: DEFAULT_LAMBDA2_GRID.to_vec(),
            lambda3_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            folds: 10,
            selection_metric: SelectionMetric::Nmse,
            seed: 0,
            rho: 1.0,
            graph_mode: GraphMode::FusedCorrelation,
            spread: SpreadConvention::Variance,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let grids = [
            ("lambda1", &self.lambda1_grid),
            ("lambda2", &self.lambda2_grid),
            ("lambda3", &self.lambda3_grid),
        ];
        for (name, grid) in grids {
            if grid.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} grid is empty")));
            }
            if let Some(v) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig(format!("{name} grid value {v} is not >= 0")));
            }
        }
        if self.tau_grid.is_empty() {
            return Err(Error::InvalidConfig("tau grid is empty".into()));
        }
        if let Some(v) = self.tau_grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("tau grid value {v} outside [0, 1]")));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }

    /// Cartesian product in (lambda1, lambda2, lambda3, tau) nesting order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &lambda1 in &self.lambda1_grid {
            for &lambda2 in &self.lambda2_grid {
                for &lambda3 in &self.lambda3_grid {
                    for &tau in &self.tau_grid {
                        cells.push(GridCell { lambda1, lambda2, lambda3, tau });
                    }
                }
            }
        }
        cells
    }
}

fn shuffled_patients(data: &TaskDataset, seed: u64) -> Vec<String> {
    let mut patients = data.patients();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    patients
}

fn restrict(data: &TaskDataset, ids: &[String], what: &str) -> Result<TaskDataset> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    data.restrict_to(&keep).map_err(|e| {
        Error::InvalidData(format!("{what} is not a valid dataset: {e}"))
    })
}

/// Partitions patients (not rows) into train and test sets. The test set
/// gets `round(fraction * n_patients)` patients, at least one.
pub fn split_train_test(
    data: &TaskDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let patients = shuffled_patients(data, seed);
    let n = patients.len();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (test, train) = patients.split_at(n_test);
    Ok((restrict(data, train, "training split")?, restrict(data, test, "test split")?))
}

/// Assigns shuffled patients round-robin to `k` folds.
pub fn patient_folds(data: &TaskDataset, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {k}")));
    }
    let patients = shuffled_patients(data, seed);
    if patients.len() < k {
        return Err(Error::InvalidConfig(format!(
            "{k} folds requested but only {} patients",
            patients.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in patients.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

/// Training and validation portions of one fold.
#[derive(Clone, Debug)]
pub struct Fold {
    pub train: TaskDataset,
    pub validation: TaskDataset,
}

pub fn make_folds(data: &TaskDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let groups = patient_folds(data, k, seed)?;
    groups
        .iter()
        .enumerate()
        .map(|(f, held_out)| {
            let held: HashSet<&str> = held_out.iter().map(String::as_str).collect();
            let rest: Vec<String> = data
                .patients()
                .into_iter()
                .filter(|p| !held.contains(p.as_str()))
                .collect();
            Ok(Fold {
                train: restrict(data, &rest, &format!("training portion of fold {f}"))?,
                validation: restrict(data, held_out, &format!("validation portion of fold {f}"))?,
            })
        })
        .collect()
}

/// Cross-validation outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell: GridCell,
    /// Metric per fold; `None` where it was undefined.
    pub fold_scores: Vec<Option<f64>>,
    /// Mean over folds; `None` disqualifies the cell.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Folds whose solve hit the iteration limit.
    pub max_iteration_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: GridSpec,
    pub scores: Vec<CellScore>,
    pub best_index: usize,
    pub best_cell: GridCell,
    pub refit_weights: WeightMatrix,
    pub refit_sparse_weights: WeightMatrix,
    pub refit_status: SolveStatus,
    pub refit_iterations: usize,
}

impl CvResult {
    pub fn best_config(&self) -> PenaltyConfig {
        self.best_cell.config(self.grid.rho, self.grid.graph_mode)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// One row per cell: `lambda1,lambda2,lambda3,tau,mean,std,max_iteration_folds,fold_1..`.
    pub fn write_grid_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["lambda1", "lambda2", "lambda3", "tau", "mean", "std", "max_iteration_folds"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.grid.folds).map(|f| format!("fold_{f}")));
        wtr.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.scores {
            let mut rec: Vec<String> = s.cell.key().iter().map(|v| v.to_string()).collect();
            rec.push(opt(s.mean));
            rec.push(opt(s.std));
            rec.push(s.max_iteration_folds.to_string());
            rec.extend(s.fold_scores.iter().map(|v| opt(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Index of the best-scoring cell. Ties on the mean go to the
/// lexicographically smaller `(lambda1, lambda2, lambda3, tau)`.
pub fn select_best(scores: &[CellScore], metric: SelectionMetric) -> Option<usize> {
    let oriented = |s: &CellScore| s.mean.map(|m| if metric.higher_is_better() { -m } else { m });
    (0..scores.len())
        .filter(|&i| oriented(&scores[i]).is_some_and(f64::is_finite))
        .min_by(|&a, &b| {
            let (sa, sb) = (oriented(&scores[a]).unwrap(), oriented(&scores[b]).unwrap());
            sa.total_cmp(&sb).then_with(|| {
                let (ka, kb) = (scores[a].cell.key(), scores[b].cell.key());
                ka.iter()
                    .zip(&kb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        })
}

fn score_fold(
    fold: &Fold,
    graph: &FusionGraph,
    cfg: &PenaltyConfig,
    opts: &SolverOptions,
    grid: &GridSpec,
) -> Result<(Option<f64>, bool)> {
    let sol = solve(&fold.train, graph, cfg, opts)?;
    let hit_limit = sol.status == SolveStatus::MaxIterations;
    let score = match evaluate(&fold.validation, &sol.weights, grid.spread) {
        Ok(report) => Some(grid.selection_metric.read(&report)).filter(|v| v.is_finite()),
        Err(Error::UndefinedMetric { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok((score, hit_limit))
}

/// K-fold grid search. For every cell and fold the similarity graph is
/// rebuilt from the fold's training patients only. The best cell is then
/// refitted on all of `train`.
pub fn cross_validate(
    train: &TaskDataset,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> Result<CvResult> {
    grid.validate()?;
    opts.validate()?;
    let folds = make_folds(train, grid.folds, grid.seed)?;

    let mut taus: Vec<f64> = grid.tau_grid.clone();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let jobs: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..taus.len()).map(move |k| (f, k)))
        .collect();
    let graphs: Vec<FusionGraph> = jobs
        .par_iter()
        .map(|&(f, k)| build_graph(&folds[f].train, taus[k], grid.graph_mode))
        .collect::<Result<_>>()?;
    let graph_for = |f: usize, tau: f64| {
        let k = taus.iter().position(|t| *t == tau).expect("tau from grid");
        &graphs[f * taus.len() + k]
    };

    let cells = grid.cells();
    let work: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let results: Vec<(Option<f64>, bool)> = work
        .par_iter()
        .map(|&(c, f)| {
            let cfg = cells[c].config(grid.rho, grid.graph_mode);
            score_fold(&folds[f], graph_for(f, cells[c].tau), &cfg, opts, grid)
        })
        .collect::<Result<_>>()?;

    let scores: Vec<CellScore> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let per_fold = &results[c * folds.len()..(c + 1) * folds.len()];
            let fold_scores: Vec<Option<f64>> = per_fold.iter().map(|r| r.0).collect();
            let max_iteration_folds = per_fold.iter().filter(|r| r.1).count();
            if max_iteration_folds > 0 {
                warn!(
                    "cell {cell:?}: {max_iteration_folds} of {} folds hit the iteration limit",
                    folds.len()
                );
            }
            let defined: Option<Vec<f64>> = fold_scores.iter().copied().collect();
            let (mean, std) = match defined {
                Some(v) => {
                    let (m, s) = mean_std(&v);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            CellScore { cell: *cell, fold_scores, mean, std, max_iteration_folds }
        })
        .collect();

    let best_index = select_best(&scores, grid.selection_metric).ok_or_else(|| {
        Error::InvalidData("every grid cell has an undefined validation metric".into())
    })?;
    let best_cell = scores[best_index].cell;
    let cfg = best_cell.config(grid.rho, grid.graph_mode);
    let graph = build_graph(train, best_cell.tau, grid.graph_mode)?;
    let refit = solve(train, &graph, &cfg, opts)?;
    if refit.status == SolveStatus::MaxIterations {
        warn!("refit at {best_cell:?} hit the iteration limit");
    }
    Ok(CvResult {
        grid: grid.clone(),
        scores,
        best_index,
        best_cell,
        refit_weights: refit.weights,
        refit_sparse_weights: refit.sparse_weights,
        refit_status: refit.status,
        refit_iterations: refit.iterations,
    })
}
