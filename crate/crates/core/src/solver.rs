//! Three-block ADMM for the penalized multi-task objective.
//!
//! The problem is split as
//!
//! ```text
//! min 1/2 sum_i ||X_i w_i - y_i||^2 + l1 ||Q||_1 + l2 ||P||_1 + l3 ||V||_1
//! s.t. W = Q,  S W = P,  W H = V
//! ```
//!
//! Duals are kept in scaled form (`U = multiplier / rho`), so every
//! proximal step reads `prox(A W + U, lambda / rho)` and the dual ascent is
//! `U += A W - Z`.
//!
//! The W-step couples the columns through `F = H H^T`. By default it is
//! carried out as one Gauss-Seidel sweep over the columns: column `i` solves
//!
//! ```text
//! (X_i^T X_i + rho (1 + F_ii) I + rho S S) w_i
//!     = X_i^T y_i + rho [(Q - U_q) + S (P - U_p) + (V - U_v) H^T]_i
//!       + rho (w_{i-1} + w_{i+1})
//! ```
//!
//! with the neighbours taken at their most recent values, using a Cholesky
//! factor computed once per solve. When every task shares one design matrix
//! the W-step can instead be solved exactly by diagonalizing `F`.

use std::io::Write;
use std::time::Instant;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FusionGraph;
use crate::objective::{loss_gradient, objective_terms, ObjectiveTerms};
use crate::prox::prox_l1_into;
use crate::types::{PenaltyConfig, TaskDataset, TemporalDifferenceOperator, WeightMatrix};

/// How the W-subproblem is solved each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WUpdate {
    /// One Gauss-Seidel sweep over the task columns.
    #[default]
    GaussSeidel,
    /// Exact solve through the eigendecomposition of `H H^T`. Only valid
    /// when every task has the same design matrix.
    SharedDesignExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Record a trace entry every this many iterations (the last iteration
    /// is always recorded).
    pub trace_every: usize,
    pub w_update: WUpdate,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            eps_abs: 1e-6,
            eps_rel: 1e-4,
            trace_every: 1,
            w_update: WUpdate::GaussSeidel,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.trace_every == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations and trace_every must be positive".into(),
            ));
        }
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Residual norms and the scales the stopping rule compares them against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSnapshot {
    /// `||W - Q||_F`
    pub primal_q: f64,
    /// `||S W - P||_F` (0 when the graph block is inactive)
    pub primal_p: f64,
    /// `||W H - V||_F`
    pub primal_v: f64,
    /// Combined primal residual norm.
    pub primal: f64,
    /// `rho ||dQ + S dP + dV H^T||_F`
    pub dual: f64,
    /// `max(||(W, SW, WH)||, ||(Q, P, V)||)`
    pub primal_scale: f64,
    /// `rho ||U_q + S U_p + U_v H^T||_F`
    pub dual_scale: f64,
    pub constraint_dim: usize,
    pub variable_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Converged,
    MaxIterations,
}

/// Absolute/relative residual test.
pub fn check_stopping(
    snapshot: &ResidualSnapshot,
    iteration: usize,
    opts: &SolverOptions,
) -> StopDecision {
    let eps_pri = opts.eps_abs * (snapshot.constraint_dim as f64).sqrt()
        + opts.eps_rel * snapshot.primal_scale;
    let eps_dual = opts.eps_abs * (snapshot.variable_dim as f64).sqrt()
        + opts.eps_rel * snapshot.dual_scale;
    if snapshot.primal <= eps_pri && snapshot.dual <= eps_dual {
        StopDecision::Converged
    } else if iteration >= opts.max_iterations {
        StopDecision::MaxIterations
    } else {
        StopDecision::Continue
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub terms: ObjectiveTerms,
    pub residuals: ResidualSnapshot,
    /// Seconds since the solve started.
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<IterationRecord>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Running minimum of the objective.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.records
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.objective);
                Some(*best)
            })
            .collect()
    }

    /// CSV with one row per recorded iteration. Wall-clock times are left
    /// out so that reruns produce identical files.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "iteration",
            "objective",
            "loss",
            "sparsity",
            "graph",
            "temporal",
            "primal_q",
            "primal_p",
            "primal_v",
            "primal",
            "dual",
        ])?;
        for r in &self.records {
            wtr.write_record(&[
                r.iteration.to_string(),
                r.objective.to_string(),
                r.terms.loss.to_string(),
                r.terms.sparsity.to_string(),
                r.terms.graph.to_string(),
                r.terms.temporal.to_string(),
                r.residuals.primal_q.to_string(),
                r.residuals.primal_p.to_string(),
                r.residuals.primal_v.to_string(),
                r.residuals.primal.to_string(),
                r.residuals.dual.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
enum Factorization {
    /// One factor per task column.
    PerTask(Vec<Cholesky<f64, Dyn>>),
    /// Eigenvectors of `H H^T` and one factor per eigenvalue.
    Shared {
        eigenvectors: DMatrix<f64>,
        factors: Vec<Cholesky<f64, Dyn>>,
    },
}

/// Primal, split and scaled dual variables plus the cached factorizations.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub w: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u_q: DMatrix<f64>,
    pub u_p: DMatrix<f64>,
    pub u_v: DMatrix<f64>,
    /// `S W` at the current W (zero-sized when the graph block is off).
    pub sw: DMatrix<f64>,
    /// `W H` at the current W.
    pub wh: DMatrix<f64>,
    pub iteration: usize,
    rho: f64,
    graph_active: bool,
    xty: Vec<DVector<f64>>,
    factorization: Factorization,
}

impl SolverState {
    /// Zero-initialized state with factorizations for `rho` and the graph.
    pub fn new(
        data: &TaskDataset,
        graph: &FusionGraph,
        cfg: &PenaltyConfig,
        w_update: WUpdate,
    ) -> Result<Self> {
        cfg.validate()?;
        let (p, t) = (data.n_features(), data.n_tasks());
        if graph.matrix.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "graph is {}x{}, dataset has {p} features",
                graph.matrix.nrows(),
                graph.matrix.ncols()
            )));
        }
        if !graph.is_symmetric() {
            return Err(Error::InvalidConfig("similarity matrix must be symmetric".into()));
        }
        let rho = cfg.rho;
        // The graph constraint is dropped entirely when its weight is zero;
        // the fixed points are unchanged.
        let graph_active = cfg.lambda2 > 0.0;
        let ss = graph_active.then(|| &graph.matrix * &graph.matrix);
        let h = TemporalDifferenceOperator::new(t)?;

        let base_system = |xtx: DMatrix<f64>, diag_shift: f64| {
            let mut m = xtx;
            if let Some(ss) = &ss {
                m += ss * rho;
            }
            for k in 0..p {
                m[(k, k)] += diag_shift;
            }
            m
        };
        let factor = |m: DMatrix<f64>| {
            Cholesky::new(m).ok_or_else(|| {
                Error::Internal("W-step system is not positive definite".into())
            })
        };

        let factorization = match w_update {
            WUpdate::GaussSeidel => {
                let factors = data
                    .tasks()
                    .iter()
                    .enumerate()
                    .map(|(i, task)| {
                        let xtx = task.design.tr_mul(&task.design);
                        factor(base_system(xtx, rho * (1.0 + h.gram_diagonal(i))))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Factorization::PerTask(factors)
            }
            WUpdate::SharedDesignExact => {
                if !data.has_shared_design() {
                    return Err(Error::InvalidConfig(
                        "exact W-step requires identical design matrices".into(),
                    ));
                }
                let x = &data.task(0).design;
                let xtx = x.tr_mul(x);
                let f = h.matrix() * h.matrix().transpose();
                let eig = SymmetricEigen::new(f);
                let factors = eig
                    .eigenvalues
                    .iter()
                    .map(|&lambda| factor(base_system(xtx.clone(), rho * (1.0 + lambda))))
                    .collect::<Result<Vec<_>>>()?;
                Factorization::Shared {
                    eigenvectors: eig.eigenvectors,
                    factors,
                }
            }
        };

        let xty = data
            .tasks()
            .iter()
            .map(|task| task.design.tr_mul(&task.target))
            .collect();
        let graph_rows = if graph_active { p } else { 0 };
        Ok(Self {
            w: DMatrix::zeros(p, t),
            q: DMatrix::zeros(p, t),
            p: DMatrix::zeros(graph_rows, t),
            v: DMatrix::zeros(p, t - 1),
            u_q: DMatrix::zeros(p, t),
            u_p: DMatrix::zeros(graph_rows, t),
            u_v: DMatrix::zeros(p, t - 1),
            sw: DMatrix::zeros(graph_rows, t),
            wh: DMatrix::zeros(p, t - 1),
            iteration: 0,
            rho,
            graph_active,
            xty,
            factorization,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn graph_active(&self) -> bool {
        self.graph_active
    }

    /// `rho [(Q - U_q) + S (P - U_p) + (V - U_v) H^T]`
    fn split_rhs(&self, graph: &FusionGraph, h: &TemporalDifferenceOperator) -> DMatrix<f64> {
        let mut c = &self.q - &self.u_q;
        if self.graph_active {
            c += &graph.matrix * (&self.p - &self.u_p);
        }
        c += h.apply_transpose(&(&self.v - &self.u_v));
        c * self.rho
    }

    /// W-step followed by refreshing `S W` and `W H`.
    pub fn update_w(&mut self, graph: &FusionGraph, h: &TemporalDifferenceOperator) {
        let mut c = self.split_rhs(graph, h);
        for (i, xty) in self.xty.iter().enumerate() {
            let mut col = c.column_mut(i);
            col += xty;
        }
        let t = self.w.ncols();
        match &self.factorization {
            Factorization::PerTask(factors) => {
                for (i, chol) in factors.iter().enumerate() {
                    let mut rhs = c.column(i).into_owned();
                    if i > 0 {
                        rhs.axpy(self.rho, &self.w.column(i - 1), 1.0);
                    }
                    if i + 1 < t {
                        rhs.axpy(self.rho, &self.w.column(i + 1), 1.0);
                    }
                    chol.solve_mut(&mut rhs);
                    self.w.set_column(i, &rhs);
                }
            }
            Factorization::Shared {
                eigenvectors,
                factors,
            } => {
                // With F = E diag(l) E^T the system A W + rho W F = C
                // splits into (A + rho l_j I) (W E)_j = (C E)_j.
                let mut rotated = &c * eigenvectors;
                for (j, chol) in factors.iter().enumerate() {
                    let mut col = rotated.column(j).into_owned();
                    chol.solve_mut(&mut col);
                    rotated.set_column(j, &col);
                }
                self.w = rotated * eigenvectors.transpose();
            }
        }
        if self.graph_active {
            self.sw = &graph.matrix * &self.w;
        }
        self.wh = h.apply(&self.w);
    }

    pub fn update_q(&mut self, lambda1: f64) {
        let theta = &self.w + &self.u_q;
        prox_l1_into(&mut self.q, &theta, lambda1 / self.rho);
    }

    pub fn update_p(&mut self, lambda2: f64) {
        if !self.graph_active {
            return;
        }
        let theta = &self.sw + &self.u_p;
        prox_l1_into(&mut self.p, &theta, lambda2 / self.rho);
    }

    pub fn update_v(&mut self, lambda3: f64) {
        let theta = &self.wh + &self.u_v;
        prox_l1_into(&mut self.v, &theta, lambda3 / self.rho);
    }

    pub fn update_duals(&mut self) {
        self.u_q += &self.w - &self.q;
        if self.graph_active {
            self.u_p += &self.sw - &self.p;
        }
        self.u_v += &self.wh - &self.v;
    }

    /// Residuals of the current iterate. `previous` holds Q, P, V from
    /// before this iteration's split updates.
    pub fn residuals(
        &self,
        graph: &FusionGraph,
        h: &TemporalDifferenceOperator,
        previous: &SplitVariables,
    ) -> ResidualSnapshot {
        let (p, t) = self.w.shape();
        let primal_q = (&self.w - &self.q).norm();
        let primal_p = if self.graph_active {
            (&self.sw - &self.p).norm()
        } else {
            0.0
        };
        let primal_v = (&self.wh - &self.v).norm();
        let primal = (primal_q.powi(2) + primal_p.powi(2) + primal_v.powi(2)).sqrt();

        let mut change = &self.q - &previous.q;
        change += h.apply_transpose(&(&self.v - &previous.v));
        let mut dual_dir = self.u_q.clone();
        dual_dir += h.apply_transpose(&self.u_v);
        if self.graph_active {
            change += &graph.matrix * (&self.p - &previous.p);
            dual_dir += &graph.matrix * &self.u_p;
        }

        let ax = (self.w.norm_squared() + self.sw.norm_squared() + self.wh.norm_squared()).sqrt();
        let z = (self.q.norm_squared() + self.p.norm_squared() + self.v.norm_squared()).sqrt();
        let graph_dim = if self.graph_active { p * t } else { 0 };
        ResidualSnapshot {
            primal_q,
            primal_p,
            primal_v,
            primal,
            dual: self.rho * change.norm(),
            primal_scale: ax.max(z),
            dual_scale: self.rho * dual_dir.norm(),
            constraint_dim: p * t + graph_dim + p * (t - 1),
            variable_dim: p * t,
        }
    }

    pub fn split_variables(&self) -> SplitVariables {
        SplitVariables {
            q: self.q.clone(),
            p: self.p.clone(),
            v: self.v.clone(),
        }
    }
}

/// Snapshot of Q, P, V used for the dual residual.
#[derive(Clone, Debug)]
pub struct SplitVariables {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// Result of a solve.
#[derive(Clone, Debug)]
pub struct Solution {
    /// Final W iterate.
    pub weights: WeightMatrix,
    /// Final Q iterate: W after soft thresholding, exactly sparse.
    pub sparse_weights: WeightMatrix,
    pub status: SolveStatus,
    pub iterations: usize,
    pub terms: ObjectiveTerms,
    pub trace: ConvergenceTrace,
    pub state: SolverState,
}

impl Solution {
    pub fn objective(&self) -> f64 {
        self.terms.total()
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Runs ADMM from the all-zero initialization until the residual test
/// passes or the iteration budget is exhausted.
pub fn solve(
    data: &TaskDataset,
    graph: &FusionGraph,
    cfg: &PenaltyConfig,
    opts: &SolverOptions,
) -> Result<Solution> {
    opts.validate()?;
    let start = Instant::now();
    let h = TemporalDifferenceOperator::new(data.n_tasks())?;
    let mut state = SolverState::new(data, graph, cfg, opts.w_update)?;
    let mut trace = ConvergenceTrace::default();

    let status = loop {
        let previous = state.split_variables();
        state.update_w(graph, &h);
        state.update_q(cfg.lambda1);
        state.update_p(cfg.lambda2);
        state.update_v(cfg.lambda3);
        state.update_duals();
        state.iteration += 1;

        let snapshot = state.residuals(graph, &h, &previous);
        if !(snapshot.primal.is_finite() && snapshot.dual.is_finite()) {
            return Err(Error::NonFinite("ADMM iterate"));
        }
        let decision = check_stopping(&snapshot, state.iteration, opts);
        if state.iteration % opts.trace_every == 0 || decision != StopDecision::Continue {
            let terms = objective_terms(
                &WeightMatrix { values: state.w.clone() },
                data,
                graph,
                &h,
                cfg,
            )?;
            trace.records.push(IterationRecord {
                iteration: state.iteration,
                objective: terms.total(),
                terms,
                residuals: snapshot,
                elapsed: start.elapsed().as_secs_f64(),
            });
        }
        match decision {
            StopDecision::Continue => {}
            StopDecision::Converged => break SolveStatus::Converged,
            StopDecision::MaxIterations => break SolveStatus::MaxIterations,
        }
    };

    debug!(
        "ADMM finished after {} iterations ({:?}) in {:.3}s",
        state.iteration,
        status,
        start.elapsed().as_secs_f64()
    );
    let terms = trace.last().map(|r| r.terms).unwrap_or_default();
    Ok(Solution {
        weights: WeightMatrix::new(state.w.clone())?,
        sparse_weights: WeightMatrix::new(state.q.clone())?,
        status,
        iterations: state.iteration,
        terms,
        trace,
        state,
    })
}

/// Stationarity check at the returned iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCertificate {
    /// `||grad g(W) + l1 xi1 + l2 S^T xi2 + l3 xi3 H^T||_F`
    pub residual: f64,
    /// `||grad g(W)||_F`
    pub gradient_norm: f64,
}

impl OptimalityCertificate {
    /// `residual <= rel_tol * (1 + ||grad g||)`.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.residual <= rel_tol * (1.0 + self.gradient_norm)
    }
}

/// Builds subgradients of the three l1 terms from the split variables and
/// measures how far `0` is from the subdifferential at W.
///
/// Where a split variable is nonzero its subgradient is its sign; where it
/// is zero the scaled dual (clipped to [-1, 1]) supplies the entry.
pub fn optimality_certificate(
    data: &TaskDataset,
    graph: &FusionGraph,
    cfg: &PenaltyConfig,
    state: &SolverState,
) -> Result<OptimalityCertificate> {
    let h = TemporalDifferenceOperator::new(data.n_tasks())?;
    let rho = state.rho();
    let subgradient = |z: &DMatrix<f64>, u: &DMatrix<f64>, lambda: f64| {
        z.zip_map(u, |zv, uv| {
            if zv != 0.0 {
                zv.signum()
            } else if lambda > 0.0 {
                (rho * uv / lambda).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
    };
    let grad = loss_gradient(&state.w, data);
    let mut total = grad.clone();
    if cfg.lambda1 > 0.0 {
        total += subgradient(&state.q, &state.u_q, cfg.lambda1) * cfg.lambda1;
    }
    if cfg.lambda2 > 0.0 && state.graph_active() {
        let xi = subgradient(&state.p, &state.u_p, cfg.lambda2);
        total += graph.matrix.transpose() * xi * cfg.lambda2;
    }
    if cfg.lambda3 > 0.0 {
        let xi = subgradient(&state.v, &state.u_v, cfg.lambda3);
        total += h.apply_transpose(&xi) * cfg.lambda3;
    }
    Ok(OptimalityCertificate {
        residual: total.norm(),
        gradient_norm: grad.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GraphMode, Task};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(p: usize, ns: &[usize], seed: u64) -> TaskDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_true: Vec<f64> = (0..p).map(|m| if m % 2 == 0 { 1.0 + m as f64 * 0.1 } else { 0.0 }).collect();
        let tasks = ns
            .iter()
            .map(|&n| {
                let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(n, |r, _| {
                    (0..p).map(|m| x[(r, m)] * w_true[m]).sum::<f64>() + rng.random_range(-0.1..0.1)
                });
                Task { design: x, target: y, patient_ids: (0..n).map(|i| format!("p{i}")).collect() }
            })
            .collect();
        TaskDataset::new(
            tasks,
            (0..p).map(|m| format!("f{m}")).collect(),
            (0..ns.len()).map(|i| format!("t{i}")).collect(),
        )
        .unwrap()
    }

    fn small_graph(p: usize) -> FusionGraph {
        let s = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else if i.abs_diff(j) == 1 { 0.5 } else { 0.0 });
        FusionGraph { matrix: s, tau: 0.3, weights: vec![1.0], mode: GraphMode::FusedCorrelation }
    }

    #[test]
    fn stopping_rule_cases() {
        let opts = SolverOptions::default();
        let zero = ResidualSnapshot { constraint_dim: 10, variable_dim: 4, ..Default::default() };
        assert_eq!(check_stopping(&zero, 1, &opts), StopDecision::Converged);
        let big = ResidualSnapshot { primal: 10.0, dual: 10.0, primal_scale: 1.0, dual_scale: 1.0, ..zero };
        assert_eq!(check_stopping(&big, 3, &opts), StopDecision::Continue);
        assert_eq!(check_stopping(&big, opts.max_iterations, &opts), StopDecision::MaxIterations);
    }

    #[test]
    fn tighter_relative_tolerance_never_converges_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let snap = ResidualSnapshot {
                primal: rng.random_range(0.0..1e-3),
                dual: rng.random_range(0.0..1e-3),
                primal_scale: rng.random_range(0.0..10.0),
                dual_scale: rng.random_range(0.0..10.0),
                constraint_dim: 12,
                variable_dim: 5,
                ..Default::default()
            };
            let loose = SolverOptions::default();
            let tight = SolverOptions { eps_rel: loose.eps_rel / 10.0, ..loose };
            if check_stopping(&snap, 1, &loose) != StopDecision::Converged {
                assert_ne!(check_stopping(&snap, 1, &tight), StopDecision::Converged);
            }
        }
    }

    #[test]
    fn two_task_coupling_uses_neighbour_column() {
        // With t = 2, F = [[1, -1], [-1, 1]]: the sweep for column 0 sees
        // rho * w_1 on the right-hand side.
        let data = random_dataset(2, &[6, 5], 3);
        let graph = small_graph(2);
        let cfg = PenaltyConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, rho: 2.0, ..Default::default() };
        let h = TemporalDifferenceOperator::new(2).unwrap();
        let mut state = SolverState::new(&data, &graph, &cfg, WUpdate::GaussSeidel).unwrap();
        state.w = dmatrix![0.3, -0.7; 1.1, 0.4];
        state.q = dmatrix![0.1, 0.2; 0.3, 0.4];
        state.v = dmatrix![0.05; -0.02];
        state.update_w(&graph, &h);
        // Column 0 satisfies its stationarity equation given the old w_1.
        let x0 = &data.task(0).design;
        let lhs = (x0.tr_mul(x0) + DMatrix::identity(2, 2) * 2.0 * 2.0) * state.w.column(0);
        let rhs = x0.tr_mul(&data.task(0).target)
            + state.q.column(0) * 2.0
            + state.v.column(0) * 2.0
            + dmatrix![-0.7; 0.4] * 2.0;
        assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sweep_satisfies_column_stationarity_with_graph() {
        let data = random_dataset(4, &[12, 10, 9], 5);
        let graph = small_graph(4);
        let cfg = PenaltyConfig { lambda1: 0.2, lambda2: 0.3, lambda3: 0.4, rho: 1.5, ..Default::default() };
        let h = TemporalDifferenceOperator::new(3).unwrap();
        let mut state = SolverState::new(&data, &graph, &cfg, WUpdate::GaussSeidel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [&mut state.q, &mut state.p, &mut state.u_q, &mut state.u_p, &mut state.w] {
            m.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for m in [&mut state.v, &mut state.u_v] {
            m.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let old_w = state.w.clone();
        state.update_w(&graph, &h);
        // Check the middle column against the full stationarity equation
        // with column 0 new and column 2 old.
        let mut w_mix = state.w.clone();
        w_mix.set_column(2, &old_w.column(2));
        let rho = cfg.rho;
        let s = &graph.matrix;
        let grad = loss_gradient(&w_mix, &data);
        let full = grad
            + (&w_mix - &state.q + &state.u_q) * rho
            + s * (s * &w_mix - &state.p + &state.u_p) * rho
            + h.apply_transpose(&(h.apply(&w_mix) - &state.v + &state.u_v)) * rho;
        assert_abs_diff_eq!(full.column(1).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn prox_steps_follow_definitions() {
        let data = random_dataset(2, &[5, 5], 1);
        let graph = small_graph(2);
        let cfg = PenaltyConfig { lambda1: 0.3, lambda2: 0.1, lambda3: 0.4, rho: 2.0, ..Default::default() };
        let mut state = SolverState::new(&data, &graph, &cfg, WUpdate::GaussSeidel).unwrap();
        // Q: boundary |theta| == kappa zeroes.
        state.w = dmatrix![0.15, 1.0; -0.2, 0.0];
        state.update_q(cfg.lambda1);
        assert!((&state.q - dmatrix![0.0, 0.85; -0.05, 0.0]).amax() <= 1e-15);
        assert_eq!(state.q[(0, 0)], 0.0);
        // V: w_1 - w_2 = (1, -0.1), kappa 0.2 -> (0.8, 0).
        state.wh = dmatrix![1.0; -0.1];
        state.update_v(0.4);
        assert_abs_diff_eq!(state.v[(0, 0)], 0.8, epsilon = 1e-15);
        assert_eq!(state.v[(1, 0)], 0.0);
        // Constant-in-time W gives V = 0.
        state.wh = TemporalDifferenceOperator::new(2).unwrap().apply(&dmatrix![2.0, 2.0; -1.0, -1.0]);
        state.update_v(0.4);
        assert_eq!(state.v, DMatrix::zeros(2, 1));
        // P with zero S and zero duals is zero.
        state.sw = DMatrix::zeros(2, 2);
        state.update_p(cfg.lambda2);
        assert_eq!(state.p, DMatrix::zeros(2, 2));
    }

    #[test]
    fn p_step_with_identity_graph_matches_q_step() {
        let data = random_dataset(3, &[6, 6], 2);
        let graph = FusionGraph { matrix: DMatrix::identity(3, 3), ..small_graph(3) };
        let cfg = PenaltyConfig { lambda1: 0.25, lambda2: 0.25, lambda3: 0.1, ..Default::default() };
        let h = TemporalDifferenceOperator::new(2).unwrap();
        let mut state = SolverState::new(&data, &graph, &cfg, WUpdate::GaussSeidel).unwrap();
        state.update_w(&graph, &h);
        state.update_q(cfg.lambda1);
        state.update_p(cfg.lambda2);
        assert_eq!(state.q, state.p);
    }

    #[test]
    fn dual_updates_accumulate_residuals() {
        let data = random_dataset(2, &[5, 5], 4);
        let graph = small_graph(2);
        let cfg = PenaltyConfig { lambda1: 0.5, lambda2: 0.1, lambda3: 0.4, ..Default::default() };
        let h = TemporalDifferenceOperator::new(2).unwrap();
        let mut state = SolverState::new(&data, &graph, &cfg, WUpdate::GaussSeidel).unwrap();
        let previous = state.split_variables();
        state.update_w(&graph, &h);
        state.update_q(cfg.lambda1);
        state.update_p(cfg.lambda2);
        state.update_v(cfg.lambda3);
        state.update_duals();
        assert_eq!(state.u_q, &state.w - &state.q);
        assert_eq!(state.u_p, &state.sw - &state.p);
        assert_eq!(state.u_v, &state.wh - &state.v);
        let snap = state.residuals(&graph, &h, &previous);
        assert_abs_diff_eq!(snap.primal_q, state.u_q.norm(), epsilon = 1e-15);
        assert_abs_diff_eq!(snap.primal_p, state.u_p.norm(), epsilon = 1e-15);
        assert_abs_diff_eq!(snap.primal_v, state.u_v.norm(), epsilon = 1e-15);

        // At consensus the duals do not move.
        let before = (state.u_q.clone(), state.u_p.clone(), state.u_v.clone());
        state.q = state.w.clone();
        state.p = state.sw.clone();
        state.v = state.wh.clone();
        state.update_duals();
        assert_eq!((state.u_q.clone(), state.u_p.clone(), state.u_v.clone()), before);
    }

    #[test]
    fn unregularized_solve_matches_normal_equations() {
        let data = random_dataset(4, &[30, 25, 20], 7);
        let graph = small_graph(4);
        let cfg = PenaltyConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        let opts = SolverOptions { eps_abs: 1e-12, eps_rel: 1e-12, max_iterations: 20_000, ..Default::default() };
        let sol = solve(&data, &graph, &cfg, &opts).unwrap();
        assert!(sol.converged());
        for (i, task) in data.tasks().iter().enumerate() {
            let x = &task.design;
            let ls = x.tr_mul(x).cholesky().unwrap().solve(&x.tr_mul(&task.target));
            assert_abs_diff_eq!((sol.weights.values.column(i) - ls).amax(), 0.0, epsilon = 1e-8);
        }
        assert_eq!(sol.trace.len(), sol.iterations);
    }

    #[test]
    fn huge_sparsity_weight_gives_null_solution() {
        let data = random_dataset(5, &[20, 20], 8);
        let graph = small_graph(5);
        let lambda_max = data
            .tasks()
            .iter()
            .map(|t| t.design.tr_mul(&t.target).amax())
            .fold(0.0, f64::max);
        let cfg = PenaltyConfig { lambda1: 2.0 * lambda_max, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        let sol = solve(&data, &graph, &cfg, &SolverOptions::default()).unwrap();
        assert!(sol.converged());
        assert!(sol.sparse_weights.values.iter().all(|v| *v == 0.0));
        assert!(sol.weights.values.amax() < 1e-4);
    }

    #[test]
    fn shared_design_exact_step_agrees_with_sweep() {
        let base = random_dataset(4, &[25, 25], 12);
        let task = base.task(0).clone();
        let mut tasks = vec![task.clone(), task.clone(), task];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in tasks.iter_mut().skip(1) {
            t.target.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let data = TaskDataset::new(
            tasks,
            base.feature_names().to_vec(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let graph = small_graph(4);
        let cfg = PenaltyConfig { lambda1: 0.5, lambda2: 0.2, lambda3: 1.0, ..Default::default() };
        let opts = SolverOptions { eps_abs: 1e-10, eps_rel: 1e-10, max_iterations: 50_000, ..Default::default() };
        let gs = solve(&data, &graph, &cfg, &opts).unwrap();
        let exact = solve(&data, &graph, &cfg, &SolverOptions { w_update: WUpdate::SharedDesignExact, ..opts }).unwrap();
        assert!(gs.converged() && exact.converged());
        assert_abs_diff_eq!((gs.objective() - exact.objective()).abs(), 0.0, epsilon = 1e-7 * gs.objective());

        // Exact step refuses heterogeneous designs.
        let hetero = random_dataset(4, &[10, 11], 1);
        assert!(SolverState::new(&hetero, &graph, &cfg, WUpdate::SharedDesignExact).is_err());
    }

    #[test]
    fn rejects_asymmetric_graph() {
        let data = random_dataset(2, &[5, 5], 1);
        let graph = FusionGraph { matrix: dmatrix![1.0, 0.2; 0.3, 1.0], ..small_graph(2) };
        assert!(matches!(
            solve(&data, &graph, &PenaltyConfig::default(), &SolverOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn certificate_and_best_so_far() {
        let data = random_dataset(6, &[40, 35, 30, 25], 21);
        let graph = small_graph(6);
        let cfg = PenaltyConfig { lambda1: 1.0, lambda2: 0.05, lambda3: 2.0, ..Default::default() };
        let sol = solve(&data, &graph, &cfg, &SolverOptions::default()).unwrap();
        assert!(sol.converged());
        let cert = optimality_certificate(&data, &graph, &cfg, &sol.state).unwrap();
        assert!(cert.passes(1e-3), "{cert:?}");
        let best = sol.trace.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(sol.trace.records.iter().all(|r| r.objective.is_finite() && r.objective >= 0.0));
        let opts = SolverOptions::default();
        let r = sol.state.residuals(&graph, &TemporalDifferenceOperator::new(4).unwrap(), &sol.state.split_variables());
        let eps_pri = opts.eps_abs * (r.constraint_dim as f64).sqrt() + opts.eps_rel * r.primal_scale;
        assert!(r.primal <= eps_pri);
    }

    #[test]
    fn solve_is_deterministic() {
        let data = random_dataset(5, &[20, 18, 15], 30);
        let graph = small_graph(5);
        let cfg = PenaltyConfig { lambda1: 0.3, lambda2: 0.07, lambda3: 0.5, ..Default::default() };
        let a = solve(&data, &graph, &cfg, &SolverOptions::default()).unwrap();
        let b = solve(&data, &graph, &cfg, &SolverOptions::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn trace_csv_has_one_row_per_record() {
        let data = random_dataset(3, &[10, 10], 2);
        let opts = SolverOptions { trace_every: 5, ..Default::default() };
        let sol = solve(&data, &small_graph(3), &PenaltyConfig::default(), &opts).unwrap();
        let mut buf = Vec::new();
        sol.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), sol.trace.len() + 1);
        assert!(text.starts_with("iteration,objective,loss,sparsity,graph,temporal"));
        assert_eq!(sol.trace.last().unwrap().iteration, sol.iterations);
    }
}
