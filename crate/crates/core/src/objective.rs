//! Evaluation of the penalized multi-task objective
//!
//! ```text
//! 1/2 sum_i ||X_i w_i - y_i||^2 + l1 ||W||_1 + l2 ||S W||_1 + l3 ||W H||_1
//! ```
//!
//! The loss is a per-task sum so that timepoints with different cohorts
//! need no shared target matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FusionGraph;
use crate::types::{PenaltyConfig, TaskDataset, TemporalDifferenceOperator, WeightMatrix};

/// The four weighted summands of the objective and their total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub loss: f64,
    pub sparsity: f64,
    pub graph: f64,
    pub temporal: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.loss + self.sparsity + self.graph + self.temporal
    }
}

pub(crate) fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// `1/2 sum_i ||X_i w_i - y_i||^2`.
pub fn squared_loss(w: &DMatrix<f64>, data: &TaskDataset) -> f64 {
    data.tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| 0.5 * (&t.design * w.column(i) - &t.target).norm_squared())
        .sum()
}

/// Gradient of the squared loss: column i is `X_i^T (X_i w_i - y_i)`.
pub fn loss_gradient(w: &DMatrix<f64>, data: &TaskDataset) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(w.nrows(), w.ncols());
    for (i, t) in data.tasks().iter().enumerate() {
        let r = &t.design * w.column(i) - &t.target;
        g.set_column(i, &t.design.tr_mul(&r));
    }
    g
}

/// Evaluates each summand of the objective at `w`.
pub fn objective_terms(
    w: &WeightMatrix,
    data: &TaskDataset,
    graph: &FusionGraph,
    h: &TemporalDifferenceOperator,
    cfg: &PenaltyConfig,
) -> Result<ObjectiveTerms> {
    let (p, t) = (data.n_features(), data.n_tasks());
    w.check_shape(p, t)?;
    if graph.matrix.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "graph is {}x{}, expected {p}x{p}",
            graph.matrix.nrows(),
            graph.matrix.ncols()
        )));
    }
    if h.n_tasks() != t {
        return Err(Error::Dimension(format!(
            "temporal operator built for {} tasks, dataset has {t}",
            h.n_tasks()
        )));
    }
    let w = &w.values;
    let graph_term = if cfg.lambda2 > 0.0 {
        cfg.lambda2 * l1_norm(&(&graph.matrix * w))
    } else {
        0.0
    };
    let terms = ObjectiveTerms {
        loss: squared_loss(w, data),
        sparsity: cfg.lambda1 * l1_norm(w),
        graph: graph_term,
        temporal: cfg.lambda3 * l1_norm(&h.apply(w)),
    };
    if !terms.total().is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(terms)
}

/// Total objective value at `w`.
pub fn objective_value(
    w: &WeightMatrix,
    data: &TaskDataset,
    graph: &FusionGraph,
    h: &TemporalDifferenceOperator,
    cfg: &PenaltyConfig,
) -> Result<f64> {
    objective_terms(w, data, graph, h, cfg).map(|t| t.total())
}
