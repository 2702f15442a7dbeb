//! Multi-task longitudinal regression with a feature-similarity graph
//! penalty and temporal fused lasso.
//!
//! Each timepoint of a longitudinal cohort is a regression task. The tasks
//! are fitted jointly by minimizing
//!
//! ```text
//! 1/2 sum_i ||X_i w_i - y_i||^2 + l1 ||W||_1 + l2 ||S W||_1 + l3 ||W H||_1
//! ```
//!
//! where `S` fuses the thresholded per-timepoint feature correlation
//! matrices ([`graph`]) and `H` takes differences of adjacent task columns.
//! The problem is solved by ADMM ([`solver`]). Around the estimator sit the
//! evaluation metrics, patient-level cross-validation, stability selection
//! and the CSV data layer.

pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod prox;
pub mod select;
pub mod solver;
pub mod stability;
pub mod types;

pub use error::{Error, Result};
pub use graph::{build_graph, FusionGraph};
pub use objective::{objective_terms, objective_value, ObjectiveTerms};
pub use solver::{solve, Solution, SolveStatus, SolverOptions};
pub use types::{
    build_temporal_operator, GraphMode, PenaltyConfig, Task, TaskDataset,
    TemporalDifferenceOperator, WeightMatrix,
};
