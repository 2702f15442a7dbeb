//! The versioned JSON model file.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use mtlfsl::data::PreprocessParams;
use mtlfsl::solver::SolveStatus;
use mtlfsl::{FusionGraph, GraphMode, ObjectiveTerms, PenaltyConfig, Solution, WeightMatrix};

use crate::exit::InputError;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub tau: f64,
    pub mode: GraphMode,
    /// Patient-count weights of the timepoints.
    pub weights: Vec<f64>,
    /// Rows of S.
    pub matrix: Vec<Vec<f64>>,
}

impl From<&FusionGraph> for GraphRecord {
    fn from(g: &FusionGraph) -> Self {
        Self {
            tau: g.tau,
            mode: g.mode,
            weights: g.weights.clone(),
            matrix: g.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub terms: ObjectiveTerms,
    pub primal_residual: Option<f64>,
    pub dual_residual: Option<f64>,
}

impl From<&Solution> for SolveRecord {
    fn from(s: &Solution) -> Self {
        let last = s.trace.last();
        Self {
            status: s.status,
            iterations: s.iterations,
            objective: s.objective(),
            terms: s.terms,
            primal_residual: last.map(|r| r.residuals.primal),
            dual_residual: last.map(|r| r.residuals.dual),
        }
    }
}

/// A trained model: weights, the preprocessing that produced its training
/// data, the similarity graph and the configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub feature_names: Vec<String>,
    pub timepoints: Vec<String>,
    pub config: PenaltyConfig,
    pub solve: SolveRecord,
    /// Final W iterate (features x timepoints); used for prediction.
    pub weights: WeightMatrix,
    /// Soft-thresholded counterpart of `weights`, exactly sparse.
    pub sparse_weights: WeightMatrix,
    pub preprocessing: PreprocessParams,
    pub graph: GraphRecord,
}

impl ModelFile {
    pub fn new(
        solution: &Solution,
        config: PenaltyConfig,
        graph: &FusionGraph,
        preprocessing: PreprocessParams,
    ) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            feature_names: preprocessing.feature_names.clone(),
            timepoints: preprocessing.timepoints.clone(),
            config,
            solve: SolveRecord::from(solution),
            weights: solution.weights.clone(),
            sparse_weights: solution.sparse_weights.clone(),
            preprocessing,
            graph: GraphRecord::from(graph),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| InputError::new(format!("cannot read model {}: {e}", path.display())))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| InputError::new(format!("model {}: {e}", path.display())))?;
        let version = raw.get("schema_version").and_then(serde_json::Value::as_u64);
        if version != Some(MODEL_SCHEMA_VERSION as u64) {
            return Err(InputError::new(format!(
                "model {}: unsupported schema version {version:?}, expected {MODEL_SCHEMA_VERSION}",
                path.display()
            ))
            .into());
        }
        let model: ModelFile = serde_json::from_value(raw)
            .map_err(|e| InputError::new(format!("model {}: {e}", path.display())))?;
        model
            .weights
            .check_shape(model.feature_names.len(), model.timepoints.len())
            .map_err(|e| InputError::new(format!("model {}: {e}", path.display())))?;
        Ok(model)
    }
}
