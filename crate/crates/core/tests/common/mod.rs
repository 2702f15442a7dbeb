#![allow(dead_code)]

use mtlfsl::data::synth::{generate_synthetic, smooth_sparse_weights, SyntheticSpec};
use mtlfsl::{FusionGraph, PenaltyConfig, SolverOptions, TaskDataset};
use mtlfsl_oracles::Problem;

pub fn to_problem(data: &TaskDataset, graph: &FusionGraph, cfg: &PenaltyConfig) -> Problem {
    Problem {
        designs: data.tasks().iter().map(|t| t.design.clone()).collect(),
        targets: data.tasks().iter().map(|t| t.target.clone()).collect(),
        s: graph.matrix.clone(),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        lambda3: cfg.lambda3,
    }
}

/// Correlated synthetic cohort with every patient present at every visit.
pub fn cohort(p: usize, t: usize, n: usize, active: &[usize], sigma: f64, seed: u64) -> TaskDataset {
    let mut spec = SyntheticSpec::new(smooth_sparse_weights(p, t, active, seed), n);
    spec.block_sizes = vec![p];
    spec.within_block_corr = 0.4;
    spec.noise_sigma = sigma;
    spec.seed = seed;
    generate_synthetic(&spec).unwrap().0
}

pub fn tight() -> SolverOptions {
    SolverOptions {
        eps_abs: 1e-9,
        eps_rel: 1e-8,
        max_iterations: 100_000,
        trace_every: 100_000,
        ..Default::default()
    }
}
