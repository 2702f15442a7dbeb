mod common;

use common::{cohort, tight, to_problem};
use mtlfsl::graph::{build_graph, correlation_stack, fuse, pearson_matrix};
use mtlfsl::solver::optimality_certificate;
use mtlfsl::*;
use mtlfsl_oracles::{fuse_naive, lasso_cd, lasso_objective, normal_equations, objective as naive_objective, pearson_naive, solve_dual};

fn cfg(l1: f64, l2: f64, l3: f64) -> PenaltyConfig {
    PenaltyConfig { lambda1: l1, lambda2: l2, lambda3: l3, tau: 0.3, ..Default::default() }
}

#[test]
fn admm_objective_matches_dual_oracle() {
    let cases = [(6, 3, 30, 0.1, 0.05, 1.0), (10, 4, 50, 1.0, 0.02, 10.0), (12, 2, 40, 10.0, 0.1, 0.1), (4, 5, 25, 0.01, 0.09, 50.0)];
    for (k, &(p, t, n, l1, l2, l3)) in cases.iter().enumerate() {
        let data = cohort(p, t, n, &[0, 2], 1.0, k as u64);
        let c = cfg(l1, l2, l3);
        let graph = build_graph(&data, c.tau, c.graph_mode).unwrap();
        let problem = to_problem(&data, &graph, &c);
        let oracle = solve_dual(&problem, 1e-10, 500_000);
        assert!(oracle.relative_gap() <= 1e-9, "oracle gap {}", oracle.relative_gap());
        let sol = solve(&data, &graph, &c, &tight()).unwrap();
        assert!(sol.converged());
        let f = sol.objective();
        assert!((f - naive_objective(&problem, &sol.weights.values)).abs() <= 1e-10 * f);
        assert!((f - oracle.objective).abs() <= 1e-5 * oracle.objective, "case {k}: {f} vs {}", oracle.objective);
    }
}

#[test]
fn without_coupling_terms_tasks_are_independent_lassos() {
    let data = cohort(8, 3, 40, &[1, 4, 5], 0.5, 3);
    let c = cfg(2.0, 0.0, 0.0);
    let graph = build_graph(&data, c.tau, c.graph_mode).unwrap();
    let sol = solve(&data, &graph, &c, &tight()).unwrap();
    let reference: f64 = data
        .tasks()
        .iter()
        .map(|t| {
            let w = lasso_cd(&t.design, &t.target, 2.0, 1e-14, 1_000_000);
            lasso_objective(&t.design, &t.target, 2.0, &w)
        })
        .sum();
    assert!((sol.objective() - reference).abs() <= 1e-6 * reference);
}

#[test]
fn unregularized_solution_solves_normal_equations() {
    let data = cohort(7, 3, 30, &[0, 1, 2], 1.0, 4);
    let c = cfg(0.0, 0.0, 0.0);
    let graph = build_graph(&data, c.tau, c.graph_mode).unwrap();
    let sol = solve(&data, &graph, &c, &tight()).unwrap();
    for (i, t) in data.tasks().iter().enumerate() {
        let w = normal_equations(&t.design, &t.target);
        assert!((sol.weights.values.column(i) - w).amax() <= 1e-6);
    }
}

#[test]
fn noiseless_unregularized_fit_recovers_truth() {
    use mtlfsl::data::synth::{generate_synthetic, smooth_sparse_weights, SyntheticSpec};
    let mut spec = SyntheticSpec::new(smooth_sparse_weights(6, 3, &[0, 3, 4], 8), 40);
    spec.noise_sigma = 0.0;
    let (data, truth) = generate_synthetic(&spec).unwrap();
    let c = cfg(0.0, 0.0, 0.0);
    let graph = build_graph(&data, c.tau, c.graph_mode).unwrap();
    let sol = solve(&data, &graph, &c, &tight()).unwrap();
    assert!((&sol.weights.values - &truth.values).amax() <= 1e-6);
    let report = metrics::evaluate(&data, &sol.weights, Default::default()).unwrap();
    assert!(report.mean_rmse() < 1e-6);
}

#[test]
fn moderate_penalties_keep_the_true_support() {
    let active = [0, 3, 7];
    let data = cohort(10, 4, 50, &active, 0.5, 12);
    let c = cfg(1.0, 0.05, 1.0);
    let graph = build_graph(&data, c.tau, c.graph_mode).unwrap();
    let sol = solve(&data, &graph, &c, &tight()).unwrap();
    for &m in &active {
        assert!(sol.sparse_weights.values.row(m).iter().all(|v| v.abs() > 1e-8));
    }
    let oracle = solve_dual(&to_problem(&data, &graph, &c), 1e-10, 500_000);
    assert!((sol.objective() - oracle.objective).abs() <= 1e-6 * oracle.objective);
}

#[test]
fn objective_is_insensitive_to_rho() {
    let data = cohort(8, 4, 35, &[0, 5], 1.0, 21);
    let base = cfg(0.5, 0.05, 2.0);
    let graph = build_graph(&data, base.tau, base.graph_mode).unwrap();
    let values: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&rho| solve(&data, &graph, &PenaltyConfig { rho, ..base }, &tight()).unwrap().objective())
        .collect();
    for v in &values {
        assert!((v - values[1]).abs() <= 1e-4 * values[1], "{values:?}");
    }
}

#[test]
fn certificate_holds_at_convergence() {
    for (k, mode) in [GraphMode::FusedCorrelation, GraphMode::SignedLaplacian].into_iter().enumerate() {
        let data = cohort(9, 4, 40, &[1, 2], 1.0, 30 + k as u64);
        let c = PenaltyConfig { graph_mode: mode, ..cfg(0.5, 0.08, 1.0) };
        let graph = build_graph(&data, c.tau, mode).unwrap();
        let sol = solve(&data, &graph, &c, &SolverOptions::default()).unwrap();
        assert!(sol.converged());
        let cert = optimality_certificate(&data, &graph, &c, &sol.state).unwrap();
        assert!(cert.residual <= 1e-3 * (1.0 + cert.gradient_norm), "{cert:?}");
    }
}

#[test]
fn graph_matches_naive_construction() {
    let mut data = cohort(6, 3, 25, &[0], 1.0, 40);
    // Make one feature constant at the second visit.
    let mut tasks = data.tasks().to_vec();
    tasks[1].design.column_mut(4).fill(2.5);
    data = TaskDataset::new(tasks, data.feature_names().to_vec(), data.timepoint_labels().to_vec()).unwrap();

    let naive: Vec<Vec<Vec<f64>>> = data.tasks().iter().map(|t| pearson_naive(&t.design)).collect();
    for (t, reference) in data.tasks().iter().zip(&naive) {
        let r = pearson_matrix(&t.design).unwrap().values;
        for a in 0..6 {
            for b in 0..6 {
                assert!((r[(a, b)] - reference[a][b]).abs() <= 1e-12);
            }
        }
    }
    // Threshold exactly at an existing entry: that entry survives.
    let tau = pearson_matrix(&data.task(0).design).unwrap().values[(0, 1)].abs();
    let graph = build_graph(&data, tau, GraphMode::FusedCorrelation).unwrap();
    let stack = correlation_stack(&data, tau).unwrap();
    assert_ne!(stack.matrices[0][(0, 1)], 0.0);
    let (weights, s) = fuse_naive(&naive, &data.patient_counts(), tau);
    assert_eq!(graph.weights, weights);
    for a in 0..6 {
        for b in 0..6 {
            assert!((graph.matrix[(a, b)] - s[a][b]).abs() <= 1e-12);
        }
    }
    let again = fuse(&stack, &data.patient_counts()).unwrap();
    assert_eq!(again.matrix, graph.matrix);
}

#[test]
fn null_solution_threshold() {
    // W = 0 is optimal iff ||X_i^T y_i||_inf <= lambda1 when the other penalties are off.
    let data = cohort(5, 2, 30, &[0, 1], 1.0, 50);
    let threshold = data
        .tasks()
        .iter()
        .map(|t| t.design.tr_mul(&t.target).amax())
        .fold(0.0, f64::max);
    let graph = build_graph(&data, 0.3, GraphMode::FusedCorrelation).unwrap();
    let above = solve(&data, &graph, &cfg(threshold * 1.01, 0.0, 0.0), &tight()).unwrap();
    assert!(above.sparse_weights.values.iter().all(|v| *v == 0.0));
    let below = solve(&data, &graph, &cfg(threshold * 0.9, 0.0, 0.0), &tight()).unwrap();
    assert!(below.sparse_weights.values.iter().any(|v| *v != 0.0));
}
