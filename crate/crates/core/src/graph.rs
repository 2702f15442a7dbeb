//! Feature-similarity graph construction.
//!
//! Each timepoint contributes a Pearson correlation matrix computed from its
//! own rows only. Entries whose magnitude falls strictly below `tau` are
//! zeroed, and the thresholded matrices are averaged with weights
//! proportional to the number of patients observed at each timepoint.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::export::write_labeled_matrix;
use crate::types::{GraphMode, TaskDataset};

/// Pearson correlation matrix plus the features that had zero variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PearsonMatrix {
    pub values: DMatrix<f64>,
    /// Indices of constant columns. Their off-diagonal entries are 0.
    pub constant_features: Vec<usize>,
}

/// Sample Pearson correlations between the columns of `design` (n x p).
///
/// A constant column has no defined correlation; it is reported in
/// `constant_features`, gets 0 off the diagonal and 1 on it.
pub fn pearson_matrix(design: &DMatrix<f64>) -> Result<PearsonMatrix> {
    let (n, p) = design.shape();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "correlation needs at least 2 samples, got {n}"
        )));
    }
    let mut centered = design.clone();
    let mut constant_features = Vec::new();
    for (m, mut col) in centered.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        if ss <= 1e-28 * n as f64 * (1.0 + mean * mean) {
            constant_features.push(m);
        }
    }
    let gram = centered.tr_mul(&centered);
    let mut values = DMatrix::zeros(p, p);
    for m in 0..p {
        values[(m, m)] = 1.0;
    }
    let is_constant = |m: usize| constant_features.binary_search(&m).is_ok();
    for m in 0..p {
        if is_constant(m) {
            continue;
        }
        for l in (m + 1)..p {
            if is_constant(l) {
                continue;
            }
            let r = gram[(m, l)] / (gram[(m, m)] * gram[(l, l)]).sqrt();
            let r = r.clamp(-1.0, 1.0);
            values[(m, l)] = r;
            values[(l, m)] = r;
        }
    }
    for &m in &constant_features {
        warn!("feature {m} is constant; treating it as an isolated graph node");
    }
    Ok(PearsonMatrix {
        values,
        constant_features,
    })
}

/// Zeroes every entry with `|value| < tau` (strict), leaving the rest intact.
pub fn threshold(r: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    Ok(r.map(|v| if v.abs() < tau { 0.0 } else { v }))
}

/// Thresholded per-timepoint correlation matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStack {
    pub matrices: Vec<DMatrix<f64>>,
    pub tau: f64,
}

impl CorrelationStack {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn nonzero_counts(&self) -> Vec<usize> {
        self.matrices
            .iter()
            .map(|m| m.iter().filter(|v| **v != 0.0).count())
            .collect()
    }

    /// Long-format CSV: one block of rows per timepoint.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        feature_names: &[String],
        timepoint_labels: &[String],
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["timepoint".to_string(), "feature".to_string()];
        header.extend(feature_names.iter().cloned());
        wtr.write_record(&header)?;
        for (label, m) in timepoint_labels.iter().zip(&self.matrices) {
            for (i, name) in feature_names.iter().enumerate() {
                let mut rec = vec![label.clone(), name.clone()];
                rec.extend(m.row(i).iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Computes and thresholds the correlation matrix of every task.
pub fn correlation_stack(data: &TaskDataset, tau: f64) -> Result<CorrelationStack> {
    let matrices = data
        .tasks()
        .par_iter()
        .map(|task| {
            let r = pearson_matrix(&task.design)?;
            threshold(&r.values, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationStack { matrices, tau })
}

/// The feature-similarity matrix used by the graph penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGraph {
    pub matrix: DMatrix<f64>,
    pub tau: f64,
    /// Normalized patient-count weights, one per timepoint.
    pub weights: Vec<f64>,
    pub mode: GraphMode,
}

impl FusionGraph {
    pub fn n_features(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        let m = &self.matrix;
        m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
    }

    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> Result<()> {
        write_labeled_matrix(out, "feature", feature_names, feature_names, &self.matrix)
    }
}

/// Patient-count-weighted sum of the stack.
pub fn fuse(stack: &CorrelationStack, patient_counts: &[usize]) -> Result<FusionGraph> {
    if stack.is_empty() {
        return Err(Error::Dimension("empty correlation stack".into()));
    }
    if stack.len() != patient_counts.len() {
        return Err(Error::Dimension(format!(
            "{} correlation matrices but {} patient counts",
            stack.len(),
            patient_counts.len()
        )));
    }
    let total: usize = patient_counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidData("all patient counts are zero".into()));
    }
    let p = stack.matrices[0].nrows();
    if stack.matrices.iter().any(|m| m.shape() != (p, p)) {
        return Err(Error::Dimension("correlation matrices differ in shape".into()));
    }
    let weights: Vec<f64> = patient_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    let mut s = DMatrix::zeros(p, p);
    for (w, r) in weights.iter().zip(&stack.matrices) {
        s += r * *w;
    }
    Ok(FusionGraph {
        matrix: s,
        tau: stack.tau,
        weights,
        mode: GraphMode::FusedCorrelation,
    })
}

/// Signed Laplacian of a fused correlation graph: off-diagonal `-s_ml`,
/// diagonal `sum_{l != m} |s_ml|`. Row m of `L W` is
/// `sum_l |s_ml| (w^m - sign(s_ml) w^l)`.
pub fn to_signed_laplacian(g: &FusionGraph) -> Result<FusionGraph> {
    if g.mode != GraphMode::FusedCorrelation {
        return Err(Error::InvalidConfig(
            "signed Laplacian requires a fused correlation graph".into(),
        ));
    }
    let p = g.n_features();
    let s = &g.matrix;
    let mut l = DMatrix::zeros(p, p);
    for m in 0..p {
        let mut degree = 0.0;
        for k in 0..p {
            if k != m {
                l[(m, k)] = -s[(m, k)];
                degree += s[(m, k)].abs();
            }
        }
        l[(m, m)] = degree;
    }
    Ok(FusionGraph {
        matrix: l,
        tau: g.tau,
        weights: g.weights.clone(),
        mode: GraphMode::SignedLaplacian,
    })
}

/// Builds the graph for `data` at threshold `tau` in the requested mode.
pub fn build_graph(data: &TaskDataset, tau: f64, mode: GraphMode) -> Result<FusionGraph> {
    let stack = correlation_stack(data, tau)?;
    let fused = fuse(&stack, &data.patient_counts())?;
    match mode {
        GraphMode::FusedCorrelation => Ok(fused),
        GraphMode::SignedLaplacian => to_signed_laplacian(&fused),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, DVector};
    use proptest::prelude::*;

    use crate::types::Task;

    #[test]
    fn perfect_linear_relations() {
        let x = dmatrix![1.0, 2.0, -1.0; 2.0, 4.0, -2.0; 4.0, 8.0, -4.0; 3.5, 7.0, -3.5];
        let r = pearson_matrix(&x).unwrap().values;
        assert_abs_diff_eq!(r[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 2)], -1.0, epsilon = 1e-15);
        assert_eq!(r[(1, 1)], 1.0);
    }

    #[test]
    fn hand_computed_pair() {
        // cov = 3, ss = 2 and 14/3, so r = 3 / sqrt(28/3).
        let x = dmatrix![1.0, 1.0; 2.0, 2.0; 3.0, 4.0];
        let r = pearson_matrix(&x).unwrap().values;
        let expected = 3.0 / (28.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(r[(0, 1)], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 1)], 0.98198, epsilon = 1e-5);
        assert_eq!(r[(0, 1)], r[(1, 0)]);
    }

    #[test]
    fn constant_column_is_isolated() {
        let x = dmatrix![1.0, 5.0, 0.3; 2.0, 5.0, 0.1; 3.0, 5.0, 0.2];
        let pm = pearson_matrix(&x).unwrap();
        assert_eq!(pm.constant_features, vec![1]);
        assert_eq!(pm.values[(1, 1)], 1.0);
        assert_eq!(pm.values[(0, 1)], 0.0);
        assert_eq!(pm.values[(2, 1)], 0.0);
        assert!(pm.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn needs_two_samples() {
        assert!(pearson_matrix(&dmatrix![1.0, 2.0]).is_err());
    }

    #[test]
    fn threshold_boundaries() {
        let r = dmatrix![1.0, 0.49, -0.5; 0.49, 1.0, 0.2; -0.5, 0.2, 1.0];
        assert_eq!(threshold(&r, 0.0).unwrap(), r);
        let t = threshold(&r, 0.5).unwrap();
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(t[(0, 2)], -0.5);
        assert_eq!(t[(1, 2)], 0.0);
        let t1 = threshold(&r, 1.0).unwrap();
        assert_eq!(t1, DMatrix::identity(3, 3));
        assert!(threshold(&r, 1.01).is_err());
    }

    #[test]
    fn fuse_identity_and_weights() {
        let stack = CorrelationStack {
            matrices: vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3)],
            tau: 0.0,
        };
        let g = fuse(&stack, &[10, 30]).unwrap();
        assert_eq!(g.weights, vec![0.25, 0.75]);
        assert_eq!(g.matrix, DMatrix::identity(3, 3));
        assert_eq!(g.mode, GraphMode::FusedCorrelation);
    }

    #[test]
    fn fuse_single_timepoint_returns_input() {
        let r = dmatrix![1.0, 0.3; 0.3, 1.0];
        let stack = CorrelationStack { matrices: vec![r.clone()], tau: 0.0 };
        let g = fuse(&stack, &[7]).unwrap();
        assert_eq!(g.matrix, r);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn fuse_cohort_sized_weights() {
        let counts = [1532usize, 1317, 1375, 1099, 432, 432];
        let stack = CorrelationStack {
            matrices: vec![DMatrix::identity(2, 2); 6],
            tau: 0.0,
        };
        let g = fuse(&stack, &counts).unwrap();
        let total: usize = counts.iter().sum();
        assert_eq!(total, 6187);
        for (w, n) in g.weights.iter().zip(counts) {
            assert_eq!(*w, n as f64 / 6187.0);
        }
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_errors() {
        let stack = CorrelationStack { matrices: vec![DMatrix::identity(2, 2)], tau: 0.0 };
        assert!(fuse(&stack, &[0]).is_err());
        assert!(fuse(&stack, &[1, 2]).is_err());
    }

    fn graph_from(s: DMatrix<f64>) -> FusionGraph {
        FusionGraph { matrix: s, tau: 0.0, weights: vec![1.0], mode: GraphMode::FusedCorrelation }
    }

    #[test]
    fn laplacian_of_isolated_nodes_is_zero() {
        let l = to_signed_laplacian(&graph_from(DMatrix::identity(3, 3))).unwrap();
        assert_eq!(l.matrix, DMatrix::zeros(3, 3));
        assert_eq!(l.mode, GraphMode::SignedLaplacian);
        assert!(to_signed_laplacian(&l).is_err());
    }

    #[test]
    fn laplacian_two_nodes_positive_and_negative() {
        let l = to_signed_laplacian(&graph_from(dmatrix![1.0, 0.8; 0.8, 1.0])).unwrap();
        assert_eq!(l.matrix, dmatrix![0.8, -0.8; -0.8, 0.8]);
        let w = dmatrix![3.0, 1.0; 1.0, -1.0];
        let lw = &l.matrix * &w;
        assert_abs_diff_eq!(lw[(0, 0)], 0.8 * (3.0 - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(lw[(0, 1)], 0.8 * (1.0 + 1.0), epsilon = 1e-15);

        let l = to_signed_laplacian(&graph_from(dmatrix![1.0, -0.6; -0.6, 1.0])).unwrap();
        assert_eq!(l.matrix, dmatrix![0.6, 0.6; 0.6, 0.6]);
        let lw = &l.matrix * &w;
        assert_abs_diff_eq!(lw[(0, 0)], 0.6 * (3.0 + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn correlation_stack_uses_each_timepoint_rows() {
        let t0 = Task {
            design: dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.5],
            target: DVector::from_vec(vec![0.0, 1.0, 2.0]),
            patient_ids: vec!["a".into(), "b".into(), "c".into()],
        };
        let t1 = Task {
            design: dmatrix![1.0, -1.0; 2.0, -2.0],
            target: DVector::from_vec(vec![0.0, 1.0]),
            patient_ids: vec!["a".into(), "b".into()],
        };
        let data = TaskDataset::new(
            vec![t0.clone(), t1.clone()],
            vec!["x".into(), "y".into()],
            vec!["M00".into(), "M06".into()],
        )
        .unwrap();
        let stack = correlation_stack(&data, 0.0).unwrap();
        assert_eq!(stack.matrices[0], pearson_matrix(&t0.design).unwrap().values);
        assert_eq!(stack.matrices[1], pearson_matrix(&t1.design).unwrap().values);
        let g = build_graph(&data, 0.0, GraphMode::FusedCorrelation).unwrap();
        assert_eq!(g.weights, vec![0.6, 0.4]);
        assert!(g.is_symmetric());
    }

    fn random_design(n: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n * p)
            .prop_map(move |v| DMatrix::from_vec(n, p, v))
    }

    proptest! {
        #[test]
        fn correlations_symmetric_and_bounded(x in random_design(8, 5)) {
            let r = pearson_matrix(&x).unwrap().values;
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(r[(i, j)], r[(j, i)]);
                    prop_assert!(r[(i, j)].abs() <= 1.0);
                }
            }
        }

        #[test]
        fn raising_tau_never_adds_nonzeros(x in random_design(6, 4), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = pearson_matrix(&x).unwrap().values;
            let nz = |m: &DMatrix<f64>| m.iter().filter(|v| **v != 0.0).count();
            prop_assert!(nz(&threshold(&r, hi).unwrap()) <= nz(&threshold(&r, lo).unwrap()));
        }

        #[test]
        fn fusion_is_permutation_equivariant(
            x0 in random_design(7, 4),
            x1 in random_design(5, 4),
            tau in 0.0f64..0.8,
        ) {
            let perm = [2usize, 0, 3, 1];
            let permute = |x: &DMatrix<f64>| DMatrix::from_fn(x.nrows(), 4, |i, j| x[(i, perm[j])]);
            let mk = |a: DMatrix<f64>, b: DMatrix<f64>| {
                let ta = Task { target: DVector::zeros(a.nrows()), patient_ids: (0..a.nrows()).map(|i| i.to_string()).collect(), design: a };
                let tb = Task { target: DVector::zeros(b.nrows()), patient_ids: (0..b.nrows()).map(|i| i.to_string()).collect(), design: b };
                TaskDataset::new(vec![ta, tb], (0..4).map(|i| i.to_string()).collect(), vec!["a".into(), "b".into()]).unwrap()
            };
            let g = build_graph(&mk(x0.clone(), x1.clone()), tau, GraphMode::FusedCorrelation).unwrap();
            let gp = build_graph(&mk(permute(&x0), permute(&x1)), tau, GraphMode::FusedCorrelation).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((gp.matrix[(i, j)] - g.matrix[(perm[i], perm[j])]).abs() < 1e-12);
                }
            }
            prop_assert!(g.is_symmetric());
            prop_assert!(g.matrix.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }

        #[test]
        fn laplacian_kernel_contains_constant_rows(x in random_design(9, 4), row in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let mut g = graph_from(pearson_matrix(&x).unwrap().values);
            g.matrix = g.matrix.map(f64::abs);
            let l = to_signed_laplacian(&g).unwrap();
            for m in 0..4 {
                let off: f64 = (0..4).filter(|&k| k != m).map(|k| l.matrix[(m, k)].abs()).sum();
                prop_assert!((l.matrix[(m, m)] - off).abs() < 1e-12);
            }
            let w = DMatrix::from_fn(4, 3, |_, j| row[j]);
            let lw = &l.matrix * &w;
            prop_assert!(lw.iter().map(|v| v.abs()).sum::<f64>() < 1e-10);
        }
    }
}
