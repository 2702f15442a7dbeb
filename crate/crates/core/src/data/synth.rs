use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::table::DEFAULT_TIMEPOINTS;
use crate::error::{Error, Result};
use crate::types::{Task, TaskDataset, WeightMatrix};

/// Per-timepoint retention shaped like a six-visit cohort with heavy late
/// attrition (baseline, 6, 12, 24, 36, 48 months).
pub const COHORT_RETENTION: [f64; 6] = [1.0, 0.86, 0.9, 0.72, 0.28, 0.28];

/// Recipe for a synthetic longitudinal cohort with known weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub true_weights: DMatrix<f64>,
    pub n_patients: usize,
    /// Fraction of the cohort observed at each timepoint, in (0, 1].
    pub dropout_schedule: Vec<f64>,
    /// Sizes of consecutive feature groups sharing a latent factor. Empty
    /// means every feature is its own group.
    pub block_sizes: Vec<usize>,
    /// Correlation between two features of the same group, in [0, 1).
    pub within_block_corr: f64,
    /// Lag-one autocorrelation of a patient's features across visits, in [0, 1).
    pub persistence: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Independent features, no dropout, unit noise.
    pub fn new(true_weights: DMatrix<f64>, n_patients: usize) -> Self {
        let t = true_weights.ncols();
        Self {
            true_weights,
            n_patients,
            dropout_schedule: vec![1.0; t],
            block_sizes: Vec::new(),
            within_block_corr: 0.0,
            persistence: 0.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.true_weights.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.true_weights.ncols()
    }

    /// Number of patients observed at each timepoint.
    pub fn n_per_task(&self) -> Vec<usize> {
        self.dropout_schedule
            .iter()
            .map(|r| (r * self.n_patients as f64).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, t) = self.true_weights.shape();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if p == 0 || t < 2 {
            return bad(format!("true weights must be p x t with p >= 1, t >= 2, got {p} x {t}"));
        }
        if self.true_weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("true weights"));
        }
        if self.dropout_schedule.len() != t {
            return bad(format!("dropout schedule has {} entries for {t} timepoints", self.dropout_schedule.len()));
        }
        if let Some(r) = self.dropout_schedule.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("retention fraction {r} outside (0, 1]"));
        }
        if let Some((i, n)) = self.n_per_task().into_iter().enumerate().find(|(_, n)| *n < 2) {
            return bad(format!("timepoint {i} would keep {n} patients, at least 2 required"));
        }
        if !self.block_sizes.is_empty()
            && (self.block_sizes.contains(&0) || self.block_sizes.iter().sum::<usize>() != p)
        {
            return bad(format!("block sizes must be positive and sum to {p}"));
        }
        if !(0.0..1.0).contains(&self.within_block_corr) {
            return bad(format!("within-block correlation {} outside [0, 1)", self.within_block_corr));
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [0, 1)", self.persistence));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    fn block_of_feature(&self) -> Vec<usize> {
        if self.block_sizes.is_empty() {
            return (0..self.n_features()).collect();
        }
        self.block_sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
            .collect()
    }
}

pub fn feature_names(p: usize) -> Vec<String> {
    let width = p.to_string().len().max(2);
    (1..=p).map(|m| format!("f{m:0width$}")).collect()
}

/// The default labels when `t` fits, otherwise `T1..Tt`.
pub fn timepoint_labels(t: usize) -> Vec<String> {
    if t <= DEFAULT_TIMEPOINTS.len() {
        DEFAULT_TIMEPOINTS[..t].iter().map(|s| s.to_string()).collect()
    } else {
        (1..=t).map(|i| format!("T{i}")).collect()
    }
}

/// Sparse weights that drift linearly over time. Rows listed in `active`
/// get a random base amplitude in `±[0.5, 1.5]` and a per-step drift in
/// `[-0.1, 0.1]` times the amplitude; all other rows are zero.
pub fn smooth_sparse_weights(p: usize, t: usize, active: &[usize], seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(p, t);
    for &m in active {
        let amplitude = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let drift = rng.random_range(-0.1..0.1) * amplitude;
        for i in 0..t {
            w[(m, i)] = amplitude + drift * i as f64;
        }
    }
    w
}

/// Weights shared by every feature of a block: the blocks listed in
/// `active` get one amplitude and drift each, drawn as in
/// [`smooth_sparse_weights`]; all other blocks are zero.
pub fn smooth_block_weights(block_sizes: &[usize], active: &[usize], t: usize, seed: u64) -> DMatrix<f64> {
    let p: usize = block_sizes.iter().sum();
    let per_block = smooth_sparse_weights(block_sizes.len(), t, active, seed);
    let mut w = DMatrix::zeros(p, t);
    let mut row = 0;
    for (b, &size) in block_sizes.iter().enumerate() {
        for _ in 0..size {
            w.row_mut(row).copy_from(&per_block.row(b));
            row += 1;
        }
    }
    w
}

/// Draws a cohort from `spec`.
///
/// Every patient gets a feature trajectory: at each visit the features are
/// an AR(1) update (coefficient `persistence`) of the previous visit with
/// unit-variance innovations whose within-group correlation is
/// `within_block_corr`. Patients are shuffled once and the first
/// `round(r_i * n)` of them are observed at timepoint `i`, so with a
/// decreasing schedule later cohorts are nested in earlier ones.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TaskDataset, WeightMatrix)> {
    spec.validate()?;
    let (p, t) = spec.true_weights.shape();
    let n = spec.n_patients;
    let blocks = spec.block_of_feature();
    let n_blocks = blocks.iter().max().map_or(0, |b| b + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let shared = spec.within_block_corr.sqrt();
    let own = (1.0 - spec.within_block_corr).sqrt();
    let phi = spec.persistence;
    let fresh = (1.0 - phi * phi).sqrt();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    // features[i] is n x p for timepoint i, in patient index order.
    let mut features = vec![DMatrix::zeros(n, p); t];
    for patient in 0..n {
        for i in 0..t {
            let factors: Vec<f64> = (0..n_blocks).map(|_| normal()).collect();
            for m in 0..p {
                let innovation = shared * factors[blocks[m]] + own * normal();
                features[i][(patient, m)] = if i == 0 {
                    innovation
                } else {
                    phi * features[i - 1][(patient, m)] + fresh * innovation
                };
            }
        }
    }
    let noise: Vec<DVector<f64>> = (0..t)
        .map(|_| DVector::from_fn(n, |_, _| spec.noise_sigma * normal()))
        .collect();

    let width = n.to_string().len().max(3);
    let tasks = spec
        .n_per_task()
        .into_iter()
        .enumerate()
        .map(|(i, keep)| {
            let mut rows: Vec<usize> = order[..keep].to_vec();
            rows.sort_unstable();
            let design = features[i].select_rows(&rows);
            let clean = &design * spec.true_weights.column(i);
            let target = DVector::from_fn(keep, |r, _| clean[r] + noise[i][rows[r]]);
            Task {
                design,
                target,
                patient_ids: rows.iter().map(|r| format!("S{:0width$}", r + 1)).collect(),
            }
        })
        .collect();
    let data = TaskDataset::new(tasks, feature_names(p), timepoint_labels(t))?;
    Ok((data, WeightMatrix::new(spec.true_weights.clone())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::correlation;

    #[test]
    fn dropout_arithmetic() {
        let mut spec = SyntheticSpec::new(DMatrix::from_element(3, 2, 1.0), 100);
        spec.dropout_schedule = vec![1.0, 0.5];
        let (data, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(data.patient_counts(), vec![100, 50]);
        let first: std::collections::HashSet<_> = data.task(0).patient_ids.iter().collect();
        assert!(data.task(1).patient_ids.iter().all(|id| first.contains(id)));
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let mut spec = SyntheticSpec::new(smooth_sparse_weights(6, 3, &[0, 2], 5), 40);
        spec.block_sizes = vec![3, 3];
        spec.within_block_corr = 0.6;
        spec.persistence = 0.5;
        spec.dropout_schedule = vec![1.0, 0.8, 0.6];
        spec.seed = 11;
        let (a, wa) = generate_synthetic(&spec).unwrap();
        let (b, wb) = generate_synthetic(&spec).unwrap();
        assert_eq!(wa, wb);
        for (x, y) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(x, y);
        }
        spec.seed = 12;
        let (c, _) = generate_synthetic(&spec).unwrap();
        assert_ne!(a.task(0).design, c.task(0).design);
    }

    #[test]
    fn block_correlation_structure() {
        let mut spec = SyntheticSpec::new(DMatrix::zeros(6, 2), 1000);
        spec.block_sizes = vec![3, 3];
        spec.within_block_corr = 0.7;
        let (data, _) = generate_synthetic(&spec).unwrap();
        let x = &data.task(0).design;
        let col = |m: usize| DVector::from_column_slice(x.column(m).as_slice());
        let within = correlation(&col(0), &col(1)).unwrap();
        let across = correlation(&col(0), &col(4)).unwrap();
        assert!(within > across + 0.4, "within {within}, across {across}");
        assert!((within - 0.7).abs() < 0.1);
    }

    #[test]
    fn noiseless_targets_are_exact() {
        let w = smooth_sparse_weights(4, 3, &[1, 3], 2);
        let mut spec = SyntheticSpec::new(w.clone(), 20);
        spec.noise_sigma = 0.0;
        let (data, truth) = generate_synthetic(&spec).unwrap();
        assert_eq!(truth.values, w);
        for (i, task) in data.tasks().iter().enumerate() {
            assert_eq!(task.target, &task.design * w.column(i));
        }
    }

    #[test]
    fn smooth_weights_shape() {
        let w = smooth_sparse_weights(5, 4, &[0, 3], 9);
        for m in [1, 2, 4] {
            assert!(w.row(m).iter().all(|v| *v == 0.0));
        }
        for m in [0, 3] {
            let base = w[(m, 0)].abs();
            assert!((0.5..1.5).contains(&base));
            let step = w[(m, 1)] - w[(m, 0)];
            assert!(((w[(m, 3)] - w[(m, 2)]) - step).abs() < 1e-12);
        }
    }

    #[test]
    fn block_weights_are_constant_within_blocks() {
        let w = smooth_block_weights(&[2, 3, 1], &[1], 3, 4);
        assert_eq!(w.nrows(), 6);
        assert!(w.rows(0, 2).iter().all(|v| *v == 0.0));
        assert!(w[(2, 0)] != 0.0);
        assert_eq!(w.row(2), w.row(4));
        assert!(w.row(5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SyntheticSpec::new(DMatrix::zeros(4, 2), 10);
        let mut s = base.clone();
        s.dropout_schedule = vec![1.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.dropout_schedule = vec![1.0, 0.1];
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.block_sizes = vec![2, 1];
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.within_block_corr = 1.0;
        assert!(s.validate().is_err());
        let mut s = base;
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(timepoint_labels(2), vec!["M00", "M06"]);
        assert_eq!(timepoint_labels(7)[6], "T7");
        assert_eq!(feature_names(314)[0], "f001");
        assert_eq!(feature_names(5)[4], "f05");
    }
}
