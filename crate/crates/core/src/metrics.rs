//! Evaluation metrics: per-task root mean squared error, the pooled
//! normalized MSE and the sample-size weighted correlation.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TaskDataset, WeightMatrix};

/// What `sigma(Y_i)` means in the nMSE denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadConvention {
    /// Sample variance with the n-1 divisor.
    #[default]
    Variance,
    /// Sample standard deviation with the n-1 divisor.
    StdDev,
}

fn check_pair(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension(format!(
            "{} targets but {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn rmse(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<f64> {
    check_pair(y, yhat)?;
    if y.is_empty() {
        return Err(Error::Dimension("rmse of empty vectors".into()));
    }
    Ok(((y - yhat).norm_squared() / y.len() as f64).sqrt())
}

fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.mean();
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn check_lists(y: &[DVector<f64>], yhat: &[DVector<f64>]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} target tasks but {} prediction tasks",
            y.len(),
            yhat.len()
        )));
    }
    y.iter().zip(yhat).try_for_each(|(a, b)| check_pair(a, b))
}

/// `sum_i ||Y_i - Yhat_i||^2 / sigma(Y_i)  /  sum_i n_i`.
pub fn nmse(y: &[DVector<f64>], yhat: &[DVector<f64>], spread: SpreadConvention) -> Result<f64> {
    check_lists(y, yhat)?;
    let mut numerator = 0.0;
    let mut total_n = 0usize;
    for (i, (yi, yh)) in y.iter().zip(yhat).enumerate() {
        if yi.len() < 2 {
            return Err(Error::UndefinedMetric {
                metric: "nmse",
                task: i,
                reason: format!("{} samples, need at least 2", yi.len()),
            });
        }
        let var = sample_variance(yi);
        let sigma = match spread {
            SpreadConvention::Variance => var,
            SpreadConvention::StdDev => var.sqrt(),
        };
        if !(sigma > 0.0) {
            return Err(Error::UndefinedMetric {
                metric: "nmse",
                task: i,
                reason: "targets are constant".into(),
            });
        }
        numerator += (yi - yh).norm_squared() / sigma;
        total_n += yi.len();
    }
    Ok(numerator / total_n as f64)
}

/// Pearson correlation of two vectors; `None` when either is constant.
pub fn correlation(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (ma, mb) = (a.mean(), b.mean());
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `sum_i Corr(Y_i, Yhat_i) n_i / sum_i n_i`.
pub fn weighted_r(y: &[DVector<f64>], yhat: &[DVector<f64>]) -> Result<f64> {
    check_lists(y, yhat)?;
    let mut numerator = 0.0;
    let mut total_n = 0usize;
    for (i, (yi, yh)) in y.iter().zip(yhat).enumerate() {
        if yi.len() < 2 {
            return Err(Error::UndefinedMetric {
                metric: "wr",
                task: i,
                reason: format!("{} samples, need at least 2", yi.len()),
            });
        }
        let r = correlation(yi, yh).ok_or_else(|| Error::UndefinedMetric {
            metric: "wr",
            task: i,
            reason: "targets or predictions are constant".into(),
        })?;
        numerator += r * yi.len() as f64;
        total_n += yi.len();
    }
    Ok(numerator / total_n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub timepoint_labels: Vec<String>,
    pub per_task_rmse: Vec<f64>,
    pub per_task_n: Vec<usize>,
    pub nmse: f64,
    pub wr: f64,
    pub spread: SpreadConvention,
}

impl EvaluationReport {
    pub fn mean_rmse(&self) -> f64 {
        self.per_task_rmse.iter().sum::<f64>() / self.per_task_rmse.len() as f64
    }

    /// Long format: `metric,timepoint,n,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["metric", "timepoint", "n", "value"])?;
        for ((label, n), v) in self
            .timepoint_labels
            .iter()
            .zip(&self.per_task_n)
            .zip(&self.per_task_rmse)
        {
            wtr.write_record(["rmse", label, &n.to_string(), &v.to_string()])?;
        }
        let total: usize = self.per_task_n.iter().sum();
        wtr.write_record(["nmse", "all", &total.to_string(), &self.nmse.to_string()])?;
        wtr.write_record(["wr", "all", &total.to_string(), &self.wr.to_string()])?;
        wtr.flush()?;
        Ok(())
    }
}

/// All three metrics from target/prediction lists.
pub fn evaluate_predictions(
    y: &[DVector<f64>],
    yhat: &[DVector<f64>],
    timepoint_labels: &[String],
    spread: SpreadConvention,
) -> Result<EvaluationReport> {
    check_lists(y, yhat)?;
    let per_task_rmse = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| rmse(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        timepoint_labels: timepoint_labels.to_vec(),
        per_task_rmse,
        per_task_n: y.iter().map(|v| v.len()).collect(),
        nmse: nmse(y, yhat, spread)?,
        wr: weighted_r(y, yhat)?,
        spread,
    })
}

/// Evaluates `w` on every task of `data`.
pub fn evaluate(
    data: &TaskDataset,
    w: &WeightMatrix,
    spread: SpreadConvention,
) -> Result<EvaluationReport> {
    let yhat = data.predict(w)?;
    let y: Vec<DVector<f64>> = data.tasks().iter().map(|t| t.target.clone()).collect();
    evaluate_predictions(&y, &yhat, data.timepoint_labels(), spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(rmse(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(
            rmse(&v(&[1.0, 2.0, 3.0]), &v(&[2.0, 2.0, 2.0])).unwrap(),
            (2.0f64 / 3.0).sqrt(),
            epsilon = 1e-15
        );
        assert!(rmse(&v(&[]), &v(&[])).is_err());
        assert!(rmse(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn nmse_examples() {
        let y = vec![v(&[1.0, 2.0, 4.0]), v(&[0.0, 3.0])];
        assert_eq!(nmse(&y, &y, SpreadConvention::Variance).unwrap(), 0.0);

        // Predicting the mean gives (n - 1) / n with the sample variance.
        let yt = v(&[1.0, 4.0, 2.0, 7.0, 3.0]);
        let mean = v(&[yt.mean(); 5]);
        assert_abs_diff_eq!(
            nmse(std::slice::from_ref(&yt), &[mean], SpreadConvention::Variance).unwrap(),
            4.0 / 5.0,
            epsilon = 1e-14
        );

        let yhat = vec![v(&[1.5, 2.0, 3.0]), v(&[1.0, 2.5])];
        let base = nmse(&y, &yhat, SpreadConvention::Variance).unwrap();
        let scale = |l: &[DVector<f64>]| l.iter().map(|x| x * 2.0).collect::<Vec<_>>();
        let doubled = nmse(&scale(&y), &scale(&yhat), SpreadConvention::Variance).unwrap();
        assert_abs_diff_eq!(base, doubled, epsilon = 1e-14);
    }

    #[test]
    fn nmse_constant_targets_name_the_task() {
        let y = vec![v(&[1.0, 2.0]), v(&[3.0, 3.0])];
        match nmse(&y, &y, SpreadConvention::Variance) {
            Err(Error::UndefinedMetric { task, .. }) => assert_eq!(task, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nmse_std_convention() {
        let y = vec![v(&[0.0, 2.0, 4.0])];
        let yhat = vec![v(&[1.0, 2.0, 3.0])];
        // Sample variance 4, std 2, squared error 2.
        assert_abs_diff_eq!(nmse(&y, &yhat, SpreadConvention::Variance).unwrap(), 2.0 / 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nmse(&y, &yhat, SpreadConvention::StdDev).unwrap(), 2.0 / 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn weighted_r_examples() {
        let y = vec![v(&[1.0, 2.0, 4.0]), v(&[0.0, 3.0, 1.0, 5.0])];
        assert_abs_diff_eq!(weighted_r(&y, &y).unwrap(), 1.0, epsilon = 1e-15);
        let anti: Vec<_> = y.iter().map(|x| x.map(|e| 3.0 - e)).collect();
        assert_abs_diff_eq!(weighted_r(&y, &anti).unwrap(), -1.0, epsilon = 1e-15);
        let constant = vec![v(&[1.0, 2.0, 4.0]), v(&[2.0, 2.0, 2.0, 2.0])];
        assert!(matches!(
            weighted_r(&y, &constant),
            Err(Error::UndefinedMetric { task: 1, .. })
        ));
    }

    #[test]
    fn report_csv_layout() {
        let y = vec![v(&[1.0, 2.0, 4.0]), v(&[0.0, 3.0])];
        let yhat = vec![v(&[1.0, 2.5, 3.0]), v(&[0.5, 2.0])];
        let report = evaluate_predictions(&y, &yhat, &["M00".into(), "M06".into()], SpreadConvention::Variance)
            .unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "metric,timepoint,n,value");
        assert!(lines[1].starts_with("rmse,M00,3,"));
        assert!(lines[3].starts_with("nmse,all,5,"));
        assert_eq!(lines.len(), 5);
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = DVector<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n).prop_map(DVector::from_vec)
    }

    proptest! {
        #[test]
        fn rmse_translation_invariant(y in vec_strategy(6), yhat in vec_strategy(6), c in -100.0f64..100.0) {
            let a = rmse(&y, &yhat).unwrap();
            let b = rmse(&y.add_scalar(c), &yhat.add_scalar(c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn weighted_r_affine_invariant(
            y in vec_strategy(7), yhat in vec_strategy(7),
            y2 in vec_strategy(5), yhat2 in vec_strategy(5),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let ys = vec![y, y2];
            let hs = vec![yhat, yhat2];
            let base = weighted_r(&ys, &hs).unwrap();
            let moved: Vec<_> = hs.iter().map(|h| h.map(|e| a * e + b)).collect();
            prop_assert!((weighted_r(&ys, &moved).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn nmse_two_ways_agree(
            y in vec_strategy(6), yhat in vec_strategy(6),
            y2 in vec_strategy(4), yhat2 in vec_strategy(4),
        ) {
            let ys = vec![y, y2];
            let hs = vec![yhat, yhat2];
            let formula = nmse(&ys, &hs, SpreadConvention::Variance).unwrap();
            // Entry-by-entry accumulation.
            let mut num = 0.0;
            let mut n = 0.0;
            for (yi, hi) in ys.iter().zip(&hs) {
                let mean = yi.iter().sum::<f64>() / yi.len() as f64;
                let var = yi.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (yi.len() as f64 - 1.0);
                for (a, b) in yi.iter().zip(hi.iter()) {
                    num += (a - b) * (a - b) / var;
                    n += 1.0;
                }
            }
            prop_assert!((formula - num / n).abs() <= 1e-12 * (1.0 + formula));
        }
    }
}
