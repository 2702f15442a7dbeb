//! Stability selection over patient subsamples.

use std::collections::HashSet;
use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::write_labeled_matrix;
use crate::graph::build_graph;
use crate::solver::{solve, SolveStatus, SolverOptions};
use crate::types::{PenaltyConfig, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityOptions {
    pub runs: usize,
    pub subsample_fraction: f64,
    /// A feature is stable when its largest per-timepoint probability is at
    /// least `pi`.
    pub pi: f64,
    /// `|Q_mi|` above this counts as selected.
    pub zero_tolerance: f64,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            runs: 100,
            subsample_fraction: 0.5,
            pi: 0.8,
            zero_tolerance: 1e-8,
            seed: 0,
        }
    }
}

impl StabilityOptions {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be >= 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "subsample fraction must lie in (0, 1), got {}",
                self.subsample_fraction
            )));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::InvalidConfig(format!("pi must lie in (0, 1], got {}", self.pi)));
        }
        if !(self.zero_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("zero tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableFeature {
    pub index: usize,
    pub name: String,
    pub max_probability: f64,
    /// Label of the first timepoint attaining the maximum.
    pub timepoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityResult {
    pub feature_names: Vec<String>,
    pub timepoint_labels: Vec<String>,
    /// p x t selection frequencies.
    pub selection_probability: DMatrix<f64>,
    pub options: StabilityOptions,
    /// One configuration, or several for path mode.
    pub configs: Vec<PenaltyConfig>,
    pub stable_features: Vec<StableFeature>,
    /// Solves that stopped at the iteration limit.
    pub max_iteration_solves: usize,
}

#[derive(Serialize)]
struct StableFeaturesReport<'a> {
    runs: usize,
    subsample_fraction: f64,
    pi: f64,
    zero_tolerance: f64,
    configs: &'a [PenaltyConfig],
    stable_features: &'a [StableFeature],
}

impl StabilityResult {
    /// Largest probability over timepoints, per feature.
    pub fn max_probability(&self) -> Vec<f64> {
        self.selection_probability
            .row_iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    /// Features x timepoints, with a `feature` label column.
    pub fn write_probability_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labeled_matrix(
            out,
            "feature",
            &self.feature_names,
            &self.timepoint_labels,
            &self.selection_probability,
        )
    }

    pub fn write_stable_json<W: Write>(&self, out: W) -> Result<()> {
        let report = StableFeaturesReport {
            runs: self.options.runs,
            subsample_fraction: self.options.subsample_fraction,
            pi: self.options.pi,
            zero_tolerance: self.options.zero_tolerance,
            configs: &self.configs,
            stable_features: &self.stable_features,
        };
        serde_json::to_writer_pretty(out, &report)?;
        Ok(())
    }
}

/// Features whose maximum probability over timepoints is at least `pi`,
/// in index order.
pub fn stable_features(
    probability: &DMatrix<f64>,
    feature_names: &[String],
    timepoint_labels: &[String],
    pi: f64,
) -> Vec<StableFeature> {
    probability
        .row_iter()
        .enumerate()
        .filter_map(|(m, row)| {
            let (mut best_t, mut best) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_t = i;
                }
            }
            (best >= pi).then(|| StableFeature {
                index: m,
                name: feature_names[m].clone(),
                max_probability: best,
                timepoint: timepoint_labels[best_t].clone(),
            })
        })
        .collect()
}

/// Runs `options.runs` fits, each on a patient subsample drawn without
/// replacement, with the similarity graph rebuilt from the subsample. With
/// several configurations every run fits all of them and the frequencies are
/// pooled.
pub fn stability_select(
    data: &TaskDataset,
    configs: &[PenaltyConfig],
    options: &StabilityOptions,
    solver: &SolverOptions,
) -> Result<StabilityResult> {
    options.validate()?;
    solver.validate()?;
    if configs.is_empty() {
        return Err(Error::InvalidConfig("at least one configuration is required".into()));
    }
    for cfg in configs {
        cfg.validate()?;
    }
    let patients = data.patients();
    let size = ((options.subsample_fraction * patients.len() as f64).round() as usize).max(1);
    let mut master = ChaCha8Rng::seed_from_u64(options.seed);
    let subsamples: Vec<Vec<&str>> = (0..options.runs)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            patients.choose_multiple(&mut rng, size).map(String::as_str).collect()
        })
        .collect();

    let (p, t) = (data.n_features(), data.n_tasks());
    let per_run: Vec<(DMatrix<f64>, usize)> = subsamples
        .par_iter()
        .enumerate()
        .map(|(run, ids)| {
            let keep: HashSet<&str> = ids.iter().copied().collect();
            let sub = data.restrict_to(&keep).map_err(|e| {
                Error::InvalidData(format!("subsample {run} is not a valid dataset: {e}"))
            })?;
            let mut counts = DMatrix::zeros(p, t);
            let mut limited = 0;
            for cfg in configs {
                let graph = build_graph(&sub, cfg.tau, cfg.graph_mode)?;
                let sol = solve(&sub, &graph, cfg, solver)?;
                if sol.status == SolveStatus::MaxIterations {
                    limited += 1;
                }
                for (c, q) in counts.iter_mut().zip(sol.sparse_weights.values.iter()) {
                    if q.abs() > options.zero_tolerance {
                        *c += 1.0;
                    }
                }
            }
            Ok((counts, limited))
        })
        .collect::<Result<_>>()?;

    let mut counts = DMatrix::zeros(p, t);
    let mut max_iteration_solves = 0;
    for (c, limited) in &per_run {
        counts += c;
        max_iteration_solves += limited;
    }
    if max_iteration_solves > 0 {
        warn!("{max_iteration_solves} stability solves hit the iteration limit");
    }
    let denominator = (options.runs * configs.len()) as f64;
    let selection_probability = counts.map(|c| c / denominator);
    let stable = stable_features(
        &selection_probability,
        data.feature_names(),
        data.timepoint_labels(),
        options.pi,
    );
    Ok(StabilityResult {
        feature_names: data.feature_names().to_vec(),
        timepoint_labels: data.timepoint_labels().to_vec(),
        selection_probability,
        options: *options,
        configs: configs.to_vec(),
        stable_features: stable,
        max_iteration_solves,
    })
}
