//! One function per subcommand. Each resolves its parameters, does the
//! work, writes its outputs and finishes with a manifest.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use mtlfsl::data::synth::{feature_names, smooth_sparse_weights, timepoint_labels};
use mtlfsl::data::{
    dataset_to_table, generate_synthetic, load_csv, preprocess, LongitudinalTable,
    PreprocessOptions, PreprocessParams, SyntheticSpec, TableSchema,
};
use mtlfsl::data::table::DEFAULT_TIMEPOINTS;
use mtlfsl::export::write_labeled_matrix;
use mtlfsl::metrics::evaluate;
use mtlfsl::select::{cross_validate, GridSpec, SelectionMetric};
use mtlfsl::stability::{stability_select, StabilityOptions};
use mtlfsl::{build_graph, solve, PenaltyConfig, SolveStatus, SolverOptions, TaskDataset};

use crate::args::{
    Cli, Command, CvArgs, DataArgs, EvalArgs, MetricArg, PenaltyArgs, PredictArgs, ReplayArgs,
    SolverArgs, SpreadArg, StabilityArgs, SynthArgs, TrainArgs,
};
use crate::config::{absolute, merge_config, required, to_args};
use crate::exit::{InputError, Outcome};
use crate::manifest::{digest, unix_now, FileDigest, OutputDir, RunManifest, MANIFEST_FILE};
use crate::model::ModelFile;

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Cv(a) => cv(a),
        Command::Stability(a) => stability(a),
        Command::Replay(a) => replay(a),
    }
}

/// Bookkeeping shared by every run command.
struct Run {
    command: &'static str,
    started_at: u64,
    out: OutputDir,
    inputs: Vec<FileDigest>,
}

impl Run {
    fn start(command: &'static str, out_dir: &Path) -> Result<Self> {
        Ok(Self {
            command,
            started_at: unix_now(),
            out: OutputDir::create(out_dir)?,
            inputs: Vec::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path).map_err(|e| InputError::new(format!("{e:#}")))?);
        Ok(())
    }

    fn finish<P: Serialize, Q: Serialize>(self, flags: &P, parameters: &Q) -> Result<()> {
        let manifest = RunManifest {
            tool: "mtlfsl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            args: to_args(flags)?,
            parameters: serde_json::to_value(parameters)?,
            inputs: self.inputs,
            outputs: self.out.digests()?,
            started_at: self.started_at,
            finished_at: unix_now(),
        };
        let mut out = self.out;
        let path = out.path(MANIFEST_FILE);
        out.write_json(MANIFEST_FILE, &manifest)?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn bad(message: impl Into<String>) -> anyhow::Error {
    InputError::new(message).into()
}

fn resolve_solver(s: &mut SolverArgs, trace_every: Option<usize>) -> Result<SolverOptions> {
    let d = SolverOptions::default();
    let opts = SolverOptions {
        max_iterations: *s.max_iters.get_or_insert(d.max_iterations),
        eps_abs: *s.eps_abs.get_or_insert(d.eps_abs),
        eps_rel: *s.eps_rel.get_or_insert(d.eps_rel),
        trace_every: trace_every.unwrap_or(d.trace_every),
        ..d
    };
    opts.validate().map_err(|e| bad(e.to_string()))?;
    Ok(opts)
}

/// Fills unset penalties from `cv_result` (if given), then from defaults.
fn resolve_penalty(p: &mut PenaltyArgs, cv_result: Option<&Path>) -> Result<PenaltyConfig> {
    let base = match cv_result {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<PenaltyConfig>(&text)
                .map_err(|e| bad(format!("{}: not a best_config.json: {e}", path.display())))?
        }
        None => PenaltyConfig::default(),
    };
    let cfg = PenaltyConfig {
        lambda1: *p.lambda1.get_or_insert(base.lambda1),
        lambda2: *p.lambda2.get_or_insert(base.lambda2),
        lambda3: *p.lambda3.get_or_insert(base.lambda3),
        tau: *p.tau.get_or_insert(base.tau),
        rho: *p.rho.get_or_insert(base.rho),
        graph_mode: (*p.graph_mode.get_or_insert(base.graph_mode.into())).into(),
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

/// Records the cv-result file as an input. It stays in the argument list so
/// that a replay reads the same file.
fn read_cv_result(cv_result: &mut Option<PathBuf>, run: &mut Run) -> Result<Option<PathBuf>> {
    match cv_result.as_mut() {
        Some(p) => {
            *p = absolute(p)?;
            run.read(p)?;
            Ok(Some(p.clone()))
        }
        None => Ok(None),
    }
}

fn load_table(data: &mut DataArgs, run: &mut Run) -> Result<LongitudinalTable> {
    let input = required(&mut data.input, "input")?;
    let timepoints = data
        .timepoints
        .get_or_insert_with(|| DEFAULT_TIMEPOINTS.iter().map(|s| s.to_string()).collect())
        .clone();
    run.read(&input)?;
    Ok(load_csv(&input, &TableSchema::with_timepoints(timepoints))?)
}

fn load_dataset(data: &mut DataArgs, run: &mut Run) -> Result<(TaskDataset, PreprocessParams)> {
    let table = load_table(data, run)?;
    let (dataset, params) = preprocess(&table, PreprocessOptions::default())?;
    info!(
        "{} features, {} timepoints, samples per timepoint {:?}",
        dataset.n_features(),
        dataset.n_tasks(),
        dataset.patient_counts()
    );
    Ok((dataset, params))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(bad("--threads must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cannot start the worker pool")?;
    Ok(pool.install(f))
}

fn synth(args: SynthArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("synth", &args.target.out_dir)?;
    let n_features = *p.features.get_or_insert(20);
    let n_tasks = *p.tasks.get_or_insert(6);
    let patients = *p.patients.get_or_insert(200);
    let seed = *p.seed.get_or_insert(0);
    let active = p
        .active
        .get_or_insert_with(|| (0..3.min(n_features)).collect())
        .clone();
    if let Some(&m) = active.iter().find(|&&m| m >= n_features) {
        return Err(bad(format!("active feature {m} out of range for {n_features} features")));
    }
    let block = *p.block_size.get_or_insert(1);
    if block == 0 {
        return Err(bad("--block-size must be >= 1"));
    }
    let true_weights = smooth_sparse_weights(n_features, n_tasks, &active, seed);
    let mut spec = SyntheticSpec::new(true_weights, patients);
    spec.dropout_schedule = p.dropout.get_or_insert_with(|| vec![1.0; n_tasks]).clone();
    spec.block_sizes = (0..n_features)
        .step_by(block)
        .map(|start| block.min(n_features - start))
        .collect();
    spec.within_block_corr = *p.block_corr.get_or_insert(0.0);
    spec.persistence = *p.persistence.get_or_insert(0.0);
    spec.noise_sigma = *p.noise_sigma.get_or_insert(1.0);
    spec.seed = seed;
    spec.validate().map_err(|e| bad(e.to_string()))?;

    let (data, w) = generate_synthetic(&spec)?;
    let table = dataset_to_table(&data);
    run.out.write("data.csv", |out| Ok(table.to_writer(out)?))?;
    run.out.write("true_w.csv", |out| {
        Ok(write_labeled_matrix(
            out,
            "feature",
            &feature_names(n_features),
            &timepoint_labels(n_tasks),
            &w.values,
        )?)
    })?;
    println!(
        "synthesized {n_features} features x {n_tasks} timepoints, samples per timepoint {:?}",
        data.patient_counts()
    );
    let parameters = serde_json::json!({
        "n_per_task": spec.n_per_task(),
        "block_sizes": spec.block_sizes,
        "timepoints": timepoint_labels(n_tasks),
    });
    run.finish(&p, &parameters)?;
    Ok(Outcome::Done)
}

fn report_solve(status: SolveStatus, iterations: usize, objective: f64, model: &ModelFile) -> Outcome {
    println!(
        "status {status:?} after {iterations} iterations, objective {objective}, primal residual {}, dual residual {}",
        fmt_opt(model.solve.primal_residual),
        fmt_opt(model.solve.dual_residual)
    );
    if status == SolveStatus::MaxIterations {
        warn!("the solver hit the iteration limit; the model was written anyway");
        Outcome::MaxIterations
    } else {
        Outcome::Done
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| v.to_string())
}

/// Fits `cfg` on `data` and writes the model, trace and graph files.
fn fit_and_write(
    run: &mut Run,
    data: &TaskDataset,
    prep: PreprocessParams,
    cfg: PenaltyConfig,
    opts: &SolverOptions,
) -> Result<Outcome> {
    let graph = build_graph(data, cfg.tau, cfg.graph_mode)?;
    let sol = solve(data, &graph, &cfg, opts)?;
    let model = ModelFile::new(&sol, cfg, &graph, prep);
    run.out.write_json("model.json", &model)?;
    run.out.write("trace.csv", |out| Ok(sol.trace.write_csv(out)?))?;
    run.out.write("graph.csv", |out| Ok(graph.write_csv(out, data.feature_names())?))?;
    Ok(report_solve(sol.status, sol.iterations, sol.objective(), &model))
}

fn train(args: TrainArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("train", &args.target.out_dir)?;
    let (data, prep) = load_dataset(&mut p.data, &mut run)?;
    let cv_result = read_cv_result(&mut p.cv_result, &mut run)?;
    let cfg = resolve_penalty(&mut p.penalty, cv_result.as_deref())?;
    let opts = resolve_solver(&mut p.solver, None)?;
    let outcome = fit_and_write(&mut run, &data, prep, cfg, &opts)?;
    run.finish(&p, &serde_json::json!({ "config": cfg, "solver": opts }))?;
    Ok(outcome)
}

fn model_and_table(
    model: &mut Option<PathBuf>,
    input: &mut Option<PathBuf>,
    run: &mut Run,
) -> Result<(ModelFile, LongitudinalTable)> {
    let model_path = required(model, "model")?;
    let input_path = required(input, "input")?;
    run.read(&model_path)?;
    run.read(&input_path)?;
    let model = ModelFile::read(&model_path)?;
    let table = load_csv(&input_path, &TableSchema::with_timepoints(model.timepoints.clone()))?;
    Ok((model, table))
}

fn predict(args: PredictArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("predict", &args.target.out_dir)?;
    let (model, table) = model_and_table(&mut p.model, &mut p.input, &mut run)?;
    let tasks = model.preprocessing.transform_for_prediction(&table)?;
    let w = &model.weights.values;
    let mut rows = 0;
    run.out.write("predictions.csv", |out| {
        writeln!(out, "patient_id,timepoint,prediction")?;
        for (t, task) in tasks.iter().enumerate() {
            let yhat = &task.design * w.column(t);
            for (id, v) in task.patient_ids.iter().zip(yhat.iter()) {
                let v = model.preprocessing.restore_target(t, *v);
                writeln!(out, "{},{},{v}", csv_field(id), csv_field(&model.timepoints[t]))?;
                rows += 1;
            }
        }
        Ok(())
    })?;
    println!("predicted {rows} rows");
    run.finish(&p, &serde_json::json!({ "rows": rows }))?;
    Ok(Outcome::Done)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn eval(args: EvalArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("eval", &args.target.out_dir)?;
    let (model, table) = model_and_table(&mut p.io.model, &mut p.io.input, &mut run)?;
    let spread = *p.spread.get_or_insert(SpreadArg::Variance);
    let data = model.preprocessing.transform(&table)?;
    let report = evaluate(&data, &model.weights, spread.into())?;
    run.out.write_json("evaluation.json", &report)?;
    run.out.write("evaluation.csv", |out| Ok(report.write_csv(out)?))?;
    for (label, rmse) in report.timepoint_labels.iter().zip(&report.per_task_rmse) {
        println!("rmse {label}: {rmse}");
    }
    println!("nmse {} wr {}", report.nmse, report.wr);
    run.finish(&p, &report)?;
    Ok(Outcome::Done)
}

fn read_grid(path: &Path) -> Result<GridSpec> {
    let text =
        fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("grid file {}: {e}", path.display())))
}

fn cv(args: CvArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("cv", &args.target.out_dir)?;
    let (data, prep) = load_dataset(&mut p.data, &mut run)?;
    let mut grid = match p.grid_file.as_mut() {
        Some(path) => {
            *path = absolute(path)?;
            run.read(path)?;
            read_grid(path)?
        }
        None => GridSpec::default(),
    };
    grid.folds = *p.folds.get_or_insert(grid.folds);
    grid.rho = *p.rho.get_or_insert(grid.rho);
    grid.graph_mode = (*p.graph_mode.get_or_insert(grid.graph_mode.into())).into();
    grid.seed = *p.seed.get_or_insert(grid.seed);
    let metric = p.metric.get_or_insert(match grid.selection_metric {
        SelectionMetric::Nmse => MetricArg::Nmse,
        SelectionMetric::Wr => MetricArg::Wr,
        SelectionMetric::MeanRmse => MetricArg::MeanRmse,
    });
    grid.selection_metric = match metric {
        MetricArg::Nmse => SelectionMetric::Nmse,
        MetricArg::Wr => SelectionMetric::Wr,
        MetricArg::MeanRmse => SelectionMetric::MeanRmse,
    };
    if let Some(tau) = p.tau {
        grid.tau_grid = vec![tau];
    }
    grid.validate().map_err(|e| bad(e.to_string()))?;
    let fold_opts = resolve_solver(&mut p.solver, None)?;
    let fold_opts = SolverOptions { trace_every: fold_opts.max_iterations.max(1), ..fold_opts };
    info!("{} grid cells x {} folds", grid.cells().len(), grid.folds);

    let result = with_threads(p.threads, || cross_validate(&data, &grid, &fold_opts))??;
    let limited: usize = result.scores.iter().map(|s| s.max_iteration_folds).sum();
    if limited > 0 {
        warn!("{limited} fold solves hit the iteration limit");
    }
    let best = result.best_config();
    run.out.write("grid_scores.csv", |out| Ok(result.write_grid_csv(out)?))?;
    run.out.write("cv_result.json", |out| Ok(result.write_json(out)?))?;
    run.out.write_json("best_config.json", &best)?;
    println!(
        "best cell lambda1 {} lambda2 {} lambda3 {} tau {} ({:?} {})",
        best.lambda1,
        best.lambda2,
        best.lambda3,
        best.tau,
        grid.selection_metric,
        fmt_opt(result.scores[result.best_index].mean)
    );
    let refit_opts = SolverOptions { trace_every: 1, ..fold_opts };
    let outcome = fit_and_write(&mut run, &data, prep, best, &refit_opts)?;
    run.finish(&p, &serde_json::json!({ "grid": grid, "solver": refit_opts, "best": best }))?;
    Ok(outcome)
}

fn stability(args: StabilityArgs) -> Result<Outcome> {
    let mut p = merge_config(&args.params, args.target.config.as_deref())?;
    let mut run = Run::start("stability", &args.target.out_dir)?;
    let (data, _) = load_dataset(&mut p.data, &mut run)?;
    let cv_result = read_cv_result(&mut p.cv_result, &mut run)?;
    let cfg = resolve_penalty(&mut p.penalty, cv_result.as_deref())?;
    let configs: Vec<PenaltyConfig> = match &p.lambda1_path {
        Some(path) if path.is_empty() => bail!(bad("--lambda1-path is empty")),
        Some(path) => path.iter().map(|&lambda1| PenaltyConfig { lambda1, ..cfg }).collect(),
        None => vec![cfg],
    };
    for c in &configs {
        c.validate().map_err(|e| bad(e.to_string()))?;
    }
    let d = StabilityOptions::default();
    let options = StabilityOptions {
        runs: *p.runs.get_or_insert(d.runs),
        subsample_fraction: *p.subsample.get_or_insert(d.subsample_fraction),
        pi: *p.pi.get_or_insert(d.pi),
        seed: *p.seed.get_or_insert(d.seed),
        ..d
    };
    options.validate().map_err(|e| bad(e.to_string()))?;
    let opts = resolve_solver(&mut p.solver, None)?;
    let opts = SolverOptions { trace_every: opts.max_iterations.max(1), ..opts };

    let result = with_threads(p.threads, || stability_select(&data, &configs, &options, &opts))??;
    run.out.write("selection_probability.csv", |out| Ok(result.write_probability_csv(out)?))?;
    run.out.write("stable_features.json", |out| Ok(result.write_stable_json(out)?))?;
    println!("{} stable features at pi {}", result.stable_features.len(), options.pi);
    for f in &result.stable_features {
        println!("  {} max probability {} at {}", f.name, f.max_probability, f.timepoint);
    }
    run.finish(
        &p,
        &serde_json::json!({
            "configs": configs,
            "options": options,
            "solver": opts,
            "max_iteration_solves": result.max_iteration_solves,
        }),
    )?;
    Ok(Outcome::Done)
}

fn replay(args: ReplayArgs) -> Result<Outcome> {
    let manifest = RunManifest::read(&args.manifest).map_err(|e| bad(format!("{e:#}")))?;
    for input in &manifest.inputs {
        let now = digest(Path::new(&input.path)).map_err(|e| bad(format!("{e:#}")))?;
        if now.sha256 != input.sha256 {
            return Err(bad(format!("input {} changed since the recorded run", input.path)));
        }
    }
    if manifest.command == "replay" {
        return Err(bad("a replay has no manifest of its own"));
    }
    let mut argv = vec!["mtlfsl".to_string(), manifest.command.clone()];
    argv.extend(manifest.args.iter().cloned());
    argv.push("--out-dir".into());
    argv.push(args.out_dir.to_string_lossy().into_owned());
    let cli = <Cli as clap::Parser>::try_parse_from(&argv)
        .map_err(|e| bad(format!("manifest arguments do not parse: {e}")))?;
    let outcome = run(cli)?;

    let rerun = RunManifest::read(&args.out_dir.join(MANIFEST_FILE))?;
    let fresh: HashMap<&str, &str> = rerun
        .outputs
        .iter()
        .map(|d| (d.path.as_str(), d.sha256.as_str()))
        .collect();
    let differing: Vec<&str> = manifest
        .outputs
        .iter()
        .filter(|d| fresh.get(d.path.as_str()) != Some(&d.sha256.as_str()))
        .map(|d| d.path.as_str())
        .collect();
    if !differing.is_empty() || rerun.outputs.len() != manifest.outputs.len() {
        bail!("replayed outputs differ from the manifest: {differing:?}");
    }
    println!("all {} outputs identical to the recorded run", manifest.outputs.len());
    Ok(outcome)
}
