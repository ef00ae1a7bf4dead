//! The five subcommands. Each reads a validated config and writes its
//! artifacts into one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{Baseline, ExperimentConfig, LiftingConfig, QuadraticRegime};
use crate::control::{
    fit_edmd_oracle, run_receding_horizon, ConstantInput, ControlProblem, ControlReport, Controller,
    DeepcController, EdmdMpc, KoopmanController, LoopOptions,
};
use crate::data::{
    build_bundle, dataset_excitation, load_trajectories, save_trajectories, MatrixKind, Trajectory, TrajectoryDataset,
    Window,
};
use crate::error::{Error, Result};
use crate::lifting::{Lifting, LiftingModel, ThinPlateLift};
use crate::plants::{generate_dataset, Plant};
use crate::prediction::{
    predict_mc, predict_wasserstein, save_prediction, DeterministicPredictor, PredictionRequest, PredictionResult,
    StochasticLiftSummary,
};
use crate::rng::{stream_rng, substream};
use crate::training::{csv_err, save_history, split_dataset, train_split};

/// Where a command writes and whether wall-clock columns are recorded.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub timing: bool,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>, timing: bool) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        Ok(RunContext { out, timing })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// The configured recording: loaded from `data.path` or simulated.
pub fn recorded_dataset(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    if let Some(path) = &cfg.data.path {
        let ds = load_trajectories(path)?;
        let plant = cfg.plant()?;
        if ds.n_u() != plant.n_u() || ds.n_y() != plant.n_y() {
            return Err(Error::Config(format!(
                "data.path: file has {} inputs / {} outputs, the plant {} / {}",
                ds.n_u(),
                ds.n_y(),
                plant.n_u(),
                plant.n_y()
            )));
        }
        return Ok(ds);
    }
    let d = &cfg.data;
    generate_dataset(
        &cfg.plant,
        d.trajectories,
        d.length,
        &d.input_law,
        &d.init_law,
        substream(substream(cfg.seed, "data"), "simulate"),
    )
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub trajectories: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub sample_period: f64,
    /// Largest order at which the input mosaic Hankel matrix has full row rank.
    pub pe_order: usize,
    /// Order needed by the configured lift and horizon.
    pub pe_order_required: usize,
}

/// Largest `L` for which the dataset input is persistently exciting of order `L`.
pub fn achieved_pe_order(ds: &TrajectoryDataset) -> usize {
    let mut order = 0;
    while let Some((true, _)) = dataset_excitation(ds, order + 1) {
        order += 1;
    }
    order
}

pub fn cmd_simulate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<SimulateSummary> {
    let plant = cfg.plant()?;
    let ds = recorded_dataset(cfg)?;
    save_trajectories(&ds, ctx.path("dataset.csv"))?;
    let lens: Vec<usize> = ds.trajectories().iter().map(Trajectory::len).collect();
    let summary = SimulateSummary {
        trajectories: ds.len(),
        min_length: lens.iter().copied().min().unwrap_or(0),
        max_length: lens.iter().copied().max().unwrap_or(0),
        n_u: ds.n_u(),
        n_y: ds.n_y(),
        sample_period: ds.sample_period(),
        pe_order: achieved_pe_order(&ds),
        pe_order_required: (cfg.lift_dim(&plant) + cfg.bundle.horizon).saturating_sub(plant.n_u()).max(1),
    };
    write_json(&ctx.path("simulate_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stop: crate::training::StopReason,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
    pub matrix_columns: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<TrainSummary> {
    let tc = cfg.training_config()?;
    let ds = recorded_dataset(cfg)?;
    let split = split_dataset(&ds, &tc)?;
    let (model, history) = train_split(&split, &tc)?;
    model.save(ctx.path("model.kdlm"))?;
    save_history(&history, ctx.path("history.csv"), ctx.timing)?;
    let summary = TrainSummary {
        epochs_run: history.epochs(),
        best_epoch: history.best_epoch,
        stop: history.stop,
        final_train_loss: history.train_loss.last().copied(),
        final_validation_loss: history.validation_loss.last().copied(),
        matrix_columns: split.matrix.len(),
        train_windows: split.train.len(),
        validation_windows: split.validation.len(),
    };
    write_json(&ctx.path("training_summary.json"), &summary)?;
    if history.stop == crate::training::StopReason::Diverged {
        return Err(Error::Diverged {
            epoch: history.epochs().saturating_sub(1),
            message: "non-finite loss or gradient".into(),
        });
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// lifts shared by predict and control

fn checkpoint_path(cfg: &ExperimentConfig, ctx: &RunContext) -> Option<PathBuf> {
    match &cfg.lifting {
        LiftingConfig::Network { checkpoint, .. } => Some(checkpoint.clone().unwrap_or_else(|| ctx.path("model.kdlm"))),
        _ => None,
    }
}

fn load_network(cfg: &ExperimentConfig, ctx: &RunContext, plant: &Plant) -> Result<LiftingModel> {
    let path = checkpoint_path(cfg, ctx).ok_or_else(|| Error::Config("lifting: not a network".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!(
            "lifting.checkpoint: {} does not exist; run `train` first",
            path.display()
        )));
    }
    let model = LiftingModel::load(&path)?;
    let LiftingConfig::Network { layer_sizes, features, .. } = &cfg.lifting else { unreachable!() };
    if model.layer_sizes() != layer_sizes.as_slice()
        || model.t_ini() != cfg.bundle.t_ini
        || model.features() != *features
        || model.input_dim() != features.dim(cfg.bundle.t_ini, plant.n_u(), plant.n_y())
    {
        return Err(Error::Config(format!(
            "lifting.checkpoint: {} does not match the configured network",
            path.display()
        )));
    }
    Ok(model)
}

/// The configured lift; networks come from their checkpoint.
pub fn build_lifting(cfg: &ExperimentConfig, ctx: &RunContext, plant: &Plant) -> Result<Lifting> {
    let t = cfg.bundle.t_ini;
    Ok(match &cfg.lifting {
        LiftingConfig::Network { .. } => Lifting::Network(load_network(cfg, ctx, plant)?),
        LiftingConfig::Identity { features } => {
            Lifting::Identity { features: *features, t_ini: t, dim: features.dim(t, plant.n_u(), plant.n_y()) }
        }
        LiftingConfig::ThinPlate { centers, features } => Lifting::ThinPlate(ThinPlateLift::random(
            features.dim(t, plant.n_u(), plant.n_y()),
            *centers,
            *features,
            t,
            substream(cfg.seed, "init"),
        )),
        LiftingConfig::Kdv => Lifting::Kdv { grid_points: plant.n_y() },
    })
}

// ---------------------------------------------------------------------------
// predict

/// Held-out data of the prediction protocol.
#[derive(Debug, Clone)]
pub struct TestPhase {
    /// One fragment of length `T_ini + L` per Hankel column.
    pub hankel: TrajectoryDataset,
    /// One fragment per Page column; empty when no Page fragments are configured.
    pub page: Option<TrajectoryDataset>,
    /// Full test windows of length `T_ini + L`.
    pub samples: Vec<Window>,
}

/// Simulates fresh trajectories: the first `matrix_trajectories` are cut into
/// fragments for the data matrices, each of the others yields one test window
/// at a seeded fragment position.
pub fn test_phase(cfg: &ExperimentConfig) -> Result<TestPhase> {
    let p = cfg.prediction.as_ref().ok_or_else(|| Error::Config("prediction: section missing".into()))?;
    let depth = cfg.bundle.t_ini + cfg.bundle.horizon;
    let len = cfg.data.length;
    let test_seed = substream(cfg.seed, "test");
    let ds = generate_dataset(
        &cfg.plant,
        p.matrix_trajectories + p.test_samples,
        len,
        &cfg.data.input_law,
        &cfg.data.init_law,
        substream(test_seed, "simulate"),
    )?;
    let trajs = ds.trajectories();
    let (matrix, tests) = trajs.split_at(p.matrix_trajectories);
    let fragments = |range: std::ops::Range<usize>| -> Vec<Trajectory> {
        matrix.iter().flat_map(|t| range.clone().map(move |f| t.slice(f * depth, depth))).collect()
    };
    let dt = ds.sample_period();
    let hankel = TrajectoryDataset::new(fragments(0..p.hankel_fragments), dt)?;
    let page = if p.page_fragments > 0 {
        Some(TrajectoryDataset::new(fragments(p.hankel_fragments..p.hankel_fragments + p.page_fragments), dt)?)
    } else {
        None
    };
    let n_frag = len / depth;
    let samples = tests
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let f = stream_rng(substream(test_seed, "windows"), s as u64).gen_range(0..n_frag);
            Window::of(t, f * depth, depth)
        })
        .collect();
    Ok(TestPhase { hankel, page, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Per-output MSE at the report step.
    pub report_mse: Vec<f64>,
    /// Per-output MSE averaged over all steps.
    pub mean_mse: Vec<f64>,
    pub converged: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictSummary {
    pub report_step: usize,
    pub hankel_columns: usize,
    pub page_columns: usize,
    pub methods: Vec<MethodSummary>,
}

struct MethodRun {
    name: &'static str,
    results: Vec<PredictionResult>,
}

/// `mse[(i, k)]`: mean over samples of the squared error of output `i` at step `k`.
pub fn mse_table(preds: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(truth[0].nrows(), truth[0].ncols());
    for (p, t) in preds.iter().zip(truth) {
        acc += (p - t).map(|e| e * e);
    }
    acc / preds.len() as f64
}

pub fn cmd_predict(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<PredictSummary> {
    let p = cfg.prediction.clone().ok_or_else(|| Error::Config("prediction: section missing".into()))?;
    let plant = cfg.plant()?;
    let lifting = build_lifting(cfg, ctx, &plant)?;
    let (t_ini, horizon) = (cfg.bundle.t_ini, cfg.bundle.horizon);
    let phase = test_phase(cfg)?;
    let hankel = build_bundle(&phase.hankel, t_ini, horizon, MatrixKind::Hankel, Some(lifting.dim()))?;
    let requests: Vec<PredictionRequest> =
        phase.samples.iter().map(|w| PredictionRequest::from_window(w, t_ini)).collect::<Result<_>>()?;
    let truth: Vec<DMatrix<f64>> =
        phase.samples.iter().map(|w| w.outputs.columns(t_ini, horizon).into_owned()).collect();

    let mut runs = Vec::new();
    let quadratic = match (p.quadratic, &lifting) {
        (QuadraticRegime::MonteCarlo, Lifting::Network(model)) => {
            let seed = substream(cfg.seed, "dropout");
            requests
                .par_iter()
                .enumerate()
                .map(|(s, r)| {
                    predict_mc(model, &hankel, r, p.ensemble, substream(seed, &format!("sample{s}")), p.lambda_g, p.lambda_y)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (QuadraticRegime::MonteCarlo, _) => {
            return Err(Error::Config("prediction.quadratic: monte_carlo needs a network lift".into()))
        }
        (QuadraticRegime::Deterministic, _) => {
            let predictor = DeterministicPredictor::new(&lifting, &hankel, p.lambda_g, p.lambda_y)?;
            requests.par_iter().map(|r| predictor.predict(r)).collect::<Result<Vec<_>>>()?
        }
    };
    runs.push(MethodRun { name: "quadratic", results: quadratic });

    let mut page_columns = 0;
    match (&lifting, &phase.page) {
        (Lifting::Network(model), Some(page_ds)) if model.dropout_rate() > 0.0 => {
            let page = build_bundle(page_ds, t_ini, horizon, MatrixKind::Page, None)?;
            page_columns = page.ncols();
            let summary_seed = substream(cfg.seed, "summary");
            let columns = StochasticLiftSummary::columns_from_model(model, &page.windows, p.summary_draws, summary_seed)?;
            let multistart = substream(cfg.seed, "solver multistart");
            let results = requests
                .par_iter()
                .enumerate()
                .map(|(s, r)| {
                    let per = substream(summary_seed, &format!("sample{s}"));
                    let summary = columns.with_init(model, &r.ini_window(), p.summary_draws, per)?;
                    let mut o = p.wasserstein.clone();
                    o.seed = substream(multistart, &format!("sample{s}"));
                    predict_wasserstein(&summary, &page, r, &o)
                })
                .collect::<Result<Vec<_>>>()?;
            runs.push(MethodRun { name: "wasserstein", results });
        }
        _ => log::info!("skipping the Wasserstein prediction: it needs a dropout network and Page fragments"),
    }

    let ny = plant.n_y();
    let mut samples_csv = csv::Writer::from_path(ctx.path("predict_samples.csv")).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "sample".to_string(), "step".to_string()];
    for kind in ["pred", "std", "true"] {
        header.extend((0..ny).map(|i| format!("y{i}_{kind}")));
    }
    samples_csv.write_record(&header).map_err(csv_err)?;
    let mut mse_csv = csv::Writer::from_path(ctx.path("predict_mse.csv")).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "step".to_string()];
    header.extend((0..ny).map(|i| format!("y{i}_mse")));
    mse_csv.write_record(&header).map_err(csv_err)?;

    let mut methods = Vec::new();
    for run in &runs {
        for (s, (res, tr)) in run.results.iter().zip(&truth).enumerate() {
            for k in 0..horizon {
                let mut rec = vec![run.name.to_string(), s.to_string(), (k + 1).to_string()];
                for m in [&res.mean, &res.std, tr] {
                    rec.extend(m.column(k).iter().map(|v| v.to_string()));
                }
                samples_csv.write_record(&rec).map_err(csv_err)?;
            }
        }
        let preds: Vec<DMatrix<f64>> = run.results.iter().map(|r| r.mean.clone()).collect();
        let mse = mse_table(&preds, &truth);
        for k in 0..horizon {
            let mut rec = vec![run.name.to_string(), (k + 1).to_string()];
            rec.extend(mse.column(k).iter().map(|v| v.to_string()));
            mse_csv.write_record(&rec).map_err(csv_err)?;
        }
        save_prediction(&run.results[0], ctx.path(&format!("prediction_{}.csv", run.name)))?;
        methods.push(MethodSummary {
            method: run.name.to_string(),
            report_mse: mse.column(p.report_step - 1).iter().copied().collect(),
            mean_mse: mse.column_mean().iter().copied().collect(),
            converged: run.results.iter().filter(|r| r.diagnostics.converged).count(),
            samples: run.results.len(),
        });
    }
    samples_csv.flush()?;
    mse_csv.flush()?;
    let summary = PredictSummary { report_step: p.report_step, hankel_columns: hankel.ncols(), page_columns, methods };
    write_json(&ctx.path("predict_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// control

pub const CONTROLLER_NAME: &str = "koopman_deepc";

pub fn cmd_control(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ControlReport>> {
    let c = cfg.control.clone().ok_or_else(|| Error::Config("control: section missing".into()))?;
    let plant = cfg.plant()?;
    let spec = cfg.control_spec(&plant)?;
    let lifting = build_lifting(cfg, ctx, &plant)?;
    let ds = recorded_dataset(cfg)?;
    let bundle = build_bundle(&ds, cfg.bundle.t_ini, cfg.bundle.horizon, cfg.bundle.kind, Some(lifting.dim()))?;
    let x0 = c.initial_state.sample(&plant, &mut stream_rng(substream(cfg.seed, "control"), 0))?;
    let warmup = match &c.warmup_input {
        Some(w) => w.to_vector(plant.n_u())?,
        None => DVector::zeros(plant.n_u()),
    };
    let opts = LoopOptions { steps: cfg.control_steps(), warmup_input: warmup, timing: ctx.timing };

    let mut controllers: Vec<(String, Box<dyn Controller>)> = Vec::new();
    let problem = ControlProblem {
        bundle: bundle.clone(),
        lifting: lifting.clone(),
        spec: spec.clone(),
        lambda_g: c.lambda_g,
        lambda_y: c.lambda_y,
    };
    controllers.push((CONTROLLER_NAME.into(), Box::new(KoopmanController::new(problem)?)));
    for b in &c.baselines {
        let ctl: Box<dyn Controller> = match b {
            Baseline::EdmdMpc => Box::new(EdmdMpc::new(fit_edmd_oracle(&bundle, &lifting)?, spec.clone())?),
            Baseline::Deepc => Box::new(DeepcController::new(bundle.clone(), spec.clone(), c.deepc.clone())?),
            Baseline::ZeroInput => Box::new(ConstantInput {
                input: DVector::zeros(plant.n_u()),
                t_ini: cfg.bundle.t_ini,
                n_y: plant.n_y(),
                horizon: cfg.bundle.horizon,
            }),
        };
        controllers.push((b.name().into(), ctl));
    }

    let mut reports = Vec::new();
    for (name, mut ctl) in controllers {
        log::info!("closed loop: {name}");
        let log = run_receding_horizon(&plant, ctl.as_mut(), &spec, &x0, &opts)?;
        log.save_csv(ctx.path(&format!("closed_loop_{name}.csv")))?;
        log.save_plans_csv(ctx.path(&format!("closed_loop_{name}_plans.csv")))?;
        if let Some(msg) = &log.aborted {
            log::warn!("{name}: plant integration failed after {} steps: {msg}", log.len());
        }
        reports.push(ControlReport::from_log(&name, &log, &spec));
    }
    write_json(&ctx.path("control_report.json"), &reports)?;
    save_reports_csv(&reports, &ctx.path("control_report.csv"))?;
    Ok(reports)
}

fn save_reports_csv(reports: &[ControlReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "controller",
        "steps",
        "total_cost",
        "tracking_mse",
        "input_violations",
        "planned_output_violations",
        "measured_output_violations",
        "held_steps",
        "softened_steps",
        "max_kkt_residual",
        "max_solve_ms",
        "aborted",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record(&[
            r.controller.clone(),
            r.steps.to_string(),
            r.total_cost.to_string(),
            r.tracking_mse.to_string(),
            r.input_violations.to_string(),
            r.planned_output_violations.to_string(),
            r.measured_output_violations.to_string(),
            r.held_steps.to_string(),
            r.softened_steps.to_string(),
            r.max_kkt_residual.to_string(),
            r.max_solve_ms.to_string(),
            r.aborted.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// Tables picked up from each run directory.
pub const REPORT_TABLES: [&str; 3] = ["predict_mse.csv", "control_report.csv", "history.csv"];

/// Concatenates the tables of several runs with a leading `run` column; the
/// label is the directory name and every field is copied verbatim.
pub fn cmd_report(runs: &[PathBuf], ctx: &RunContext) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Config("report: no run directories given".into()));
    }
    let mut tables: BTreeMap<&str, (csv::StringRecord, Vec<csv::StringRecord>)> = BTreeMap::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(Error::Config(format!("report: {} is not a directory", dir.display())));
        }
        let label = dir
            .canonicalize()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut found = false;
        for name in REPORT_TABLES {
            let path = dir.join(name);
            if !path.is_file() {
                continue;
            }
            found = true;
            let mut rd = csv::Reader::from_path(&path).map_err(csv_err)?;
            let mut header = csv::StringRecord::from(vec!["run"]);
            header.extend(rd.headers().map_err(csv_err)?.iter());
            let entry = tables.entry(name).or_insert_with(|| (header.clone(), Vec::new()));
            if entry.0 != header {
                return Err(Error::Config(format!("report: {} has a different layout than earlier runs", path.display())));
            }
            for rec in rd.records() {
                let rec = rec.map_err(csv_err)?;
                let mut row = csv::StringRecord::from(vec![label.as_str()]);
                row.extend(rec.iter());
                entry.1.push(row);
            }
        }
        if !found {
            return Err(Error::Config(format!(
                "report: {} contains none of {}",
                dir.display(),
                REPORT_TABLES.join(", ")
            )));
        }
    }
    let mut written = Vec::new();
    for (name, (header, rows)) in tables {
        let path = ctx.path(&format!("report_{name}"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for r in &rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
