//! Learning the lifting network by differentiating through the prediction QP.
//!
//! For a sample window `w = (u, y)` of length `T_ini + L`, the QP layer picks
//! `g` from `min lambda_g ||g||^2 + lambda_y ||Z g - z||^2  s.t.  [U_p; U_f] g = u`,
//! where the columns of `Z` lift the bundle's conditioning windows and `z`
//! lifts the first `T_ini` steps of `w`. The loss is `||[Y_p; Y_f] g - y||^2`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_bundle, HankelBundle, MatrixKind, TrajectoryDataset, Window};
use crate::error::{Error, Result};
use crate::lifting::{DropoutMasks, ForwardCache, LiftingModel, ParamGrad, WindowFeatures};
use crate::qp_layer::PredictionLayer;
use crate::rng::{stream_rng, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    /// Dropout draws per gradient estimate; 0 trains deterministically.
    pub mc_samples: usize,
    pub seed: u64,
    /// Share of each trajectory's windows used to build the data matrices.
    pub matrix_fraction: f64,
    /// Share of each trajectory's windows used as training samples; the rest validates.
    pub train_fraction: f64,
    pub patience: usize,
    pub matrix_kind: MatrixKind,
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub features: WindowFeatures,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            t_ini: 1,
            horizon: 10,
            lambda_g: 1e-3,
            lambda_y: 1.0,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 100,
            mc_samples: 0,
            seed: 0,
            matrix_fraction: 0.6,
            train_fraction: 0.2,
            patience: 20,
            matrix_kind: MatrixKind::Hankel,
            layer_sizes: vec![2, 12, 22, 12, 12],
            dropout_rate: 0.2,
            features: WindowFeatures::OutputsOnly,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_ini == 0 || self.horizon == 0 {
            return Err(Error::Config("training: t_ini and horizon must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training: batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("training: learning_rate must be positive".into()));
        }
        if !(self.lambda_g > 0.0) || !(self.lambda_y >= 0.0) {
            return Err(Error::Config("training: need lambda_g > 0 and lambda_y >= 0".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("training: adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.matrix_fraction) || !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("training: split fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.t_ini + self.horizon
    }
}

/// Index of a window: `(trajectory, first sample)`.
pub type WindowId = (usize, usize);

/// Disjoint roles of the recorded windows.
#[derive(Debug, Clone)]
pub struct DataSplit {
    /// One fragment of length `T_ini + L` per matrix column.
    pub matrix: TrajectoryDataset,
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
    pub matrix_ids: Vec<WindowId>,
    pub train_ids: Vec<WindowId>,
    pub validation_ids: Vec<WindowId>,
}

/// Cuts every trajectory into non-overlapping windows of length `T_ini + L`,
/// shuffles them per trajectory, and assigns `round(matrix_fraction * k)`
/// windows to the data matrices, `round(train_fraction * k)` to training and
/// the remainder to validation.
pub fn split_dataset(dataset: &TrajectoryDataset, config: &TrainingConfig) -> Result<DataSplit> {
    config.validate()?;
    let len = config.window_len();
    let mut rng = stream_rng(substream(config.seed, "data"), 0);
    let mut matrix = Vec::new();
    let (mut matrix_ids, mut train_ids, mut validation_ids) = (vec![], vec![], vec![]);
    let (mut train, mut validation) = (vec![], vec![]);
    for (i, traj) in dataset.trajectories().iter().enumerate() {
        let k = traj.len() / len;
        let mut starts: Vec<usize> = (0..k).map(|j| j * len).collect();
        starts.shuffle(&mut rng);
        let n_matrix = ((config.matrix_fraction * k as f64).round() as usize).min(k);
        let n_train = ((config.train_fraction * k as f64).round() as usize).min(k - n_matrix);
        for (r, &s) in starts.iter().enumerate() {
            if r < n_matrix {
                matrix.push(traj.slice(s, len));
                matrix_ids.push((i, s));
            } else if r < n_matrix + n_train {
                train.push(Window::of(traj, s, len));
                train_ids.push((i, s));
            } else {
                validation.push(Window::of(traj, s, len));
                validation_ids.push((i, s));
            }
        }
    }
    if matrix.is_empty() || train.is_empty() {
        let per_traj: usize = dataset.trajectories().iter().map(|t| t.len() / len).sum();
        return Err(Error::invalid(format!(
            "insufficient data for the split: {} matrix and {} training windows from {per_traj} windows of \
             length {len}; need at least one of each",
            matrix.len(),
            train.len()
        )));
    }
    Ok(DataSplit {
        matrix: TrajectoryDataset::new(matrix, dataset.sample_period())?,
        train,
        validation,
        matrix_ids,
        train_ids,
        validation_ids,
    })
}

fn head(window: &Window, t_ini: usize) -> Window {
    Window {
        inputs: window.inputs.columns(0, t_ini).into_owned(),
        outputs: window.outputs.columns(0, t_ini).into_owned(),
    }
}

/// Per-sample loss pieces for one batch and one dropout draw.
struct DrawResult {
    loss_sum: f64,
    grad: ParamGrad,
}

/// Loss and gradient summed over `samples` for one realization of the
/// dropout masks (`None` = deterministic).
fn draw_loss_grad(
    model: &LiftingModel,
    bundle: &HankelBundle,
    u_stack: &DMatrix<f64>,
    y_stack: &DMatrix<f64>,
    samples: &[&Window],
    col_masks: Option<&[DropoutMasks]>,
    sample_masks: Option<&[DropoutMasks]>,
    config: &TrainingConfig,
) -> Result<DrawResult> {
    let t_ini = bundle.t_ini;
    let inputs: Vec<DVector<f64>> = bundle.windows.iter().map(|w| model.window_input(w)).collect::<Result<_>>()?;
    let caches: Vec<ForwardCache> = inputs
        .par_iter()
        .enumerate()
        .map(|(j, x)| model.forward(x, col_masks.map(|m| &m[j])))
        .collect();
    let nphi = model.output_dim();
    let mut z_mat = DMatrix::zeros(nphi, caches.len());
    for (j, c) in caches.iter().enumerate() {
        z_mat.set_column(j, c.output());
    }
    let layer = PredictionLayer::new(&z_mat, u_stack, config.lambda_g, config.lambda_y)?;

    struct Per {
        loss: f64,
        d_z_mat: DMatrix<f64>,
        grad_z: ParamGrad,
    }
    let per: Vec<Per> = samples
        .par_iter()
        .enumerate()
        .map(|(s, w)| -> Result<Per> {
            if w.len() != config.window_len() {
                return Err(Error::invalid(format!(
                    "sample window has {} steps, expected T_ini + L = {}",
                    w.len(),
                    config.window_len()
                )));
            }
            let x = model.window_input(&head(w, t_ini))?;
            let cache = model.forward(&x, sample_masks.map(|m| &m[s]));
            let z = cache.output();
            let u_rhs = DVector::from_column_slice(w.inputs.as_slice());
            let y_target = DVector::from_column_slice(w.outputs.as_slice());
            let sol = layer.solve(z, &u_rhs)?;
            let resid = y_stack * &sol.primal - y_target;
            let gbar = y_stack.tr_mul(&resid) * 2.0;
            let d = layer.vjp(z, &sol, &gbar)?;
            let mut grad_z = ParamGrad::zeros_like(model);
            model.backward(&cache, &d.d_z_vec, &mut grad_z);
            Ok(Per { loss: resid.norm_squared(), d_z_mat: d.d_z_mat, grad_z })
        })
        .collect::<Result<_>>()?;

    // fixed-order reduction
    let mut loss_sum = 0.0;
    let mut d_z_total = DMatrix::zeros(nphi, caches.len());
    let mut grad = ParamGrad::zeros_like(model);
    for p in &per {
        loss_sum += p.loss;
        d_z_total += &p.d_z_mat;
        grad.add_assign(&p.grad_z);
    }
    let col_grads: Vec<ParamGrad> = caches
        .par_iter()
        .enumerate()
        .map(|(j, c)| {
            let mut g = ParamGrad::zeros_like(model);
            model.backward(c, &d_z_total.column(j).into_owned(), &mut g);
            g
        })
        .collect();
    for g in &col_grads {
        grad.add_assign(g);
    }
    Ok(DrawResult { loss_sum, grad })
}

/// Mean loss and gradient over `samples` and `draws` dropout realizations
/// (`draws = 0`: deterministic). Draw `d` uses stream `d` of `seed`; within a
/// draw all samples share the masks of the matrix columns.
pub fn batch_loss_grad(
    model: &LiftingModel,
    bundle: &HankelBundle,
    samples: &[&Window],
    draws: usize,
    seed: u64,
    config: &TrainingConfig,
) -> Result<(f64, ParamGrad)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let u_stack = bundle.u_stack();
    let y_stack = bundle.y_stack();
    let results: Vec<DrawResult> = if draws == 0 {
        vec![draw_loss_grad(model, bundle, &u_stack, &y_stack, samples, None, None, config)?]
    } else {
        (0..draws)
            .into_par_iter()
            .map(|d| {
                let mut rng = stream_rng(seed, d as u64);
                let col: Vec<DropoutMasks> = (0..bundle.ncols()).map(|_| model.sample_masks(&mut rng)).collect();
                let smp: Vec<DropoutMasks> = (0..samples.len()).map(|_| model.sample_masks(&mut rng)).collect();
                draw_loss_grad(model, bundle, &u_stack, &y_stack, samples, Some(&col), Some(&smp), config)
            })
            .collect::<Result<_>>()?
    };
    let denom = (results.len() * samples.len()) as f64;
    let mut grad = ParamGrad::zeros_like(model);
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss_sum;
        grad.add_assign(&r.grad);
    }
    grad.scale(1.0 / denom);
    Ok((loss / denom, grad))
}

/// Loss of one sample window with dropout disabled, and its gradient.
pub fn loss_deterministic(
    model: &LiftingModel,
    bundle: &HankelBundle,
    sample: &Window,
    config: &TrainingConfig,
) -> Result<(f64, ParamGrad)> {
    batch_loss_grad(model, bundle, &[sample], 0, 0, config)
}

/// Monte-Carlo expected loss over `config.mc_samples` dropout draws of both
/// the matrix columns and the initial lift.
pub fn loss_mc(
    model: &LiftingModel,
    bundle: &HankelBundle,
    sample: &Window,
    config: &TrainingConfig,
    seed: u64,
) -> Result<(f64, ParamGrad)> {
    if config.mc_samples == 0 {
        return Err(Error::invalid("loss_mc needs mc_samples >= 1"));
    }
    batch_loss_grad(model, bundle, &[sample], config.mc_samples, seed, config)
}

/// Mean deterministic loss over a set of windows.
pub fn evaluate(model: &LiftingModel, bundle: &HankelBundle, windows: &[Window], config: &TrainingConfig) -> Result<f64> {
    let refs: Vec<&Window> = windows.iter().collect();
    let u_stack = bundle.u_stack();
    let y_stack = bundle.y_stack();
    let r = draw_loss_grad(model, bundle, &u_stack, &y_stack, &refs, None, None, config)?;
    Ok(r.loss_sum / windows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub seconds: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

impl TrainingHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, config: &TrainingConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: config.learning_rate,
            b1: config.adam_betas.0,
            b2: config.adam_betas.1,
            eps: config.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Splits the data, initializes a network from the config and trains it.
pub fn train(dataset: &TrajectoryDataset, config: &TrainingConfig) -> Result<(LiftingModel, TrainingHistory)> {
    train_split(&split_dataset(dataset, config)?, config)
}

/// Trains on a precomputed split.
pub fn train_split(split: &DataSplit, config: &TrainingConfig) -> Result<(LiftingModel, TrainingHistory)> {
    config.validate()?;
    let model = LiftingModel::init(
        &config.layer_sizes,
        config.dropout_rate,
        config.t_ini,
        config.features,
        substream(config.seed, "init"),
    )?;
    let bundle = build_bundle(&split.matrix, config.t_ini, config.horizon, config.matrix_kind, Some(model.output_dim()))?;
    train_model(model, &bundle, &split.train, &split.validation, config)
}

/// Adam on mini-batches of `train` windows starting from `model`; returns the
/// parameters with the best validation loss (training loss when no
/// validation windows are given).
pub fn train_model(
    model: LiftingModel,
    bundle: &HankelBundle,
    train: &[Window],
    validation: &[Window],
    config: &TrainingConfig,
) -> Result<(LiftingModel, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    if model.t_ini() != config.t_ini {
        return Err(Error::Config(format!(
            "model expects T_ini = {}, training config has {}",
            model.t_ini(),
            config.t_ini
        )));
    }
    let mut history = TrainingHistory {
        train_loss: vec![],
        validation_loss: vec![],
        grad_norm: vec![],
        seconds: vec![],
        best_epoch: None,
        stop: StopReason::Completed,
    };
    if config.epochs == 0 {
        return Ok((model, history));
    }
    let score = |m: &LiftingModel| -> Result<f64> {
        if validation.is_empty() {
            evaluate(m, bundle, train, config)
        } else {
            evaluate(m, bundle, validation, config)
        }
    };
    let mut model = model;
    let mut best = model.clone();
    let mut best_score = score(&model)?;
    let mut since_best = 0;
    let mut params = model.params_to_vec();
    let mut adam = Adam::new(params.len(), config);
    let shuffle_seed = substream(config.seed, "shuffle");
    let dropout_seed = substream(config.seed, "dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut stream_rng(shuffle_seed, epoch as u64));
        let mut loss_acc = 0.0;
        let mut norm_acc = 0.0;
        let mut nb = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = substream(dropout_seed, &format!("{epoch}:{b}"));
            let (loss, grad) = batch_loss_grad(&model, bundle, &samples, config.mc_samples, seed, config)?;
            let gv = grad.to_vec();
            let gnorm = gv.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !loss.is_finite() || !gnorm.is_finite() {
                log::error!("training diverged at epoch {epoch} (loss {loss})");
                history.train_loss.push(loss);
                history.validation_loss.push(f64::NAN);
                history.grad_norm.push(gnorm);
                history.seconds.push(start.elapsed().as_secs_f64());
                history.stop = StopReason::Diverged;
                return Ok((best, history));
            }
            adam.step(&mut params, &gv);
            model.set_params_from_vec(&params);
            loss_acc += loss;
            norm_acc += gnorm;
            nb += 1;
        }
        let val = score(&model)?;
        history.train_loss.push(loss_acc / nb as f64);
        history.validation_loss.push(val);
        history.grad_norm.push(norm_acc / nb as f64);
        history.seconds.push(start.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train {:.6e} validation {val:.6e}", loss_acc / nb as f64);
        if val.is_finite() && val < best_score {
            best_score = val;
            best = model.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Writes the history as CSV: `epoch,train_loss,validation_loss,grad_norm,seconds`.
pub fn save_history(history: &TrainingHistory, path: impl AsRef<std::path::Path>, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "train_loss", "validation_loss", "grad_norm", "seconds"]).map_err(csv_err)?;
    for e in 0..history.epochs() {
        let secs = if timing { history.seconds[e] } else { 0.0 };
        w.write_record(&[
            e.to_string(),
            history.train_loss[e].to_string(),
            history.validation_loss[e].to_string(),
            history.grad_norm[e].to_string(),
            secs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}
