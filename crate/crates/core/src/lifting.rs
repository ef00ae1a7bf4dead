//! Lifting functions: a feed-forward network with dropout, evaluated either
//! deterministically or as a Monte-Carlo ensemble, plus fixed analytic lifts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Which parts of a window feed the lift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowFeatures {
    /// `[u_0 .. u_{T-1}, y_0 .. y_{T-1}]`
    #[default]
    InputsOutputs,
    /// `[y_0 .. y_{T-1}]`
    OutputsOnly,
}

impl WindowFeatures {
    pub fn dim(self, t_ini: usize, n_u: usize, n_y: usize) -> usize {
        match self {
            WindowFeatures::InputsOutputs => t_ini * (n_u + n_y),
            WindowFeatures::OutputsOnly => t_ini * n_y,
        }
    }

    /// Flattened feature vector of a window.
    pub fn extract(self, window: &Window) -> DVector<f64> {
        let u = window.inputs.as_slice();
        let y = window.outputs.as_slice();
        match self {
            WindowFeatures::InputsOutputs => {
                DVector::from_iterator(u.len() + y.len(), u.iter().chain(y).copied())
            }
            WindowFeatures::OutputsOnly => DVector::from_column_slice(y),
        }
    }

    fn code(self) -> u32 {
        match self {
            WindowFeatures::InputsOutputs => 0,
            WindowFeatures::OutputsOnly => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(WindowFeatures::InputsOutputs),
            1 => Ok(WindowFeatures::OutputsOnly),
            _ => Err(Error::invalid(format!("unknown window feature code {c}"))),
        }
    }
}

/// Feed-forward lifting network. Hidden layers use a rectifier, the output
/// layer is linear, and every non-input layer carries (inverted) dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingModel {
    layer_sizes: Vec<usize>,
    /// `weights[l]` maps layer `l` to layer `l + 1` (`sizes[l+1] x sizes[l]`).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    dropout_rate: f64,
    t_ini: usize,
    features: WindowFeatures,
}

/// Dropout masks, one per non-input layer, entries in `{0, 1/(1-p)}`.
pub type DropoutMasks = Vec<DVector<f64>>;

/// Activations retained from a forward pass for back-propagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` the (masked) output of layer `l`.
    activations: Vec<DVector<f64>>,
    /// Pre-activations of each non-input layer.
    pre: Vec<DVector<f64>>,
    masks: Option<DropoutMasks>,
}

impl ForwardCache {
    pub fn output(&self) -> &DVector<f64> {
        self.activations.last().expect("non-empty network")
    }
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGrad {
    pub fn zeros_like(model: &LiftingModel) -> Self {
        ParamGrad {
            weights: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl LiftingModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn init(
        layer_sizes: &[usize],
        dropout_rate: f64,
        t_ini: usize,
        features: WindowFeatures,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a lifting network needs at least an input and an output layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        if t_ini == 0 {
            return Err(Error::invalid("T_ini must be at least 1"));
        }
        let mut rng = stream_rng(seed, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit)));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(LiftingModel {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            dropout_rate,
            t_ini,
            features,
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parameters(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        dropout_rate: f64,
        t_ini: usize,
        features: WindowFeatures,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("need one bias per weight matrix and at least one layer"));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::invalid(format!("layer {l} dimensions are incompatible")));
            }
            sizes.push(w.nrows());
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        Ok(LiftingModel { layer_sizes: sizes, weights, biases, dropout_rate, t_ini, features })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        self.dropout_rate = p;
        Ok(())
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn features(&self) -> WindowFeatures {
        self.features
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened layer by layer (weights column-major, then biases).
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_from_vec(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = params[k];
                k += 1;
            }
            for v in b.iter_mut() {
                *v = params[k];
                k += 1;
            }
        }
    }

    /// Input vector of a window, checking its length.
    pub fn window_input(&self, window: &Window) -> Result<DVector<f64>> {
        if window.len() != self.t_ini {
            return Err(Error::invalid(format!(
                "window has {} steps, the model expects T_ini = {}",
                window.len(),
                self.t_ini
            )));
        }
        let x = self.features.extract(window);
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "window features have dimension {}, the model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(x)
    }

    /// Draws one set of dropout masks.
    pub fn sample_masks<R: Rng>(&self, rng: &mut R) -> DropoutMasks {
        let p = self.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        self.layer_sizes[1..]
            .iter()
            .map(|&n| DVector::from_fn(n, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep }))
            .collect()
    }

    /// Forward pass on a raw input vector; `masks = None` disables dropout.
    pub fn forward(&self, input: &DVector<f64>, masks: Option<&DropoutMasks>) -> ForwardCache {
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        let mut pre = Vec::with_capacity(self.weights.len());
        activations.push(input.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let s = w * activations.last().unwrap() + b;
            let mut a = if l < last { s.map(|v| v.max(0.0)) } else { s.clone() };
            if let Some(m) = masks {
                a.component_mul_assign(&m[l]);
            }
            pre.push(s);
            activations.push(a);
        }
        ForwardCache { activations, pre, masks: masks.cloned() }
    }

    /// Accumulates `d(out . dz)/d(theta)` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dz: &DVector<f64>, grad: &mut ParamGrad) {
        let last = self.weights.len() - 1;
        let mut delta = dz.clone();
        for l in (0..=last).rev() {
            if let Some(m) = &cache.masks {
                delta.component_mul_assign(&m[l]);
            }
            if l < last {
                let s = &cache.pre[l];
                delta.zip_apply(s, |d, sv| {
                    if sv <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            grad.weights[l].ger(1.0, &delta, &cache.activations[l], 1.0);
            grad.biases[l] += &delta;
            if l > 0 {
                delta = self.weights[l].tr_mul(&delta);
            }
        }
    }

    /// Deterministic lift (dropout off).
    pub fn lift(&self, window: &Window) -> Result<DVector<f64>> {
        let x = self.window_input(window)?;
        Ok(self.forward(&x, None).output().clone())
    }

    /// One stochastic lift with freshly drawn dropout masks.
    pub fn lift_sample<R: Rng>(&self, window: &Window, rng: &mut R) -> Result<DVector<f64>> {
        let x = self.window_input(window)?;
        let masks = self.sample_masks(rng);
        Ok(self.forward(&x, Some(&masks)).output().clone())
    }

    /// `n_samples` i.i.d. dropout passes as columns; sample `k` uses stream `k` of `seed`.
    pub fn lift_mc(&self, window: &Window, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        if n_samples == 0 {
            return Err(Error::invalid("lift_mc needs at least one sample"));
        }
        let x = self.window_input(window)?;
        let mut out = DMatrix::zeros(self.output_dim(), n_samples);
        for k in 0..n_samples {
            let mut rng = stream_rng(seed, k as u64);
            let masks = self.sample_masks(&mut rng);
            out.set_column(k, self.forward(&x, Some(&masks)).output());
        }
        Ok(out)
    }

    // -- checkpoint ---------------------------------------------------------

    /// Serializes to the binary checkpoint layout (see `docs/checkpoint.md`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.features.code().to_le_bytes());
        out.extend_from_slice(&(self.t_ini as u32).to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dropout_rate.to_le_bytes());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.extend_from_slice(&w[(i, j)].to_le_bytes());
                }
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a lifting-model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let features = WindowFeatures::from_code(r.u32()?)?;
        let t_ini = r.u32()? as usize;
        let n = r.u32()? as usize;
        if !(2..=4096).contains(&n) {
            return Err(Error::invalid(format!("implausible layer count {n}")));
        }
        let sizes: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let dropout = r.f64()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (cols, rows) = (pair[0], pair[1]);
            let mut w = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = r.f64()?;
                }
            }
            let b = DVector::from_iterator(rows, (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            weights.push(w);
            biases.push(b);
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint payload"));
        }
        LiftingModel::from_parameters(weights, biases, dropout, t_ini, features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        LiftingModel::from_bytes(&buf)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KDLM";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Diagonal Gaussian summary of a stochastic lift.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl GaussianVector {
    pub fn new(mean: DVector<f64>, variance: DVector<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::invalid("mean and variance dimensions differ"));
        }
        if variance.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("variances must be non-negative"));
        }
        Ok(GaussianVector { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-coordinate sample mean and unbiased variance of the columns of `samples`.
pub fn moments(samples: &DMatrix<f64>) -> Result<GaussianVector> {
    let n = samples.ncols();
    if n < 2 {
        return Err(Error::invalid("moments need at least two samples"));
    }
    let mean = samples.column_mean();
    let mut variance = DVector::zeros(samples.nrows());
    for j in 0..n {
        let d = samples.column(j) - &mean;
        variance += d.component_mul(&d);
    }
    variance /= (n - 1) as f64;
    Ok(GaussianVector { mean, variance })
}

// ---------------------------------------------------------------------------
// Fixed analytic lifts and the common lifting interface.

/// Thin-plate-spline radial basis lift `phi(r) = r^2 ln r` around fixed centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinPlateLift {
    /// `d x n_centers`
    pub centers: DMatrix<f64>,
    pub features: WindowFeatures,
    /// Prepend the raw window features to the radial basis values.
    pub include_features: bool,
    pub t_ini: usize,
}

impl ThinPlateLift {
    /// Centers drawn uniformly from `[-1, 1]^dim`.
    pub fn random(dim: usize, n_centers: usize, features: WindowFeatures, t_ini: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let centers = DMatrix::from_fn(dim, n_centers, |_, _| rng.gen_range(-1.0..1.0));
        ThinPlateLift { centers, features, include_features: true, t_ini }
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols() + if self.include_features { self.centers.nrows() } else { 0 }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.centers.nrows();
        let mut out = Vec::with_capacity(self.dim());
        if self.include_features {
            out.extend(x.iter());
        }
        for c in self.centers.column_iter() {
            let r2 = (0..d).map(|i| (x[i] - c[i]).powi(2)).sum::<f64>();
            // r^2 ln r = 0.5 r^2 ln r^2, continuous extension 0 at r = 0
            out.push(if r2 > 0.0 { 0.5 * r2 * r2.ln() } else { 0.0 });
        }
        DVector::from_vec(out)
    }
}

/// Any lift usable by the predictors and the controller.
#[derive(Debug, Clone)]
pub enum Lifting {
    Network(LiftingModel),
    /// Raw window features.
    Identity { features: WindowFeatures, t_ini: usize, dim: usize },
    ThinPlate(ThinPlateLift),
    /// `[y; y*y; y*shift(y)]` of the last output profile in the window.
    Kdv { grid_points: usize },
}

impl Lifting {
    pub fn dim(&self) -> usize {
        match self {
            Lifting::Network(m) => m.output_dim(),
            Lifting::Identity { dim, .. } => *dim,
            Lifting::ThinPlate(t) => t.dim(),
            Lifting::Kdv { grid_points } => 3 * grid_points,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Lifting::Network(m) if m.dropout_rate() > 0.0)
    }

    fn check_len(window: &Window, t_ini: usize) -> Result<()> {
        if window.len() != t_ini {
            return Err(Error::invalid(format!(
                "window has {} steps, the lift expects T_ini = {t_ini}",
                window.len()
            )));
        }
        Ok(())
    }

    pub fn lift(&self, window: &Window) -> Result<DVector<f64>> {
        match self {
            Lifting::Network(m) => m.lift(window),
            Lifting::Identity { features, t_ini, dim } => {
                Self::check_len(window, *t_ini)?;
                let x = features.extract(window);
                if x.len() != *dim {
                    return Err(Error::invalid("identity lift dimension mismatch"));
                }
                Ok(x)
            }
            Lifting::ThinPlate(t) => {
                Self::check_len(window, t.t_ini)?;
                let x = t.features.extract(window);
                if x.len() != t.centers.nrows() {
                    return Err(Error::invalid(format!(
                        "thin-plate centers have dimension {}, window features {}",
                        t.centers.nrows(),
                        x.len()
                    )));
                }
                Ok(t.eval(&x))
            }
            Lifting::Kdv { grid_points } => {
                let last = window.outputs.ncols().checked_sub(1).ok_or_else(|| Error::invalid("empty window"))?;
                let y = window.outputs.column(last).into_owned();
                if y.len() != *grid_points {
                    return Err(Error::invalid("KdV lift grid size mismatch"));
                }
                Ok(crate::plants::kdv::kdv_lift(&y))
            }
        }
    }

    /// Stochastic draw for networks with dropout; deterministic lifts ignore `rng`.
    pub fn lift_sample<R: Rng>(&self, window: &Window, rng: &mut R) -> Result<DVector<f64>> {
        match self {
            Lifting::Network(m) => m.lift_sample(window, rng),
            _ => self.lift(window),
        }
    }

    /// Deterministic lifts of all windows as columns.
    pub fn lift_all(&self, windows: &[Window]) -> Result<DMatrix<f64>> {
        let mut z = DMatrix::zeros(self.dim(), windows.len());
        for (j, w) in windows.iter().enumerate() {
            z.set_column(j, &self.lift(w)?);
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn window(u: &[f64], y: &[f64], t: usize) -> Window {
        Window::new(
            DMatrix::from_column_slice(u.len() / t, t, u),
            DMatrix::from_column_slice(y.len() / t, t, y),
        )
        .unwrap()
    }

    #[test]
    fn init_is_reproducible() {
        let a = LiftingModel::init(&[2, 12, 22, 12, 12], 0.2, 1, WindowFeatures::OutputsOnly, 5).unwrap();
        let b = LiftingModel::init(&[2, 12, 22, 12, 12], 0.2, 1, WindowFeatures::OutputsOnly, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output_dim(), 12);
        assert_eq!(a.dropout_rate(), 0.2);
        assert!(LiftingModel::init(&[], 0.2, 1, WindowFeatures::OutputsOnly, 5).is_err());
        assert!(LiftingModel::init(&[3], 0.2, 1, WindowFeatures::OutputsOnly, 5).is_err());
        let c = LiftingModel::init(&[2, 12, 22, 12, 12], 0.2, 1, WindowFeatures::OutputsOnly, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_zero_lift() {
        let mut m = LiftingModel::init(&[3, 5, 4], 0.3, 1, WindowFeatures::InputsOutputs, 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params_from_vec(&zeros);
        let z = m.lift(&window(&[0.4], &[1.0, -2.0], 1)).unwrap();
        assert_eq!(z, DVector::zeros(4));
    }

    #[test]
    fn identity_network_returns_flattened_window() {
        let m = LiftingModel::from_parameters(
            vec![DMatrix::identity(6, 6)],
            vec![DVector::zeros(6)],
            0.5,
            2,
            WindowFeatures::InputsOutputs,
        )
        .unwrap();
        let w = window(&[1.0, 2.0], &[3.0, 4.0, 5.0, 6.0], 2);
        let z = m.lift(&w).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.lift(&w).unwrap(), z);
        assert!(m.lift(&window(&[1.0], &[3.0, 4.0], 1)).is_err());
    }

    #[test]
    fn lift_mc_without_dropout_matches_deterministic() {
        let m = LiftingModel::init(&[2, 6, 3], 0.0, 1, WindowFeatures::OutputsOnly, 2).unwrap();
        let w = window(&[0.1], &[0.5, -0.7], 1);
        let det = m.lift(&w).unwrap();
        let mc = m.lift_mc(&w, 7, 99).unwrap();
        for c in mc.column_iter() {
            assert_eq!(c.into_owned(), det);
        }
        assert!(m.lift_mc(&w, 0, 1).is_err());
    }

    #[test]
    fn lift_mc_is_reproducible_per_seed() {
        let m = LiftingModel::init(&[2, 6, 3], 0.2, 1, WindowFeatures::OutputsOnly, 2).unwrap();
        let w = window(&[0.1], &[0.5, -0.7], 1);
        assert_eq!(m.lift_mc(&w, 120, 4).unwrap(), m.lift_mc(&w, 120, 4).unwrap());
        assert_ne!(m.lift_mc(&w, 5, 4).unwrap(), m.lift_mc(&w, 5, 5).unwrap());
    }

    #[test]
    fn moments_closed_forms() {
        let same = DMatrix::from_fn(3, 5, |i, _| i as f64);
        let g = moments(&same).unwrap();
        assert_eq!(g.variance, DVector::zeros(3));
        let a = DVector::from_vec(vec![1.0, -2.0]);
        let b = DVector::from_vec(vec![4.0, 2.0]);
        let g = moments(&DMatrix::from_columns(&[a.clone(), b.clone()])).unwrap();
        assert_eq!(g.mean, (&a + &b) / 2.0);
        let d = &a - &b;
        assert_eq!(g.variance, d.component_mul(&d) / 2.0);
        assert!(moments(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn moments_match_streaming_oracle() {
        let m = LiftingModel::init(&[2, 8, 4], 0.2, 1, WindowFeatures::OutputsOnly, 8).unwrap();
        let w = window(&[0.0], &[0.3, 0.9], 1);
        let s = m.lift_mc(&w, 5000, 17).unwrap();
        let g = moments(&s).unwrap();
        // Welford running statistics
        let mut mean = DVector::zeros(4);
        let mut m2 = DVector::zeros(4);
        for (k, c) in s.column_iter().enumerate() {
            let d = c - &mean;
            mean += &d / (k + 1) as f64;
            let d2 = c - &mean;
            m2 += d.component_mul(&d2);
        }
        let var = m2 / 4999.0;
        assert!((g.mean - mean).amax() < 1e-12);
        assert!((g.variance - var).amax() < 1e-12);
    }

    #[test]
    fn mc_mean_converges() {
        let m = LiftingModel::init(&[2, 16, 5], 0.2, 1, WindowFeatures::OutputsOnly, 3).unwrap();
        let w = window(&[0.0], &[0.8, -0.4], 1);
        let n = 400;
        let small = moments(&m.lift_mc(&w, n, 1).unwrap()).unwrap();
        let large = moments(&m.lift_mc(&w, 4 * n, 2).unwrap()).unwrap();
        for i in 0..5 {
            let se_small = (small.variance[i] / n as f64).sqrt();
            let se_large = (large.variance[i] / (4 * n) as f64).sqrt();
            // standard error halves (up to sampling noise in the variance estimate)
            if se_small > 0.0 {
                assert!((se_large / se_small - 0.5).abs() < 0.15, "{se_small} {se_large}");
            }
            let tol = 3.0 * (se_small.powi(2) + se_large.powi(2)).sqrt() + 1e-12;
            assert!((small.mean[i] - large.mean[i]).abs() <= tol);
        }
    }

    #[test]
    fn inverted_dropout_preserves_linear_expectation() {
        let m = LiftingModel::from_parameters(
            vec![DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 1.5, 0.3, -0.7])],
            vec![DVector::from_vec(vec![0.1, -0.2])],
            0.3,
            1,
            WindowFeatures::InputsOutputs,
        )
        .unwrap();
        let w = window(&[1.0], &[0.5, -0.25], 1);
        let det = m.lift(&w).unwrap();
        let n = 20000;
        let g = moments(&m.lift_mc(&w, n, 12).unwrap()).unwrap();
        for i in 0..2 {
            let se = (g.variance[i] / n as f64).sqrt();
            assert!((g.mean[i] - det[i]).abs() <= 3.0 * se, "{} vs {}", g.mean[i], det[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = LiftingModel::init(&[3, 7, 5, 4], 0.25, 1, WindowFeatures::InputsOutputs, 21).unwrap();
        // shift biases so no unit sits at the rectifier kink
        for b in m.biases.iter_mut() {
            b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 + 1.0));
        }
        let x = DVector::from_vec(vec![0.3, -0.8, 0.5]);
        let mut rng = stream_rng(3, 0);
        let masks = m.sample_masks(&mut rng);
        let dz = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        for mask in [None, Some(&masks)] {
            let cache = m.forward(&x, mask);
            let mut grad = ParamGrad::zeros_like(&m);
            m.backward(&cache, &dz, &mut grad);
            let an = grad.to_vec();
            let p0 = m.params_to_vec();
            let h = 1e-6;
            let mut probe = m.clone();
            for k in 0..p0.len() {
                let mut p = p0.clone();
                p[k] += h;
                probe.set_params_from_vec(&p);
                let fp = probe.forward(&x, mask).output().dot(&dz);
                p[k] -= 2.0 * h;
                probe.set_params_from_vec(&p);
                let fm = probe.forward(&x, mask).output().dot(&dz);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - an[k]).abs() / fd.abs().max(an[k].abs()).max(1e-3);
                assert!(err < 1e-5, "param {k}: fd {fd} vs {}", an[k]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let m = LiftingModel::init(&[2, 12, 22, 12, 12], 0.2, 1, WindowFeatures::OutputsOnly, 77).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"KDLM");
        let back = LiftingModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(LiftingModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LiftingModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn thin_plate_values() {
        let t = ThinPlateLift {
            centers: DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]),
            features: WindowFeatures::InputsOutputs,
            include_features: false,
            t_ini: 1,
        };
        let v = t.eval(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0); // r = 1 -> ln 1 = 0
        let v = t.eval(&DVector::from_vec(vec![2.0, 0.0]));
        assert!((v[0] - 4.0 * 2f64.ln()).abs() < 1e-14);
    }
}
