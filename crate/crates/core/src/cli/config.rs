//! Experiment configuration: one JSON tree per run.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{BoxBounds, ControlSpec, DeepcOptions, Reference, Weight};
use crate::data::MatrixKind;
use crate::error::{Error, Result};
use crate::lifting::WindowFeatures;
use crate::plants::{InitLaw, InputLaw, Plant, PlantSpec};
use crate::prediction::WassersteinOptions;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Default output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub plant: PlantSpec,
    pub data: DataConfig,
    pub bundle: BundleConfig,
    pub lifting: LiftingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub trajectories: usize,
    /// Samples per trajectory.
    pub length: usize,
    pub input_law: InputLaw,
    pub init_law: InitLaw,
    /// Load trajectories from this CSV instead of simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub kind: MatrixKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LiftingConfig {
    Network {
        layer_sizes: Vec<usize>,
        dropout_rate: f64,
        #[serde(default)]
        features: WindowFeatures,
        /// Trained checkpoint; defaults to `model.kdlm` in the output directory.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<PathBuf>,
    },
    Identity {
        #[serde(default)]
        features: WindowFeatures,
    },
    ThinPlate {
        centers: usize,
        #[serde(default)]
        features: WindowFeatures,
    },
    Kdv,
}

/// Optimizer settings; window sizes and the network come from `bundle` and `lifting`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    pub mc_samples: usize,
    pub matrix_fraction: f64,
    pub train_fraction: f64,
    pub patience: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainingSection {
            lambda_g: d.lambda_g,
            lambda_y: d.lambda_y,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adam_betas: d.adam_betas,
            adam_eps: d.adam_eps,
            epochs: d.epochs,
            mc_samples: d.mc_samples,
            matrix_fraction: d.matrix_fraction,
            train_fraction: d.train_fraction,
            patience: d.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticRegime {
    Deterministic,
    MonteCarlo,
}

/// Held-out evaluation: fresh trajectories supply the data matrices and the
/// test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub quadratic: QuadraticRegime,
    /// Monte-Carlo ensemble size of the quadratic-loss prediction.
    pub ensemble: usize,
    /// Dropout draws behind each lift mean and variance.
    pub summary_draws: usize,
    pub wasserstein: WassersteinOptions,
    /// Trajectories whose fragments fill the data matrices.
    pub matrix_trajectories: usize,
    /// Window-length fragments per trajectory in the Hankel matrix.
    pub hankel_fragments: usize,
    /// Further fragments per trajectory in the Page matrix.
    pub page_fragments: usize,
    pub test_samples: usize,
    /// 1-based step reported in the summary.
    pub report_step: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            lambda_g: 1e-3,
            lambda_y: 1.0,
            quadratic: QuadraticRegime::MonteCarlo,
            ensemble: 120,
            summary_draws: crate::prediction::SUMMARY_DRAWS,
            wasserstein: WassersteinOptions::default(),
            matrix_trajectories: 24,
            hankel_fragments: 3,
            page_fragments: 1,
            test_samples: 50,
            report_step: 9,
        }
    }
}

/// Scalar broadcast to every channel, or one value per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Channels {
    pub fn to_vector(&self, n: usize) -> Result<DVector<f64>> {
        match self {
            Channels::Scalar(v) => Ok(DVector::from_element(n, *v)),
            Channels::Vector(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            Channels::Vector(v) => Err(Error::Config(format!("expected {n} channel values, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lower: Channels,
    pub upper: Channels,
}

impl BoxConfig {
    pub fn to_bounds(&self, n: usize) -> Result<BoxBounds> {
        BoxBounds::new(self.lower.to_vector(n)?, self.upper.to_vector(n)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    EdmdMpc,
    Deepc,
    ZeroInput,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::EdmdMpc => "edmd_mpc",
            Baseline::Deepc => "deepc",
            Baseline::ZeroInput => "zero_input",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub q: Weight,
    pub r: Weight,
    pub reference: Reference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_bounds: Option<BoxConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_bounds: Option<BoxConfig>,
    /// Closed-loop length in seconds, after the warm-up.
    pub duration: f64,
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub initial_state: InitLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_input: Option<Channels>,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default)]
    pub deepc: DeepcOptions,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Makes relative file references relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        if let LiftingConfig::Network { checkpoint: Some(p), .. } = &mut self.lifting {
            fix(p);
        }
    }

    pub fn check_files(&self) -> Result<()> {
        let mut files = vec![("data.path", self.data.path.as_ref())];
        if let LiftingConfig::Network { checkpoint, .. } = &self.lifting {
            files.push(("lifting.checkpoint", checkpoint.as_ref()));
        }
        for (field, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<Plant> {
        self.plant.build().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("plant: {m}")),
            other => Error::Config(format!("plant: {other}")),
        })
    }

    /// Dimension of the lift, known without a checkpoint.
    pub fn lift_dim(&self, plant: &Plant) -> usize {
        let (t, nu, ny) = (self.bundle.t_ini, plant.n_u(), plant.n_y());
        match &self.lifting {
            LiftingConfig::Network { layer_sizes, .. } => *layer_sizes.last().unwrap_or(&0),
            LiftingConfig::Identity { features } => features.dim(t, nu, ny),
            LiftingConfig::ThinPlate { centers, features } => centers + features.dim(t, nu, ny),
            LiftingConfig::Kdv => 3 * ny,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.name.is_empty() {
            return cfg("name: must not be empty".into());
        }
        let plant = self.plant()?;
        let (nu, ny) = (plant.n_u(), plant.n_y());
        let b = &self.bundle;
        if b.t_ini == 0 || b.horizon == 0 {
            return cfg("bundle: t_ini and horizon must be at least 1".into());
        }
        let depth = b.t_ini + b.horizon;
        if self.data.trajectories == 0 || self.data.length < depth {
            return cfg(format!("data: need at least one trajectory of at least t_ini + horizon = {depth} samples"));
        }
        match (&self.data.init_law, &self.plant) {
            (InitLaw::KdvConvex, PlantSpec::Kdv(_)) => {}
            (InitLaw::KdvConvex, _) => return cfg("data.init_law: kdv_convex needs the kdv plant".into()),
            (InitLaw::Fixed { state }, _) if state.len() != plant.state_dim() => {
                return cfg(format!("data.init_law: fixed state needs {} entries", plant.state_dim()))
            }
            _ => {}
        }
        match &self.lifting {
            LiftingConfig::Network { layer_sizes, dropout_rate, features, .. } => {
                if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
                    return cfg("lifting.layer_sizes: need at least two positive layer widths".into());
                }
                let want = features.dim(b.t_ini, nu, ny);
                if layer_sizes[0] != want {
                    return cfg(format!(
                        "lifting.layer_sizes: first layer is {}, window features have dimension {want}",
                        layer_sizes[0]
                    ));
                }
                if !(0.0..1.0).contains(dropout_rate) {
                    return cfg("lifting.dropout_rate: must lie in [0, 1)".into());
                }
            }
            LiftingConfig::ThinPlate { centers, .. } if *centers == 0 => {
                return cfg("lifting.centers: must be positive".into())
            }
            LiftingConfig::Kdv if !matches!(self.plant, PlantSpec::Kdv(_)) => {
                return cfg("lifting: the kdv lift needs the kdv plant".into())
            }
            _ => {}
        }
        if self.training.is_some() {
            self.training_config()?.validate().map_err(|e| Error::Config(format!("training: {e}")))?;
        }
        if let Some(p) = &self.prediction {
            if p.report_step == 0 || p.report_step > b.horizon {
                return cfg(format!("prediction.report_step: must lie in 1..={}", b.horizon));
            }
            if p.matrix_trajectories == 0 || p.hankel_fragments == 0 || p.test_samples == 0 {
                return cfg("prediction: matrix_trajectories, hankel_fragments and test_samples must be positive".into());
            }
            if (p.hankel_fragments + p.page_fragments) * depth > self.data.length {
                return cfg(format!(
                    "prediction: {} fragments of {depth} samples do not fit in trajectories of {}",
                    p.hankel_fragments + p.page_fragments,
                    self.data.length
                ));
            }
            if p.quadratic == QuadraticRegime::MonteCarlo && p.ensemble < 2 {
                return cfg("prediction.ensemble: Monte-Carlo needs at least two members".into());
            }
            if !(p.lambda_g > 0.0) || !(p.lambda_y >= 0.0) {
                return cfg("prediction: need lambda_g > 0 and lambda_y >= 0".into());
            }
        }
        if let Some(c) = &self.control {
            self.control_spec(&plant).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("control: {m}")),
                other => Error::Config(format!("control: {other}")),
            })?;
            if !(c.duration > 0.0) {
                return cfg("control.duration: must be positive".into());
            }
            if !(c.lambda_g > 0.0) || !(c.lambda_y >= 0.0) {
                return cfg("control: need lambda_g > 0 and lambda_y >= 0".into());
            }
            if let Some(w) = &c.warmup_input {
                w.to_vector(nu).map_err(|e| Error::Config(format!("control.warmup_input: {e}")))?;
            }
            if let InitLaw::Fixed { state } = &c.initial_state {
                if state.len() != plant.state_dim() {
                    return cfg(format!("control.initial_state: needs {} entries", plant.state_dim()));
                }
            }
        }
        Ok(())
    }

    /// Full training configuration; requires a network lift.
    pub fn training_config(&self) -> Result<TrainingConfig> {
        let LiftingConfig::Network { layer_sizes, dropout_rate, features, .. } = &self.lifting else {
            return Err(Error::Config("training needs a network lift".into()));
        };
        let t = self.training.clone().unwrap_or_default();
        Ok(TrainingConfig {
            t_ini: self.bundle.t_ini,
            horizon: self.bundle.horizon,
            lambda_g: t.lambda_g,
            lambda_y: t.lambda_y,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_betas: t.adam_betas,
            adam_eps: t.adam_eps,
            epochs: t.epochs,
            mc_samples: t.mc_samples,
            seed: self.seed,
            matrix_fraction: t.matrix_fraction,
            train_fraction: t.train_fraction,
            patience: t.patience,
            matrix_kind: self.bundle.kind,
            layer_sizes: layer_sizes.clone(),
            dropout_rate: *dropout_rate,
            features: *features,
        })
    }

    pub fn control_spec(&self, plant: &Plant) -> Result<ControlSpec> {
        let c = self.control.as_ref().ok_or_else(|| Error::Config("control: section missing".into()))?;
        let (nu, ny) = (plant.n_u(), plant.n_y());
        c.reference.validate(ny)?;
        let spec = ControlSpec {
            horizon: self.bundle.horizon,
            q: c.q.to_matrix(ny)?,
            r: c.r.to_matrix(nu)?,
            reference: c.reference.clone(),
            u_bounds: c.u_bounds.as_ref().map(|b| b.to_bounds(nu)).transpose()?,
            y_bounds: c.y_bounds.as_ref().map(|b| b.to_bounds(ny)).transpose()?,
            sample_period: plant.sample_period(),
        };
        spec.validate(nu, ny)?;
        Ok(spec)
    }

    /// Closed-loop steps covering `control.duration`.
    pub fn control_steps(&self) -> usize {
        self.control.as_ref().map_or(0, |c| (c.duration / self.plant.sample_period()).round() as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Reference;
    use crate::plants::{LinearParams, VdpParams};
    use proptest::prelude::*;

    pub(crate) fn lti_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "lti".into(),
            seed: 3,
            output_dir: None,
            plant: PlantSpec::Linear(LinearParams::default()),
            data: DataConfig {
                trajectories: 8,
                length: 60,
                input_law: InputLaw::Uniform { low: -1.0, high: 1.0 },
                init_law: InitLaw::UniformBox { low: -1.0, high: 1.0 },
                path: None,
            },
            bundle: BundleConfig { t_ini: 2, horizon: 5, kind: MatrixKind::Hankel },
            lifting: LiftingConfig::Identity { features: WindowFeatures::InputsOutputs },
            training: None,
            prediction: Some(PredictionConfig {
                lambda_g: 1e-9,
                quadratic: QuadraticRegime::Deterministic,
                matrix_trajectories: 12,
                hankel_fragments: 4,
                page_fragments: 1,
                test_samples: 5,
                report_step: 5,
                ..PredictionConfig::default()
            }),
            control: Some(ControlConfig {
                q: Weight::Scalar(1.0),
                r: Weight::Scalar(0.1),
                reference: Reference::Constant { value: vec![0.5] },
                u_bounds: Some(BoxConfig { lower: Channels::Scalar(-2.0), upper: Channels::Scalar(2.0) }),
                y_bounds: None,
                duration: 10.0,
                lambda_g: 1e-3,
                lambda_y: 1.0,
                initial_state: InitLaw::Fixed { state: vec![0.0, 0.0] },
                warmup_input: None,
                baselines: vec![Baseline::ZeroInput],
                deepc: DeepcOptions::default(),
            }),
        }
    }

    #[test]
    fn lti_fixture_validates() {
        lti_config().validate().unwrap();
    }

    #[test]
    fn unknown_fields_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(&lti_config().to_json()).unwrap();
        v["bundle"]["depth"] = 3.into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("bundle")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn type_errors_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(&lti_config().to_json()).unwrap();
        v["data"]["length"] = "long".into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("data.length"), "{err}");
    }

    #[test]
    fn cross_module_dimensions_are_checked() {
        let mut c = lti_config();
        c.lifting = LiftingConfig::Network {
            layer_sizes: vec![5, 8, 4],
            dropout_rate: 0.1,
            features: WindowFeatures::InputsOutputs,
            checkpoint: None,
        };
        // joint features of two steps with one input and one output
        assert!(c.validate().unwrap_err().to_string().contains("first layer"));
        c.lifting = LiftingConfig::Kdv;
        assert!(c.validate().is_err());
        let mut c = lti_config();
        c.control.as_mut().unwrap().q = Weight::Diagonal(vec![1.0, 1.0]);
        assert!(c.validate().unwrap_err().to_string().contains("control"));
        let mut c = lti_config();
        c.prediction.as_mut().unwrap().report_step = 6;
        assert!(c.validate().is_err());
        let mut c = lti_config();
        c.plant = PlantSpec::Vdp(VdpParams::default());
        c.control.as_mut().unwrap().reference = Reference::Constant { value: vec![0.5; 3] };
        assert!(c.validate().unwrap_err().to_string().contains("reference"));
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = lti_config();
        c.data.path = Some("absent.csv".into());
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("data.path"), "{err}");
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(
            seed in any::<u64>(),
            t_ini in 1usize..4,
            horizon in 1usize..8,
            lambda_g in 1e-9f64..1.0,
            duration in 0.5f64..50.0,
            q in proptest::collection::vec(0.0f64..10.0, 1..2),
        ) {
            let mut c = lti_config();
            c.seed = seed;
            c.bundle.t_ini = t_ini;
            c.bundle.horizon = horizon;
            c.prediction.as_mut().unwrap().report_step = horizon;
            let ctl = c.control.as_mut().unwrap();
            ctl.lambda_g = lambda_g;
            ctl.duration = duration;
            ctl.q = Weight::Diagonal(q);
            c.validate().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            c.save(&path).unwrap();
            prop_assert_eq!(ExperimentConfig::load(&path).unwrap(), c);
        }
    }
}
