//! Reference simulators: Van der Pol oscillator, bilinear DC motor and the
//! forced Korteweg-de Vries equation on a periodic grid, plus a linear
//! state-space fixture.

pub mod kdv;
pub mod linear;
pub mod motor;
pub mod vdp;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub use kdv::{kdv_lift, Kdv, KdvParams};
pub use linear::{Linear, LinearParams};
pub use motor::{Motor, MotorParams};
pub use vdp::{Vdp, VdpParams};

/// Plant selection and parameters as they appear in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    Vdp(VdpParams),
    Motor(MotorParams),
    Kdv(KdvParams),
    Linear(LinearParams),
}

impl PlantSpec {
    pub fn build(&self) -> Result<Plant> {
        Ok(match self {
            PlantSpec::Vdp(p) => Plant::Vdp(Vdp::new(p.clone())?),
            PlantSpec::Motor(p) => Plant::Motor(Motor::new(p.clone())?),
            PlantSpec::Kdv(p) => Plant::Kdv(Box::new(Kdv::new(p.clone())?)),
            PlantSpec::Linear(p) => Plant::Linear(Linear::new(p.clone())?),
        })
    }

    pub fn sample_period(&self) -> f64 {
        match self {
            PlantSpec::Vdp(p) => p.sample_period,
            PlantSpec::Motor(p) => p.sample_period,
            PlantSpec::Kdv(p) => p.sample_period,
            PlantSpec::Linear(p) => p.sample_period,
        }
    }
}

/// A ready-to-step simulator.
#[derive(Debug, Clone)]
pub enum Plant {
    Vdp(Vdp),
    Motor(Motor),
    Kdv(Box<Kdv>),
    Linear(Linear),
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Vdp(_) | Plant::Motor(_) => 2,
            Plant::Kdv(k) => k.grid_points(),
            Plant::Linear(p) => p.state_dim(),
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            Plant::Vdp(_) | Plant::Motor(_) => 1,
            Plant::Kdv(k) => k.n_inputs(),
            Plant::Linear(p) => p.n_u(),
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            Plant::Vdp(_) => 2,
            Plant::Motor(_) => 1,
            Plant::Kdv(k) => k.grid_points(),
            Plant::Linear(p) => p.n_y(),
        }
    }

    pub fn sample_period(&self) -> f64 {
        match self {
            Plant::Vdp(p) => p.params().sample_period,
            Plant::Motor(p) => p.params().sample_period,
            Plant::Kdv(p) => p.params().sample_period,
            Plant::Linear(p) => p.params().sample_period,
        }
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Vdp(_) => x.clone(),
            Plant::Motor(_) => DVector::from_element(1, x[1]),
            Plant::Kdv(_) => x.clone(),
            Plant::Linear(p) => p.output(x),
        }
    }

    /// Advances the state by one sample period under zero-order-hold input `u`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() || u.len() != self.n_u() {
            return Err(Error::invalid(format!(
                "plant expects state {} and input {}, got {} and {}",
                self.state_dim(),
                self.n_u(),
                x.len(),
                u.len()
            )));
        }
        let next = match self {
            Plant::Vdp(p) => p.step(x, u[0]),
            Plant::Motor(p) => p.step(x, u[0]),
            Plant::Kdv(p) => p.step(x, u),
            Plant::Linear(p) => p.step(x, u),
        };
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::Integration("state became non-finite".into()))
        }
    }

    /// Input bounds the plant enforces physically, if any.
    pub fn input_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Plant::Motor(p) => Some((p.params().u_min, p.params().u_max)),
            _ => None,
        }
    }
}

/// Random excitation applied while recording data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLaw {
    /// Independent uniform draws per step and channel.
    Uniform { low: f64, high: f64 },
    Zero,
}

/// Distribution of initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitLaw {
    /// Uniform on the box `[low, high]^n`.
    UniformBox { low: f64, high: f64 },
    /// Random convex combination of the three KdV reference profiles.
    KdvConvex,
    Fixed { state: Vec<f64> },
}

impl InputLaw {
    pub fn sample<R: Rng>(&self, n_u: usize, rng: &mut R) -> DVector<f64> {
        match *self {
            InputLaw::Uniform { low, high } => DVector::from_fn(n_u, |_, _| rng.gen_range(low..=high)),
            InputLaw::Zero => DVector::zeros(n_u),
        }
    }
}

impl InitLaw {
    pub fn sample<R: Rng>(&self, plant: &Plant, rng: &mut R) -> Result<DVector<f64>> {
        let n = plant.state_dim();
        match self {
            InitLaw::UniformBox { low, high } => Ok(DVector::from_fn(n, |_, _| rng.gen_range(*low..=*high))),
            InitLaw::KdvConvex => match plant {
                Plant::Kdv(k) => {
                    // uniform weights on the simplex
                    let e: Vec<f64> = (0..3).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                    let s: f64 = e.iter().sum();
                    Ok(k.convex_initial(&[e[0] / s, e[1] / s, e[2] / s]))
                }
                _ => Err(Error::Config("kdv_convex initial law requires the kdv plant".into())),
            },
            InitLaw::Fixed { state } => {
                if state.len() != n {
                    return Err(Error::Config(format!("fixed initial state needs {n} entries")));
                }
                Ok(DVector::from_column_slice(state))
            }
        }
    }
}

/// Simulates one trajectory of `length` samples from `x0`; sample `k` pairs
/// `u_k` with `y_k = h(x_k)`.
pub fn simulate(
    plant: &Plant,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
) -> Result<(Trajectory, DVector<f64>)> {
    let length = inputs.ncols();
    let mut outputs = DMatrix::zeros(plant.n_y(), length);
    let mut x = x0.clone();
    for k in 0..length {
        outputs.set_column(k, &plant.output(&x));
        x = plant
            .step(&x, &inputs.column(k).into_owned())
            .map_err(|e| Error::Integration(format!("step {k}: {e}")))?;
    }
    Ok((Trajectory::new(inputs.clone(), outputs)?, x))
}

/// Generates `n_traj` independent trajectories; trajectory `i` draws from
/// stream `i` of `seed`, so the result does not depend on the thread count.
pub fn generate_dataset(
    spec: &PlantSpec,
    n_traj: usize,
    length: usize,
    input_law: &InputLaw,
    init_law: &InitLaw,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if n_traj == 0 || length == 0 {
        return Err(Error::invalid("need at least one trajectory of at least one sample"));
    }
    let plant = spec.build()?;
    let trajs: Vec<Result<Trajectory>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let x0 = init_law.sample(&plant, &mut rng)?;
            let mut inputs = DMatrix::zeros(plant.n_u(), length);
            for k in 0..length {
                inputs.set_column(k, &input_law.sample(plant.n_u(), &mut rng));
            }
            simulate(&plant, &x0, &inputs)
                .map(|(t, _)| t)
                .map_err(|e| Error::Integration(format!("trajectory {i}: {e}")))
        })
        .collect();
    let trajs = trajs.into_iter().collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(trajs, plant.sample_period())
}

/// Classical fourth-order Runge-Kutta with `substeps` equal steps over `dt`.
pub fn rk4<F>(f: F, x: &DVector<f64>, dt: f64, substeps: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = dt / substeps as f64;
    let mut x = x.clone();
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (h / 2.0)));
        let k3 = f(&(&x + &k2 * (h / 2.0)));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_reproducible() {
        let spec = PlantSpec::Vdp(VdpParams::default());
        let law = InputLaw::Uniform { low: -1.0, high: 1.0 };
        let init = InitLaw::UniformBox { low: -1.0, high: 1.0 };
        let a = generate_dataset(&spec, 4, 20, &law, &init, 9).unwrap();
        let b = generate_dataset(&spec, 4, 20, &law, &init, 9).unwrap();
        for (x, y) in a.trajectories().iter().zip(b.trajectories()) {
            assert_eq!(x, y);
        }
        let c = generate_dataset(&spec, 4, 20, &law, &init, 10).unwrap();
        assert_ne!(a.trajectories()[0], c.trajectories()[0]);
    }

    #[test]
    fn motor_dataset_shape() {
        let spec = PlantSpec::Motor(MotorParams::default());
        let n = (0.25 / spec.sample_period()).round() as usize;
        let ds = generate_dataset(
            &spec,
            40,
            n,
            &InputLaw::Uniform { low: -1.0, high: 1.0 },
            &InitLaw::UniformBox { low: -1.0, high: 1.0 },
            1,
        )
        .unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.trajectories()[0].len(), 25);
        assert_eq!((ds.n_u(), ds.n_y()), (1, 1));
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let p = PlantSpec::Vdp(VdpParams::default()).build().unwrap();
        assert!(p.step(&DVector::zeros(3), &DVector::zeros(1)).is_err());
        assert!(p.step(&DVector::zeros(2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn rk4_is_exact_on_cubics() {
        // x' = 3t^2 written autonomously as (t, x)
        let f = |s: &DVector<f64>| DVector::from_vec(vec![1.0, 3.0 * s[0] * s[0]]);
        let x = rk4(f, &DVector::from_vec(vec![0.0, 0.0]), 1.5, 1);
        assert!((x[1] - 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn spec_serde_round_trip() {
        for spec in [
            PlantSpec::Vdp(VdpParams::default()),
            PlantSpec::Motor(MotorParams::default()),
            PlantSpec::Kdv(KdvParams::default()),
            PlantSpec::Linear(LinearParams::default()),
        ] {
            let s = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<PlantSpec>(&s).unwrap(), spec);
        }
    }
}
