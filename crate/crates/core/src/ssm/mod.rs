//! State-space models and trajectory generation.
//!
//! Two model families are supported:
//!
//! ```text
//! linear:  x_t = F x_{t-1} + w_t,          y_t = H x_t + v_t
//! lorenz:  x_t = F(x_{t-1}) x_{t-1} + w_t, y_t = H x_t + v_t
//! ```
//!
//! with `w_t ~ N(0, Q)` and `v_t ~ N(0, R)`. For the Lorenz system `F(x)` is a
//! truncated Taylor expansion of `exp(A(x)·dt)`.

mod dataset;
mod io;
mod linear;
mod lorenz;

pub use dataset::{generate_dataset, trajectory_rng, Dataset, Trajectory};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use linear::{canonical_observation, canonical_transition, observe, step_state, LinearModel, NoiseSpec};
pub use lorenz::{lorenz_transition, LorenzDynamics, LorenzModel};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::knet::{LinearKnowledge, LorenzKnowledge};
use crate::{Error, Result};

/// Either model family, as stored alongside a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum StateSpaceModel {
    Linear(LinearModel),
    Lorenz(LorenzModel),
}

impl StateSpaceModel {
    pub fn state_dim(&self) -> usize {
        match self {
            StateSpaceModel::Linear(m) => m.state_dim(),
            StateSpaceModel::Lorenz(_) => 3,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            StateSpaceModel::Linear(m) => m.obs_dim(),
            StateSpaceModel::Lorenz(l) => l.h().nrows(),
        }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        match self {
            StateSpaceModel::Linear(m) => m.h(),
            StateSpaceModel::Lorenz(l) => l.h(),
        }
    }

    pub fn q(&self) -> DMatrix<f64> {
        match self {
            StateSpaceModel::Linear(m) => m.q().clone(),
            StateSpaceModel::Lorenz(l) => DMatrix::identity(3, 3) * l.q2,
        }
    }

    pub fn r(&self) -> DMatrix<f64> {
        match self {
            StateSpaceModel::Linear(m) => m.r().clone(),
            StateSpaceModel::Lorenz(l) => DMatrix::identity(l.h().nrows(), l.h().nrows()) * l.r2,
        }
    }

    /// Transition matrix used to propagate `x` (state dependent for Lorenz).
    pub fn transition(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            StateSpaceModel::Linear(m) => Ok(m.f().clone()),
            StateSpaceModel::Lorenz(l) => lorenz_transition(l, x),
        }
    }

    /// Noise-free state propagation.
    pub fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.transition(x)? * x)
    }

    pub fn default_x0(&self) -> DVector<f64> {
        match self {
            StateSpaceModel::Linear(m) => DVector::zeros(m.state_dim()),
            StateSpaceModel::Lorenz(_) => DVector::from_element(3, 1.0),
        }
    }

    pub(crate) fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            StateSpaceModel::Linear(m) => gaussian(m.process_factor(), rng),
            StateSpaceModel::Lorenz(l) => gaussian_iso(3, l.q2.sqrt(), rng),
        }
    }

    pub(crate) fn sample_observation_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            StateSpaceModel::Linear(m) => gaussian(m.observation_factor(), rng),
            StateSpaceModel::Lorenz(l) => gaussian_iso(l.h().nrows(), l.r2.sqrt(), rng),
        }
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            StateSpaceModel::Linear(m) => ModelDescriptor::Linear {
                m: m.state_dim(),
                n: m.obs_dim(),
                f: row_major(m.f()),
                h: row_major(m.h()),
                q: row_major(m.q()),
                r: row_major(m.r()),
            },
            StateSpaceModel::Lorenz(l) => ModelDescriptor::Lorenz {
                sigma: l.sigma,
                rho: l.rho,
                beta: l.beta,
                dt: l.dt,
                taylor_order: l.taylor_order,
                q2: l.q2,
                r2: l.r2,
                n: l.h().nrows(),
                h: row_major(l.h()),
            },
        }
    }

    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<Self> {
        match desc {
            ModelDescriptor::Linear { m, n, f, h, q, r } => {
                let (m, n) = (*m, *n);
                Ok(StateSpaceModel::Linear(LinearModel::new(
                    from_row_major(m, m, f)?,
                    from_row_major(n, m, h)?,
                    from_row_major(m, m, q)?,
                    from_row_major(n, n, r)?,
                )?))
            }
            ModelDescriptor::Lorenz {
                sigma,
                rho,
                beta,
                dt,
                taylor_order,
                q2,
                r2,
                n,
                h,
            } => {
                let mut l = LorenzModel::new(*q2, *r2)?;
                l.sigma = *sigma;
                l.rho = *rho;
                l.beta = *beta;
                l.dt = *dt;
                l.taylor_order = *taylor_order;
                l.set_h(from_row_major(*n, 3, h)?)?;
                l.validate()?;
                Ok(StateSpaceModel::Lorenz(l))
            }
        }
    }

    /// What a learned-gain filter is allowed to know about this model.
    pub fn knowledge(&self) -> Knowledge {
        match self {
            StateSpaceModel::Linear(m) => Knowledge::Linear(m.knowledge()),
            StateSpaceModel::Lorenz(l) => Knowledge::Lorenz(l.knowledge()),
        }
    }
}

/// Dynamics knowledge for either model family; never carries noise statistics.
#[derive(Clone, Debug)]
pub enum Knowledge {
    Linear(LinearKnowledge),
    Lorenz(LorenzKnowledge),
}

/// Serialized form of a [`StateSpaceModel`]; matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelDescriptor {
    Linear {
        m: usize,
        n: usize,
        f: Vec<f64>,
        h: Vec<f64>,
        q: Vec<f64>,
        r: Vec<f64>,
    },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
        dt: f64,
        taylor_order: usize,
        q2: f64,
        r2: f64,
        n: usize,
        h: Vec<f64>,
    },
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Inconsistent(format!(
            "expected {rows}x{cols} = {} entries, found {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn gaussian<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    factor * z
}

fn gaussian_iso<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)))
}

/// A square-root factor `L` with `L·Lᵀ = cov`, valid for singular PSD input.
pub(crate) fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::InvalidArgument("covariance is not positive semi-definite".into()));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(eig.eigenvectors * sqrt)
}
