use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::StateSpaceModel;
use crate::{Error, Result};

/// One rollout: the known initial state, optional ground truth and the
/// observations. Rows of `states`/`observations` are time steps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x0: DVector<f64>,
    pub states: Option<DMatrix<f64>>,
    pub observations: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>, states: Option<DMatrix<f64>>, observations: DMatrix<f64>) -> Result<Self> {
        if observations.nrows() == 0 {
            return Err(Error::InvalidArgument("trajectory needs at least one observation".into()));
        }
        if let Some(s) = &states {
            if s.nrows() != observations.nrows() {
                return Err(Error::dim("trajectory states rows", observations.nrows(), s.nrows()));
            }
            if s.ncols() != x0.len() {
                return Err(Error::dim("trajectory states cols", x0.len(), s.ncols()));
            }
        }
        Ok(Trajectory {
            x0,
            states,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    pub fn is_labeled(&self) -> bool {
        self.states.is_some()
    }

    /// Observation at zero-based row `t` (time step `t + 1`).
    pub fn observation(&self, t: usize) -> DVector<f64> {
        self.observations.row(t).transpose()
    }

    pub fn state(&self, t: usize) -> Option<DVector<f64>> {
        self.states.as_ref().map(|s| s.row(t).transpose())
    }

    pub fn unlabeled(&self) -> Trajectory {
        Trajectory {
            x0: self.x0.clone(),
            states: None,
            observations: self.observations.clone(),
        }
    }

    /// Rows `start..end` keeping the original `x0`, for callers that carry
    /// their own filter state into the window.
    pub fn window(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            x0: self.x0.clone(),
            states: self.states.as_ref().map(|s| s.rows(start, end - start).into_owned()),
            observations: self.observations.rows(start, end - start).into_owned(),
        }
    }

    /// The sub-trajectory of rows `start..end`; its `x0` is the true state
    /// just before `start` when labels are present.
    pub fn slice(&self, start: usize, end: usize) -> Result<Trajectory> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!("bad slice {start}..{end} of length {}", self.len())));
        }
        let x0 = match (&self.states, start) {
            (_, 0) => self.x0.clone(),
            (Some(s), _) => s.row(start - 1).transpose(),
            (None, _) => return Err(Error::InvalidArgument("slicing past t=0 needs labels".into())),
        };
        Ok(Trajectory {
            x0,
            states: self.states.as_ref().map(|s| s.rows(start, end - start).into_owned()),
            observations: self.observations.rows(start, end - start).into_owned(),
        })
    }
}

/// A set of equal-length trajectories drawn from one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub labeled: bool,
    pub seed: u64,
    pub model: StateSpaceModel,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, labeled: bool, seed: u64, model: StateSpaceModel) -> Result<Self> {
        let ds = Dataset {
            trajectories,
            labeled,
            seed,
            model,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.model.state_dim(), self.model.obs_dim());
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.x0.len() != m {
                return Err(Error::Inconsistent(format!("trajectory {i}: x0 has {} entries, model m = {m}", traj.x0.len())));
            }
            if traj.observations.ncols() != n {
                return Err(Error::Inconsistent(format!(
                    "trajectory {i}: observations have {} columns, model n = {n}",
                    traj.observations.ncols()
                )));
            }
            if traj.is_labeled() != self.labeled {
                return Err(Error::Inconsistent(format!("trajectory {i}: label presence disagrees with dataset flag")));
            }
            if let Some(s) = &traj.states {
                if s.ncols() != m || s.nrows() != traj.len() {
                    return Err(Error::Inconsistent(format!("trajectory {i}: state array has wrong shape")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Common trajectory length, if all trajectories agree.
    pub fn horizon(&self) -> Option<usize> {
        let first = self.trajectories.first()?.len();
        self.trajectories.iter().all(|t| t.len() == first).then_some(first)
    }

    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            trajectories: self.trajectories.iter().map(Trajectory::unlabeled).collect(),
            labeled: false,
            seed: self.seed,
            model: self.model.clone(),
        }
    }

    /// Contiguous split by fractions of the trajectory count; the remainder
    /// goes to the last part.
    pub fn split(&self, train: f64, validation: f64) -> Result<(Dataset, Dataset, Dataset)> {
        let n = self.len();
        let n_train = (n as f64 * train).round() as usize;
        let n_val = (n as f64 * validation).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::InvalidArgument(format!(
                "cannot split {n} trajectories into {train}/{validation}/rest"
            )));
        }
        let part = |range: std::ops::Range<usize>| Dataset {
            trajectories: self.trajectories[range].to_vec(),
            labeled: self.labeled,
            seed: self.seed,
            model: self.model.clone(),
        };
        Ok((part(0..n_train), part(n_train..n_train + n_val), part(n_train + n_val..n)))
    }
}

/// Generator for trajectory `index` of a dataset seeded with `seed`.
///
/// Every trajectory gets its own ChaCha stream, so trajectories can be
/// generated in any order or in parallel.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Rolls out `count` trajectories of `len` steps from `x0`.
pub fn generate_dataset(
    model: &StateSpaceModel,
    count: usize,
    len: usize,
    x0: &DVector<f64>,
    labeled: bool,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs N >= 1 and T >= 1 (N={count}, T={len})"
        )));
    }
    let (m, n) = (model.state_dim(), model.obs_dim());
    if x0.len() != m {
        return Err(Error::dim("generate_dataset x0", m, x0.len()));
    }
    let trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut states = DMatrix::zeros(len, m);
            let mut obs = DMatrix::zeros(len, n);
            let mut x = x0.clone();
            for t in 0..len {
                x = model.propagate(&x)? + model.sample_process_noise(&mut rng);
                let y = model.h() * &x + model.sample_observation_noise(&mut rng);
                states.row_mut(t).copy_from(&x.transpose());
                obs.row_mut(t).copy_from(&y.transpose());
            }
            Trajectory::new(x0.clone(), labeled.then_some(states), obs)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, labeled, seed, model.clone())
}
