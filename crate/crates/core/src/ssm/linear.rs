use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{gaussian, psd_factor};
use crate::knet::LinearKnowledge;
use crate::{from_db, to_db, Error, Result};

/// Process/observation noise variances on a linear scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub q2: f64,
    pub r2: f64,
}

impl NoiseSpec {
    pub fn new(q2: f64, r2: f64) -> Result<Self> {
        if !(q2 > 0.0 && r2 > 0.0 && q2.is_finite() && r2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variances must be positive and finite (q2={q2}, r2={r2})"
            )));
        }
        Ok(NoiseSpec { q2, r2 })
    }

    /// Builds the spec from `1/r²` and `ν = q²/r²`, both in dB.
    pub fn from_db(inv_r2_db: f64, nu_db: f64) -> Result<Self> {
        let r2 = 1.0 / from_db(inv_r2_db);
        NoiseSpec::new(from_db(nu_db) * r2, r2)
    }

    pub fn nu(&self) -> f64 {
        self.q2 / self.r2
    }

    pub fn nu_db(&self) -> f64 {
        to_db(self.nu())
    }
}

/// `x_t = F x_{t-1} + w_t`, `y_t = H x_t + v_t` with Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_factor: DMatrix<f64>,
    r_factor: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = f.nrows();
        let n = h.nrows();
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument("state and observation dimensions must be positive".into()));
        }
        if f.ncols() != m {
            return Err(Error::dim("F columns", m, f.ncols()));
        }
        if h.ncols() != m {
            return Err(Error::dim("H columns", m, h.ncols()));
        }
        if q.shape() != (m, m) {
            return Err(Error::dim("Q rows/cols", m, if q.nrows() != m { q.nrows() } else { q.ncols() }));
        }
        if r.shape() != (n, n) {
            return Err(Error::dim("R rows/cols", n, if r.nrows() != n { r.nrows() } else { r.ncols() }));
        }
        for (name, c) in [("Q", &q), ("R", &r)] {
            let scale = c.amax().max(1.0);
            if (c - c.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
        }
        let all = f.iter().chain(h.iter()).chain(q.iter()).chain(r.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("model matrices must be finite".into()));
        }
        let q_factor = psd_factor(&q)?;
        let r_factor = psd_factor(&r)?;
        Ok(LinearModel {
            f,
            h,
            q,
            r,
            q_factor,
            r_factor,
        })
    }

    /// Canonical `F`/`H` with `Q = q²·I`, `R = r²·I`.
    pub fn canonical(m: usize, n: usize, noise: NoiseSpec) -> Result<Self> {
        let f = canonical_transition(m)?;
        let h = canonical_observation(n, m)?;
        Self::new(f, h, DMatrix::identity(m, m) * noise.q2, DMatrix::identity(n, n) * noise.r2)
    }

    /// Same dynamics, different isotropic noise.
    pub fn with_noise(&self, noise: NoiseSpec) -> Result<Self> {
        let (m, n) = (self.state_dim(), self.obs_dim());
        Self::new(
            self.f.clone(),
            self.h.clone(),
            DMatrix::identity(m, m) * noise.q2,
            DMatrix::identity(n, n) * noise.r2,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub(crate) fn process_factor(&self) -> &DMatrix<f64> {
        &self.q_factor
    }

    pub(crate) fn observation_factor(&self) -> &DMatrix<f64> {
        &self.r_factor
    }

    pub fn knowledge(&self) -> LinearKnowledge {
        LinearKnowledge::new(self.f.clone(), self.h.clone())
    }
}

/// Companion-form transition: ones on the superdiagonal, last row
/// `0.1·(-1)^k`. Rejected if the spectral radius is not below one.
pub fn canonical_transition(m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument("state dimension must be positive".into()));
    }
    let mut f = DMatrix::zeros(m, m);
    for i in 0..m.saturating_sub(1) {
        f[(i, i + 1)] = 1.0;
    }
    for k in 0..m {
        f[(m - 1, k)] = if k % 2 == 0 { 0.1 } else { -0.1 };
    }
    let radius = f
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "canonical transition for m={m} is not stable (spectral radius {radius})"
        )));
    }
    Ok(f)
}

/// `I` when `n == m`, otherwise the first `n` state coordinates (`n < m`).
pub fn canonical_observation(n: usize, m: usize) -> Result<DMatrix<f64>> {
    if n == 0 || n > m {
        return Err(Error::InvalidArgument(format!(
            "canonical observation needs 0 < n <= m (n={n}, m={m})"
        )));
    }
    Ok(DMatrix::identity(n, m))
}

/// One draw of `F·x_prev + w`, `w ~ N(0, Q)`.
pub fn step_state<R: Rng + ?Sized>(model: &LinearModel, x_prev: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if x_prev.len() != model.state_dim() {
        return Err(Error::dim("step_state x_prev", model.state_dim(), x_prev.len()));
    }
    Ok(&model.f * x_prev + gaussian(&model.q_factor, rng))
}

/// One draw of `H·x + v`, `v ~ N(0, R)`.
pub fn observe<R: Rng + ?Sized>(model: &LinearModel, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if x.len() != model.state_dim() {
        return Err(Error::dim("observe x", model.state_dim(), x.len()));
    }
    Ok(&model.h * x + gaussian(&model.r_factor, rng))
}
