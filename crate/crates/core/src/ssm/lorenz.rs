use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::knet::LorenzKnowledge;
use crate::{Error, Result};

/// Discretized Lorenz attractor with additive Gaussian noise.
///
/// The continuous dynamics are written in state-dependent coefficient form
/// `ẋ = A(x)·x` and discretized per state as `F(x) = Σ_{j≤J} (A(x)·dt)^j / j!`.
#[derive(Clone, Debug, PartialEq)]
pub struct LorenzModel {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub taylor_order: usize,
    pub q2: f64,
    pub r2: f64,
    h: DMatrix<f64>,
}

impl LorenzModel {
    /// Standard coefficients (σ=10, ρ=28, β=8/3), dt = 0.02, J = 5, H = I.
    pub fn new(q2: f64, r2: f64) -> Result<Self> {
        let model = LorenzModel {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.02,
            taylor_order: 5,
            q2,
            r2,
            h: DMatrix::identity(3, 3),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma, self.rho, self.beta];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("Lorenz coefficients must be positive".into()));
        }
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be non-negative, got {}", self.dt)));
        }
        if self.taylor_order == 0 {
            return Err(Error::InvalidArgument("taylor_order must be at least 1".into()));
        }
        if !(self.q2 >= 0.0 && self.r2 >= 0.0 && self.q2.is_finite() && self.r2.is_finite()) {
            return Err(Error::InvalidArgument("noise variances must be non-negative".into()));
        }
        if self.h.ncols() != 3 || self.h.nrows() == 0 {
            return Err(Error::dim("Lorenz H columns", 3, self.h.ncols()));
        }
        Ok(())
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn set_h(&mut self, h: DMatrix<f64>) -> Result<()> {
        if h.ncols() != 3 {
            return Err(Error::dim("Lorenz H columns", 3, h.ncols()));
        }
        self.h = h;
        Ok(())
    }

    pub fn knowledge(&self) -> LorenzKnowledge {
        LorenzKnowledge::new(self.dynamics(), self.h.clone())
    }

    /// The noise-free part of the model.
    pub fn dynamics(&self) -> LorenzDynamics {
        LorenzDynamics {
            sigma: self.sigma,
            rho: self.rho,
            beta: self.beta,
            dt: self.dt,
            taylor_order: self.taylor_order,
        }
    }

    pub fn dynamics_matrix(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        self.dynamics().dynamics_matrix(x)
    }

    pub(crate) fn transition3(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        self.dynamics().transition3(x)
    }

    pub fn propagate_with_jacobian(&self, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        self.dynamics().propagate_with_jacobian(x)
    }
}

/// Lorenz coefficients and discretization, without any noise statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorenzDynamics {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub taylor_order: usize,
}

impl LorenzDynamics {
    /// `A(x)` such that `A(x)·x` is the Lorenz vector field.
    pub fn dynamics_matrix(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::new(
            -self.sigma, self.sigma, 0.0,
            self.rho - x[2], -1.0, 0.0,
            x[1], 0.0, -self.beta,
        )
    }

    pub fn transition3(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let step = self.dynamics_matrix(x) * self.dt;
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for j in 1..=self.taylor_order {
            term = term * step / j as f64;
            sum += term;
        }
        sum
    }

    /// `f(x) = F(x)·x` and its exact Jacobian `∂f/∂x`.
    ///
    /// `A(x)` is affine in `x` (only entries (1,0) and (2,0) move), so the
    /// derivative of `A^j·x` expands by the product rule over the powers.
    pub fn propagate_with_jacobian(&self, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let a = self.dynamics_matrix(x);
        let order = self.taylor_order;
        let mut powers = vec![Matrix3::identity()];
        let mut applied = vec![*x];
        for i in 1..=order {
            powers.push(powers[i - 1] * a);
            applied.push(a * applied[i - 1]);
        }
        let mut value = Vector3::zeros();
        let mut jac = Matrix3::zeros();
        let mut coeff = 1.0;
        for j in 0..=order {
            if j > 0 {
                coeff *= self.dt / j as f64;
            }
            value += applied[j] * coeff;
            jac += powers[j] * coeff;
            for i in 0..j {
                let v = applied[j - 1 - i];
                // ∂A/∂x₂ puts +v₀ in row 2; ∂A/∂x₃ puts −v₀ in row 1.
                let col1 = powers[i].column(2) * v[0];
                let col2 = powers[i].column(1) * (-v[0]);
                jac.column_mut(1).axpy(coeff, &col1, 1.0);
                jac.column_mut(2).axpy(coeff, &col2, 1.0);
            }
        }
        (value, jac)
    }
}

/// State-dependent discrete transition `F(x)`.
pub fn lorenz_transition(model: &LorenzModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.len() != 3 {
        return Err(Error::dim("lorenz_transition x", 3, x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("lorenz_transition: non-finite state".into()));
    }
    let f = model.transition3(&Vector3::new(x[0], x[1], x[2]));
    Ok(DMatrix::from_iterator(3, 3, f.iter().copied()))
}
