#![allow(dead_code)]

use kalmannet::ssm::{LinearModel, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `A·Aᵀ + floor·I`, always positive definite.
pub fn spd<R: Rng>(rng: &mut R, dim: usize, floor: f64) -> DMatrix<f64> {
    let a = normal_matrix(rng, dim, dim, 1.0);
    let s = &a * a.transpose() + DMatrix::identity(dim, dim) * floor;
    (&s + s.transpose()) * 0.5
}

/// A random linear-Gaussian model with `F` rescaled to spectral norm 0.95.
pub fn random_model<R: Rng>(rng: &mut R, m: usize, n: usize) -> LinearModel {
    let f = normal_matrix(rng, m, m, 1.0);
    let norm = f.clone().svd(false, false).singular_values.max();
    let f = f * (0.95 / norm.max(1e-3));
    let h = normal_matrix(rng, n, m, 1.0);
    LinearModel::new(f, h, spd(rng, m, 0.1), spd(rng, n, 0.1)).unwrap()
}

/// Filtering means `E[x_t | y_1..y_t]` by conditioning the joint Gaussian of
/// the whole stacked trajectory, independent of any recursion.
pub fn conditioned_means(model: &LinearModel, traj: &Trajectory) -> Vec<DVector<f64>> {
    let (m, n, t_len) = (model.state_dim(), model.obs_dim(), traj.len());
    let (f, h, q, r) = (model.f(), model.h(), model.q(), model.r());
    let mut powers = vec![DMatrix::identity(m, m)];
    for k in 1..=t_len {
        powers.push(f * &powers[k - 1]);
    }
    let mean: Vec<DVector<f64>> = (1..=t_len).map(|t| &powers[t] * &traj.x0).collect();
    // cov(x_t, x_s) for 1-based t, s
    let cross = |t: usize, s: usize| -> DMatrix<f64> {
        let mut c = DMatrix::zeros(m, m);
        for k in 1..=t.min(s) {
            c += &powers[t - k] * q * powers[s - k].transpose();
        }
        c
    };
    let mut out = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let mut syy = DMatrix::zeros(n * t, n * t);
        let mut sxy = DMatrix::zeros(m, n * t);
        let mut resid = DVector::zeros(n * t);
        for a in 1..=t {
            for b in 1..=t {
                let mut block = h * cross(a, b) * h.transpose();
                if a == b {
                    block += r;
                }
                syy.view_mut(((a - 1) * n, (b - 1) * n), (n, n)).copy_from(&block);
            }
            sxy.view_mut((0, (a - 1) * n), (m, n)).copy_from(&(cross(t, a) * h.transpose()));
            resid.rows_mut((a - 1) * n, n).copy_from(&(traj.observation(a - 1) - h * &mean[a - 1]));
        }
        let solved = syy.cholesky().expect("joint observation covariance is positive definite").solve(&resid);
        out.push(&mean[t - 1] + sxy * solved);
    }
    out
}

pub fn lag1_autocorrelation(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = series.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

pub fn golden() -> f64 {
    (1.0 + 5f64.sqrt()) / 2.0
}
