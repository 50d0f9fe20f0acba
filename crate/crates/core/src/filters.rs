//! Exact model-based baselines: the Kalman filter for linear models and the
//! extended Kalman filter for the Lorenz model.
//!
//! Both start from a known initial state, i.e. `Σ₀ = 0` unless a different
//! initial covariance is passed to the `*_with` variants.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::ssm::{lorenz_transition, LinearModel, LorenzModel, Trajectory};
use crate::{Error, Result};

/// Conditioning limit for the innovation covariance.
pub const MAX_CONDITION: f64 = 1e12;
/// Most negative eigenvalue tolerated in a posterior covariance.
pub const PSD_TOLERANCE: f64 = 1e-9;
/// The EKF aborts once the state estimate grows past this norm.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct KfState {
    pub x_post: DVector<f64>,
    pub sigma_post: DMatrix<f64>,
    pub t: usize,
}

impl KfState {
    pub fn known(x0: DVector<f64>) -> Self {
        let m = x0.len();
        KfState {
            x_post: x0,
            sigma_post: DMatrix::zeros(m, m),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x_prior: DVector<f64>,
    pub y_prior: DVector<f64>,
    pub sigma_prior: DMatrix<f64>,
    pub s_prior: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfStepRecord {
    pub x_prior: DVector<f64>,
    pub y_prior: DVector<f64>,
    pub sigma_prior: DMatrix<f64>,
    pub s_prior: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
    pub x_post: DVector<f64>,
    pub sigma_post: DMatrix<f64>,
}

/// Filter output: row `t` of `estimates` is `x̂_{t+1}`.
#[derive(Clone, Debug)]
pub struct FilterRun {
    pub estimates: DMatrix<f64>,
    pub records: Vec<KfStepRecord>,
}

fn check_state(st: &KfState, m: usize) -> Result<()> {
    if st.x_post.len() != m {
        return Err(Error::dim("filter state x_post", m, st.x_post.len()));
    }
    if st.sigma_post.shape() != (m, m) {
        return Err(Error::dim("filter state sigma_post", m, st.sigma_post.nrows()));
    }
    Ok(())
}

/// Prediction with an explicit (possibly linearized) transition.
pub fn predict_with(
    f: &DMatrix<f64>,
    x_prior: DVector<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    st: &KfState,
) -> Prediction {
    let y_prior = h * &x_prior;
    let sigma_prior = symmetrize(f * &st.sigma_post * f.transpose() + q);
    let s_prior = symmetrize(h * &sigma_prior * h.transpose() + r);
    Prediction {
        x_prior,
        y_prior,
        sigma_prior,
        s_prior,
    }
}

pub fn kf_predict(model: &LinearModel, st: &KfState) -> Result<Prediction> {
    check_state(st, model.state_dim())?;
    let x_prior = model.f() * &st.x_post;
    Ok(predict_with(model.f(), x_prior, model.h(), model.q(), model.r(), st))
}

/// `K = Σ_prior·Hᵀ·S⁻¹`, via a Cholesky solve of `S`.
///
/// When `Σ_prior·Hᵀ` is exactly zero the prediction is already exact and the
/// gain is zero whatever `S` is.
pub fn kf_gain(sigma_prior: &DMatrix<f64>, h: &DMatrix<f64>, s_prior: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let cross = h * sigma_prior; // = (Σ Hᵀ)ᵀ
    if cross.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(sigma_prior.nrows(), h.nrows()));
    }
    let eig = s_prior.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular { step, condition });
    }
    let chol = s_prior
        .clone()
        .cholesky()
        .ok_or(Error::Singular { step, condition })?;
    Ok(chol.solve(&cross).transpose())
}

/// Applies the correction and returns the new state with its step record.
pub fn kf_update(st: &KfState, pred: &Prediction, gain: &DMatrix<f64>, y: &DVector<f64>) -> Result<(KfState, KfStepRecord)> {
    if y.len() != pred.y_prior.len() {
        return Err(Error::dim("kf_update observation", pred.y_prior.len(), y.len()));
    }
    let step = st.t + 1;
    let innovation = y - &pred.y_prior;
    let x_post = &pred.x_prior + gain * &innovation;
    let sigma_post = symmetrize(&pred.sigma_prior - gain * &pred.s_prior * gain.transpose());
    let min_eig = sigma_post.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -PSD_TOLERANCE {
        return Err(Error::Degenerate {
            step,
            min_eigenvalue: min_eig,
        });
    }
    let record = KfStepRecord {
        x_prior: pred.x_prior.clone(),
        y_prior: pred.y_prior.clone(),
        sigma_prior: pred.sigma_prior.clone(),
        s_prior: pred.s_prior.clone(),
        gain: gain.clone(),
        innovation,
        x_post: x_post.clone(),
        sigma_post: sigma_post.clone(),
    };
    Ok((
        KfState {
            x_post,
            sigma_post,
            t: step,
        },
        record,
    ))
}

pub fn kf_filter(model: &LinearModel, traj: &Trajectory) -> Result<FilterRun> {
    let m = model.state_dim();
    kf_filter_with(model, traj, &DMatrix::zeros(m, m))
}

pub fn kf_filter_with(model: &LinearModel, traj: &Trajectory, sigma0: &DMatrix<f64>) -> Result<FilterRun> {
    let m = model.state_dim();
    if traj.observations.ncols() != model.obs_dim() {
        return Err(Error::dim("kf_filter observations", model.obs_dim(), traj.observations.ncols()));
    }
    let mut st = KfState {
        x_post: traj.x0.clone(),
        sigma_post: sigma0.clone(),
        t: 0,
    };
    check_state(&st, m)?;
    let mut estimates = DMatrix::zeros(traj.len(), m);
    let mut records = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let pred = kf_predict(model, &st)?;
        let gain = kf_gain(&pred.sigma_prior, model.h(), &pred.s_prior, t + 1)?;
        let (next, rec) = kf_update(&st, &pred, &gain, &traj.observation(t))?;
        estimates.row_mut(t).copy_from(&next.x_post.transpose());
        records.push(rec);
        st = next;
    }
    Ok(FilterRun { estimates, records })
}

pub fn ekf_filter(model: &LorenzModel, traj: &Trajectory) -> Result<FilterRun> {
    ekf_filter_with(model, traj, &DMatrix::zeros(3, 3))
}

/// Extended KF; the per-state transition `F(x̂)` drives both the mean and the
/// covariance propagation.
pub fn ekf_filter_with(model: &LorenzModel, traj: &Trajectory, sigma0: &DMatrix<f64>) -> Result<FilterRun> {
    let n = model.h().nrows();
    if traj.observations.ncols() != n {
        return Err(Error::dim("ekf_filter observations", n, traj.observations.ncols()));
    }
    let q = DMatrix::identity(3, 3) * model.q2;
    let r = DMatrix::identity(n, n) * model.r2;
    let mut st = KfState {
        x_post: traj.x0.clone(),
        sigma_post: sigma0.clone(),
        t: 0,
    };
    check_state(&st, 3)?;
    let mut estimates = DMatrix::zeros(traj.len(), 3);
    let mut records = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let f = lorenz_transition(model, &st.x_post)?;
        let x_prior = &f * &st.x_post;
        let pred = predict_with(&f, x_prior, model.h(), &q, &r, &st);
        let gain = kf_gain(&pred.sigma_prior, model.h(), &pred.s_prior, t + 1)?;
        let (next, rec) = kf_update(&st, &pred, &gain, &traj.observation(t))?;
        let norm = next.x_post.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Diverged { step: t + 1, norm });
        }
        estimates.row_mut(t).copy_from(&next.x_post.transpose());
        records.push(rec);
        st = next;
    }
    Ok(FilterRun { estimates, records })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Writes `t, x_post[..]` and, when records are given, the flattened gain
/// (row-major) and the innovation.
pub fn write_estimates_csv<W: Write>(out: &mut W, estimates: &DMatrix<f64>, records: Option<&[KfStepRecord]>) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    let m = estimates.ncols();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..m).map(|i| format!("x_post_{i}")));
    if let Some(rec) = records.and_then(|r| r.first()) {
        let (gm, gn) = rec.gain.shape();
        header.extend((0..gm * gn).map(|i| format!("gain_{}_{}", i / gn, i % gn)));
        header.extend((0..rec.innovation.len()).map(|i| format!("innovation_{i}")));
    }
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for t in 0..estimates.nrows() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(estimates.row(t).iter().map(|v| v.to_string()));
        if let Some(rec) = records.and_then(|r| r.get(t)) {
            row.extend(rec.gain.transpose().iter().map(|v| v.to_string()));
            row.extend(rec.innovation.iter().map(|v| v.to_string()));
        }
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{generate_dataset, StateSpaceModel};

    fn scalar(q: f64, r: f64) -> LinearModel {
        let one = DMatrix::identity(1, 1);
        LinearModel::new(one.clone(), one.clone(), one.clone() * q, one * r).unwrap()
    }

    fn golden() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    #[test]
    fn predict_trivial_cases() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let st = KfState::known(DVector::from_vec(vec![2.0, 3.0]));
        let p = kf_predict(&model, &st).unwrap();
        assert_eq!(p.x_prior.as_slice(), &[2.0, 3.0]);
        assert_eq!(p.y_prior.as_slice(), &[2.0, 3.0]);
        assert!(p.sigma_prior.iter().all(|&v| v == 0.0) && p.s_prior.iter().all(|&v| v == 0.0));

        let p = kf_predict(&scalar(1.0, 1.0), &KfState::known(DVector::zeros(1))).unwrap();
        assert_eq!(p.sigma_prior[(0, 0)], 1.0);
        assert_eq!(p.s_prior[(0, 0)], 2.0);
    }

    #[test]
    fn riccati_fixed_point() {
        let model = scalar(1.0, 1.0);
        let mut st = KfState::known(DVector::zeros(1));
        let mut last = (0.0, 0.0);
        for _ in 0..60 {
            let p = kf_predict(&model, &st).unwrap();
            let k = kf_gain(&p.sigma_prior, model.h(), &p.s_prior, st.t + 1).unwrap();
            last = (p.sigma_prior[(0, 0)], k[(0, 0)]);
            st = kf_update(&st, &p, &k, &DVector::zeros(1)).unwrap().0;
        }
        assert!((last.0 - golden()).abs() < 1e-9, "P = {}", last.0);
        assert!((last.1 - golden() / (golden() + 1.0)).abs() < 1e-8, "K = {}", last.1);
    }

    #[test]
    fn gain_trivial_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let k = kf_gain(&i2, &i2, &(i2.clone() * 2.0), 1).unwrap();
        assert!((k - i2.clone() * 0.5).amax() < 1e-15);

        let s = i2.clone() * (1.0 + 1e12);
        let k = kf_gain(&i2, &i2, &s, 1).unwrap();
        assert!(k.norm() <= 2e-12);
    }

    #[test]
    fn singular_innovation_covariance_names_the_step() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match kf_gain(&i2, &i2, &s, 7) {
            Err(Error::Singular { step, .. }) => assert_eq!(step, 7),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn update_trivial_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let st = KfState::known(DVector::zeros(2));
        let pred = Prediction {
            x_prior: DVector::from_vec(vec![1.0, -1.0]),
            y_prior: DVector::from_vec(vec![1.0, -1.0]),
            sigma_prior: i2.clone() * 3.0,
            s_prior: i2.clone() * 3.0,
        };
        let y = DVector::from_vec(vec![4.0, 5.0]);
        let (next, rec) = kf_update(&st, &pred, &DMatrix::zeros(2, 2), &y).unwrap();
        assert_eq!(next.x_post, pred.x_prior);
        assert_eq!(next.sigma_post, pred.sigma_prior);
        assert_eq!(rec.innovation, &y - &pred.y_prior);

        let k = kf_gain(&pred.sigma_prior, &i2, &pred.s_prior, 1).unwrap();
        let (next, _) = kf_update(&st, &pred, &k, &y).unwrap();
        assert!((next.x_post - &y).amax() < 1e-12);
        assert!(next.sigma_post.amax() < 1e-12);
    }

    #[test]
    fn indefinite_posterior_is_rejected() {
        let st = KfState::known(DVector::zeros(1));
        let pred = kf_predict(&scalar(1.0, 1.0), &st).unwrap();
        let bad_gain = DMatrix::from_element(1, 1, 5.0);
        assert!(matches!(
            kf_update(&st, &pred, &bad_gain, &DVector::zeros(1)),
            Err(Error::Degenerate { step: 1, .. })
        ));
    }

    #[test]
    fn noiseless_filter_tracks_exactly() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let ssm = StateSpaceModel::Linear(model.clone());
        let ds = generate_dataset(&ssm, 1, 5, &DVector::from_vec(vec![1.0, -2.0]), true, 0).unwrap();
        let traj = &ds.trajectories[0];
        let run = kf_filter(&model, traj).unwrap();
        assert_eq!(&run.estimates, traj.states.as_ref().unwrap());
        assert_eq!(run.estimates, traj.observations);
    }

    #[test]
    fn first_gain_from_known_state() {
        let (q, r) = (0.7, 1.9);
        let model = scalar(q, r);
        let traj = Trajectory::new(DVector::zeros(1), None, DMatrix::from_element(1, 1, 0.3)).unwrap();
        let run = kf_filter(&model, &traj).unwrap();
        assert!((run.records[0].gain[(0, 0)] - q / (q + r)).abs() < 1e-15);
    }

    #[test]
    fn steady_state_mse_matches_riccati() {
        let model = scalar(1.0, 1.0);
        let ssm = StateSpaceModel::Linear(model.clone());
        let ds = generate_dataset(&ssm, 1, 10_000, &DVector::zeros(1), true, 2024).unwrap();
        let traj = &ds.trajectories[0];
        let run = kf_filter(&model, traj).unwrap();
        let err = &run.estimates - traj.states.as_ref().unwrap();
        let mse = err.norm_squared() / traj.len() as f64;
        let expected = golden() - 1.0;
        assert!((mse - expected).abs() < 0.03 * expected, "mse {mse}");
        let innov: f64 = run.records.iter().map(|r| r.innovation.norm_squared()).sum::<f64>() / traj.len() as f64;
        assert!((innov - (golden() + 1.0)).abs() < 0.03 * (golden() + 1.0), "innovation power {innov}");
    }

    #[test]
    fn ekf_reproduces_noiseless_lorenz() {
        let mut lorenz = LorenzModel::new(0.0, 0.0).unwrap();
        lorenz.q2 = 0.0;
        lorenz.r2 = 0.0;
        let ssm = StateSpaceModel::Lorenz(lorenz.clone());
        let ds = generate_dataset(&ssm, 1, 50, &ssm.default_x0(), true, 0).unwrap();
        let traj = &ds.trajectories[0];
        let run = ekf_filter(&lorenz, traj).unwrap();
        assert!((&run.estimates - traj.states.as_ref().unwrap()).amax() < 1e-9);
    }

    #[test]
    fn ekf_with_frozen_dynamics_averages_observations() {
        let mut lorenz = LorenzModel::new(0.0, 2.0).unwrap();
        lorenz.dt = 0.0;
        let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let obs = DMatrix::from_row_slice(4, 3, &[
            1.5, 2.0, 2.0, //
            0.0, 3.0, 3.5, //
            1.0, 1.0, 4.0, //
            2.0, 2.5, 2.5,
        ]);
        let traj = Trajectory::new(x0.clone(), None, obs.clone()).unwrap();
        // known state: the estimate never moves
        let run = ekf_filter(&lorenz, &traj).unwrap();
        for t in 0..4 {
            assert_eq!(run.estimates.row(t).transpose(), x0);
        }
        // unit prior covariance: posterior mean is the precision-weighted average
        let run = ekf_filter_with(&lorenz, &traj, &DMatrix::identity(3, 3)).unwrap();
        for t in 0..4 {
            let k = (t + 1) as f64;
            let sum = obs.rows(0, t + 1).row_sum().transpose();
            let expected = (&x0 + sum / lorenz.r2) / (1.0 + k / lorenz.r2);
            assert!((run.estimates.row(t).transpose() - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn ekf_divergence_is_reported() {
        let lorenz = LorenzModel::new(1.0, 1.0).unwrap();
        let obs = DMatrix::from_element(3, 3, 1e9);
        let traj = Trajectory::new(DVector::from_element(3, 1.0), None, obs).unwrap();
        let err = ekf_filter_with(&lorenz, &traj, &DMatrix::identity(3, 3)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let model = scalar(1.0, 1.0);
        let traj = Trajectory::new(DVector::zeros(1), None, DMatrix::from_element(3, 1, 0.5)).unwrap();
        let run = kf_filter(&model, &traj).unwrap();
        let mut out = Vec::new();
        write_estimates_csv(&mut out, &run.estimates, Some(&run.records)).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x_post_0,gain_0_0,innovation_0");
        assert_eq!(lines.len(), 4);
    }
}
