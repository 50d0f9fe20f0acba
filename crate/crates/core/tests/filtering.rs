mod common;

use kalmannet::filters::{ekf_filter, kf_filter, kf_filter_with};
use kalmannet::knet::knet_filter;
use kalmannet::nn::{Dims, GainNetworkParams};
use kalmannet::ssm::{generate_dataset, LinearModel, LorenzModel, NoiseSpec, StateSpaceModel, Trajectory};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kf_equals_gaussian_conditioning(m in 1usize..=3, n in 1usize..=3, len in 1usize..=6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_model(&mut rng, m, n);
        let x0 = common::normal_matrix(&mut rng, m, 1, 2.0).column(0).into_owned();
        let ds = generate_dataset(&StateSpaceModel::Linear(model.clone()), 1, len, &x0, true, seed ^ 1).unwrap();
        let traj = &ds.trajectories[0];
        let run = kf_filter(&model, traj).unwrap();
        for (t, want) in common::conditioned_means(&model, traj).iter().enumerate() {
            let got = run.estimates.row(t).transpose();
            prop_assert!((&got - want).amax() <= 1e-8 * want.amax().max(1.0), "t={} got {} want {}", t, got, want);
        }
    }

    #[test]
    fn posterior_never_exceeds_prior(m in 1usize..=4, n in 1usize..=3, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_model(&mut rng, m, n);
        let ssm = StateSpaceModel::Linear(model.clone());
        let ds = generate_dataset(&ssm, 1, 25, &ssm.default_x0(), true, seed).unwrap();
        let sigma0 = common::spd(&mut rng, m, 0.5);
        for r in kf_filter_with(&model, &ds.trajectories[0], &sigma0).unwrap().records {
            let d = &r.sigma_prior - &r.sigma_post;
            prop_assert!(((&d + d.transpose()) * 0.5).symmetric_eigenvalues().min() >= -1e-9);
        }
    }
}

#[test]
fn zero_gain_network_predicts_open_loop() {
    let model = LinearModel::canonical(3, 3, NoiseSpec::new(1.0, 1.0).unwrap()).unwrap();
    let ssm = StateSpaceModel::Linear(model.clone());
    let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let ds = generate_dataset(&ssm, 1, 20, &x0, false, 3).unwrap();
    let run = knet_filter(&GainNetworkParams::zeros(Dims::for_model(3, 3)), &model.knowledge(), &ds.trajectories[0]).unwrap();
    let mut x = x0.clone();
    for t in 0..20 {
        x = model.f() * x;
        assert!((run.estimates.row(t).transpose() - &x).amax() < 1e-12);
    }
}

#[test]
fn ekf_on_a_clean_lorenz_run_beats_the_observations() {
    let model = LorenzModel::new(1.0, 1.0).unwrap();
    let ssm = StateSpaceModel::Lorenz(model.clone());
    let ds = generate_dataset(&ssm, 8, 100, &ssm.default_x0(), true, 21).unwrap();
    let (mut ekf, mut raw) = (0.0, 0.0);
    for traj in &ds.trajectories {
        let states = traj.states.as_ref().unwrap();
        ekf += (ekf_filter(&model, traj).unwrap().estimates - states).norm_squared();
        raw += (&traj.observations - states).norm_squared();
    }
    assert!(ekf < 0.8 * raw, "ekf {ekf} vs observations {raw}");
}

#[test]
fn kf_estimate_is_linear_in_observations() {
    let model = LinearModel::canonical(2, 2, NoiseSpec::new(0.5, 2.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = common::normal_matrix(&mut rng, 15, 2, 1.0);
    let b = common::normal_matrix(&mut rng, 15, 2, 1.0);
    let traj = |y: DMatrix<f64>| Trajectory::new(DVector::zeros(2), None, y).unwrap();
    let est = |y: DMatrix<f64>| kf_filter(&model, &traj(y)).unwrap().estimates;
    let sum = est(&a * 2.0 + &b * -3.0);
    let parts = est(a) * 2.0 + est(b) * -3.0;
    assert!((sum - parts).amax() < 1e-12);
}
