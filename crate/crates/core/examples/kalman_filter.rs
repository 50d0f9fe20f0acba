//! Exact Kalman filtering: the scalar random walk settles on the golden-ratio
//! Riccati fixed point, and the 2x2 canonical model is scored in dB.

use kalmannet::filters::kf_filter;
use kalmannet::harness::mse_db;
use kalmannet::ssm::{generate_dataset, LinearModel, NoiseSpec, StateSpaceModel};
use kalmannet::to_db;
use nalgebra::{DMatrix, DVector};

fn main() -> kalmannet::Result<()> {
    let one = || DMatrix::from_element(1, 1, 1.0);
    let walk = LinearModel::new(one(), one(), one(), one())?;
    let ds = generate_dataset(&StateSpaceModel::Linear(walk.clone()), 1, 10_000, &DVector::zeros(1), true, 1)?;
    let run = kf_filter(&walk, &ds.trajectories[0])?;
    let last = run.records.last().expect("non-empty");
    println!("scalar walk: prior variance {:.10}, gain {:.10}", last.sigma_prior[(0, 0)], last.gain[(0, 0)]);
    let states = ds.trajectories[0].states.as_ref().expect("labeled");
    let mse = (&run.estimates - states).norm_squared() / states.len() as f64;
    println!("empirical MSE {mse:.4} ({:.2} dB), steady-state value {:.4}", to_db(mse), (5f64.sqrt() - 1.0) / 2.0);

    for inv_r2_db in [0.0, 10.0, 20.0] {
        let model = LinearModel::canonical(2, 2, NoiseSpec::from_db(inv_r2_db, 0.0)?)?;
        let ssm = StateSpaceModel::Linear(model.clone());
        let ds = generate_dataset(&ssm, 100, 80, &ssm.default_x0(), true, 2)?;
        let estimates = ds.trajectories.iter().map(|t| kf_filter(&model, t).map(|r| r.estimates)).collect::<Result<Vec<_>, _>>()?;
        let truth: Vec<_> = ds.trajectories.iter().map(|t| t.states.clone().expect("labeled")).collect();
        println!("2x2, 1/r2 = {inv_r2_db:>4} dB: KF MSE {:.3} dB", mse_db(&estimates, &truth)?.db);
    }
    Ok(())
}
