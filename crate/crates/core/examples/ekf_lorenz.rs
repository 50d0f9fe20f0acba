//! Extended Kalman filter on the Lorenz attractor, compared with simply
//! trusting the observations.

use kalmannet::filters::ekf_filter;
use kalmannet::ssm::{generate_dataset, LorenzModel, StateSpaceModel};
use kalmannet::to_db;

fn main() -> kalmannet::Result<()> {
    let model = LorenzModel::new(1.0, 1.0)?;
    let ssm = StateSpaceModel::Lorenz(model.clone());
    let ds = generate_dataset(&ssm, 20, 100, &ssm.default_x0(), true, 3)?;
    let (mut ekf, mut raw, mut count) = (0.0, 0.0, 0usize);
    for traj in &ds.trajectories {
        let states = traj.states.as_ref().expect("labeled");
        ekf += (ekf_filter(&model, traj)?.estimates - states).norm_squared();
        raw += (&traj.observations - states).norm_squared();
        count += states.len();
    }
    println!("observations {:.2} dB, ekf {:.2} dB", to_db(raw / count as f64), to_db(ekf / count as f64));
    Ok(())
}
