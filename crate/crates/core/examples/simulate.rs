//! Generate a labeled dataset from the canonical 2x2 model, save it, load it
//! back and print a few summary numbers.
//!
//! cargo run --release --example simulate -- [out.knds]

use kalmannet::ssm::{generate_dataset, load_dataset, save_dataset, LinearModel, NoiseSpec, StateSpaceModel};

fn main() -> kalmannet::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("simulate.knds").display().to_string());
    let noise = NoiseSpec::from_db(10.0, 0.0)?;
    let model = StateSpaceModel::Linear(LinearModel::canonical(2, 2, noise)?);
    let ds = generate_dataset(&model, 50, 80, &model.default_x0(), true, 7)?;
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    assert_eq!(back, ds);

    let traj = &ds.trajectories[0];
    let states = traj.states.as_ref().expect("labeled");
    let obs_power = traj.observations.norm_squared() / traj.observations.len() as f64;
    let state_power = states.norm_squared() / states.len() as f64;
    println!("{} trajectories, T = {}, r2 = {:.3}, q2 = {:.3}", ds.len(), traj.len(), noise.r2, noise.q2);
    println!("state power {state_power:.3}, observation power {obs_power:.3}");
    println!("saved to {path}");
    Ok(())
}
