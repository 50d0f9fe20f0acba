//! Train the learned-gain filter from observations only and compare it with
//! the Kalman filter that knows the noise covariances. The trained network is
//! saved as a checkpoint and reloaded.

use kalmannet::filters::kf_filter;
use kalmannet::nn::{load_checkpoint, save_checkpoint, Dims, GainNetworkParams};
use kalmannet::ssm::{generate_dataset, LinearModel, NoiseSpec, StateSpaceModel, Trajectory};
use kalmannet::to_db;
use kalmannet::training::{knet_mse, train_offline, LossMode, TrainingConfig};

fn main() -> kalmannet::Result<()> {
    let noise = NoiseSpec::from_db(0.0, 0.0)?;
    let model = LinearModel::canonical(2, 2, noise)?;
    let ssm = StateSpaceModel::Linear(model.clone());
    let ds = generate_dataset(&ssm, 500, 80, &ssm.default_x0(), true, 11)?;
    let (train, rest) = ds.trajectories.split_at(400);
    let (val, test) = rest.split_at(50);
    let unlabeled: Vec<Trajectory> = train.iter().map(Trajectory::unlabeled).collect();

    let cfg = TrainingConfig {
        mode: LossMode::Unsupervised,
        gamma: 3e-3 * noise.r2,
        batch_size: 32,
        epochs: 30,
        learning_rate: 2e-3,
        patience: None,
        ..Default::default()
    };
    let knowledge = model.knowledge();
    let out = train_offline(&unlabeled, val, &knowledge, GainNetworkParams::init(Dims::for_model(2, 2), 1), &cfg)?;
    for p in out.curve.iter().step_by(5) {
        println!("epoch {:>3}  train {:.4}  val MSE {:?} dB", p.epoch, p.train_loss, p.val_mse_db.map(|v| (v * 1000.0).round() / 1000.0));
    }

    let path = std::env::temp_dir().join("train_unsupervised.knet");
    save_checkpoint(&path, &out.params, Some(&out.optimizer))?;
    let (params, _) = load_checkpoint(&path)?;
    let learned = to_db(knet_mse(&params, &knowledge, test)?);
    let mut kf = 0.0;
    for t in test {
        kf += (kf_filter(&model, t)?.estimates - t.states.as_ref().expect("labeled")).norm_squared();
    }
    let kf = to_db(kf / (test.len() * 80 * 2) as f64);
    println!("best epoch {}: learned {learned:.3} dB, KF {kf:.3} dB, gap {:+.3} dB", out.best_epoch, learned - kf);
    Ok(())
}
