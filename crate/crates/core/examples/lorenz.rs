//! Unsupervised training on the Lorenz attractor against the EKF.

use kalmannet::harness::{run_lorenz, ExperimentConfig};

fn main() -> kalmannet::Result<()> {
    let cfg = ExperimentConfig::parse(
        "model.kind = lorenz\ndata.train_len = 100\ndata.n_train = 100\ndata.n_val = 25\ndata.n_test = 25\n\
         train.epochs = 20\ntrain.batch_size = 16\ntrain.learning_rate = 2e-3\ntrain.gamma = 3e-3\n\
         train.patience = none\ntrain.init_gain_scale = 0.01\n",
    )?;
    let run = run_lorenz(&cfg)?;
    for r in &run.report.rows {
        println!("{:<10} {:8.3} dB  {:.2e} s per trajectory", r.estimator, r.mse_db, r.runtime_s);
    }
    Ok(())
}
