//! Learning curves of supervised and unsupervised training from one shared
//! initialization, with the epoch at which each gets within 0.5 dB of the KF.

use kalmannet::harness::{run_convergence, ConvergenceRun, ExperimentConfig};

fn main() -> kalmannet::Result<()> {
    let cfg = ExperimentConfig::parse(
        "data.n_train = 200\ndata.n_val = 50\ntrain.epochs = 20\ntrain.learning_rate = 2e-3\ntrain.gamma = 3e-3\ntrain.patience = none\n",
    )?;
    let run = run_convergence(&cfg)?;
    println!("KF on the validation set: {:.3} dB", run.baseline_db);
    println!("epoch  supervised  unsupervised");
    for (s, u) in run.supervised.iter().zip(&run.unsupervised) {
        println!("{:>5}  {:>10.3}  {:>12.3}", s.epoch, s.val_mse_db.unwrap_or(f64::NAN), u.val_mse_db.unwrap_or(f64::NAN));
    }
    let s = ConvergenceRun::crossing(&run.supervised, run.baseline_db, 0.5);
    let u = ConvergenceRun::crossing(&run.unsupervised, run.baseline_db, 0.5);
    println!("within 0.5 dB: supervised at epoch {s:?}, unsupervised at epoch {u:?}");
    Ok(())
}
