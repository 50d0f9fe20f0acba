//! MSE against 1/r2 for a small grid, written as CSV next to the KF rows.
//!
//! cargo run --release --example mse_curve -- [config file]

use kalmannet::harness::{run_mse_curve, CsvMeta, ExperimentConfig};

fn main() -> kalmannet::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::parse(
            "noise.inv_r2_db = 0, 10, 20\ndata.n_train = 200\ndata.n_val = 50\ndata.n_test = 50\n\
             train.epochs = 20\ntrain.learning_rate = 2e-3\ntrain.gamma = 3e-3\ntrain.patience = none\n",
        )?,
    };
    let run = run_mse_curve(&cfg)?;
    let meta = CsvMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    run.report.write_csv(&mut std::io::stdout().lock(), &meta)
}
