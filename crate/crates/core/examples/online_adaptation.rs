//! Pretrain at r2 = 10 dB, then adapt on a stream whose observation noise is
//! 15 dB stronger, updating every 10 samples without labels.

use kalmannet::harness::{run_online, ExperimentConfig};

fn main() -> kalmannet::Result<()> {
    let cfg = ExperimentConfig::parse(
        "data.n_train = 200\ndata.n_val = 50\ntrain.epochs = 30\ntrain.learning_rate = 2e-3\ntrain.gamma = 3e-3\n\
         train.patience = none\nonline.pretrain_mode = unsupervised\nonline.learning_rate = 2e-3\nonline.stream_len = 8000\n",
    )?;
    let run = run_online(&cfg)?;
    let n = run.adapted.len();
    let mean_db = |w: &[kalmannet::training::WindowReport]| {
        kalmannet::to_db(w.iter().filter_map(|w| w.state_mse).sum::<f64>() / w.len() as f64)
    };
    for i in 0..8 {
        let (a, b) = (i * n / 8, (i + 1) * n / 8);
        println!(
            "windows {a:>4}..{b:<4} adapted {:6.2} dB  frozen {:6.2} dB  exact {:6.2} dB",
            mean_db(&run.adapted[a..b]),
            mean_db(&run.frozen[a..b]),
            mean_db(&run.reference[a..b])
        );
    }
    println!("matched-stream control: adapted minus frozen {:?} dB", run.control_degradation_db());
    Ok(())
}
