use kalmannet::harness::ExperimentConfig;
use kalmannet::nn::{optimizer_step, parse_checkpoint, render_checkpoint, Dims, GainNetworkParams, OptimizerState};
use kalmannet::ssm::{
    generate_dataset, load_dataset, read_dataset, save_dataset, write_dataset, LinearModel, LorenzModel, NoiseSpec,
    StateSpaceModel,
};
use proptest::prelude::*;

fn linear(m: usize, n: usize, q2: f64, r2: f64) -> StateSpaceModel {
    StateSpaceModel::Linear(LinearModel::canonical(m, n, NoiseSpec::new(q2, r2).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_bytes_round_trip(
        m in 1usize..5,
        n_frac in 0.0f64..1.0,
        count in 1usize..5,
        len in 1usize..30,
        labeled: bool,
        seed: u64,
        q2 in 1e-3f64..1e3,
        r2 in 1e-3f64..1e3,
    ) {
        let n = 1 + (n_frac * m as f64) as usize % m;
        let ssm = linear(m, n, q2, r2);
        let ds = generate_dataset(&ssm, count, len, &ssm.default_x0(), labeled, seed).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ds);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn checkpoint_text_round_trip(m in 1usize..5, n in 1usize..5, seed: u64, steps in 0usize..3, scale in -1e6f64..1e6) {
        let mut params = GainNetworkParams::init(Dims::for_model(m, n), seed);
        params.scale_output(scale);
        let mut opt = OptimizerState::new(params.blocks(), 1e-3);
        for s in 0..steps {
            let grads: Vec<_> = params
                .blocks()
                .iter()
                .map(|b| {
                    let mut g = b.zeros_like();
                    g.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i + s) as f64).cos() * scale);
                    g
                })
                .collect();
            optimizer_step(&mut opt, params.blocks_mut(), &grads).unwrap();
        }
        let text = render_checkpoint(&params, Some(&opt));
        let (p, o) = parse_checkpoint(&text).unwrap();
        prop_assert_eq!(&p, &params);
        prop_assert_eq!(o.as_ref(), Some(&opt));
        prop_assert_eq!(render_checkpoint(&p, o.as_ref()), text);
    }

    #[test]
    fn config_render_round_trip(
        grid in prop::collection::vec(-30i32..40, 1..6),
        lr in 1e-5f64..1e-1,
        epochs in 1usize..500,
        seed: u64,
    ) {
        let grid: Vec<String> = grid.iter().map(|v| v.to_string()).collect();
        let text = format!(
            "noise.inv_r2_db = {}\ntrain.learning_rate = {lr}\ntrain.epochs = {epochs}\nexperiment.seed = {seed}\n",
            grid.join(", ")
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(cfg.training.learning_rate, lr);
        prop_assert_eq!(cfg.seed, seed);
    }
}

#[test]
fn dataset_file_round_trip_for_both_model_kinds() {
    let dir = tempfile::tempdir().unwrap();
    for (i, ssm) in [linear(2, 2, 1.0, 1.0), StateSpaceModel::Lorenz(LorenzModel::new(1.0, 1.0).unwrap())]
        .iter()
        .enumerate()
    {
        let ds = generate_dataset(ssm, 3, 40, &ssm.default_x0(), true, 5).unwrap();
        let path = dir.path().join(format!("{i}.knds"));
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let ssm = linear(2, 1, 1.0, 1.0);
    let ds = generate_dataset(&ssm, 2, 5, &ssm.default_x0(), true, 1).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_dataset(&mut &bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let text = render_checkpoint(&GainNetworkParams::init(Dims::for_model(2, 1), 0), None);
    assert!(parse_checkpoint(&text[..text.len() / 2]).is_err());
    assert!(parse_checkpoint(&text.replacen("knet-checkpoint 1", "knet-checkpoint 99", 1)).is_err());
}

#[test]
fn config_hash_ignores_comments_and_order() {
    let a = ExperimentConfig::parse("train.epochs = 5\nnoise.inv_r2_db = 0, 10\n").unwrap();
    let b = ExperimentConfig::parse("# grid\nnoise.inv_r2_db = 0, 10\n\ntrain.epochs = 5 # short\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), a.with("train.epochs", 6).unwrap().hash());
    assert!(ExperimentConfig::parse("train.epoch = 5").is_err());
}
