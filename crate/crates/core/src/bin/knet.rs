//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 failed check (`gradcheck`, or any experiment run with `--check`).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kalmannet::harness::{
    check_convergence, check_gap, check_length, check_lorenz, check_online, compare_on, gradcheck, initial_params, make_splits,
    run_convergence, run_generalization, run_lorenz, run_mse_curve, run_online, write_curves_csv, write_windows_csv,
    Check, CsvMeta, ExperimentConfig, MetricReport, DEFAULT_TOLERANCE,
};
use kalmannet::knet::knet_filter;
use kalmannet::nn::{load_checkpoint, save_checkpoint};
use kalmannet::ssm::{load_dataset, save_dataset, Dataset, Trajectory};
use kalmannet::training::{train_offline, train_online, LossMode, WindowReport};
use kalmannet::{Error, Result};

#[derive(Parser)]
#[command(name = "knet", version, about = "Learned-gain Kalman filtering experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `section.key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset at the first grid point
    Simulate,
    /// Train on a dataset file (or freshly generated data) and save a checkpoint
    TrainOffline {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adapt a checkpoint on the first trajectory of a dataset file
    TrainOnline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint and the exact filter on a dataset file
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// MSE against 1/r² for the configured grid
    Curve(CheckArgs),
    /// Train at the training length, then score at every `data.eval_lens`
    Generalize(CheckArgs),
    /// Supervised and unsupervised learning curves
    Convergence(CheckArgs),
    /// Unsupervised training on the Lorenz system against the EKF
    Lorenz(CheckArgs),
    /// Online adaptation under a noise mismatch
    Online(CheckArgs),
    /// Compare reverse-mode gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct CheckArgs {
    /// Exit with code 3 unless the experiment's criteria hold
    #[arg(long)]
    check: bool,
}

fn config(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::parse("")?,
    };
    if let Some(seed) = global.seed {
        cfg = cfg.with("experiment.seed", seed)?;
    }
    if let Some(out) = &global.out {
        cfg = cfg.with("output.dir", out.display())?;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    eprintln!("writing {}", path.display());
    Ok(BufWriter::new(file))
}

fn meta(cfg: &ExperimentConfig) -> CsvMeta {
    CsvMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn print_report(report: &MetricReport) {
    for r in &report.rows {
        let err = r.error.as_deref().map(|e| format!("  [{e}]")).unwrap_or_default();
        println!(
            "1/r2 {:>5} dB  T {:>6}  {:<10} {:>8.3} dB  {:.2e} s{err}",
            r.inv_r2_db, r.t, r.estimator, r.mse_db, r.runtime_s
        );
    }
}

fn split(ds: &Dataset) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Vec<Trajectory>)> {
    let (a, b, c) = ds.split(0.8, 0.1)?;
    Ok((a.trajectories, b.trajectories, c.trajectories))
}

fn write_windows(cfg: &ExperimentConfig, name: &str, series: &[(String, &[WindowReport])]) -> Result<()> {
    let mut out = create(&cfg.out_dir, name)?;
    write_windows_csv(&mut out, &meta(cfg), series)
}

/// Returns whether every check passed.
fn report_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    checks.iter().all(|c| c.passed)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = config(&cli.global)?;
    let meta = meta(&cfg);
    match cli.command {
        Command::Simulate => {
            let model = cfg.model_at(cfg.inv_r2_db[0])?;
            let splits = make_splits(&cfg, &model)?;
            let trajs = [splits.train, splits.val, splits.test].concat();
            let ds = Dataset::new(trajs, true, cfg.seed, model)?;
            let path = cfg.out_dir.join("dataset.knds");
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            save_dataset(&ds, &path)?;
            println!("{} trajectories of length {} -> {}", ds.len(), cfg.train_len, path.display());
        }
        Command::TrainOffline { data } => {
            let noise = cfg.noise(cfg.inv_r2_db[0])?;
            let (model, train, val, test) = match data {
                Some(path) => {
                    let ds = load_dataset(&path)?;
                    let (a, b, c) = split(&ds)?;
                    (ds.model, a, b, c)
                }
                None => {
                    let model = cfg.model_with(noise)?;
                    let s = make_splits(&cfg, &model)?;
                    (model, s.train, s.val, s.test)
                }
            };
            let training = cfg.training_at(&noise);
            let train: Vec<Trajectory> = match training.mode {
                LossMode::Unsupervised => train.iter().map(Trajectory::unlabeled).collect(),
                LossMode::Supervised => train,
            };
            let init = initial_params(&cfg, &model);
            let out = train_offline(&train, &val, &model.knowledge(), init, &training)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            save_checkpoint(cfg.out_dir.join("checkpoint.knet"), &out.params, Some(&out.optimizer))?;
            let mut csv = create(&cfg.out_dir, "learning_curve.csv")?;
            write_curves_csv(&mut csv, &meta, &[(training.mode.to_string(), cfg.inv_r2_db[0], &out.curve)])?;
            println!("best epoch {}", out.best_epoch);
            if !test.is_empty() && test.iter().all(Trajectory::is_labeled) {
                print_report(&compare_on(&model, Some(&out.params), &test, cfg.inv_r2_db[0], cfg.nu_db)?);
            }
        }
        Command::TrainOnline { checkpoint, data } => {
            let (params, _) = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let stream = ds
                .trajectories
                .first()
                .ok_or_else(|| Error::InvalidArgument("the dataset is empty".into()))?;
            let out = train_online(stream, &params, &ds.model.knowledge(), &cfg.online.config)?;
            save_checkpoint(cfg.out_dir.join("adapted.knet"), &out.params, None)?;
            write_windows(&cfg, "online_windows.csv", &[("adapted".into(), &out.windows)])?;
            println!("{} windows, {} skipped", out.windows.len(), out.skipped);
        }
        Command::Evaluate { checkpoint, data } => {
            let (params, _) = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            if !ds.labeled {
                let run = ds
                    .trajectories
                    .iter()
                    .map(|t| knet_filter(&params, &ds.model.knowledge(), t))
                    .collect::<Result<Vec<_>>>()?;
                println!("filtered {} unlabeled trajectories", run.len());
            } else {
                let report = compare_on(&ds.model, Some(&params), &ds.trajectories, f64::NAN, f64::NAN)?;
                report.write_csv(&mut create(&cfg.out_dir, "evaluation.csv")?, &meta)?;
                print_report(&report);
            }
        }
        Command::Curve(args) => {
            let run = run_mse_curve(&cfg)?;
            run.report.write_csv(&mut create(&cfg.out_dir, "mse_curve.csv")?, &meta)?;
            print_report(&run.report);
            if args.check {
                return Ok(report_checks(&check_gap(&run, "kf", cfg.train_len, 0.3)));
            }
        }
        Command::Generalize(args) => {
            let run = run_mse_curve(&cfg)?;
            let report = run_generalization(&cfg, &run.points)?;
            report.write_csv(&mut create(&cfg.out_dir, "generalization.csv")?, &meta)?;
            print_report(&report);
            if args.check {
                let checks: Vec<Check> = cfg
                    .eval_lens
                    .iter()
                    .filter(|&&t| t != cfg.train_len)
                    .flat_map(|&t| check_length(&report, &cfg.inv_r2_db, cfg.train_len, t, 0.2))
                    .collect();
                return Ok(report_checks(&checks));
            }
        }
        Command::Convergence(args) => {
            let run = run_convergence(&cfg)?;
            let mut csv = create(&cfg.out_dir, "convergence.csv")?;
            write_curves_csv(
                &mut csv,
                &meta,
                &[
                    ("supervised".into(), run.inv_r2_db, &run.supervised),
                    ("unsupervised".into(), run.inv_r2_db, &run.unsupervised),
                ],
            )?;
            println!("baseline {:.3} dB", run.baseline_db);
            if args.check {
                return Ok(report_checks(&check_convergence(&run, 0.5, 0.3)));
            }
        }
        Command::Lorenz(args) => {
            let run = run_lorenz(&cfg)?;
            run.report.write_csv(&mut create(&cfg.out_dir, "lorenz.csv")?, &meta)?;
            let curves: Vec<_> = run.points.iter().map(|p| ("unsupervised".to_string(), p.inv_r2_db, p.curve.as_slice())).collect();
            write_curves_csv(&mut create(&cfg.out_dir, "lorenz_curve.csv")?, &meta, &curves)?;
            print_report(&run.report);
            if args.check {
                return Ok(report_checks(&check_lorenz(&run, cfg.train_len, 1.0, 0.0)));
            }
        }
        Command::Online(args) => {
            let run = run_online(&cfg)?;
            write_windows(
                &cfg,
                "online.csv",
                &[
                    ("adapted".into(), &run.adapted),
                    ("frozen".into(), &run.frozen),
                    ("exact".into(), &run.reference),
                    ("control_adapted".into(), &run.control_adapted),
                    ("control_frozen".into(), &run.control_frozen),
                ],
            )?;
            println!(
                "final quarter: adapted {:?} dB, frozen {:?} dB, exact {:?} dB",
                run.adapted_db(),
                run.frozen_db(),
                run.reference_db()
            );
            if args.check {
                return Ok(report_checks(&check_online(&run, 1.0, 0.3)));
            }
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
            let report = gradcheck(&seeds, DEFAULT_TOLERANCE, None)?;
            for c in &report.cases {
                println!(
                    "seed {:>4}  {:<28} oracle {:.2e}  tape {:.2e}  ({} parameters)",
                    c.seed, c.label, c.oracle_error, c.tape_error, c.params_checked
                );
            }
            println!("max relative error {:.2e} (tolerance {:.0e})", report.max_error(), report.tolerance);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(k) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
