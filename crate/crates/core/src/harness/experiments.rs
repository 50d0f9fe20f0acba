use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{noise_from_variances_db, ExperimentConfig};
use super::metrics::{mse_linear, MetricReport, MetricRow};
use crate::filters::{ekf_filter, kf_filter};
use crate::knet::{knet_filter, SystemKnowledge};
use crate::nn::{Dims, GainNetworkParams};
use crate::ssm::{generate_dataset, StateSpaceModel, Trajectory};
use crate::training::{train_offline, train_online, CurvePoint, LossMode, TrainingConfig, WindowReport};
use crate::{to_db, Error, Result};

/// Independent seed for one purpose of an experiment.
pub fn sub_seed(seed: u64, purpose: u64) -> u64 {
    seed ^ purpose.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const TRAIN_DATA: u64 = 1;
const LONG_DATA: u64 = 2;
const INIT: u64 = 3;
const STREAM: u64 = 4;
const CONTROL: u64 = 5;

/// Train, validation and test sets drawn from one model at one length.
pub struct Splits {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

pub fn make_splits(cfg: &ExperimentConfig, model: &StateSpaceModel) -> Result<Splits> {
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let ds = generate_dataset(
        model,
        total,
        cfg.train_len,
        &model.default_x0(),
        true,
        sub_seed(cfg.seed, TRAIN_DATA),
    )?;
    let mut all = ds.trajectories;
    let test = all.split_off(cfg.n_train + cfg.n_val);
    let val = all.split_off(cfg.n_train);
    Ok(Splits { train: all, val, test })
}

/// The seeded starting point shared by every training run of an experiment.
pub fn initial_params(cfg: &ExperimentConfig, model: &StateSpaceModel) -> GainNetworkParams {
    let mut params = GainNetworkParams::init(Dims::for_model(model.state_dim(), model.obs_dim()), sub_seed(cfg.seed, INIT));
    params.scale_output(cfg.init_gain_scale);
    params
}

/// Estimates of the exact filter for the model (KF or EKF), with the time
/// per trajectory. Failed trajectories are dropped and reported.
fn baseline(model: &StateSpaceModel, trajs: &[Trajectory]) -> (Vec<Option<DMatrix<f64>>>, f64, Option<String>) {
    let start = Instant::now();
    let runs: Vec<Result<DMatrix<f64>>> = trajs
        .par_iter()
        .map(|t| match model {
            StateSpaceModel::Linear(m) => kf_filter(m, t).map(|r| r.estimates),
            StateSpaceModel::Lorenz(m) => ekf_filter(m, t).map(|r| r.estimates),
        })
        .collect();
    let per = start.elapsed().as_secs_f64() / trajs.len().max(1) as f64;
    let failures: Vec<String> = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("trajectory {i}: {e}")))
        .collect();
    let error = (!failures.is_empty()).then(|| format!("{} of {} failed; first {}", failures.len(), trajs.len(), failures[0]));
    (runs.into_iter().map(Result::ok).collect(), per, error)
}

pub fn baseline_name(model: &StateSpaceModel) -> &'static str {
    match model {
        StateSpaceModel::Linear(_) => "kf",
        StateSpaceModel::Lorenz(_) => "ekf",
    }
}

fn truths(trajs: &[Trajectory]) -> Result<Vec<DMatrix<f64>>> {
    trajs
        .iter()
        .map(|t| {
            t.states
                .clone()
                .ok_or_else(|| Error::InvalidArgument("evaluation needs labeled trajectories".into()))
        })
        .collect()
}

/// Learned-filter estimates and the time per trajectory.
pub fn knet_estimates<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    trajs: &[Trajectory],
) -> Result<(Vec<DMatrix<f64>>, f64)> {
    let start = Instant::now();
    let est: Vec<DMatrix<f64>> = trajs
        .par_iter()
        .map(|t| knet_filter(params, knowledge, t).map(|r| r.estimates))
        .collect::<Result<_>>()?;
    Ok((est, start.elapsed().as_secs_f64() / trajs.len().max(1) as f64))
}

struct RowKey {
    inv_r2_db: f64,
    nu_db: f64,
    t: usize,
}

fn row(key: &RowKey, estimator: &str, mse: Result<f64>, runtime_s: f64, n: usize, error: Option<String>) -> MetricRow {
    let (mse_db, zero_error, error) = match mse {
        Ok(v) => (to_db(v), v == 0.0, error),
        Err(e) => (f64::NAN, false, Some(error.map_or(e.to_string(), |p| format!("{p}; {e}")))),
    };
    MetricRow {
        inv_r2_db: key.inv_r2_db,
        nu_db: key.nu_db,
        estimator: estimator.to_string(),
        mse_db,
        zero_error,
        runtime_s,
        t: key.t,
        n,
        error,
    }
}

/// Scores the learned filter and the exact baseline on shared trajectories.
pub fn compare_on(
    model: &StateSpaceModel,
    params: Option<&GainNetworkParams>,
    trajs: &[Trajectory],
    inv_r2_db: f64,
    nu_db: f64,
) -> Result<MetricReport> {
    let truth = truths(trajs)?;
    let key = RowKey {
        inv_r2_db,
        nu_db,
        t: trajs.first().map_or(0, Trajectory::len),
    };
    let mut report = MetricReport::default();
    let (base, base_time, base_err) = baseline(model, trajs);
    let (kept_est, kept_truth): (Vec<_>, Vec<_>) = base
        .into_iter()
        .zip(&truth)
        .filter_map(|(e, x)| e.map(|e| (e, x.clone())))
        .unzip();
    report.rows.push(row(
        &key,
        baseline_name(model),
        mse_linear(&kept_est, &kept_truth),
        base_time,
        kept_est.len(),
        base_err,
    ));
    if let Some(params) = params {
        let knowledge = model.knowledge();
        let (mse, time) = match knet_estimates(params, &knowledge, trajs) {
            Ok((est, time)) => (mse_linear(&est, &truth), time),
            Err(e) => (Err(e), 0.0),
        };
        report.rows.push(row(&key, "kalmannet", mse, time, trajs.len(), None));
    }
    Ok(report)
}

/// Outcome of training at one grid point.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub inv_r2_db: f64,
    pub nu_db: f64,
    pub params: Option<GainNetworkParams>,
    pub curve: Vec<CurvePoint>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CurveRun {
    pub report: MetricReport,
    pub points: Vec<GridPoint>,
}

fn train_point(cfg: &ExperimentConfig, inv_r2_db: f64, mode: LossMode) -> Result<(GridPoint, MetricReport)> {
    let noise = cfg.noise(inv_r2_db)?;
    let model = cfg.model_with(noise)?;
    let splits = make_splits(cfg, &model)?;
    let training = TrainingConfig {
        mode,
        ..cfg.training_at(&noise)
    };
    let knowledge = model.knowledge();
    let outcome = match mode {
        LossMode::Unsupervised => {
            let train: Vec<Trajectory> = splits.train.iter().map(Trajectory::unlabeled).collect();
            train_offline(&train, &splits.val, &knowledge, initial_params(cfg, &model), &training)
        }
        LossMode::Supervised => train_offline(&splits.train, &splits.val, &knowledge, initial_params(cfg, &model), &training),
    };
    let nu_db = cfg.nu_db;
    match outcome {
        Ok(out) => {
            let report = compare_on(&model, Some(&out.params), &splits.test, inv_r2_db, nu_db)?;
            Ok((
                GridPoint {
                    inv_r2_db,
                    nu_db,
                    params: Some(out.params),
                    curve: out.curve,
                    error: None,
                },
                report,
            ))
        }
        Err(e) => {
            let mut report = compare_on(&model, None, &splits.test, inv_r2_db, nu_db)?;
            report.rows.push(row(
                &RowKey {
                    inv_r2_db,
                    nu_db,
                    t: cfg.train_len,
                },
                "kalmannet",
                Err(e),
                0.0,
                splits.test.len(),
                None,
            ));
            let error = report.rows.last().and_then(|r| r.error.clone());
            Ok((
                GridPoint {
                    inv_r2_db,
                    nu_db,
                    params: None,
                    curve: Vec::new(),
                    error,
                },
                report,
            ))
        }
    }
}

/// Trains the learned filter at every grid point and scores it against the
/// exact filter on shared test data. A failed grid point is recorded in its
/// row and the sweep continues.
pub fn run_mse_curve(cfg: &ExperimentConfig) -> Result<CurveRun> {
    let results: Vec<(GridPoint, MetricReport)> = cfg
        .inv_r2_db
        .par_iter()
        .map(|&inv| train_point(cfg, inv, cfg.training.mode))
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    let mut points = Vec::new();
    for (p, r) in results {
        report.extend(r);
        points.push(p);
    }
    Ok(CurveRun { report, points })
}

/// Scores trained filters at every length in `eval_lens`, next to the exact
/// filter and a zero-gain network. Lengths other than the training length
/// use `n_long` fresh trajectories.
pub fn run_generalization(cfg: &ExperimentConfig, trained: &[GridPoint]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for point in trained {
        let model = cfg.model_at(point.inv_r2_db)?;
        let test = if cfg.eval_lens.contains(&cfg.train_len) {
            Some(make_splits(cfg, &model)?.test)
        } else {
            None
        };
        for &len in &cfg.eval_lens {
            let trajs = match &test {
                Some(t) if len == cfg.train_len => t.clone(),
                _ => {
                    generate_dataset(
                        &model,
                        cfg.n_long,
                        len,
                        &model.default_x0(),
                        true,
                        sub_seed(cfg.seed, LONG_DATA),
                    )?
                    .trajectories
                }
            };
            let mut r = compare_on(&model, point.params.as_ref(), &trajs, point.inv_r2_db, point.nu_db)?;
            let dead = GainNetworkParams::zeros(Dims::for_model(model.state_dim(), model.obs_dim()));
            let (est, time) = knet_estimates(&dead, &model.knowledge(), &trajs)?;
            let key = RowKey {
                inv_r2_db: point.inv_r2_db,
                nu_db: point.nu_db,
                t: len,
            };
            r.rows.push(row(&key, "zero_gain", mse_linear(&est, &truths(&trajs)?), time, trajs.len(), None));
            report.extend(r);
        }
    }
    Ok(report)
}

/// Supervised and unsupervised learning curves from the same initialization,
/// training order and validation data, with the exact filter's validation
/// MSE as reference.
#[derive(Clone, Debug)]
pub struct ConvergenceRun {
    pub inv_r2_db: f64,
    pub baseline_db: f64,
    pub supervised: Vec<CurvePoint>,
    pub unsupervised: Vec<CurvePoint>,
}

impl ConvergenceRun {
    /// First epoch whose validation MSE is within `margin_db` of the
    /// baseline.
    pub fn crossing(curve: &[CurvePoint], baseline_db: f64, margin_db: f64) -> Option<usize> {
        curve
            .iter()
            .find(|p| p.val_mse_db.is_some_and(|v| v <= baseline_db + margin_db))
            .map(|p| p.epoch)
    }

    pub fn last_db(curve: &[CurvePoint]) -> Option<f64> {
        curve.iter().rev().find_map(|p| p.val_mse_db)
    }
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceRun> {
    let inv = cfg.inv_r2_db[0];
    let noise = cfg.noise(inv)?;
    let model = cfg.model_with(noise)?;
    let splits = make_splits(cfg, &model)?;
    let knowledge = model.knowledge();
    let init = initial_params(cfg, &model);
    let base = compare_on(&model, None, &splits.val, inv, cfg.nu_db)?;
    let baseline_db = base.rows[0].mse_db;
    let unlabeled: Vec<Trajectory> = splits.train.iter().map(Trajectory::unlabeled).collect();
    let run = |mode: LossMode, train: &[Trajectory]| {
        let training = TrainingConfig {
            mode,
            ..cfg.training_at(&noise)
        };
        train_offline(train, &splits.val, &knowledge, init.clone(), &training).map(|o| o.curve)
    };
    let (supervised, unsupervised) = rayon::join(
        || run(LossMode::Supervised, &splits.train),
        || run(LossMode::Unsupervised, &unlabeled),
    );
    Ok(ConvergenceRun {
        inv_r2_db: inv,
        baseline_db,
        supervised: supervised?,
        unsupervised: unsupervised?,
    })
}

/// Unsupervised training on the Lorenz model, scored against the EKF with
/// per-trajectory inference times.
pub fn run_lorenz(cfg: &ExperimentConfig) -> Result<CurveRun> {
    if !matches!(cfg.model, super::config::ModelSpec::Lorenz { .. }) {
        return Err(Error::Config("the lorenz experiment needs model.kind = lorenz".into()));
    }
    run_mse_curve(cfg)
}

/// Windowed online adaptation next to the frozen pretrained filter and the
/// exact filter with the true noise, plus a control stream from the
/// pretraining distribution.
#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub pretrained: GainNetworkParams,
    pub pretrain_curve: Vec<CurvePoint>,
    pub adapted: Vec<WindowReport>,
    pub frozen: Vec<WindowReport>,
    pub reference: Vec<WindowReport>,
    pub control_adapted: Vec<WindowReport>,
    pub control_frozen: Vec<WindowReport>,
    pub skipped: usize,
}

/// Mean state MSE over the last quarter of the windows, in dB.
pub fn final_quarter_db(windows: &[WindowReport]) -> Option<f64> {
    let start = windows.len() - windows.len() / 4;
    let tail = &windows[start.min(windows.len())..];
    let values: Vec<f64> = tail.iter().filter_map(|w| w.state_mse).collect();
    (!values.is_empty() && values.len() == tail.len()).then(|| to_db(values.iter().sum::<f64>() / values.len() as f64))
}

impl OnlineRun {
    pub fn adapted_db(&self) -> Option<f64> {
        final_quarter_db(&self.adapted)
    }

    pub fn frozen_db(&self) -> Option<f64> {
        final_quarter_db(&self.frozen)
    }

    pub fn reference_db(&self) -> Option<f64> {
        final_quarter_db(&self.reference)
    }

    /// Adapted minus frozen on the control stream, in dB.
    pub fn control_degradation_db(&self) -> Option<f64> {
        Some(final_quarter_db(&self.control_adapted)? - final_quarter_db(&self.control_frozen)?)
    }
}

/// Per-window statistics of a fixed filter's output on a labeled stream.
pub fn windows_of(stream: &Trajectory, estimates: &DMatrix<f64>, y_priors: Option<&DMatrix<f64>>, window: usize) -> Vec<WindowReport> {
    let m = estimates.ncols();
    (0..stream.len() / window)
        .map(|w| {
            let a = w * window;
            let state_mse = stream
                .states
                .as_ref()
                .map(|s| (estimates.rows(a, window) - s.rows(a, window)).norm_squared() / (window * m) as f64);
            let mean_innovation_sq = y_priors
                .map(|p| (p.rows(a, window) - stream.observations.rows(a, window)).norm_squared() / window as f64)
                .unwrap_or(f64::NAN);
            WindowReport {
                index: w,
                end: a + window,
                mean_innovation_sq,
                state_mse,
                updated: false,
            }
        })
        .collect()
}

fn y_priors_of(records: impl Iterator<Item = DVector<f64>>, n: usize) -> DMatrix<f64> {
    let rows: Vec<_> = records.map(|v| v.transpose()).collect();
    if rows.is_empty() {
        return DMatrix::zeros(0, n);
    }
    DMatrix::from_rows(&rows)
}

pub fn run_online(cfg: &ExperimentConfig) -> Result<OnlineRun> {
    let oc = &cfg.online;
    let pre_noise = noise_from_variances_db(oc.q2_db, oc.pretrain_r2_db)?;
    let stream_noise = noise_from_variances_db(oc.q2_db, oc.stream_r2_db)?;
    let pre_model = cfg.model_with(pre_noise)?;
    let stream_model = cfg.model_with(stream_noise)?;
    let knowledge = pre_model.knowledge();

    let splits = make_splits(cfg, &pre_model)?;
    let training = TrainingConfig {
        mode: oc.pretrain_mode,
        ..cfg.training_at(&pre_noise)
    };
    let train: Vec<Trajectory> = match oc.pretrain_mode {
        LossMode::Supervised => splits.train.clone(),
        LossMode::Unsupervised => splits.train.iter().map(Trajectory::unlabeled).collect(),
    };
    let pre = train_offline(&train, &splits.val, &knowledge, initial_params(cfg, &pre_model), &training)?;
    let params = pre.params;

    let draw = |model: &StateSpaceModel, purpose: u64| -> Result<Trajectory> {
        let ds = generate_dataset(model, 1, oc.stream_len, &model.default_x0(), true, sub_seed(cfg.seed, purpose))?;
        Ok(ds.trajectories.into_iter().next().expect("one trajectory"))
    };
    let stream = draw(&stream_model, STREAM)?;
    let control = draw(&pre_model, CONTROL)?;
    let window = oc.config.window;
    let n = pre_model.obs_dim();

    let adapt = train_online(&stream, &params, &knowledge, &oc.config)?;
    let control_adapt = train_online(&control, &params, &knowledge, &oc.config)?;
    let frozen_windows = |traj: &Trajectory| -> Result<Vec<WindowReport>> {
        let run = knet_filter(&params, &knowledge, traj)?;
        let priors = y_priors_of(run.records.iter().map(|r| r.y_prior.clone()), n);
        Ok(windows_of(traj, &run.estimates, Some(&priors), window))
    };
    let reference = match &stream_model {
        StateSpaceModel::Linear(m) => {
            let run = kf_filter(m, &stream)?;
            let priors = y_priors_of(run.records.iter().map(|r| r.y_prior.clone()), n);
            windows_of(&stream, &run.estimates, Some(&priors), window)
        }
        StateSpaceModel::Lorenz(m) => {
            let run = ekf_filter(m, &stream)?;
            let priors = y_priors_of(run.records.iter().map(|r| r.y_prior.clone()), n);
            windows_of(&stream, &run.estimates, Some(&priors), window)
        }
    };

    Ok(OnlineRun {
        frozen: frozen_windows(&stream)?,
        control_frozen: frozen_windows(&control)?,
        pretrained: params,
        pretrain_curve: pre.curve,
        adapted: adapt.windows,
        reference,
        control_adapted: control_adapt.windows,
        skipped: adapt.skipped + control_adapt.skipped,
    })
}
