//! Losses, the analytic innovation gradient, offline mini-batch training and
//! online adaptation.
//!
//! Both losses are time averages plus `γ‖Θ‖²`:
//!
//! ```text
//! supervised    (1/T) Σ_t ‖x̂_t − x_t‖²            + γ‖Θ‖²
//! unsupervised  (1/T) Σ_t ‖ŷ_{t|t-1} − y_t‖²      + γ‖Θ‖²
//! ```
//!
//! The data term is differentiated on the tape; the regularizer's gradient
//! `2γΘ` is added directly.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::knet::{knet_run, knet_run_traced, KNetState, SystemKnowledge, TracedRun};
use crate::nn::{optimizer_step, Block, GainNetworkParams, OptimizerState};
use crate::ssm::Trajectory;
use crate::{to_db, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Supervised,
    Unsupervised,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(LossMode::Supervised),
            "unsupervised" => Ok(LossMode::Unsupervised),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Supervised => "supervised",
            LossMode::Unsupervised => "unsupervised",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: LossMode,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
    /// Rescale batch gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: LossMode::Unsupervised,
            gamma: 1e-4,
            batch_size: 32,
            epochs: 200,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 1,
            patience: Some(20),
            clip_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be a nonnegative number, got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={train_len}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Observations per update (`T̃`).
    pub window: usize,
    pub learning_rate: f64,
    pub steps_per_window: usize,
    pub gamma: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            window: 10,
            learning_rate: 1e-3,
            steps_per_window: 1,
            gamma: 0.0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.steps_per_window == 0 {
            return Err(Error::Config("window and steps_per_window must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("online learning rate must be positive and gamma nonnegative".into()));
        }
        Ok(())
    }
}

fn mean_sq_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(what, a.len(), b.len()));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty sequence")));
    }
    Ok((a - b).norm_squared() / a.nrows() as f64)
}

/// `(1/T)·Σ‖x̂_t − x_t‖² + γ‖Θ‖²`
pub fn supervised_loss(estimates: &DMatrix<f64>, truth: &DMatrix<f64>, params: &[Block], gamma: f64) -> Result<f64> {
    Ok(mean_sq_rows(estimates, truth, "supervised loss")? + gamma * blocks_sq_norm(params))
}

/// `(1/T)·Σ‖ŷ_{t|t-1} − y_t‖² + γ‖Θ‖²`
pub fn unsupervised_loss(y_priors: &DMatrix<f64>, observations: &DMatrix<f64>, params: &[Block], gamma: f64) -> Result<f64> {
    Ok(mean_sq_rows(y_priors, observations, "unsupervised loss")? + gamma * blocks_sq_norm(params))
}

fn blocks_sq_norm(blocks: &[Block]) -> f64 {
    blocks.iter().flat_map(|b| &b.data).map(|v| v * v).sum()
}

/// `∂‖Δy_t‖²/∂K_{t-1}` for `Δy_t = Δy_t⁻ − H·F·K_{t-1}·Δy_{t-1}`:
///
/// ```text
/// 2·Fᵀ·Hᵀ·(H·F·K_{t-1}·Δy_{t-1} − Δy_t⁻)·Δy_{t-1}ᵀ
/// ```
pub fn innovation_gradient_oracle(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    k_prev: &DMatrix<f64>,
    innov_prev: &DVector<f64>,
    innov_minus: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (m, n) = (f.nrows(), h.nrows());
    if f.ncols() != m {
        return Err(Error::dim("oracle F columns", m, f.ncols()));
    }
    if h.ncols() != m {
        return Err(Error::dim("oracle H columns", m, h.ncols()));
    }
    if k_prev.shape() != (m, n) {
        return Err(Error::dim("oracle gain entries", m * n, k_prev.len()));
    }
    if innov_prev.len() != n || innov_minus.len() != n {
        return Err(Error::dim("oracle innovations", n, innov_prev.len().max(innov_minus.len())));
    }
    let hf = h * f;
    let residual = &hf * k_prev * innov_prev - innov_minus;
    Ok(hf.transpose() * residual * innov_prev.transpose() * 2.0)
}

/// Data term of a trajectory's loss from a traced run, on the tape.
pub(crate) fn traced_data_loss(traced: &mut TracedRun<'_>, traj: &Trajectory, mode: LossMode) -> Result<crate::nn::Var> {
    let tape = &mut traced.tape;
    let mut terms = Vec::with_capacity(traced.steps.len());
    match mode {
        LossMode::Unsupervised => {
            for s in &traced.steps {
                terms.push(tape.sq_norm(s.innovation));
            }
        }
        LossMode::Supervised => {
            let states = traj
                .states
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("supervised loss needs a labeled trajectory".into()))?;
            for (t, s) in traced.steps.iter().enumerate() {
                let truth = tape.constant(states.row(t).iter().copied().collect());
                let err = tape.sub(s.x_post, truth)?;
                terms.push(tape.sq_norm(err));
            }
        }
    }
    let total = tape.sum(&terms)?;
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// Data term of the loss (no regularizer) and its parameter gradient.
pub fn loss_and_gradient<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    traj: &Trajectory,
    mode: LossMode,
) -> Result<(f64, Vec<Block>)> {
    let start = KNetState::initial(&traj.x0, knowledge, params);
    window_loss_and_gradient(params, knowledge, &start, traj, mode)
}

fn window_loss_and_gradient<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    start: &KNetState,
    traj: &Trajectory,
    mode: LossMode,
) -> Result<(f64, Vec<Block>)> {
    let mut traced = knet_run_traced(params, knowledge, start, &traj.observations)?;
    let loss = traced_data_loss(&mut traced, traj, mode)?;
    let value = traced.tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss ({value})")));
    }
    Ok((value, traced.tape.backward(loss)?))
}

/// Data term of the loss without tracing.
pub fn trajectory_loss<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    traj: &Trajectory,
    mode: LossMode,
) -> Result<f64> {
    let start = KNetState::initial(&traj.x0, knowledge, params);
    let run = knet_run(params, knowledge, &start, &traj.observations)?;
    match mode {
        LossMode::Unsupervised => {
            Ok(run.records.iter().map(|r| r.innovation.norm_squared()).sum::<f64>() / traj.len() as f64)
        }
        LossMode::Supervised => {
            let states = traj
                .states
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("supervised loss needs a labeled trajectory".into()))?;
            mean_sq_rows(&run.estimates, states, "supervised loss")
        }
    }
}

/// Mean data loss over trajectories.
pub fn mean_loss<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    trajs: &[Trajectory],
    mode: LossMode,
) -> Result<f64> {
    let losses: Vec<f64> = trajs
        .par_iter()
        .map(|t| trajectory_loss(params, knowledge, t, mode))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / trajs.len().max(1) as f64)
}

/// State MSE per component per step over labeled trajectories (linear scale).
pub fn knet_mse<K: SystemKnowledge + ?Sized>(params: &GainNetworkParams, knowledge: &K, trajs: &[Trajectory]) -> Result<f64> {
    let m = knowledge.state_dim() as f64;
    let per: Vec<(f64, usize)> = trajs
        .par_iter()
        .map(|t| {
            let sq = trajectory_loss(params, knowledge, t, LossMode::Supervised)? * t.len() as f64;
            Ok((sq, t.len()))
        })
        .collect::<Result<_>>()?;
    let (sq, steps) = per.iter().fold((0.0, 0usize), |(a, b), (s, n)| (a + s, b + n));
    Ok(sq / (steps as f64 * m))
}

/// Adds `2γΘ` and clips, returning the gradient norm before clipping.
fn finish_gradient(grads: &mut [Block], params: &[Block], gamma: f64, clip: Option<f64>) -> f64 {
    if gamma > 0.0 {
        for (g, p) in grads.iter_mut().zip(params) {
            g.data.iter_mut().zip(&p.data).for_each(|(g, p)| *g += 2.0 * gamma * p);
        }
    }
    let norm = blocks_sq_norm(grads).sqrt();
    if let Some(c) = clip {
        if norm > c {
            let s = c / norm;
            grads.iter_mut().flat_map(|g| &mut g.data).for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean batch loss of the epoch, regularizer included; the epoch-0 row
    /// is the loss of the initial parameters over the training set.
    pub train_loss: f64,
    /// Validation loss in the training mode, regularizer included
    /// (selection criterion).
    pub val_loss: Option<f64>,
    /// Validation state MSE in dB, when the validation set is labeled.
    pub val_mse_db: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// Parameters with the best validation loss.
    pub params: GainNetworkParams,
    /// Parameters after the last epoch run.
    pub final_params: GainNetworkParams,
    pub best_epoch: usize,
    pub curve: Vec<CurvePoint>,
    pub optimizer: OptimizerState,
    pub stopped_early: bool,
}

fn evaluate<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    validation: &[Trajectory],
    mode: LossMode,
    gamma: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    if validation.is_empty() {
        return Ok((None, None));
    }
    let loss = mean_loss(params, knowledge, validation, mode)? + gamma * params.sq_norm();
    let mse_db = if validation.iter().all(Trajectory::is_labeled) {
        Some(to_db(knet_mse(params, knowledge, validation)?))
    } else {
        None
    };
    Ok((Some(loss), mse_db))
}

/// Mini-batch training from `init`.
///
/// Each epoch shuffles the training set, averages per-trajectory losses over
/// batches of `batch_size` and takes one optimizer step per batch. Every
/// `eval_every` epochs the validation set is scored in the training mode;
/// the best-scoring parameters are returned. Validation labels, if present,
/// only feed the reported `val_mse_db`.
pub fn train_offline<K: SystemKnowledge + ?Sized>(
    train: &[Trajectory],
    validation: &[Trajectory],
    knowledge: &K,
    init: GainNetworkParams,
    cfg: &TrainingConfig,
) -> Result<TrainingOutcome> {
    cfg.validate(train.len())?;
    if cfg.mode == LossMode::Supervised && !train.iter().all(Trajectory::is_labeled) {
        return Err(Error::InvalidArgument("supervised training needs labeled trajectories".into()));
    }
    let mut params = init;
    let mut opt = OptimizerState::new(params.blocks(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial_loss = mean_loss(&params, knowledge, train, cfg.mode)? + cfg.gamma * params.sq_norm();
    let (val_loss, val_mse_db) = evaluate(&params, knowledge, validation, cfg.mode, cfg.gamma)?;
    let mut curve = vec![CurvePoint {
        epoch: 0,
        train_loss: initial_loss,
        val_loss,
        val_mse_db,
    }];
    let mut best = (val_loss.unwrap_or(initial_loss), 0usize, params.clone());
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let context = |e: Error| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}"));
            let results: Vec<(f64, Vec<Block>)> = batch
                .par_iter()
                .map(|&i| loss_and_gradient(&params, knowledge, &train[i], cfg.mode))
                .collect::<Result<_>>()
                .map_err(context)?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Block> = params.blocks().iter().map(Block::zeros_like).collect();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l * scale;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.data.iter_mut().zip(&gi.data).for_each(|(a, v)| *a += v * scale);
                }
            }
            loss += cfg.gamma * params.sq_norm();
            finish_gradient(&mut grads, params.blocks(), cfg.gamma, cfg.clip_norm);
            optimizer_step(&mut opt, params.blocks_mut(), &grads).map_err(context)?;
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / batches.len() as f64;
        let evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let (val_loss, val_mse_db) = if evaluate_now {
            evaluate(&params, knowledge, validation, cfg.mode, cfg.gamma)?
        } else {
            (None, None)
        };
        curve.push(CurvePoint {
            epoch,
            train_loss,
            val_loss,
            val_mse_db,
        });
        if evaluate_now {
            let score = val_loss.unwrap_or(train_loss);
            if score < best.0 {
                best = (score, epoch, params.clone());
            }
            if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    Ok(TrainingOutcome {
        params: best.2,
        final_params: params,
        best_epoch: best.1,
        curve,
        optimizer: opt,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub index: usize,
    /// Time index (1-based) of the window's last observation.
    pub end: usize,
    pub mean_innovation_sq: f64,
    /// State MSE per component over the window, when the stream is labeled.
    pub state_mse: Option<f64>,
    /// Whether the parameters were updated after this window.
    pub updated: bool,
}

#[derive(Clone, Debug)]
pub struct OnlineOutcome {
    pub estimates: DMatrix<f64>,
    pub windows: Vec<WindowReport>,
    /// `‖Θ‖` after every window.
    pub param_norms: Vec<f64>,
    pub params: GainNetworkParams,
    /// Windows whose update was rejected as non-finite.
    pub skipped: usize,
}

/// Filters `stream` while adapting the parameters every `window` steps on
/// the innovation loss of the window just seen.
///
/// The state and hidden state enter each window as constants, so gradients
/// stop at the window boundary. A trailing partial window is filtered
/// without an update.
pub fn train_online<K: SystemKnowledge + ?Sized>(
    stream: &Trajectory,
    pretrained: &GainNetworkParams,
    knowledge: &K,
    cfg: &OnlineConfig,
) -> Result<OnlineOutcome> {
    cfg.validate()?;
    let m = knowledge.state_dim();
    let mut params = pretrained.clone();
    let mut opt = OptimizerState::new(params.blocks(), cfg.learning_rate);
    let mut st = KNetState::initial(&stream.x0, knowledge, &params);
    let mut estimates = DMatrix::zeros(stream.len(), m);
    let mut windows = Vec::new();
    let mut param_norms = Vec::new();
    let mut skipped = 0;

    let full = stream.len() / cfg.window;
    for w in 0..full {
        let (a, b) = (w * cfg.window, (w + 1) * cfg.window);
        let chunk = stream.window(a, b);
        let mut traced = knet_run_traced(&params, knowledge, &st, &chunk.observations)?;
        estimates.rows_mut(a, cfg.window).copy_from(&traced.run.estimates);
        let mean_innovation_sq =
            traced.run.records.iter().map(|r| r.innovation.norm_squared()).sum::<f64>() / cfg.window as f64;
        let state_mse = stream
            .states
            .as_ref()
            .map(|s| (&traced.run.estimates - s.rows(a, cfg.window)).norm_squared() / (cfg.window * m) as f64);
        let next = traced.run.final_state.clone();

        let loss = traced_data_loss(&mut traced, &chunk, LossMode::Unsupervised)?;
        let mut first = if traced.tape.scalar(loss).is_finite() {
            Some(traced.tape.backward(loss)?)
        } else {
            None
        };
        drop(traced);
        let mut updated = true;
        for _ in 0..cfg.steps_per_window {
            let grads = match first.take() {
                Some(g) => Ok(g),
                None => window_loss_and_gradient(&params, knowledge, &st, &chunk, LossMode::Unsupervised).map(|(_, g)| g),
            };
            let applied = grads.and_then(|mut g| {
                finish_gradient(&mut g, params.blocks(), cfg.gamma, None);
                optimizer_step(&mut opt, params.blocks_mut(), &g)
            });
            if let Err(e) = applied {
                if !e.is_numerical() {
                    return Err(e);
                }
                updated = false;
                break;
            }
        }
        if !updated {
            skipped += 1;
        }
        windows.push(WindowReport {
            index: w,
            end: b,
            mean_innovation_sq,
            state_mse,
            updated,
        });
        param_norms.push(params.sq_norm().sqrt());
        st = next;
    }

    let done = full * cfg.window;
    if done < stream.len() {
        let rest = stream.window(done, stream.len());
        let run = knet_run(&params, knowledge, &st, &rest.observations)?;
        estimates.rows_mut(done, rest.len()).copy_from(&run.estimates);
    }

    Ok(OnlineOutcome {
        estimates,
        windows,
        param_norms,
        params,
        skipped,
    })
}
