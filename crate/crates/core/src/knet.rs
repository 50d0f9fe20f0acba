//! The learned-gain filter.
//!
//! Each step keeps the Kalman filter's flow
//!
//! ```text
//! x̂_{t|t-1} = f(x̂_{t-1})         ŷ_{t|t-1} = H·x̂_{t|t-1}
//! Δy_t      = y_t − ŷ_{t|t-1}     x̂_t       = x̂_{t|t-1} + K_t·Δy_t
//! ```
//!
//! but `K_t` comes from `fc_in → ReLU → GRU → fc_out` fed with two features:
//! the observation difference `y_t − y_{t-1}` and the innovation `Δy_t`, each
//! divided by its own running RMS. The filter sees the dynamics through
//! [`SystemKnowledge`], which has no way to reach the noise covariances.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::nn::{fc_forward, gru_forward, GainNetworkParams, GruVars, MatId, Param, Tape, Var};
use crate::ssm::{Knowledge, LorenzDynamics, Trajectory};
use crate::{Error, Result};

/// Lower bound of the running RMS used to normalize features.
pub const RMS_FLOOR: f64 = 1e-8;
/// Smallest update rate of the running mean square (effective window of
/// 100 steps once the cumulative average has warmed up).
pub const NORMALIZER_MIN_RATE: f64 = 0.01;
/// A learned-gain run aborts once the estimate grows past this norm.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// What the learned filter knows about the system: the dynamics and `H`.
pub trait SystemKnowledge: Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn observation_matrix(&self) -> &DMatrix<f64>;
    /// `Some(F)` when the dynamics are linear.
    fn linear_transition(&self) -> Option<&DMatrix<f64>>;
    /// `f(x)` and, if requested, `∂f/∂x`.
    fn propagate(&self, x: &[f64], jacobian: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearKnowledge {
    f: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl LinearKnowledge {
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>) -> Self {
        LinearKnowledge { f, h }
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
}

impl SystemKnowledge for LinearKnowledge {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn observation_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    fn linear_transition(&self) -> Option<&DMatrix<f64>> {
        Some(&self.f)
    }

    fn propagate(&self, x: &[f64], jacobian: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        let v = &self.f * DVector::from_column_slice(x);
        Ok((v.as_slice().to_vec(), jacobian.then(|| self.f.clone())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzKnowledge {
    dynamics: LorenzDynamics,
    h: DMatrix<f64>,
}

impl LorenzKnowledge {
    pub fn new(dynamics: LorenzDynamics, h: DMatrix<f64>) -> Self {
        LorenzKnowledge { dynamics, h }
    }
}

impl SystemKnowledge for LorenzKnowledge {
    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn observation_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    fn linear_transition(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn propagate(&self, x: &[f64], jacobian: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        if x.len() != 3 {
            return Err(Error::dim("lorenz propagate", 3, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Lorenz state".into()));
        }
        let (v, j) = self.dynamics.propagate_with_jacobian(&Vector3::new(x[0], x[1], x[2]));
        let jac = jacobian.then(|| DMatrix::from_iterator(3, 3, j.iter().copied()));
        Ok((v.as_slice().to_vec(), jac))
    }
}

impl SystemKnowledge for Knowledge {
    fn state_dim(&self) -> usize {
        match self {
            Knowledge::Linear(k) => k.state_dim(),
            Knowledge::Lorenz(k) => k.state_dim(),
        }
    }

    fn obs_dim(&self) -> usize {
        match self {
            Knowledge::Linear(k) => k.obs_dim(),
            Knowledge::Lorenz(k) => k.obs_dim(),
        }
    }

    fn observation_matrix(&self) -> &DMatrix<f64> {
        match self {
            Knowledge::Linear(k) => k.observation_matrix(),
            Knowledge::Lorenz(k) => k.observation_matrix(),
        }
    }

    fn linear_transition(&self) -> Option<&DMatrix<f64>> {
        match self {
            Knowledge::Linear(k) => k.linear_transition(),
            Knowledge::Lorenz(k) => k.linear_transition(),
        }
    }

    fn propagate(&self, x: &[f64], jacobian: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        match self {
            Knowledge::Linear(k) => k.propagate(x, jacobian),
            Knowledge::Lorenz(k) => k.propagate(x, jacobian),
        }
    }
}

/// Filter state between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct KNetState {
    /// `x̂_{t-1}`
    pub x_post: DVector<f64>,
    /// `x̂_{t-2}`
    pub x_post_prev: DVector<f64>,
    /// `y_{t-1}`, or `H·x₀` before the first observation.
    pub y_prev: DVector<f64>,
    /// GRU hidden state.
    pub h: Vec<f64>,
    /// Running mean squares of the two input features.
    pub obs_diff_ms: f64,
    pub innovation_ms: f64,
    /// Steps taken so far.
    pub t: usize,
}

impl KNetState {
    pub fn initial<K: SystemKnowledge + ?Sized>(x0: &DVector<f64>, knowledge: &K, params: &GainNetworkParams) -> Self {
        KNetState {
            x_post: x0.clone(),
            x_post_prev: x0.clone(),
            y_prev: knowledge.observation_matrix() * x0,
            h: vec![0.0; params.dims.d_g],
            obs_diff_ms: 0.0,
            innovation_ms: 0.0,
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KNetStepRecord {
    pub x_prior: DVector<f64>,
    pub y_prior: DVector<f64>,
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub x_post: DVector<f64>,
}

/// Tape handles of one step's recorded quantities.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub x_prior: Var,
    pub y_prior: Var,
    pub innovation: Var,
    pub gain: Var,
    pub x_post: Var,
}

#[derive(Clone, Debug)]
pub struct KNetRun {
    pub estimates: DMatrix<f64>,
    pub records: Vec<KNetStepRecord>,
    pub final_state: KNetState,
}

/// A run recorded on a tape, ready for a loss and a backward sweep.
pub struct TracedRun<'p> {
    pub tape: Tape<'p>,
    pub steps: Vec<StepVars>,
    pub run: KNetRun,
}

#[derive(Clone, Copy)]
struct StateVars {
    x_post: Var,
    y_prev: Var,
    h: Var,
    obs_diff_ms: Var,
    innovation_ms: Var,
}

struct NetVars {
    fc_in_w: Var,
    fc_in_b: Var,
    gru: GruVars,
    fc_out_w: Var,
    fc_out_b: Var,
}

fn net_vars(tape: &mut Tape<'_>) -> NetVars {
    let mut p = |q: Param| tape.param(q.index());
    NetVars {
        fc_in_w: p(Param::FcInW),
        fc_in_b: p(Param::FcInB),
        gru: GruVars {
            w_z: p(Param::GruWz),
            b_z: p(Param::GruBz),
            w_r: p(Param::GruWr),
            b_r: p(Param::GruBr),
            w_h: p(Param::GruWh),
            b_h: p(Param::GruBh),
        },
        fc_out_w: p(Param::FcOutW),
        fc_out_b: p(Param::FcOutB),
    }
}

struct Fixed {
    f: Option<MatId>,
    h: MatId,
}

fn register<K: SystemKnowledge + ?Sized>(tape: &mut Tape<'_>, knowledge: &K) -> Fixed {
    let f = knowledge.linear_transition().map(|f| tape.add_matrix(f));
    let h = tape.add_matrix(knowledge.observation_matrix());
    tape.pin_matrices();
    Fixed { f, h }
}

fn state_on_tape(tape: &mut Tape<'_>, st: &KNetState) -> StateVars {
    StateVars {
        x_post: tape.constant(st.x_post.as_slice().to_vec()),
        y_prev: tape.constant(st.y_prev.as_slice().to_vec()),
        h: tape.constant(st.h.clone()),
        obs_diff_ms: tape.constant(vec![st.obs_diff_ms]),
        innovation_ms: tape.constant(vec![st.innovation_ms]),
    }
}

/// Updates a running mean square with the feature `f` and returns
/// `(f / max(rms, floor), new mean square)`.
fn normalize(tape: &mut Tape<'_>, f: Var, ms: Var, t: usize) -> Result<(Var, Var)> {
    let k = tape.value(f).len() as f64;
    let rate = (1.0 / t as f64).max(NORMALIZER_MIN_RATE);
    let energy = tape.sq_norm(f);
    let ms_new = tape.combine(ms, 1.0 - rate, energy, rate / k)?;
    let rms = tape.sqrt_floor(ms_new, RMS_FLOOR)?;
    let out = tape.div_scalar(f, rms)?;
    Ok((out, ms_new))
}

struct Features {
    input: Var,
    innovation: Var,
    y: Var,
    obs_diff_ms: Var,
    innovation_ms: Var,
}

fn features_on_tape(tape: &mut Tape<'_>, st: &StateVars, y_prior: Var, y: &[f64], t: usize) -> Result<Features> {
    let y = tape.constant(y.to_vec());
    let obs_diff = tape.sub(y, st.y_prev)?;
    let innovation = tape.sub(y, y_prior)?;
    let (f1, obs_diff_ms) = normalize(tape, obs_diff, st.obs_diff_ms, t)?;
    let (f2, innovation_ms) = normalize(tape, innovation, st.innovation_ms, t)?;
    Ok(Features {
        input: tape.concat(f1, f2),
        innovation,
        y,
        obs_diff_ms,
        innovation_ms,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_on_tape<K: SystemKnowledge + ?Sized>(
    tape: &mut Tape<'_>,
    net: &NetVars,
    fixed: &Fixed,
    knowledge: &K,
    st: &StateVars,
    y: &[f64],
    t: usize,
    trace: bool,
) -> Result<(StateVars, StepVars)> {
    let m = knowledge.state_dim();
    let x_prior = match fixed.f {
        Some(f) => tape.linear(f, st.x_post)?,
        None => {
            let (value, jac) = knowledge.propagate(tape.value(st.x_post), trace)?;
            match jac {
                Some(j) => tape.mapped(st.x_post, value, &j)?,
                None => tape.constant(value),
            }
        }
    };
    let y_prior = tape.linear(fixed.h, x_prior)?;
    let feats = features_on_tape(tape, st, y_prior, y, t)?;
    let hidden_in = fc_forward(tape, net.fc_in_w, net.fc_in_b, feats.input, "fc_in")?;
    let hidden_in = tape.relu(hidden_in);
    let h = gru_forward(tape, &net.gru, st.h, hidden_in)?;
    let gain = fc_forward(tape, net.fc_out_w, net.fc_out_b, h, "fc_out")
        .map_err(|_| Error::NonFinite(format!("gain at step {t}")))?;
    let correction = tape.matvec(gain, feats.innovation, m)?;
    let x_post = tape.add(x_prior, correction)?;
    let norm = tape.value(x_post).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= DIVERGENCE_NORM) {
        return Err(Error::Diverged { step: t, norm });
    }
    Ok((
        StateVars {
            x_post,
            y_prev: feats.y,
            h,
            obs_diff_ms: feats.obs_diff_ms,
            innovation_ms: feats.innovation_ms,
        },
        StepVars {
            x_prior,
            y_prior,
            innovation: feats.innovation,
            gain,
            x_post,
        },
    ))
}

fn vector(tape: &Tape<'_>, v: Var) -> DVector<f64> {
    DVector::from_column_slice(tape.value(v))
}

fn record(tape: &Tape<'_>, s: &StepVars, m: usize, n: usize) -> KNetStepRecord {
    KNetStepRecord {
        x_prior: vector(tape, s.x_prior),
        y_prior: vector(tape, s.y_prior),
        innovation: vector(tape, s.innovation),
        gain: DMatrix::from_row_slice(m, n, tape.value(s.gain)),
        x_post: vector(tape, s.x_post),
    }
}

fn next_state(tape: &Tape<'_>, prev: &KNetState, s: &StateVars) -> KNetState {
    KNetState {
        x_post: vector(tape, s.x_post),
        x_post_prev: prev.x_post.clone(),
        y_prev: vector(tape, s.y_prev),
        h: tape.value(s.h).to_vec(),
        obs_diff_ms: tape.scalar(s.obs_diff_ms),
        innovation_ms: tape.scalar(s.innovation_ms),
        t: prev.t + 1,
    }
}

fn check_inputs<K: SystemKnowledge + ?Sized>(params: &GainNetworkParams, knowledge: &K, st: &KNetState, obs_cols: usize) -> Result<()> {
    let (m, n) = (knowledge.state_dim(), knowledge.obs_dim());
    if params.dims.m != m || params.dims.n != n {
        return Err(Error::Inconsistent(format!(
            "network built for m={}, n={} used with m={m}, n={n}",
            params.dims.m, params.dims.n
        )));
    }
    if st.x_post.len() != m {
        return Err(Error::dim("knet state x_post", m, st.x_post.len()));
    }
    if st.h.len() != params.dims.d_g {
        return Err(Error::dim("knet hidden state", params.dims.d_g, st.h.len()));
    }
    if obs_cols != n {
        return Err(Error::dim("knet observations", n, obs_cols));
    }
    Ok(())
}

/// The two normalized input features for observation `y` (state untouched).
pub fn knet_features<K: SystemKnowledge + ?Sized>(knowledge: &K, st: &KNetState, y: &DVector<f64>) -> Result<Vec<f64>> {
    let empty = [];
    let mut tape = Tape::new(&empty);
    let fixed = register(&mut tape, knowledge);
    let vars = state_on_tape(&mut tape, st);
    let x_prior = match fixed.f {
        Some(f) => tape.linear(f, vars.x_post)?,
        None => {
            let (value, _) = knowledge.propagate(st.x_post.as_slice(), false)?;
            tape.constant(value)
        }
    };
    let y_prior = tape.linear(fixed.h, x_prior)?;
    let feats = features_on_tape(&mut tape, &vars, y_prior, y.as_slice(), st.t + 1)?;
    Ok(tape.value(feats.input).to_vec())
}

/// One filtering step without gradient tracking.
pub fn knet_step<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    st: &KNetState,
    y: &DVector<f64>,
) -> Result<(KNetState, KNetStepRecord)> {
    check_inputs(params, knowledge, st, y.len())?;
    let mut tape = Tape::new(params.blocks());
    let fixed = register(&mut tape, knowledge);
    let net = net_vars(&mut tape);
    let vars = state_on_tape(&mut tape, st);
    let (next, step) = step_on_tape(&mut tape, &net, &fixed, knowledge, &vars, y.as_slice(), st.t + 1, false)?;
    let rec = record(&tape, &step, knowledge.state_dim(), knowledge.obs_dim());
    Ok((next_state(&tape, st, &next), rec))
}

/// Runs over `observations` (rows = time) from `start` without tracing.
pub fn knet_run<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    start: &KNetState,
    observations: &DMatrix<f64>,
) -> Result<KNetRun> {
    check_inputs(params, knowledge, start, observations.ncols())?;
    let (m, n) = (knowledge.state_dim(), knowledge.obs_dim());
    let mut tape = Tape::new(params.blocks());
    let fixed = register(&mut tape, knowledge);
    let mut st = start.clone();
    let mut estimates = DMatrix::zeros(observations.nrows(), m);
    let mut records = Vec::with_capacity(observations.nrows());
    let mut y = vec![0.0; n];
    for row in 0..observations.nrows() {
        tape.clear();
        let net = net_vars(&mut tape);
        let vars = state_on_tape(&mut tape, &st);
        y.iter_mut().enumerate().for_each(|(j, v)| *v = observations[(row, j)]);
        let (next, step) = step_on_tape(&mut tape, &net, &fixed, knowledge, &vars, &y, st.t + 1, false)?;
        let rec = record(&tape, &step, m, n);
        estimates.row_mut(row).copy_from(&rec.x_post.transpose());
        records.push(rec);
        st = next_state(&tape, &st, &next);
    }
    Ok(KNetRun {
        estimates,
        records,
        final_state: st,
    })
}

/// Filters a whole trajectory from its known `x₀`.
pub fn knet_filter<K: SystemKnowledge + ?Sized>(params: &GainNetworkParams, knowledge: &K, traj: &Trajectory) -> Result<KNetRun> {
    let start = KNetState::initial(&traj.x0, knowledge, params);
    knet_run(params, knowledge, &start, &traj.observations)
}

/// Like [`knet_run`] but keeps every operation on one tape; the incoming
/// state is treated as a constant.
pub fn knet_run_traced<'p, K: SystemKnowledge + ?Sized>(
    params: &'p GainNetworkParams,
    knowledge: &K,
    start: &KNetState,
    observations: &DMatrix<f64>,
) -> Result<TracedRun<'p>> {
    check_inputs(params, knowledge, start, observations.ncols())?;
    let (m, n) = (knowledge.state_dim(), knowledge.obs_dim());
    let mut tape = Tape::new(params.blocks());
    let fixed = register(&mut tape, knowledge);
    let net = net_vars(&mut tape);
    let mut vars = state_on_tape(&mut tape, start);
    let mut st = start.clone();
    let mut steps = Vec::with_capacity(observations.nrows());
    let mut estimates = DMatrix::zeros(observations.nrows(), m);
    let mut records = Vec::with_capacity(observations.nrows());
    let mut y = vec![0.0; n];
    for row in 0..observations.nrows() {
        y.iter_mut().enumerate().for_each(|(j, v)| *v = observations[(row, j)]);
        let (next, step) = step_on_tape(&mut tape, &net, &fixed, knowledge, &vars, &y, st.t + 1, true)?;
        let rec = record(&tape, &step, m, n);
        estimates.row_mut(row).copy_from(&rec.x_post.transpose());
        records.push(rec);
        st = next_state(&tape, &st, &next);
        steps.push(step);
        vars = next;
    }
    Ok(TracedRun {
        tape,
        steps,
        run: KNetRun {
            estimates,
            records,
            final_state: st,
        },
    })
}

pub fn knet_filter_traced<'p, K: SystemKnowledge + ?Sized>(
    params: &'p GainNetworkParams,
    knowledge: &K,
    traj: &Trajectory,
) -> Result<TracedRun<'p>> {
    let start = KNetState::initial(&traj.x0, knowledge, params);
    knet_run_traced(params, knowledge, &start, &traj.observations)
}

/// Same columns as the exact-filter CSV plus `y_prior_*` and `innovation_*`.
pub fn write_knet_csv<W: std::io::Write>(out: &mut W, run: &KNetRun) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    let Some(first) = run.records.first() else {
        return Ok(());
    };
    let (m, n) = first.gain.shape();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..m).map(|i| format!("x_post_{i}")));
    header.extend((0..m * n).map(|i| format!("gain_{}_{}", i / n, i % n)));
    header.extend((0..n).map(|i| format!("innovation_{i}")));
    header.extend((0..n).map(|i| format!("y_prior_{i}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (t, rec) in run.records.iter().enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(rec.x_post.iter().map(|v| v.to_string()));
        row.extend(rec.gain.transpose().iter().map(|v| v.to_string()));
        row.extend(rec.innovation.iter().map(|v| v.to_string()));
        row.extend(rec.y_prior.iter().map(|v| v.to_string()));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}
