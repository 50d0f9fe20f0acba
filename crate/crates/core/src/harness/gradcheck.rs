use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::knet::{knet_filter_traced, SystemKnowledge};
use crate::nn::{Block, Dims, Fault, GainNetworkParams};
use crate::ssm::{generate_dataset, LinearModel, LorenzModel, StateSpaceModel, Trajectory};
use crate::training::{innovation_gradient_oracle, trajectory_loss, traced_data_loss, LossMode};
use crate::Result;

/// Central finite-difference step; paired with a fourth-order stencil.
const STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Largest [`relative_error`] over matching entries; 0 for no entries.
pub fn max_relative_error(analytic: &[Block], numeric: &[Block]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data.iter().zip(&n.data))
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

/// Fourth-order central differences of `loss` with respect to every entry.
pub fn numeric_gradient(params: &GainNetworkParams, loss: impl Fn(&GainNetworkParams) -> Result<f64>) -> Result<Vec<Block>> {
    let mut probe = params.clone();
    let mut grads: Vec<Block> = params.blocks().iter().map(Block::zeros_like).collect();
    for b in 0..grads.len() {
        for k in 0..grads[b].data.len() {
            let base = params.blocks()[b].data[k];
            let mut at = |delta: f64| -> Result<f64> {
                probe.blocks_mut()[b].data[k] = base + delta;
                loss(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * STEP)?, at(STEP)?, at(-STEP)?, at(-2.0 * STEP)?);
            probe.blocks_mut()[b].data[k] = base;
            grads[b].data[k] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * STEP);
        }
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub seed: u64,
    pub label: String,
    /// Analytic innovation gradient against finite differences.
    pub oracle_error: f64,
    /// Tape gradient of a 2-step unrolled filter against finite differences.
    pub tape_error: f64,
    pub params_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.oracle_error.max(c.tape_error)).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn oracle_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.random_range(1..=3);
    let n = rng.random_range(1..=3);
    let f = random_matrix(rng, m, m);
    let h = random_matrix(rng, n, m);
    let k = random_matrix(rng, m, n);
    let dy = DVector::from_column_slice(random_matrix(rng, n, 1).as_slice());
    let dm = DVector::from_column_slice(random_matrix(rng, n, 1).as_slice());
    let analytic = innovation_gradient_oracle(&f, &h, &k, &dy, &dm)?;
    let sq = |k: &DMatrix<f64>| (&dm - &h * &f * k * &dy).norm_squared();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let at = |d: f64| {
                let mut kk = k.clone();
                kk[(i, j)] += d;
                sq(&kk)
            };
            let fd = (-at(2.0 * STEP) + 8.0 * at(STEP) - 8.0 * at(-STEP) + at(-2.0 * STEP)) / (12.0 * STEP);
            worst = worst.max(relative_error(analytic[(i, j)], fd));
        }
    }
    Ok(worst)
}

/// A small model for seed `i`: linear shapes rotate through square and
/// non-square cases, every fifth seed uses the Lorenz dynamics.
fn case_model(i: usize, rng: &mut ChaCha8Rng) -> Result<(String, StateSpaceModel)> {
    if i % 5 == 4 {
        return Ok(("lorenz 3x3".into(), StateSpaceModel::Lorenz(LorenzModel::new(0.5, 0.5)?)));
    }
    let (m, n) = [(2, 2), (1, 1), (2, 1), (1, 2)][i % 5];
    let f = random_matrix(rng, m, m) * 0.9;
    let h = random_matrix(rng, n, m);
    let model = LinearModel::new(f, h, DMatrix::identity(m, m) * 0.5, DMatrix::identity(n, n) * 0.5)?;
    Ok((format!("linear {m}x{n}"), StateSpaceModel::Linear(model)))
}

fn tape_case<K: SystemKnowledge + ?Sized>(
    params: &GainNetworkParams,
    knowledge: &K,
    traj: &Trajectory,
    mode: LossMode,
    fault: Option<Fault>,
) -> Result<f64> {
    let mut traced = knet_filter_traced(params, knowledge, traj)?;
    if let Some(f) = fault {
        traced.tape.inject_fault(f);
    }
    let loss = traced_data_loss(&mut traced, traj, mode)?;
    let analytic = traced.tape.backward(loss)?;
    let numeric = numeric_gradient(params, |p| trajectory_loss(p, knowledge, traj, mode))?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs both gradient checks for each seed. `fault` corrupts a backward rule
/// of the tape, for testing that the check catches it.
pub fn gradcheck(seeds: &[u64], tolerance: f64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut cases = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let oracle_error = oracle_case(&mut rng)?;
        let (label, model) = case_model(i, &mut rng)?;
        let x0 = match &model {
            StateSpaceModel::Lorenz(_) => model.default_x0(),
            StateSpaceModel::Linear(_) => DVector::from_fn(model.state_dim(), |_, _| rng.random_range(-1.0..1.0)),
        };
        let traj = generate_dataset(&model, 1, 2, &x0, true, seed)?.trajectories.remove(0);
        let mut params = GainNetworkParams::init(Dims::for_model(model.state_dim(), model.obs_dim()), seed);
        // nonzero biases so their paths are exercised away from zero
        for b in params.blocks_mut().iter_mut().filter(|b| b.cols == 1) {
            b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let mode = if i % 2 == 0 { LossMode::Unsupervised } else { LossMode::Supervised };
        let tape_error = tape_case(&params, &model.knowledge(), &traj, mode, fault)?;
        cases.push(GradcheckCase {
            seed,
            label: format!("{label} {mode}"),
            oracle_error,
            tape_error,
            params_checked: params.num_params(),
        });
    }
    Ok(GradcheckReport { tolerance, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_parameter_set_passes_vacuously() {
        assert_eq!(max_relative_error(&[], &[]), 0.0);
        let report = GradcheckReport {
            tolerance: DEFAULT_TOLERANCE,
            cases: Vec::new(),
        };
        assert!(report.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 2.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn fresh_seeds_pass() {
        let report = gradcheck(&[101, 102, 103], DEFAULT_TOLERANCE, None).unwrap();
        assert!(report.passed(), "{:?}", report.cases);
        assert_eq!(report.cases.len(), 3);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let report = gradcheck(&[101], DEFAULT_TOLERANCE, Some(Fault::SigmoidBackwardScale(1.01))).unwrap();
        assert!(!report.passed());
        assert!(report.cases[0].oracle_error <= DEFAULT_TOLERANCE);
    }
}
