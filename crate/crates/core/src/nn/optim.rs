use super::params::Block;
use crate::{Error, Result};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Block>,
    pub second: Vec<Block>,
}

impl OptimizerState {
    /// Decays 0.9/0.999, epsilon 1e-8.
    pub fn new(params: &[Block], learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(Block::zeros_like).collect(),
            second: params.iter().map(Block::zeros_like).collect(),
        }
    }
}

/// One bias-corrected Adam update in place.
///
/// Gradients are checked before anything is touched, so a rejected step
/// leaves both parameters and moments unchanged.
pub fn optimizer_step(opt: &mut OptimizerState, params: &mut [Block], grads: &[Block]) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.first.len() {
        return Err(Error::dim("optimizer blocks", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Inconsistent(format!("gradient block {} has the wrong size", p.name)));
        }
        if let Some(pos) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at entry {pos}", p.name)));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.first).zip(&mut opt.second) {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = opt.beta1 * m.data[k] + (1.0 - opt.beta1) * gk;
            v.data[k] = opt.beta2 * v.data[k] + (1.0 - opt.beta2) * gk * gk;
            let m_hat = m.data[k] / c1;
            let v_hat = v.data[k] / c2;
            p.data[k] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
