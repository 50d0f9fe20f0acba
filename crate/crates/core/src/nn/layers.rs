use super::tape::{Tape, Var};
use crate::{Error, Result};

fn finite(tape: &Tape<'_>, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{layer} output")))
    }
}

/// Affine map `W·x + b`; `w` is row-major with `rows == len(b)`.
pub fn fc_forward(tape: &mut Tape<'_>, w: Var, b: Var, x: Var, layer: &str) -> Result<Var> {
    let rows = tape.value(b).len();
    let wx = tape.matvec(w, x, rows)?;
    let out = tape.add(wx, b)?;
    finite(tape, out, layer)
}

/// Parameter nodes of one GRU cell. Weights act on `[h; x]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// ```text
/// z  = σ(W_z·[h; x] + b_z)
/// r  = σ(W_r·[h; x] + b_r)
/// h̃  = tanh(W_h·[r⊙h; x] + b_h)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
pub fn gru_forward(tape: &mut Tape<'_>, p: &GruVars, h: Var, x: Var) -> Result<Var> {
    let rows = tape.value(h).len();
    let hx = tape.concat(h, x);
    let z_pre = tape.matvec(p.w_z, hx, rows)?;
    let z_pre = tape.add(z_pre, p.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.matvec(p.w_r, hx, rows)?;
    let r_pre = tape.add(r_pre, p.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let rhx = tape.concat(rh, x);
    let c_pre = tape.matvec(p.w_h, rhx, rows)?;
    let c_pre = tape.add(c_pre, p.b_h)?;
    let cand = tape.tanh(c_pre);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    let out = tape.add(h, step)?;
    finite(tape, out, "gru")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Block {
        Block {
            name: name.into(),
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    fn gru_blocks(rng: &mut ChaCha8Rng, dg: usize, dx: usize, zero: bool) -> Vec<Block> {
        let mut blocks = Vec::new();
        for gate in ["z", "r", "h"] {
            blocks.push(random_block(rng, &format!("w_{gate}"), dg, dg + dx));
            blocks.push(random_block(rng, &format!("b_{gate}"), dg, 1));
        }
        if zero {
            blocks.iter_mut().for_each(|b| b.data.iter_mut().for_each(|v| *v = 0.0));
        }
        blocks
    }

    fn vars(tape: &mut Tape<'_>) -> GruVars {
        GruVars {
            w_z: tape.param(0),
            b_z: tape.param(1),
            w_r: tape.param(2),
            b_r: tape.param(3),
            w_h: tape.param(4),
            b_h: tape.param(5),
        }
    }

    /// Straight-line reference GRU.
    fn reference_gru(blocks: &[Block], h: &[f64], x: &[f64]) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let dg = h.len();
        let hx: Vec<f64> = h.iter().chain(x).copied().collect();
        let affine = |w: &Block, b: &Block, input: &[f64], i: usize| -> f64 {
            b.data[i] + (0..input.len()).map(|j| w.data[i * input.len() + j] * input[j]).sum::<f64>()
        };
        let z: Vec<f64> = (0..dg).map(|i| sig(affine(&blocks[0], &blocks[1], &hx, i))).collect();
        let r: Vec<f64> = (0..dg).map(|i| sig(affine(&blocks[2], &blocks[3], &hx, i))).collect();
        let rhx: Vec<f64> = (0..dg).map(|i| r[i] * h[i]).chain(x.iter().copied()).collect();
        (0..dg)
            .map(|i| {
                let c = affine(&blocks[4], &blocks[5], &rhx, i).tanh();
                (1.0 - z[i]) * h[i] + z[i] * c
            })
            .collect()
    }

    #[test]
    fn zero_affine_is_zero() {
        let params = vec![Block::zeros("w", 3, 2), Block::zeros("b", 3, 1)];
        let mut tape = Tape::new(&params);
        let x = tape.constant(vec![4.0, -9.0]);
        let (w, b) = (tape.param(0), tape.param(1));
        let y = fc_forward(&mut tape, w, b, x, "fc").unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gru_halves_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = gru_blocks(&mut rng, 4, 3, true);
        let mut tape = Tape::new(&params);
        let p = vars(&mut tape);
        let h = tape.constant(vec![1.0, -2.0, 0.5, 8.0]);
        let x = tape.constant(vec![3.0, 3.0, 3.0]);
        let out = gru_forward(&mut tape, &p, h, x).unwrap();
        assert_eq!(tape.value(out), &[0.5, -1.0, 0.25, 4.0]);
    }

    #[test]
    fn gru_matches_reference_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let params = gru_blocks(&mut rng, 5, 3, false);
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new(&params);
            let p = vars(&mut tape);
            let hv = tape.constant(h.clone());
            let xv = tape.constant(x.clone());
            let out = gru_forward(&mut tape, &p, hv, xv).unwrap();
            let expected = reference_gru(&params, &h, &x);
            for (a, b) in tape.value(out).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_output_names_layer() {
        let params = vec![
            Block {
                name: "w".into(),
                rows: 1,
                cols: 1,
                data: vec![f64::INFINITY],
            },
            Block::zeros("b", 1, 1),
        ];
        let mut tape = Tape::new(&params);
        let x = tape.constant(vec![0.0]);
        let (w, b) = (tape.param(0), tape.param(1));
        match fc_forward(&mut tape, w, b, x, "fc_in") {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("fc_in")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_step_gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = gru_blocks(&mut rng, 3, 2, false);
        let xs = [vec![0.3, -0.7], vec![1.1, 0.2]];
        let loss_of = |blocks: &[Block]| -> (f64, Vec<Block>) {
            let mut tape = Tape::new(blocks);
            let p = vars(&mut tape);
            let mut h = tape.constant(vec![0.1, -0.2, 0.3]);
            for x in &xs {
                let xv = tape.constant(x.clone());
                h = gru_forward(&mut tape, &p, h, xv).unwrap();
            }
            let loss = tape.sq_norm(h);
            (tape.scalar(loss), tape.backward(loss).unwrap())
        };
        let (_, grads) = loss_of(&params);
        for (bi, block) in params.iter().enumerate() {
            for k in 0..block.len() {
                let mut up = params.clone();
                let mut dn = params.clone();
                up[bi].data[k] += 1e-6;
                dn[bi].data[k] -= 1e-6;
                let fd = (loss_of(&up).0 - loss_of(&dn).0) / 2e-6;
                let g = grads[bi].data[k];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - g).abs() < 1e-9, "{} [{k}]: fd {fd} vs {g}", block.name);
            }
        }
    }
}
