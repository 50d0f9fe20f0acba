use nalgebra::DMatrix;

use super::params::Block;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a fixed matrix registered on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatId(usize);

/// Deliberate corruption of a backward rule, for negative-control tests of
/// the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    SigmoidBackwardScale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    /// `w` holds a row-major `rows × cols` matrix.
    MatVec { w: Var, x: Var, cols: usize },
    /// Value supplied by the caller; backward multiplies by the registered
    /// Jacobian's transpose.
    Mapped { x: Var, jac: MatId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    SqNorm(Var),
    Sum(Vec<Var>),
    /// `ca·a + cb·b`.
    Combine { a: Var, ca: f64, b: Var, cb: f64 },
    /// `max(sqrt(x), floor)` on a scalar.
    SqrtFloor { x: Var, floor: f64 },
    /// Vector divided by a scalar node.
    DivScalar { x: Var, s: Var },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

struct Mat {
    cols: usize,
    data: Vec<f64>,
}

/// Record of primitive operations with their forward values.
///
/// Parameter nodes borrow their values from the parameter blocks, so a tape
/// spanning a long trajectory only stores activations.
pub struct Tape<'p> {
    params: &'p [Block],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    mats: Vec<Mat>,
    /// Number of matrices that survive [`Tape::clear`].
    pinned_mats: usize,
    fault: Option<Fault>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Block]) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            mats: Vec::new(),
            pinned_mats: 0,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and every matrix registered after the last
    /// [`Tape::pin_matrices`].
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.mats.truncate(self.pinned_mats);
        self.param_vars.iter_mut().for_each(|v| *v = None);
    }

    /// Keeps all matrices registered so far across [`Tape::clear`].
    pub fn pin_matrices(&mut self) {
        self.pinned_mats = self.mats.len();
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i].data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value, false)
    }

    /// The node for parameter block `index`; created once per tape.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(Op::Param(index), Vec::new(), true);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn param_rows(&self, index: usize) -> usize {
        self.params[index].rows
    }

    pub fn add_matrix(&mut self, m: &DMatrix<f64>) -> MatId {
        self.mats.push(Mat {
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        });
        MatId(self.mats.len() - 1)
    }

    fn dims_check(&self, what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::dim(what, expected, got));
        }
        Ok(())
    }

    /// `W·x` with `W` a row-major `rows × cols` node.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize) -> Result<Var> {
        let wv = self.value(w);
        let xv = self.value(x);
        let cols = xv.len();
        self.dims_check("matvec weights", rows * cols, wv.len())?;
        let out: Vec<f64> = wv.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        let ng = self.needs(w) || self.needs(x);
        Ok(self.push(Op::MatVec { w, x, cols }, out, ng))
    }

    /// `M·x` for a registered matrix.
    pub fn linear(&mut self, m: MatId, x: Var) -> Result<Var> {
        let mat = &self.mats[m.0];
        let xv = self.value(x);
        self.dims_check("linear map input", mat.cols, xv.len())?;
        let out = mat.data.chunks_exact(mat.cols).map(|row| dot(row, xv)).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::Mapped { x, jac: m }, out, ng))
    }

    /// A nonlinear map `f(x)` evaluated by the caller, with Jacobian `jac`.
    pub fn mapped(&mut self, x: Var, value: Vec<f64>, jac: &DMatrix<f64>) -> Result<Var> {
        self.dims_check("mapped jacobian rows", value.len(), jac.nrows())?;
        self.dims_check("mapped jacobian cols", self.value(x).len(), jac.ncols())?;
        let ng = self.needs(x);
        let id = if ng { self.add_matrix(jac) } else { MatId(usize::MAX) };
        Ok(self.push(Op::Mapped { x, jac: id }, value, ng))
    }

    fn zip(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        self.dims_check(what, av.len(), bv.len())?;
        Ok(av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn combine(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Result<Var> {
        let v = self.zip(a, b, "combine", |x, y| ca * x + cb * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Combine { a, ca, b, cb }, v, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| c * x).collect();
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Concat(a, b), v, ng)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(Error::dim("slice end", xv.len(), start + len));
        }
        let v = xv[start..start + len].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Slice { x, start }, v, ng))
    }

    pub fn sq_norm(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|a| a * a).sum();
        let ng = self.needs(x);
        self.push(Op::SqNorm(x), vec![v], ng)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &x in xs {
            let v = self.value(x);
            self.dims_check("sum operand", 1, v.len())?;
            total += v[0];
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::Sum(xs.to_vec()), vec![total], ng))
    }

    pub fn sqrt_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        self.dims_check("sqrt operand", 1, xv.len())?;
        let v = xv[0].max(0.0).sqrt().max(floor);
        let ng = self.needs(x);
        Ok(self.push(Op::SqrtFloor { x, floor }, vec![v], ng))
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        self.dims_check("divisor", 1, sv.len())?;
        let d = sv[0];
        let v = self.value(x).iter().map(|a| a / d).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Op::DivScalar { x, s }, v, ng))
    }

    /// Reverse sweep from the scalar `loss`; returns `∂loss/∂block` for every
    /// parameter block (zero for blocks the loss does not touch).
    pub fn backward(&self, loss: Var) -> Result<Vec<Block>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss node is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be a scalar, has {} entries",
                self.value(loss).len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        let sigmoid_scale = match self.fault {
            Some(Fault::SigmoidBackwardScale(s)) => s,
            None => 1.0,
        };

        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param(_) | Op::Const) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let out = &node.value;
            match &node.op {
                Op::Const | Op::Param(_) => unreachable!(),
                Op::MatVec { w, x, cols } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    if self.needs(*w) {
                        let gw = acc(&mut grads, *w, wv.len());
                        for (row, gi) in gw.chunks_exact_mut(*cols).zip(&g) {
                            if *gi != 0.0 {
                                row.iter_mut().zip(xv).for_each(|(a, x)| *a += gi * x);
                            }
                        }
                    }
                    if self.needs(*x) {
                        let gx = acc(&mut grads, *x, xv.len());
                        for (row, gi) in wv.chunks_exact(*cols).zip(&g) {
                            if *gi != 0.0 {
                                gx.iter_mut().zip(row).for_each(|(a, w)| *a += gi * w);
                            }
                        }
                    }
                }
                Op::Mapped { x, jac } => {
                    let mat = &self.mats[jac.0];
                    let gx = acc(&mut grads, *x, mat.cols);
                    for (row, gi) in mat.data.chunks_exact(mat.cols).zip(&g) {
                        gx.iter_mut().zip(row).for_each(|(a, j)| *a += gi * j);
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if self.needs(v) {
                            axpy(acc(&mut grads, v, g.len()), sign, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if self.needs(v) {
                            axpy(acc(&mut grads, v, g.len()), sign, &g);
                        }
                    }
                }
                Op::Combine { a, ca, b, cb } => {
                    for (v, c) in [(*a, *ca), (*b, *cb)] {
                        if self.needs(v) {
                            axpy(acc(&mut grads, v, g.len()), c, &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = acc(&mut grads, *a, g.len());
                        for k in 0..g.len() {
                            ga[k] += g[k] * bv[k];
                        }
                    }
                    if self.needs(*b) {
                        let gb = acc(&mut grads, *b, g.len());
                        for k in 0..g.len() {
                            gb[k] += g[k] * av[k];
                        }
                    }
                }
                Op::Scale(a, c) => axpy(acc(&mut grads, *a, g.len()), *c, &g),
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += sigmoid_scale * g[k] * out[k] * (1.0 - out[k]);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
                Op::Relu(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if out[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let la = self.value(*a).len();
                    if self.needs(*a) {
                        axpy(acc(&mut grads, *a, la), 1.0, &g[..la]);
                    }
                    if self.needs(*b) {
                        axpy(acc(&mut grads, *b, g.len() - la), 1.0, &g[la..]);
                    }
                }
                Op::Slice { x, start } => {
                    let lx = self.value(*x).len();
                    let gx = acc(&mut grads, *x, lx);
                    axpy(&mut gx[*start..*start + g.len()], 1.0, &g);
                }
                Op::SqNorm(x) => {
                    let xv = self.value(*x);
                    axpy(acc(&mut grads, *x, xv.len()), 2.0 * g[0], xv);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if self.needs(x) {
                            acc(&mut grads, x, 1)[0] += g[0];
                        }
                    }
                }
                Op::SqrtFloor { x, floor } => {
                    let xv = self.value(*x)[0];
                    if xv > 0.0 && xv.sqrt() > *floor {
                        acc(&mut grads, *x, 1)[0] += g[0] * 0.5 / out[0];
                    }
                }
                Op::DivScalar { x, s } => {
                    let (xv, d) = (self.value(*x), self.value(*s)[0]);
                    if self.needs(*x) {
                        axpy(acc(&mut grads, *x, xv.len()), 1.0 / d, &g);
                    }
                    if self.needs(*s) {
                        let dot_gx: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                        acc(&mut grads, *s, 1)[0] -= dot_gx / (d * d);
                    }
                }
            }
        }

        let mut out: Vec<Block> = self.params.iter().map(Block::zeros_like).collect();
        for (index, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if v.0 < grads.len() && !grads[v.0].is_empty() {
                    out[index].data.copy_from_slice(&grads[v.0]);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let g = &mut grads[v.0];
    if g.is_empty() {
        g.resize(len, 0.0);
    }
    g
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            lanes[k] += x[k] * y[k];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
