//! A small eager reverse-mode tape over f64 matrices. Values are computed
//! as nodes are pushed; `backward` walks the tape once and accumulates
//! vector-Jacobian products. Batches ride in the row dimension, so the
//! heavy lifting is plain GEMM.
//!
//! The op set is exactly what the model rollouts need: affine layers,
//! pointwise nonlinearities, the arithmetic of the vehicle models, guarded
//! square roots for distances, and the one-sided penalty kink. Subgradients
//! at kinks are zero (relu, abs, clamp edges), which keeps exactly-satisfied
//! constraints from pushing.

use ndarray::Array2;

/// Handle of one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Tid, Tid),
    /// (B x D) + (1 x D), broadcast over rows.
    AddRow(Tid, Tid),
    /// (B x D) * (1 x D), broadcast over rows.
    MulRow(Tid, Tid),
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Div(Tid, Tid),
    Scale(Tid, f64),
    Offset(Tid),
    Sin(Tid),
    Cos(Tid),
    Tanh(Tid),
    Elu(Tid),
    Relu(Tid),
    Square(Tid),
    /// sqrt with a bounded backward slope near zero.
    SqrtGuard(Tid),
    Abs(Tid),
    /// Wraps values to (-pi, pi]; unit slope.
    WrapAngle(Tid),
    Clamp(Tid, f64, f64),
    /// Elementwise minimum; ties route the gradient to the first argument.
    Min(Tid, Tid),
    /// Horizontal concatenation of (B x 1) columns.
    ConcatCols(Vec<Tid>),
    /// Extract column j as (B x 1).
    Col(Tid, usize),
    MeanAll(Tid),
    SumAll(Tid),
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array2<f64>>,
    needs_grad: Vec<bool>,
}

/// Gradients of one backward pass, indexed by tape handle.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: Tid) -> Option<&Array2<f64>> {
        self.grads[t.0].as_ref()
    }

    /// Owned gradient, zeros when the node was never reached.
    pub fn take_or_zeros(&mut self, t: Tid, shape: (usize, usize)) -> Array2<f64> {
        self.grads[t.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn unary_map(v: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    v.mapv(f)
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, t: Tid) -> &Array2<f64> {
        &self.values[t.0]
    }

    /// Scalar value of a (1 x 1) node.
    pub fn scalar(&self, t: Tid) -> f64 {
        debug_assert_eq!(self.values[t.0].dim(), (1, 1));
        self.values[t.0][[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Tid {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        Tid(self.ops.len() - 1)
    }

    fn ng(&self, t: Tid) -> bool {
        self.needs_grad[t.0]
    }

    /// Differentiable input (parameters, or anything a gradient should flow
    /// into).
    pub fn leaf(&mut self, value: Array2<f64>) -> Tid {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Tid {
        self.push(Op::Leaf, value, false)
    }

    /// (B x 1) constant column from per-element values.
    pub fn constant_col(&mut self, values: &[f64]) -> Tid {
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        self.constant(arr)
    }

    /// (1 x 1) constant.
    pub fn constant_scalar(&mut self, v: f64) -> Tid {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.values[a.0].dot(&self.values[b.0]);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn add_row(&mut self, a: Tid, row: Tid) -> Tid {
        let v = &self.values[a.0] + &self.values[row.0];
        let g = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, g)
    }

    pub fn mul_row(&mut self, a: Tid, row: Tid) -> Tid {
        let v = &self.values[a.0] * &self.values[row.0];
        let g = self.ng(a) || self.ng(row);
        self.push(Op::MulRow(a, row), v, g)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] + &self.values[b.0];
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] - &self.values[b.0];
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] * &self.values[b.0];
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] / &self.values[b.0];
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn scale(&mut self, a: Tid, k: f64) -> Tid {
        let v = self.values[a.0].mapv(|x| x * k);
        let g = self.ng(a);
        self.push(Op::Scale(a, k), v, g)
    }

    pub fn offset(&mut self, a: Tid, k: f64) -> Tid {
        let v = self.values[a.0].mapv(|x| x + k);
        let g = self.ng(a);
        self.push(Op::Offset(a), v, g)
    }

    pub fn sin(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], f64::sin);
        let g = self.ng(a);
        self.push(Op::Sin(a), v, g)
    }

    pub fn cos(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], f64::cos);
        let g = self.ng(a);
        self.push(Op::Cos(a), v, g)
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], f64::tanh);
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn elu(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], |x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let g = self.ng(a);
        self.push(Op::Elu(a), v, g)
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], |x| x.max(0.0));
        let g = self.ng(a);
        self.push(Op::Relu(a), v, g)
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], |x| x * x);
        let g = self.ng(a);
        self.push(Op::Square(a), v, g)
    }

    pub fn sqrt_guard(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], f64::sqrt);
        let g = self.ng(a);
        self.push(Op::SqrtGuard(a), v, g)
    }

    pub fn abs(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], f64::abs);
        let g = self.ng(a);
        self.push(Op::Abs(a), v, g)
    }

    pub fn wrap_angle(&mut self, a: Tid) -> Tid {
        let v = unary_map(&self.values[a.0], crate::scenario::wrap_angle);
        let g = self.ng(a);
        self.push(Op::WrapAngle(a), v, g)
    }

    pub fn clamp(&mut self, a: Tid, lo: f64, hi: f64) -> Tid {
        let v = unary_map(&self.values[a.0], |x| x.clamp(lo, hi));
        let g = self.ng(a);
        self.push(Op::Clamp(a, lo, hi), v, g)
    }

    pub fn min(&mut self, a: Tid, b: Tid) -> Tid {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let mut v = va.clone();
        v.zip_mut_with(vb, |x, y| *x = x.min(*y));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Min(a, b), v, g)
    }

    pub fn concat_cols(&mut self, cols: &[Tid]) -> Tid {
        let b = self.values[cols[0].0].nrows();
        let mut v = Array2::zeros((b, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            debug_assert_eq!(self.values[c.0].dim(), (b, 1));
            v.column_mut(j).assign(&self.values[c.0].column(0));
        }
        let g = cols.iter().any(|c| self.ng(*c));
        self.push(Op::ConcatCols(cols.to_vec()), v, g)
    }

    pub fn col(&mut self, a: Tid, j: usize) -> Tid {
        let v = self.values[a.0].column(j).to_owned().insert_axis(ndarray::Axis(1));
        let g = self.ng(a);
        self.push(Op::Col(a, j), v, g)
    }

    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let m = self.values[a.0].mean().unwrap();
        let g = self.ng(a);
        self.push(Op::MeanAll(a), Array2::from_elem((1, 1), m), g)
    }

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s = self.values[a.0].sum();
        let g = self.ng(a);
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), s), g)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Tid) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        debug_assert_eq!(self.values[loss.0].dim(), (1, 1));
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = grads[i].take().unwrap();
            let send = |t: Tid, contrib: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.needs_grad[t.0] {
                    return;
                }
                match &mut grads[t.0] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad[a.0] {
                        let da = g.dot(&self.values[b.0].t());
                        send(*a, da, &mut grads);
                    }
                    if self.needs_grad[b.0] {
                        let db = self.values[a.0].t().dot(&g);
                        send(*b, db, &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs_grad[row.0] {
                        let dr = g
                            .sum_axis(ndarray::Axis(0))
                            .insert_axis(ndarray::Axis(0));
                        send(*row, dr, &mut grads);
                    }
                    send(*a, g.clone(), &mut grads);
                }
                Op::MulRow(a, row) => {
                    if self.needs_grad[a.0] {
                        send(*a, &g * &self.values[row.0], &mut grads);
                    }
                    if self.needs_grad[row.0] {
                        let dr = (&g * &self.values[a.0])
                            .sum_axis(ndarray::Axis(0))
                            .insert_axis(ndarray::Axis(0));
                        send(*row, dr, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.mapv(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.needs_grad[a.0] {
                        send(*a, &g * &self.values[b.0], &mut grads);
                    }
                    if self.needs_grad[b.0] {
                        send(*b, &g * &self.values[a.0], &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs_grad[a.0] {
                        send(*a, &g / &self.values[b.0], &mut grads);
                    }
                    if self.needs_grad[b.0] {
                        let vb = &self.values[b.0];
                        let va = &self.values[a.0];
                        let db = &g * &(-va / (vb * vb));
                        send(*b, db, &mut grads);
                    }
                }
                Op::Scale(a, k) => send(*a, g.mapv(|x| x * k), &mut grads),
                Op::Offset(a) => send(*a, g.clone(), &mut grads),
                Op::Sin(a) => {
                    let d = unary_map(&self.values[a.0], f64::cos);
                    send(*a, &g * &d, &mut grads);
                }
                Op::Cos(a) => {
                    let d = unary_map(&self.values[a.0], |x| -x.sin());
                    send(*a, &g * &d, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = self.values[i].mapv(|y| 1.0 - y * y);
                    send(*a, &g * &d, &mut grads);
                }
                Op::Elu(a) => {
                    let d = self.values[i].mapv(|y| if y > 0.0 { 1.0 } else { y + 1.0 });
                    send(*a, &g * &d, &mut grads);
                }
                Op::Relu(a) => {
                    let d = self.values[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    send(*a, &g * &d, &mut grads);
                }
                Op::Square(a) => {
                    let d = self.values[a.0].mapv(|x| 2.0 * x);
                    send(*a, &g * &d, &mut grads);
                }
                Op::SqrtGuard(a) => {
                    let d = self.values[i].mapv(|y| 0.5 / y.max(1e-6));
                    send(*a, &g * &d, &mut grads);
                }
                Op::Abs(a) => {
                    let d = self.values[a.0].mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    send(*a, &g * &d, &mut grads);
                }
                Op::WrapAngle(a) => send(*a, g.clone(), &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let d = self.values[a.0].mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    send(*a, &g * &d, &mut grads);
                }
                Op::Min(a, b) => {
                    let va = &self.values[a.0];
                    let vb = &self.values[b.0];
                    if self.needs_grad[a.0] {
                        let mut da = g.clone();
                        ndarray::Zip::from(&mut da).and(va).and(vb).for_each(|x, p, q| {
                            if p > q {
                                *x = 0.0;
                            }
                        });
                        send(*a, da, &mut grads);
                    }
                    if self.needs_grad[b.0] {
                        let mut db = g.clone();
                        ndarray::Zip::from(&mut db).and(va).and(vb).for_each(|x, p, q| {
                            if p <= q {
                                *x = 0.0;
                            }
                        });
                        send(*b, db, &mut grads);
                    }
                }
                Op::ConcatCols(cols) => {
                    for (j, c) in cols.iter().enumerate() {
                        if self.needs_grad[c.0] {
                            let dc = g.column(j).to_owned().insert_axis(ndarray::Axis(1));
                            send(*c, dc, &mut grads);
                        }
                    }
                }
                Op::Col(a, j) => {
                    if self.needs_grad[a.0] {
                        let mut da = Array2::zeros(self.values[a.0].dim());
                        da.column_mut(*j).assign(&g.column(0));
                        send(*a, da, &mut grads);
                    }
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.values[a.0].dim();
                    let k = g[[0, 0]] / (r * c) as f64;
                    send(*a, Array2::from_elem((r, c), k), &mut grads);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.values[a.0].dim();
                    send(*a, Array2::from_elem((r, c), g[[0, 0]]), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
