//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass; parameters are
//! borrowed, never copied, and carry a *slot* number that identifies them in
//! the returned [`Gradients`]. Everything is a 2-D array: vectors are `1 x n`
//! rows, scalars `1 x 1`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type: `f32` for training, `f64` for checks.
pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, F> {
    Owned(Array2<F>),
    Borrowed(&'p Array2<F>),
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    OneMinus(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var, F),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<F>,
        inv_std: Vec<F>,
    },
    Gather(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Mean(Var),
    Reshape(Var),
    PairAdd(Var, Var),
    BceWithLogits(Var, Array2<F>),
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-slot parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new(n_slots: usize) -> Self {
        Gradients {
            slots: vec![None; n_slots],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&Array2<F>> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    /// Add `other` slot-wise. Slot counts must agree.
    pub fn accumulate(&mut self, other: Gradients<F>) {
        assert_eq!(self.slots.len(), other.slots.len(), "gradient slot count mismatch");
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => *a += &b,
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> F {
        let sq: F = self
            .slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&x| x * x).sum::<F>())
            .sum();
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Recorder for one forward pass.
pub struct Tape<'p, F: Scalar> {
    nodes: Vec<Node<'p, F>>,
}

impl<'p, F: Scalar> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn f<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A borrowed parameter whose gradient is reported under `slot`.
    pub fn param(&mut self, value: &'p Array2<F>, slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param(slot),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiply each row of `a` by the matching entry of the `T x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let out = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| F::one() - x);
        let ng = self.ng(a);
        self.push(out, Op::OneMinus(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = f::<F>((2.0 / std::f64::consts::PI).sqrt());
        let k = f::<F>(0.044715);
        let half = f::<F>(0.5);
        let out = self
            .value(a)
            .mapv(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// `ln(max(a, floor))`; no gradient below the floor.
    pub fn log(&mut self, a: Var, floor: F) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::Log(a, floor), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        softmax_rows_inplace(&mut out);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise softmax where entry `(i, j)` is masked out when `j > i + offset`.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.ncols();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for j in (i + offset + 1).min(cols)..cols {
                row[j] = F::neg_infinity();
            }
        }
        softmax_rows_inplace(&mut out);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let xv = self.value(x);
        let n = F::from_usize(xv.ncols()).unwrap();
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &(&normed * self.value(gain)) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// `out[t, cols[i]] += a[t, i]` into a `T x width` zero matrix.
    pub fn scatter_cols(&mut self, a: Var, cols: &[usize], width: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), cols.len());
        let mut out = Array2::zeros((av.nrows(), width));
        for (t, row) in av.rows().into_iter().enumerate() {
            for (i, &c) in cols.iter().enumerate() {
                out[[t, c]] += row[i];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterCols(a, cols.to_vec()), ng)
    }

    /// `out[t, 0] = a[t, cols[t]]`
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), cols.len());
        let out = Array2::from_shape_fn((cols.len(), 1), |(t, _)| av[[t, cols[t]]]);
        let ng = self.ng(a);
        self.push(out, Op::PickCols(a, cols.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows width mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatRows(a, b), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Mean over rows, giving `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Mean of all entries, giving `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().expect("mean of empty matrix");
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<F> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// All pairwise row sums: `out[k * S + s] = a[k] + b[s]` for `a: K x h`, `b: S x h`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (k, h) = av.dim();
        let sn = bv.nrows();
        let mut out = Array2::zeros((k * sn, h));
        for i in 0..k {
            let mut block = out.slice_mut(s![i * sn..(i + 1) * sn, ..]);
            block.assign(bv);
            block += &av.row(i);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::PairAdd(a, b), ng)
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Array2<F>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), labels.dim());
        let n = F::from_usize(z.len()).unwrap();
        let total: F = Zip::from(z).and(&labels).fold(F::zero(), |acc, &z, &y| {
            acc + z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
        });
        let ng = self.ng(logits);
        self.push(Array2::from_elem((1, 1), total / n), Op::BceWithLogits(logits, labels), ng)
    }

    /// Back-propagate from the scalar `loss`; returns gradients by slot.
    pub fn backward(&self, loss: Var, n_slots: usize) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new(n_slots);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => match &mut out.slots[*slot] {
                    Some(acc) => *acc += &g,
                    none => *none = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.mapv(|x| -x));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, col) => {
                    if self.ng(*col) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *col, gc);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::OneMinus(a) => acc(&mut grads, *a, g.mapv(|x| -x)),
                Op::Gelu(a) => {
                    let c = f::<F>((2.0 / std::f64::consts::PI).sqrt());
                    let k = f::<F>(0.044715);
                    let half = f::<F>(0.5);
                    let three = f::<F>(3.0);
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (F::one() + t)
                            + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
                        *gv *= d;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(Var(i)))
                        .for_each(|gv, &y| *gv *= F::one() - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(Var(i)))
                        .for_each(|gv, &y| *gv *= y * (F::one() - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a, floor) => {
                    let floor = *floor;
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        *gv = if x > floor { *gv / x } else { F::zero() };
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: F = grow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gain) {
                        acc(&mut grads, *gain, (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let gn = &g * self.value(*gain);
                        let n = F::from_usize(gn.ncols()).unwrap();
                        let mut gx = Array2::zeros(gn.dim());
                        for r in 0..gn.nrows() {
                            let gr = gn.row(r);
                            let xr = normed.row(r);
                            let sum_g: F = gr.sum();
                            let sum_gx: F = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
                            let inv = inv_std[r];
                            let mut out = gx.row_mut(r);
                            for c in 0..gr.len() {
                                out[c] = inv / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ScatterCols(a, cols) => {
                    let ga = Array2::from_shape_fn((g.nrows(), cols.len()), |(t, j)| g[[t, cols[j]]]);
                    acc(&mut grads, *a, ga);
                }
                Op::PickCols(a, cols) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (t, &c) in cols.iter().enumerate() {
                        ga[[t, c]] = g[[t, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).nrows();
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.slice(s![..ra, ..]).to_owned());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.slice(s![ra.., ..]).to_owned());
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).dim();
                    let scale = F::one() / F::from_usize(r).unwrap();
                    let row = g.row(0).mapv(|x| x * scale);
                    let ga = Array2::from_shape_fn((r, c), |(_, j)| row[j]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let v = g[[0, 0]] / F::from_usize(dim.0 * dim.1).unwrap();
                    acc(&mut grads, *a, Array2::from_elem(dim, v));
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let flat: Vec<F> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(dim, flat).unwrap());
                }
                Op::PairAdd(a, b) => {
                    let (k, h) = self.value(*a).dim();
                    let sn = self.value(*b).nrows();
                    if self.ng(*a) {
                        let mut ga = Array2::zeros((k, h));
                        for i in 0..k {
                            let block = g.slice(s![i * sn..(i + 1) * sn, ..]);
                            ga.row_mut(i).assign(&block.sum_axis(Axis(0)));
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Array2::zeros((sn, h));
                        for i in 0..k {
                            gb += &g.slice(s![i * sn..(i + 1) * sn, ..]);
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::BceWithLogits(logits, labels) => {
                    let z = self.value(*logits);
                    let scale = g[[0, 0]] / F::from_usize(z.len()).unwrap();
                    let mut gz = Array2::zeros(z.dim());
                    Zip::from(&mut gz)
                        .and(z)
                        .and(labels)
                        .for_each(|o, &z, &y| *o = (sigmoid(z) - y) * scale);
                    acc(&mut grads, *logits, gz);
                }
            }
        }
        out
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(a) => *a += &g,
        none => *none = Some(g),
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softmax_rows_inplace<F: Scalar>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut sum = F::zero();
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

/// Finite-difference comparison helper.
pub mod check {
    /// `|a - n| / max(|a|, |n|, floor)`
    pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }
}
