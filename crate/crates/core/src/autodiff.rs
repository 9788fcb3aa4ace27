//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation as it computes forward values; a single
//! reverse sweep then accumulates gradients for all parameter leaves. Tapes
//! are per-example and single-threaded; parallelism happens one tape per
//! worker with gradients merged afterwards in a fixed order.
//!
//! Everything is generic over the element type: training uses `f32`,
//! finite-difference gradient checks use `f64`.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

/// Element type bound for tape arithmetic.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter array in its [`crate::model::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Value<F: Scalar> {
    Owned(Array2<F>),
    Shared(Arc<Array2<F>>),
}

impl<F: Scalar> Value<F> {
    fn get(&self) -> &Array2<F> {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

enum Op<F: Scalar> {
    /// Constant leaf; no gradient flows into it.
    Input,
    /// Parameter leaf; gradients accumulate into its [`ParamId`] slot.
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m,n] + [1,n]` broadcast over rows.
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, F),
    /// `[m,n] * [1,1]` broadcast.
    MulScalar(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Row r of the output is row ids[r] of the table.
    Embed {
        table: Var,
        ids: Arc<Vec<usize>>,
    },
    /// Row-normalized `[1,n]` vector.
    L2NormRow(Var),
    /// Weighted sum over rows of `-log softmax(logits)[target]`; yields `[1,1]`.
    CrossEntropyRows {
        logits: Var,
        targets: Arc<Vec<usize>>,
        row_weights: Arc<Vec<F>>,
    },
    /// Weighted sum of `[1,1]` scalars.
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F: Scalar> {
    value: Value<F>,
    op: Op<F>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
/// Additive mask value; large enough to zero attention, small enough to stay
/// finite in f32.
pub const MASK_NEG: f64 = -1e9;

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, a: Array2<F>) -> Var {
        self.push(a, Op::Input)
    }

    pub fn shared_input(&mut self, a: Arc<Array2<F>>) -> Var {
        self.nodes.push(Node { value: Value::Shared(a), op: Op::Input });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, a: Arc<Array2<F>>) -> Var {
        self.nodes.push(Node { value: Value::Shared(a), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: Arc<Array2<F>>) -> Var {
        let v = self.value(a) + c.as_ref();
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a) * sv;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum = row.iter().cloned().sum::<F>();
            row.mapv_inplace(|z| z / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with learned gain/bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = F::from_f64(LN_EPS);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        debug_assert_eq!(g.nrows(), 1);
        debug_assert_eq!(b.nrows(), 1);
        let n = F::from_f64(xv.ncols() as f64);
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.iter().cloned().sum::<F>() / n;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<F>() / n;
            let inv = (var + eps).sqrt().recip();
            row.mapv_inplace(|z| (z - mean) * inv);
        }
        let out = &out * g + b;
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape agreement");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.value(a).slice(s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(a, r0, r1))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape agreement");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.value(a).slice(s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a, c0, c1))
    }

    pub fn embed(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Embed { table, ids })
    }

    pub fn l2_norm_row(&mut self, a: Var) -> Var {
        let x = self.value(a);
        debug_assert_eq!(x.nrows(), 1);
        let norm = norm_of(x);
        let v = x / norm;
        self.push(v, Op::L2NormRow(a))
    }

    /// Per-row cross entropy against `targets`, combined with `row_weights`
    /// (weights summing to 1 give a mean). Softmax happens internally via
    /// logsumexp.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        row_weights: Arc<Vec<F>>,
    ) -> Var {
        let l = self.value(logits);
        debug_assert_eq!(l.nrows(), targets.len());
        debug_assert_eq!(targets.len(), row_weights.len());
        let mut total = F::zero();
        for (r, (&t, &w)) in targets.iter().zip(row_weights.iter()).enumerate() {
            if w == F::zero() {
                continue;
            }
            let row = l.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            total += w * (lse - row[t]);
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(v, Op::CrossEntropyRows { logits, targets, row_weights })
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, F)]) -> Var {
        let mut total = F::zero();
        for &(v, w) in parts {
            total += self.scalar(v) * w;
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(v, Op::WeightedSum(parts.to_vec()))
    }

    /// Reverse sweep from seed gradients, accumulating parameter gradients
    /// into `grads`. Seeds are (node, dL/dnode) pairs; a scalar loss seeds
    /// with a 1x1 one.
    pub fn backward(&self, seeds: &[(Var, Array2<F>)], grads: &mut GradStore<F>) {
        let mut node_grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            debug_assert_eq!(self.value(*var).dim(), seed.dim());
            accumulate(&mut node_grads[var.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut node_grads[a.0], &da);
                    accumulate(&mut node_grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads[a.0], &g);
                    accumulate(&mut node_grads[b.0], &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut node_grads[a.0], &g);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut node_grads[row.0], &dr);
                }
                Op::AddConst(a) => accumulate(&mut node_grads[a.0], &g),
                Op::Scale(a, s) => {
                    let da = &g * *s;
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.scalar(*s);
                    let da = &g * sv;
                    let ds = (&g * self.value(*a)).sum();
                    accumulate(&mut node_grads[a.0], &da);
                    accumulate(&mut node_grads[s.0], &Array2::from_elem((1, 1), ds));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = g;
                    da.zip_mut_with(x, |gv, &xv| *gv *= gelu_derivative(xv));
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.get();
                    let mut da = g;
                    for (mut grow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&gv, &yv)| gv * yv)
                            .sum::<F>();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let eps = F::from_f64(LN_EPS);
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = F::from_f64(xv.ncols() as f64);
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for (r, xrow) in xv.rows().into_iter().enumerate() {
                        let mean = xrow.iter().cloned().sum::<F>() / n;
                        let var = xrow.iter().map(|&z| (z - mean) * (z - mean)).sum::<F>() / n;
                        let inv = (var + eps).sqrt().recip();
                        let grow = g.row(r);
                        for c in 0..xv.ncols() {
                            let xhat = (xrow[c] - mean) * inv;
                            dgain[(0, c)] += grow[c] * xhat;
                            dbias[(0, c)] += grow[c];
                        }
                        let dxhat: Vec<F> =
                            (0..xv.ncols()).map(|c| grow[c] * gv[(0, c)]).collect();
                        let mean_dxhat = dxhat.iter().cloned().sum::<F>() / n;
                        let mean_dxhat_xhat = (0..xv.ncols())
                            .map(|c| dxhat[c] * (xrow[c] - mean) * inv)
                            .sum::<F>()
                            / n;
                        for c in 0..xv.ncols() {
                            let xhat = (xrow[c] - mean) * inv;
                            dx[(r, c)] = (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                        }
                    }
                    accumulate(&mut node_grads[x.0], &dx);
                    accumulate(&mut node_grads[gain.0], &dgain);
                    accumulate(&mut node_grads[bias.0], &dbias);
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let slice = g.slice(s![r..r + rows, ..]).to_owned();
                        accumulate(&mut node_grads[p.0], &slice);
                        r += rows;
                    }
                }
                Op::SliceRows(a, r0, r1) => {
                    let av = self.value(*a);
                    let mut da = Array2::zeros(av.dim());
                    da.slice_mut(s![*r0..*r1, ..]).assign(&g);
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let slice = g.slice(s![.., c..c + cols]).to_owned();
                        accumulate(&mut node_grads[p.0], &slice);
                        c += cols;
                    }
                }
                Op::SliceCols(a, c0, c1) => {
                    let av = self.value(*a);
                    let mut da = Array2::zeros(av.dim());
                    da.slice_mut(s![.., *c0..*c1]).assign(&g);
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Array2::zeros(tv.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut node_grads[table.0], &dt);
                }
                Op::L2NormRow(a) => {
                    let x = self.value(*a);
                    let norm = norm_of(x);
                    let y = self.nodes[i].value.get();
                    let dot = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv)
                        .sum::<F>();
                    let mut da = g;
                    da.zip_mut_with(y, |gv, &yv| *gv = (*gv - dot * yv) / norm);
                    accumulate(&mut node_grads[a.0], &da);
                }
                Op::CrossEntropyRows { logits, targets, row_weights } => {
                    let gscalar = g[(0, 0)];
                    let l = self.value(*logits);
                    let mut dl = Array2::zeros(l.dim());
                    for (r, (&t, &w)) in targets.iter().zip(row_weights.iter()).enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let row = l.row(r);
                        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let denom = row.iter().map(|&z| (z - max).exp()).sum::<F>();
                        let coeff = gscalar * w;
                        for c in 0..l.ncols() {
                            let p = (row[c] - max).exp() / denom;
                            dl[(r, c)] = coeff * (p - if c == t { F::one() } else { F::zero() });
                        }
                    }
                    accumulate(&mut node_grads[logits.0], &dl);
                }
                Op::WeightedSum(parts) => {
                    let gscalar = g[(0, 0)];
                    for &(v, w) in parts {
                        let dv = Array2::from_elem((1, 1), gscalar * w);
                        accumulate(&mut node_grads[v.0], &dv);
                    }
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Array2<F>>, g: &Array2<F>) {
    match slot {
        Some(existing) => *existing += g,
        None => *slot = Some(g.clone()),
    }
}

fn norm_of<F: Scalar>(x: &Array2<F>) -> F {
    (x.iter().map(|&v| v * v).sum::<F>() + F::from_f64(NORM_EPS)).sqrt()
}

/// tanh-approximation GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean. Shared with the inference path so both routes
/// compute the same function.
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let k = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let k = F::from_f64(0.797_884_560_802_865_4);
    let c = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * c * x * x)
}

/// Parameter gradients, indexed by [`ParamId`].
pub struct GradStore<F: Scalar> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new(n_params: usize) -> Self {
        Self { slots: (0..n_params).map(|_| None).collect() }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<F>) {
        accumulate(&mut self.slots[id.0], g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Merges another store into this one (fixed order, deterministic).
    pub fn merge(&mut self, other: GradStore<F>) {
        debug_assert_eq!(self.slots.len(), other.slots.len());
        for (slot, theirs) in self.slots.iter_mut().zip(other.slots) {
            if let Some(g) = theirs {
                accumulate(slot, &g);
            }
        }
    }

    /// Scales every gradient in place (e.g. 1/batch).
    pub fn scale(&mut self, s: F) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * s);
        }
    }

    /// Global L2 norm across all gradients.
    pub fn global_norm(&self) -> F {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&v| v * v).sum::<F>())
            .sum::<F>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Finite-difference gradient of `f` w.r.t. every entry of `x`.
    fn fd_grad(x: &Array2<f64>, eps: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut plus = x.clone();
                plus[(r, c)] += eps;
                let mut minus = x.clone();
                minus[(r, c)] -= eps;
                g[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * eps);
            }
        }
        g
    }

    /// Runs `build` to produce a scalar loss from a single param leaf and
    /// compares the analytic gradient against central differences.
    fn check_grad(x0: Array2<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), Arc::new(x0.clone()));
        let loss = build(&mut tape, p);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let mut grads = GradStore::new(1);
        tape.backward(&[(loss, array![[1.0]])], &mut grads);
        let analytic = grads.get(ParamId(0)).unwrap().clone();

        let numeric = fd_grad(&x0, 1e-5, |x| {
            let mut t = Tape::new();
            let p = t.param(ParamId(0), Arc::new(x.clone()));
            let l = build(&mut t, p);
            t.scalar(l)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = n.abs().max(a.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < 1e-5,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    fn fixed(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            ((r * cols + c) as f64 * 0.7 + phase).sin() * 0.8
        })
    }

    /// Reduce any matrix to a scalar in a gradient-interesting way.
    fn reduce(t: &mut Tape<f64>, v: Var) -> Var {
        let (rows, cols) = t.value(v).dim();
        let w = t.input(fixed(cols, 1, 0.3));
        let prod = t.matmul(v, w);
        let ones = t.input(Array2::from_elem((1, rows), 1.0));
        let summed = t.matmul(ones, prod);
        t.gelu(summed)
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(fixed(3, 4, 0.0), |t, p| {
            let b = t.input(fixed(4, 5, 1.0));
            let c = t.matmul(p, b);
            reduce(t, c)
        });
    }

    #[test]
    fn grad_add_scale_mul_scalar() {
        check_grad(fixed(3, 4, 0.2), |t, p| {
            let b = t.input(fixed(3, 4, 2.0));
            let s = t.input(array![[0.37]]);
            let sum = t.add(p, b);
            let scaled = t.scale(sum, -1.3);
            let m = t.mul_scalar(scaled, s);
            reduce(t, m)
        });
    }

    #[test]
    fn grad_through_scalar_multiplier() {
        check_grad(array![[0.8]], |t, p| {
            let a = t.input(fixed(3, 3, 0.5));
            let m = t.mul_scalar(a, p);
            reduce(t, m)
        });
    }

    #[test]
    fn grad_add_row_and_const() {
        check_grad(fixed(1, 5, 0.1), |t, p| {
            let a = t.input(fixed(4, 5, 1.7));
            let c = Arc::new(fixed(4, 5, 0.9));
            let x = t.add_row(a, p);
            let y = t.add_const(x, c);
            reduce(t, y)
        });
    }

    #[test]
    fn grad_gelu() {
        check_grad(fixed(2, 6, 0.4), |t, p| reduce(t, p));
    }

    #[test]
    fn grad_softmax_rows() {
        check_grad(fixed(3, 5, 0.6), |t, p| {
            let s = t.softmax_rows(p);
            reduce(t, s)
        });
    }

    #[test]
    fn grad_layer_norm_input_gain_bias() {
        check_grad(fixed(3, 6, 0.8), |t, p| {
            let gain = t.input(fixed(1, 6, 0.2) + 1.0);
            let bias = t.input(fixed(1, 6, 1.4));
            let y = t.layer_norm(p, gain, bias);
            reduce(t, y)
        });
        check_grad(fixed(1, 6, 0.2), |the, p| {
            let x = the.input(fixed(3, 6, 0.8));
            let bias = the.input(fixed(1, 6, 1.4));
            let y = the.layer_norm(x, p, bias);
            reduce(the, y)
        });
        check_grad(fixed(1, 6, 1.4), |t, p| {
            let x = t.input(fixed(3, 6, 0.8));
            let gain = t.input(fixed(1, 6, 0.2) + 1.0);
            let y = t.layer_norm(x, gain, p);
            reduce(t, y)
        });
    }

    #[test]
    fn grad_transpose_concat_slice() {
        check_grad(fixed(3, 4, 0.9), |t, p| {
            let tr = t.transpose(p);
            let top = t.slice_rows(tr, 0, 2);
            let bottom = t.slice_rows(tr, 2, 4);
            let cat = t.concat_rows(&[bottom, top]);
            let left = t.slice_cols(cat, 0, 2);
            let right = t.slice_cols(cat, 2, 3);
            let cat2 = t.concat_cols(&[right, left]);
            reduce(t, cat2)
        });
    }

    #[test]
    fn grad_embed() {
        check_grad(fixed(5, 4, 0.3), |t, p| {
            let ids = Arc::new(vec![3usize, 1, 3, 0]);
            let e = t.embed(p, ids);
            reduce(t, e)
        });
    }

    #[test]
    fn grad_l2_norm_row() {
        check_grad(fixed(1, 6, 0.5), |t, p| {
            let y = t.l2_norm_row(p);
            reduce(t, y)
        });
    }

    #[test]
    fn grad_cross_entropy_rows() {
        check_grad(fixed(4, 7, 0.25), |t, p| {
            let targets = Arc::new(vec![2usize, 0, 6, 3]);
            // mean over rows 0, 2, 3 (row 1 masked out)
            let w = 1.0 / 3.0;
            let weights = Arc::new(vec![w, 0.0, w, w]);
            t.cross_entropy_rows(p, targets, weights)
        });
    }

    #[test]
    fn grad_weighted_sum_of_two_losses() {
        check_grad(fixed(3, 3, 0.45), |t, p| {
            let a = reduce(t, p);
            let sm = t.softmax_rows(p);
            let b = reduce(t, sm);
            t.weighted_sum(&[(a, 0.7), (b, 1.9)])
        });
    }

    #[test]
    fn backward_accepts_seed_gradients_on_interior_nodes() {
        // Seeding dL/dy directly must equal building the same loss on tape.
        let x0 = fixed(2, 3, 0.15);
        let target = fixed(2, 3, 1.1);

        let mut t1 = Tape::new();
        let p1 = t1.param(ParamId(0), Arc::new(x0.clone()));
        let y1 = t1.gelu(p1);
        let neg = t1.scale(y1, -1.0);
        let tt = t1.input(target.clone());
        let diff = t1.add(tt, neg);
        let dt = t1.transpose(diff);
        let sq = t1.matmul(dt, diff); // trace(sq) = sum of squares
        let mut full_grads = GradStore::new(1);
        let eye = Array2::from_shape_fn((3, 3), |(r, c)| if r == c { 1.0 } else { 0.0 });
        t1.backward(&[(sq, eye)], &mut full_grads);

        let mut t2 = Tape::new();
        let p2 = t2.param(ParamId(0), Arc::new(x0.clone()));
        let y2 = t2.gelu(p2);
        let seed = (t2.value(y2) - &target) * 2.0;
        let mut seeded = GradStore::new(1);
        t2.backward(&[(y2, seed)], &mut seeded);

        let a = full_grads.get(ParamId(0)).unwrap();
        let b = seeded.get(ParamId(0)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn grad_store_merge_and_scale() {
        let mut a = GradStore::<f64>::new(2);
        a.accumulate(ParamId(0), &array![[1.0, 2.0]]);
        let mut b = GradStore::<f64>::new(2);
        b.accumulate(ParamId(0), &array![[3.0, 4.0]]);
        b.accumulate(ParamId(1), &array![[5.0]]);
        a.merge(b);
        a.scale(0.5);
        assert_eq!(a.get(ParamId(0)).unwrap(), &array![[2.0, 3.0]]);
        assert_eq!(a.get(ParamId(1)).unwrap(), &array![[2.5]]);
    }
}
