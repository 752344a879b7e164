//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records an eagerly evaluated computation graph. Each operation
//! stores its inputs and its computed value; [`Tape::backward`] walks the
//! recording in reverse and accumulates vector-Jacobian products into every
//! trainable leaf. The op set is exactly what the model, the ranking loss,
//! and the self-supervised loss need, nothing more.
//!
//! Sparse matrices enter the graph only as constants (channel and
//! propagation operators), wrapped in a [`SparseOperator`] that caches the
//! transpose used by the backward pass.
//!
//! [`gradient_check`] verifies any scalar-valued graph against central
//! finite differences and is the oracle used by the training tests.

use std::sync::Arc;

use crate::linalg::{DenseMatrix, SparseMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// A constant sparse matrix paired with its transpose, so backward passes
/// never re-transpose per step.
#[derive(Debug)]
pub struct SparseOperator {
    forward: SparseMatrix,
    adjoint: SparseMatrix,
}

impl SparseOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        Self {
            adjoint: matrix.transpose(),
            forward: matrix,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    SpMatmul(Arc<SparseOperator>, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Hadamard(TensorId, TensorId),
    Scale(TensorId, f64),
    /// (matrix r.c, bias 1.c): bias added to every row.
    AddRowBroadcast(TensorId, TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    SoftmaxRows(TensorId),
    ConcatCols(Vec<TensorId>),
    ExtractCol(TensorId, usize),
    /// (matrix r.c, weights r.1): row i scaled by weight i.
    MulColBroadcast(TensorId, TensorId),
    Transpose(TensorId),
    GatherRows(TensorId, Arc<Vec<usize>>),
    /// Rowwise dot product of two equal-shape matrices, yielding r.1.
    RowsDot(TensorId, TensorId),
    /// y[i][j] = x[rows[i]][cols[j]].
    Permute(TensorId, Arc<Vec<usize>>, Arc<Vec<usize>>),
    Sum(TensorId),
    SumSquares(TensorId),
}

struct Node {
    op: Op,
    value: DenseMatrix,
    needs_grad: bool,
}

/// Eagerly evaluated computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if any path
    /// required it.
    pub fn get(&self, id: TensorId) -> Option<&DenseMatrix> {
        self.grads[id.0].as_ref()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows(), v.cols()), (1, 1), "node is not a scalar");
        v.get(0, 0)
    }

    fn push(&mut self, op: Op, value: DenseMatrix, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: DenseMatrix) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    /// Frozen leaf: participates in the forward pass only.
    pub fn constant(&mut self, value: DenseMatrix) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), value, needs)
    }

    pub fn sp_matmul(&mut self, a: &Arc<SparseOperator>, x: TensorId) -> TensorId {
        let value = a.forward.dense_matmul(self.value(x));
        let needs = self.needs(x);
        self.push(Op::SpMatmul(Arc::clone(a), x), value, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).add(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).hadamard(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Hadamard(a, b), value, needs)
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let value = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), value, needs)
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        let value = self.value(a).add_row_broadcast(b.row(0));
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddRowBroadcast(a, bias), value, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).map(stable_sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).map(stable_softplus);
        let needs = self.needs(a);
        self.push(Op::Softplus(a), value, needs)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let mut value = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                value.set(r, j, e);
                total += e;
            }
            for j in 0..x.cols() {
                value.set(r, j, value.get(r, j) / total);
            }
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, needs)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = DenseMatrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..v.cols() {
                    value.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, needs)
    }

    pub fn extract_col(&mut self, a: TensorId, col: usize) -> TensorId {
        let x = self.value(a);
        assert!(col < x.cols(), "column {col} out of range");
        let value = DenseMatrix::from_fn(x.rows(), 1, |r, _| x.get(r, col));
        let needs = self.needs(a);
        self.push(Op::ExtractCol(a, col), value, needs)
    }

    pub fn mul_col_broadcast(&mut self, a: TensorId, weights: TensorId) -> TensorId {
        let (x, w) = (self.value(a), self.value(weights));
        assert_eq!(w.cols(), 1, "weights must be a single column");
        assert_eq!(w.rows(), x.rows(), "weight rows must match matrix rows");
        let value = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * w.get(r, 0));
        let needs = self.needs(a) || self.needs(weights);
        self.push(Op::MulColBroadcast(a, weights), value, needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn gather_rows(&mut self, a: TensorId, rows: Arc<Vec<usize>>) -> TensorId {
        let x = self.value(a);
        let value = DenseMatrix::from_fn(rows.len(), x.cols(), |r, c| x.get(rows[r], c));
        let needs = self.needs(a);
        self.push(Op::GatherRows(a, rows), value, needs)
    }

    pub fn rows_dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()), "rows_dot shape mismatch");
        let value = DenseMatrix::from_fn(x.rows(), 1, |r, _| {
            x.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum()
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::RowsDot(a, b), value, needs)
    }

    pub fn permute(
        &mut self,
        a: TensorId,
        rows: Arc<Vec<usize>>,
        cols: Arc<Vec<usize>>,
    ) -> TensorId {
        let x = self.value(a);
        assert_eq!(rows.len(), x.rows(), "row permutation length mismatch");
        assert_eq!(cols.len(), x.cols(), "column permutation length mismatch");
        let value = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(rows[r], cols[c]));
        let needs = self.needs(a);
        self.push(Op::Permute(a, rows, cols), value, needs)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let value = DenseMatrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let needs = self.needs(a);
        self.push(Op::Sum(a), value, needs)
    }

    pub fn sum_squares(&mut self, a: TensorId) -> TensorId {
        let value = DenseMatrix::from_vec(1, 1, vec![self.value(a).sum_squares()]);
        let needs = self.needs(a);
        self.push(Op::SumSquares(a), value, needs)
    }

    /// Mean of a nonempty set of equal-shape tensors.
    pub fn mean(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse-mode gradients of the scalar node `loss` with respect to
    /// every trainable leaf it depends on.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        let v = self.value(loss);
        assert_eq!((v.rows(), v.cols()), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        let bt = self.value(*b).transpose();
                        self.accumulate(&mut grads, *a, &dy.matmul(&bt));
                    }
                    if self.needs(*b) {
                        let at = self.value(*a).transpose();
                        self.accumulate(&mut grads, *b, &at.matmul(&dy));
                    }
                }
                Op::SpMatmul(op, x) => {
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, &op.adjoint.dense_matmul(&dy));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy);
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, &dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy);
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, &dy.scale(-1.0));
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy.hadamard(self.value(*b)));
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, &dy.hadamard(self.value(*a)));
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy.scale(*s));
                    }
                }
                Op::AddRowBroadcast(a, bias) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy);
                    }
                    if self.needs(*bias) {
                        let mut db = DenseMatrix::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for c in 0..dy.cols() {
                                db.set(0, c, db.get(0, c) + dy.get(r, c));
                            }
                        }
                        self.accumulate(&mut grads, *bias, &db);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let da = DenseMatrix::from_fn(y.rows(), y.cols(), |r, c| {
                            let s = y.get(r, c);
                            dy.get(r, c) * s * (1.0 - s)
                        });
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::Softplus(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let da = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                            dy.get(r, c) * stable_sigmoid(x.get(r, c))
                        });
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let mut da = DenseMatrix::zeros(y.rows(), y.cols());
                        for r in 0..y.rows() {
                            let inner: f64 = (0..y.cols())
                                .map(|c| dy.get(r, c) * y.get(r, c))
                                .sum();
                            for c in 0..y.cols() {
                                da.set(r, c, y.get(r, c) * (dy.get(r, c) - inner));
                            }
                        }
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.needs(p) {
                            let dp = DenseMatrix::from_fn(dy.rows(), cols, |r, c| {
                                dy.get(r, offset + c)
                            });
                            self.accumulate(&mut grads, p, &dp);
                        }
                        offset += cols;
                    }
                }
                Op::ExtractCol(a, col) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let mut da = DenseMatrix::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            da.set(r, *col, dy.get(r, 0));
                        }
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::MulColBroadcast(a, weights) => {
                    let (x, w) = (self.value(*a), self.value(*weights));
                    if self.needs(*a) {
                        let da = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                            dy.get(r, c) * w.get(r, 0)
                        });
                        self.accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*weights) {
                        let dw = DenseMatrix::from_fn(x.rows(), 1, |r, _| {
                            (0..x.cols()).map(|c| dy.get(r, c) * x.get(r, c)).sum()
                        });
                        self.accumulate(&mut grads, *weights, &dw);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, &dy.transpose());
                    }
                }
                Op::GatherRows(a, rows) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let mut da = DenseMatrix::zeros(x.rows(), x.cols());
                        for (k, &src) in rows.iter().enumerate() {
                            for c in 0..x.cols() {
                                da.set(src, c, da.get(src, c) + dy.get(k, c));
                            }
                        }
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::RowsDot(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let da = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                            dy.get(r, 0) * y.get(r, c)
                        });
                        self.accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let db = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                            dy.get(r, 0) * x.get(r, c)
                        });
                        self.accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Permute(a, rows, cols) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let mut da = DenseMatrix::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            for c in 0..x.cols() {
                                let (sr, sc) = (rows[r], cols[c]);
                                da.set(sr, sc, da.get(sr, sc) + dy.get(r, c));
                            }
                        }
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let g = dy.get(0, 0);
                        let da = DenseMatrix::from_fn(x.rows(), x.cols(), |_, _| g);
                        self.accumulate(&mut grads, *a, &da);
                    }
                }
                Op::SumSquares(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let g = 2.0 * dy.get(0, 0);
                        self.accumulate(&mut grads, *a, &x.scale(g));
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], id: TensorId, delta: &DenseMatrix) {
        match &mut grads[id.0] {
            Some(g) => *g = g.add(delta),
            slot => *slot = Some(delta.clone()),
        }
    }
}

/// Worst coordinate found by [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the full graph from scratch on the given tape,
/// registering one trainable leaf per entry of `params` (in order) and
/// returning the scalar loss node. The per-coordinate error is
/// |a - n| / (1e-4 + max(|a|, |n|)): the floor turns coordinates too small
/// for finite differences to resolve (cancellation noise is roughly
/// eps * |loss| / step) into an absolute comparison at 1e-8 per unit of
/// threshold, while errors on resolvable coordinates stay relative.
pub fn gradient_check(
    params: &[DenseMatrix],
    step: f64,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> GradCheckReport {
    let run = |values: &[DenseMatrix]| -> (Tape, Vec<TensorId>, TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        (tape, ids, loss)
    };

    let (tape, ids, loss) = run(params);
    let grads = tape.backward(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param: 0,
        row: 0,
        col: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<DenseMatrix> = params.to_vec();
    for (p, shape) in params.iter().enumerate() {
        let zero = DenseMatrix::zeros(shape.rows(), shape.cols());
        let analytic = grads.get(ids[p]).unwrap_or(&zero).clone();
        for r in 0..shape.rows() {
            for c in 0..shape.cols() {
                let original = work[p].get(r, c);
                work[p].set(r, c, original + step);
                let (tape_hi, _, loss_hi) = run(&work);
                work[p].set(r, c, original - step);
                let (tape_lo, _, loss_lo) = run(&work);
                work[p].set(r, c, original);
                let numeric =
                    (tape_hi.scalar(loss_hi) - tape_lo.scalar(loss_lo)) / (2.0 * step);
                let a = analytic.get(r, c);
                let rel = (a - numeric).abs() / (1e-4 + a.abs().max(numeric.abs()));
                if rel > report.max_rel_err {
                    report = GradCheckReport {
                        max_rel_err: rel,
                        param: p,
                        row: r,
                        col: c,
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn check(params: &[DenseMatrix], build: impl Fn(&mut Tape, &[TensorId]) -> TensorId) {
        let report = gradient_check(params, 1e-5, build);
        assert!(
            report.max_rel_err < 1e-6,
            "gradient mismatch: {report:?}"
        );
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = StdRng::seed_from_u64(21);
        let params = vec![random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 4, 2)];
        check(&params, |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            let s = t.sigmoid(y);
            t.sum(s)
        });
    }

    #[test]
    fn sparse_matmul_gradients() {
        let mut rng = StdRng::seed_from_u64(22);
        let a = SparseMatrix::from_triplets(
            3,
            3,
            vec![(0, 1, 0.5), (1, 0, 0.25), (1, 2, 0.75), (2, 2, 1.0)],
        );
        let op = Arc::new(SparseOperator::new(a));
        let params = vec![random_matrix(&mut rng, 3, 4)];
        check(&params, move |t, ids| {
            let y = t.sp_matmul(&op, ids[0]);
            let sq = t.hadamard(y, y);
            t.sum(sq)
        });
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = StdRng::seed_from_u64(23);
        let params = vec![random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 4, 3)];
        check(&params, |t, ids| {
            let a = t.add(ids[0], ids[1]);
            let b = t.sub(ids[0], ids[1]);
            let h = t.hadamard(a, b);
            let s = t.scale(h, 0.7);
            let p = t.softplus(s);
            t.sum(p)
        });
    }

    #[test]
    fn gate_pattern_gradients() {
        // exactly the self-gating structure: X . sigmoid(X W + b)
        let mut rng = StdRng::seed_from_u64(24);
        let params = vec![
            random_matrix(&mut rng, 5, 3),
            random_matrix(&mut rng, 3, 3),
            random_matrix(&mut rng, 1, 3),
        ];
        check(&params, |t, ids| {
            let xw = t.matmul(ids[0], ids[1]);
            let pre = t.add_row_broadcast(xw, ids[2]);
            let sig = t.sigmoid(pre);
            let gated = t.hadamard(ids[0], sig);
            t.sum_squares(gated)
        });
    }

    #[test]
    fn softmax_attention_pattern_gradients() {
        let mut rng = StdRng::seed_from_u64(25);
        let params = vec![
            random_matrix(&mut rng, 4, 1),
            random_matrix(&mut rng, 4, 1),
            random_matrix(&mut rng, 4, 1),
            random_matrix(&mut rng, 4, 3),
        ];
        check(&params, |t, ids| {
            let logits = t.concat_cols(&ids[0..3]);
            let alpha = t.softmax_rows(logits);
            let a0 = t.extract_col(alpha, 0);
            let weighted = t.mul_col_broadcast(ids[3], a0);
            let a2 = t.extract_col(alpha, 2);
            let weighted2 = t.mul_col_broadcast(ids[3], a2);
            let both = t.add(weighted, weighted2);
            t.sum_squares(both)
        });
    }

    #[test]
    fn gather_and_rows_dot_gradients() {
        let mut rng = StdRng::seed_from_u64(26);
        let params = vec![random_matrix(&mut rng, 6, 3), random_matrix(&mut rng, 5, 3)];
        // repeated rows exercise scatter accumulation
        let users = Arc::new(vec![0usize, 2, 2, 5]);
        let items = Arc::new(vec![1usize, 1, 4, 0]);
        check(&params, move |t, ids| {
            let pu = t.gather_rows(ids[0], Arc::clone(&users));
            let qi = t.gather_rows(ids[1], Arc::clone(&items));
            let scores = t.rows_dot(pu, qi);
            let neg = t.scale(scores, -1.0);
            let sp = t.softplus(neg);
            t.sum(sp)
        });
    }

    #[test]
    fn permute_and_transpose_gradients() {
        let mut rng = StdRng::seed_from_u64(27);
        let params = vec![random_matrix(&mut rng, 4, 3)];
        let rows = Arc::new(vec![2usize, 0, 3, 1]);
        let cols = Arc::new(vec![1usize, 2, 0]);
        check(&params, move |t, ids| {
            let shuffled = t.permute(ids[0], Arc::clone(&rows), Arc::clone(&cols));
            let back = t.transpose(shuffled);
            let prod = t.matmul(back, ids[0]);
            t.sum_squares(prod)
        });
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x . x) + sum(x): gradient 2x + 1 exactly
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut tape = Tape::new();
        let id = tape.param(x.clone());
        let sq = tape.hadamard(id, id);
        let s1 = tape.sum(sq);
        let s2 = tape.sum(id);
        let loss = tape.add(s1, s2);
        let grads = tape.backward(loss);
        let g = grads.get(id).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((g.get(r, c) - (2.0 * x.get(r, c) + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.constant(DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]));
        let live = tape.param(DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]));
        let prod = tape.hadamard(frozen, live);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(live).unwrap().row(0), &[1.0, 2.0]);
    }

    #[test]
    fn all_constant_graph_backward_is_empty() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let loss = tape.sum(a);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(loss).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(28);
        let x = random_matrix(&mut rng, 5, 3);
        let shifted = x.map(|v| v + 13.25);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax_rows(a);
        let sb = tape.softmax_rows(b);
        let (va, vb) = (tape.value(sa), tape.value(sb));
        assert!(va.max_abs_diff(vb) < 1e-12);
        for r in 0..5 {
            let s: f64 = va.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(va.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let x = DenseMatrix::from_vec(1, 3, vec![-800.0, 0.0, 800.0]);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let y = tape.softplus(a);
        let v = tape.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.get(0, 1) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v.get(0, 2), 800.0);
        assert!(v.is_finite());
    }
}
