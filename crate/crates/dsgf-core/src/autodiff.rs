//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a flat tape of nodes created in topological order; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node reachable from the loss. The op set is exactly what the
//! model needs: matrix products, broadcast adds, row-wise (log-)softmax,
//! gather/concat/slice plumbing and a picked negative-log-likelihood
//! reduction for cross-entropy losses.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// (m,k)·(k,n) -> (m,n)
    MatMul(usize, usize),
    /// Same-shape elementwise sum.
    Add(usize, usize),
    /// (m,n) + row vector (n), broadcast over rows.
    AddRow(usize, usize),
    /// (m,n) + column vector (m), broadcast over columns.
    AddCol(usize, usize),
    /// (m) ⊕ (n) -> (m,n) with out[i][j] = u[i] + v[j].
    OuterSum(usize, usize),
    /// Same-shape elementwise product.
    Mul(usize, usize),
    /// Multiply by a constant.
    Scale(usize, f64),
    /// (m,n) with row i scaled by s[i].
    RowScale(usize, usize),
    Relu(usize),
    Tanh(usize),
    /// Row-wise softmax of a matrix.
    SoftmaxRows(usize),
    /// Row-wise log-softmax of a matrix.
    LogSoftmaxRows(usize),
    /// Select rows by index (duplicates allowed).
    GatherRows(usize, Vec<usize>),
    /// Stack matrices with equal column counts.
    ConcatRows(Vec<usize>),
    /// Stack matrices with equal row counts side by side.
    ConcatCols(Vec<usize>),
    /// Columns [start, end) of a matrix.
    SliceCols(usize, usize, usize),
    Transpose(usize),
    /// Sum of all entries -> scalar.
    SumAll(usize),
    /// Weighted negative mean of picked log-probability entries -> scalar:
    /// `-(Σ w·x[r,c]) / Σ w` over the pick list.
    NllPick(usize, Vec<(usize, usize, f64)>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or zeros of the variable's shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// A computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf. Whether it is trainable is the caller's bookkeeping;
    /// gradients are computed for every node that influences the loss.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = ta.row(i);
            for (kk, &av) in arow.iter().enumerate().take(k) {
                if av == 0.0 {
                    continue;
                }
                let brow = tb.row(kk);
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(tr.shape().len(), 1, "add_row needs a vector");
        assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tr.data()[j];
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::AddRow(a.0, row.0))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        assert_eq!(tc.shape().len(), 1, "add_col needs a vector");
        assert_eq!(ta.rows(), tc.cols(), "add_col height mismatch");
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tc.data()[i];
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::AddCol(a.0, col.0))
    }

    pub fn outer_sum(&mut self, u: Var, v: Var) -> Var {
        let (tu, tv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        assert_eq!(tu.shape().len(), 1);
        assert_eq!(tv.shape().len(), 1);
        let (m, n) = (tu.len(), tv.len());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tu.data()[i] + tv.data()[j]);
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::OuterSum(u.0, v.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(a.0, c))
    }

    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        assert_eq!(ts.shape().len(), 1, "row_scale needs a vector");
        assert_eq!(ta.rows(), ts.cols(), "row_scale height mismatch");
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let f = ts.data()[i];
            for j in 0..n {
                data[i * n + j] *= f;
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::RowScale(a.0, s.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Tanh(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(ta.row(i), &mut data[i * n..(i + 1) * n]);
        }
        self.push(Tensor::matrix(m, n, data), Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::LogSoftmaxRows(a.0))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        let n = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < ta.rows(), "gather_rows index {i} out of {}", ta.rows());
            data.extend_from_slice(ta.row(i));
        }
        self.push(Tensor::matrix(idx.len(), n, data), Op::GatherRows(a.0, idx))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), n, "concat_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::matrix(rows, n, data),
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), m, "concat_cols height mismatch");
                data.extend_from_slice(t.row(i));
            }
        }
        self.push(
            Tensor::matrix(m, total, data),
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert!(start < end && end <= ta.cols(), "slice_cols out of range");
        let m = ta.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..end]);
        }
        self.push(Tensor::matrix(m, w, data), Op::SliceCols(a.0, start, end))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.at(i, j);
            }
        }
        self.push(Tensor::matrix(n, m, data), Op::Transpose(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// `-(Σ w·x[r,c]) / Σ w` over the picks. Input is typically a
    /// log-softmax matrix, making this a weighted mean cross-entropy.
    pub fn nll_pick(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        assert!(!picks.is_empty(), "nll_pick needs at least one pick");
        let ta = &self.nodes[a.0].value;
        let wsum: f64 = picks.iter().map(|p| p.2).sum();
        assert!(wsum > 0.0, "nll_pick weights must be positive");
        let mut s = 0.0;
        for &(r, c, w) in &picks {
            s += w * ta.at(r, c);
        }
        self.push(Tensor::scalar(-s / wsum), Op::NllPick(a.0, picks))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.len(),
            "reshape size mismatch"
        );
        let t = ta.reshaped(shape.clone());
        self.push(t, Op::Reshape(a.0))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], p: usize, delta: Tensor| {
            match &mut grads[p] {
                Some(acc) => acc.add_scaled(&delta, 1.0),
                slot => *slot = Some(delta),
            };
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // dA = G·Bᵀ ; dB = Aᵀ·G
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for kk in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i2, j) * tb.at(kk, j);
                        }
                        da[i2 * k + kk] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for kk in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i2 in 0..m {
                            s += ta.at(i2, kk) * g.at(i2, j);
                        }
                        db[kk * n + j] = s;
                    }
                }
                add_to(grads, *a, Tensor::matrix(m, k, da));
                add_to(grads, *b, Tensor::matrix(k, n, db));
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for i2 in 0..g.rows() {
                    for j in 0..n {
                        dr[j] += g.at(i2, j);
                    }
                }
                add_to(grads, *row, Tensor::vector(dr));
            }
            Op::AddCol(a, col) => {
                add_to(grads, *a, g.clone());
                let m = g.rows();
                let mut dc = vec![0.0; m];
                for (i2, dv) in dc.iter_mut().enumerate() {
                    *dv = g.row(i2).iter().sum();
                }
                add_to(grads, *col, Tensor::vector(dc));
            }
            Op::OuterSum(u, v) => {
                let (m, n) = (g.rows(), g.cols());
                let mut du = vec![0.0; m];
                let mut dv = vec![0.0; n];
                for i2 in 0..m {
                    for j in 0..n {
                        du[i2] += g.at(i2, j);
                        dv[j] += g.at(i2, j);
                    }
                }
                add_to(grads, *u, Tensor::vector(du));
                add_to(grads, *v, Tensor::vector(dv));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da: Vec<f64> = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                add_to(grads, *a, Tensor::new(ta.shape().to_vec(), da));
                add_to(grads, *b, Tensor::new(tb.shape().to_vec(), db));
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.data().iter().map(|x| x * c).collect();
                add_to(grads, *a, Tensor::new(g.shape().to_vec(), da));
            }
            Op::RowScale(a, s) => {
                let (ta, ts) = (&self.nodes[*a].value, &self.nodes[*s].value);
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for i2 in 0..m {
                    let f = ts.data()[i2];
                    for j in 0..n {
                        da[i2 * n + j] = g.at(i2, j) * f;
                        ds[i2] += g.at(i2, j) * ta.at(i2, j);
                    }
                }
                add_to(grads, *a, Tensor::matrix(m, n, da));
                add_to(grads, *s, Tensor::vector(ds));
            }
            Op::Relu(a) => {
                let y = &self.nodes[i].value;
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                    .collect();
                add_to(grads, *a, Tensor::new(y.shape().to_vec(), da));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &y)| g * (1.0 - y * y))
                    .collect();
                add_to(grads, *a, Tensor::new(y.shape().to_vec(), da));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i2 in 0..m {
                    let yr = y.row(i2);
                    let gr = g.row(i2);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        da[i2 * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *a, Tensor::matrix(m, n, da));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i2 in 0..m {
                    let gsum: f64 = g.row(i2).iter().sum();
                    for j in 0..n {
                        da[i2 * n + j] = g.at(i2, j) - y.at(i2, j).exp() * gsum;
                    }
                }
                add_to(grads, *a, Tensor::matrix(m, n, da));
            }
            Op::GatherRows(a, idx) => {
                let ta = &self.nodes[*a].value;
                let mut da = Tensor::zeros(ta.shape().to_vec());
                let n = ta.cols();
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for j in 0..n {
                        let v = da.at(src_r, j) + g.at(out_r, j);
                        da.set(src_r, j, v);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = &self.nodes[*p].value;
                    let rows = tp.rows();
                    let n = tp.cols();
                    let mut dp = Vec::with_capacity(rows * n);
                    for r in 0..rows {
                        dp.extend_from_slice(g.row(offset + r));
                    }
                    add_to(grads, *p, Tensor::matrix(rows, n, dp));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let tp = &self.nodes[*p].value;
                    let w = tp.cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    add_to(grads, *p, Tensor::matrix(m, w, dp));
                    offset += w;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let ta = &self.nodes[*a].value;
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        da.set(r, start + j, g.at(r, j));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        da[j * m + r] = g.at(r, j);
                    }
                }
                add_to(grads, *a, Tensor::matrix(n, m, da));
            }
            Op::SumAll(a) => {
                let ta = &self.nodes[*a].value;
                let gv = g.scalar_value();
                let da = vec![gv; ta.len()];
                add_to(grads, *a, Tensor::new(ta.shape().to_vec(), da));
            }
            Op::NllPick(a, picks) => {
                let ta = &self.nodes[*a].value;
                let gv = g.scalar_value();
                let wsum: f64 = picks.iter().map(|p| p.2).sum();
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for &(r, c, w) in picks {
                    let v = da.at(r, c) - gv * w / wsum;
                    da.set(r, c, v);
                }
                add_to(grads, *a, da);
            }
            Op::Reshape(a) => {
                let ta = &self.nodes[*a].value;
                add_to(grads, *a, g.reshaped(ta.shape().to_vec()));
            }
        }
    }
}

/// Numerically stable softmax into a preallocated slice.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax of a slice, allocating.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let up = f(&xp);
            xp[i] = x[i] - step;
            let down = f(&xp);
            xp[i] = x[i];
            g[i] = (up - down) / (2.0 * step);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-4);
            assert!(
                (x - y).abs() / denom <= tol,
                "grad mismatch at {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let s = g.softmax_rows(a);
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    // Composite expression exercising most ops; analytic gradient must match
    // central finite differences.
    #[test]
    fn backward_matches_finite_differences() {
        let x0 = vec![0.31, -0.74, 0.55, 1.21, -0.33, 0.87];
        let w0 = vec![0.11, -0.42, 0.95, 0.27, -0.66, 0.08, 0.73, -0.19, 0.36];

        let run = |xv: &[f64], wv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(2, 3, xv.to_vec()));
            let w = g.leaf(Tensor::matrix(3, 3, wv.to_vec()));
            let h = g.matmul(x, w);
            let t = g.tanh(h);
            let r = g.relu(t);
            let sm = g.log_softmax_rows(r);
            let picked = g.nll_pick(sm, vec![(0, 1, 1.0), (1, 2, 2.0)]);
            let gathered = g.gather_rows(t, vec![1, 0, 1]);
            let tr = g.transpose(gathered);
            let sum2 = g.sum_all(tr);
            let scaled = g.scale(sum2, 0.15);
            let loss = g.add(picked, scaled);
            let grads = g.backward(loss);
            (
                g.value(loss).scalar_value(),
                grads.get_or_zeros(x, &[2, 3]).data().to_vec(),
                grads.get_or_zeros(w, &[3, 3]).data().to_vec(),
            )
        };

        let (_, gx, gw) = run(&x0, &w0);
        let mut fx = |xv: &[f64]| run(xv, &w0).0;
        let nx = finite_diff(&mut fx, &x0, 1e-5);
        assert_close(&gx, &nx, 1e-6);
        let mut fw = |wv: &[f64]| run(&x0, wv).0;
        let nw = finite_diff(&mut fw, &w0, 1e-5);
        assert_close(&gw, &nw, 1e-6);
    }

    #[test]
    fn broadcast_and_outer_ops_backward() {
        let u0 = vec![0.4, -0.9];
        let v0 = vec![0.2, 0.7, -0.5];

        let run = |uv: &[f64], vv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let u = g.leaf(Tensor::vector(uv.to_vec()));
            let v = g.leaf(Tensor::vector(vv.to_vec()));
            let m = g.outer_sum(u, v);
            let m2 = g.add_row(m, v);
            let m3 = g.add_col(m2, u);
            let m4 = g.row_scale(m3, u);
            let sm = g.softmax_rows(m4);
            let sliced = g.slice_cols(sm, 1, 3);
            let cat = g.concat_cols(&[sliced, m4]);
            let stacked = g.concat_rows(&[cat, cat]);
            let tn = g.tanh(stacked);
            let s = g.sum_all(tn);
            let grads = g.backward(s);
            (
                g.value(s).scalar_value(),
                grads.get_or_zeros(u, &[2]).data().to_vec(),
                grads.get_or_zeros(v, &[3]).data().to_vec(),
            )
        };

        let (_, gu, gv) = run(&u0, &v0);
        let mut fu = |uv: &[f64]| run(uv, &v0).0;
        assert_close(&gu, &finite_diff(&mut fu, &u0, 1e-5), 1e-6);
        let mut fv = |vv: &[f64]| run(&u0, vv).0;
        assert_close(&gv, &finite_diff(&mut fv, &v0, 1e-5), 1e-6);
    }

    #[test]
    fn gather_accumulates_duplicate_rows() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let picked = g.gather_rows(x, vec![0, 0, 1]);
        let s = g.sum_all(picked);
        let grads = g.backward(s);
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[2.0, 2.0, 1.0, 1.0],
            "row 0 picked twice must receive gradient 2"
        );
    }
}
