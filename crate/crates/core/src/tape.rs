//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! The model forward passes build a tape of matrix ops; `backward_seeded`
//! propagates cotangents from any set of output nodes back to the leaves.
//! Loss functions with hand-derived gradients seed the tape at the nodes
//! holding their inputs, so the loss math lives in one place (`losses`) and
//! the tape only handles the network chain rule.

use crate::linalg::{log_softmax_into, sigmoid, softmax_into, softplus, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// Elementwise product with a constant matrix.
    MulConst(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `m + row` with the 1xC row broadcast over every row of m.
    AddRowBroadcast(Var, Var),
    /// `m * row` with the 1xC row broadcast over every row of m.
    MulRowBroadcast(Var, Var),
    /// `m / col` with the Rx1 column broadcast over every column of m.
    DivColBroadcast(Var, Var),
    /// Matrix times a 1x1 scalar variable.
    MulScalarVar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Expand P rows into N rows via a row index map (backward scatter-adds).
    ExpandRows(Var, Vec<usize>),
    /// Pick scalar elements into an Nx1 column.
    PickElems(Var, Vec<(usize, usize)>),
    RowSums(Var),
    Sum(Var),
    Softmax(Var, bool),
    LogSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Softplus(Var),
    DivElem(Var, Var),
}

struct Node {
    op: Op,
    value: Mat,
    /// Constant payload for MulConst.
    aux: Option<Mat>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.push_aux(op, value, None)
    }

    fn push_aux(&mut self, op: Op, value: Mat, aux: Option<Mat>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert!(ma.same_shape(mb), "sub shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert!(ma.same_shape(mb), "mul_elem shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(Op::MulElem(a, b), out)
    }

    pub fn mul_const(&mut self, a: Var, k: &Mat) -> Var {
        let ma = self.value(a);
        assert!(ma.same_shape(k), "mul_const shape mismatch");
        let data = ma.data.iter().zip(&k.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(ma.rows, ma.cols, data);
        self.push_aux(Op::MulConst(a), out, Some(k.clone()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::AddConst(a), out)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1, "broadcast row must be 1xC");
        assert_eq!(ma.cols, mr.cols, "broadcast width mismatch");
        let mut out = ma.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += mr.data[c];
            }
        }
        self.push(Op::AddRowBroadcast(a, row), out)
    }

    pub fn mul_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1, "broadcast row must be 1xC");
        assert_eq!(ma.cols, mr.cols, "broadcast width mismatch");
        let mut out = ma.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= mr.data[c];
            }
        }
        self.push(Op::MulRowBroadcast(a, row), out)
    }

    pub fn div_col_broadcast(&mut self, a: Var, col: Var) -> Var {
        let (ma, mc) = (self.value(a), self.value(col));
        assert_eq!(mc.cols, 1, "broadcast col must be Rx1");
        assert_eq!(ma.rows, mc.rows, "broadcast height mismatch");
        let mut out = ma.clone();
        for r in 0..out.rows {
            let d = mc.data[r];
            for c in 0..out.cols {
                out.data[r * out.cols + c] /= d;
            }
        }
        self.push(Op::DivColBroadcast(a, col), out)
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v * sv);
        self.push(Op::MulScalarVar(a, s), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|p| self.value(*p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let data = m.data[start * m.cols..(start + len) * m.cols].to_vec();
        let out = Mat::from_vec(len, m.cols, data);
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m.cols);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Mat::from_vec(idx.len(), m.cols, data);
        self.push(Op::GatherRows(a, idx.to_vec()), out)
    }

    pub fn expand_rows(&mut self, a: Var, map: &[usize]) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(map.len() * m.cols);
        for &i in map {
            data.extend_from_slice(m.row(i));
        }
        let out = Mat::from_vec(map.len(), m.cols, data);
        self.push(Op::ExpandRows(a, map.to_vec()), out)
    }

    pub fn pick_elems(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let data: Vec<f64> = coords.iter().map(|&(r, c)| m.get(r, c)).collect();
        let out = Mat::col_vec(data);
        self.push(Op::PickElems(a, coords.to_vec()), out)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data: Vec<f64> = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        self.push(Op::RowSums(a), Mat::col_vec(data))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Mat::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise softmax; with `causal` set, row `i` only sees columns `<= i`
    /// (the matrix must then be square).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let m = self.value(a);
        if causal {
            assert_eq!(m.rows, m.cols, "causal softmax needs a square matrix");
        }
        let mut out = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let width = if causal { r + 1 } else { m.cols };
            let row = &m.data[r * m.cols..r * m.cols + width];
            let dst = &mut out.data[r * m.cols..r * m.cols + width];
            softmax_into(row, dst);
        }
        self.push(Op::Softmax(a, causal), out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = &m.data[r * m.cols..(r + 1) * m.cols];
            let dst = &mut out.data[r * m.cols..(r + 1) * m.cols];
            log_softmax_into(row, dst);
        }
        self.push(Op::LogSoftmax(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert!(ma.same_shape(mb), "div_elem shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x / y).collect();
        let out = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(Op::DivElem(a, b), out)
    }

    /// RMS normalization over each row: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: f64) -> Var {
        let cols = self.value(a).cols;
        let sq = self.mul_elem(a, a);
        let sums = self.row_sums(sq);
        let means = self.scale(sums, 1.0 / cols as f64);
        let shifted = self.add_const(means, eps);
        let denom = self.sqrt(shifted);
        let normed = self.div_col_broadcast(a, denom);
        self.mul_row_broadcast(normed, gain)
    }

    /// Backward pass from a single scalar output with cotangent 1.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_seeded(&[(output, Mat::scalar(1.0))])
    }

    /// Backward pass seeded with explicit cotangents at arbitrary nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (var, seed) in seeds {
            let val = &self.nodes[var.0].value;
            assert!(val.same_shape(seed), "seed shape mismatch at node {}", var.0);
            match &mut grads[var.0] {
                Some(g) => g.add_assign(seed),
                slot => *slot = Some(seed.clone()),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Mat>], target: Var, delta: Mat) {
        match &mut grads[target.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let value = &self.nodes[node].value;
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.map(|v| -v));
            }
            Op::MulElem(a, b) => {
                let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect(),
                );
                let db = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ma.data).map(|(x, y)| x * y).collect(),
                );
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::MulConst(a) => {
                let k = self.nodes[node].aux.as_ref().expect("const payload");
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&k.data).map(|(x, y)| x * y).collect(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Scale(a, c) => Self::accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddConst(a) => Self::accumulate(grads, *a, g.clone()),
            Op::AddRowBroadcast(a, row) => {
                Self::accumulate(grads, *a, g.clone());
                let mut drow = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        drow.data[c] += g.get(r, c);
                    }
                }
                Self::accumulate(grads, *row, drow);
            }
            Op::MulRowBroadcast(a, row) => {
                let (ma, mr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
                let mut da = Mat::zeros(g.rows, g.cols);
                let mut drow = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        da.set(r, c, g.get(r, c) * mr.data[c]);
                        drow.data[c] += g.get(r, c) * ma.get(r, c);
                    }
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *row, drow);
            }
            Op::DivColBroadcast(a, col) => {
                let (ma, mc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
                let mut da = Mat::zeros(g.rows, g.cols);
                let mut dcol = Mat::zeros(g.rows, 1);
                for r in 0..g.rows {
                    let d = mc.data[r];
                    let mut acc = 0.0;
                    for c in 0..g.cols {
                        da.set(r, c, g.get(r, c) / d);
                        acc += g.get(r, c) * (-ma.get(r, c) / (d * d));
                    }
                    dcol.data[r] = acc;
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *col, dcol);
            }
            Op::MulScalarVar(a, s) => {
                let (ma, ms) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                let sv = ms.item();
                Self::accumulate(grads, *a, g.map(|v| v * sv));
                let ds: f64 = g.data.iter().zip(&ma.data).map(|(x, y)| x * y).sum();
                Self::accumulate(grads, *s, Mat::scalar(ds));
            }
            Op::MatMul(a, b) => {
                let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = g.matmul(&mb.transpose());
                let db = ma.transpose().matmul(g);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Transpose(a) => Self::accumulate(grads, *a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows;
                    let data = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                    Self::accumulate(grads, *p, Mat::from_vec(rows, g.cols, data));
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let ma = &self.nodes[a.0].value;
                let mut da = Mat::zeros(ma.rows, ma.cols);
                da.data[start * ma.cols..(start + g.rows) * ma.cols].copy_from_slice(&g.data);
                Self::accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) | Op::ExpandRows(a, idx) => {
                let ma = &self.nodes[a.0].value;
                let mut da = Mat::zeros(ma.rows, ma.cols);
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..g.cols {
                        da.data[src_r * ma.cols + c] += g.get(out_r, c);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::PickElems(a, coords) => {
                let ma = &self.nodes[a.0].value;
                let mut da = Mat::zeros(ma.rows, ma.cols);
                for (k, &(r, c)) in coords.iter().enumerate() {
                    da.data[r * ma.cols + c] += g.data[k];
                }
                Self::accumulate(grads, *a, da);
            }
            Op::RowSums(a) => {
                let ma = &self.nodes[a.0].value;
                let mut da = Mat::zeros(ma.rows, ma.cols);
                for r in 0..ma.rows {
                    for c in 0..ma.cols {
                        da.set(r, c, g.data[r]);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let ma = &self.nodes[a.0].value;
                Self::accumulate(grads, *a, Mat::from_vec(ma.rows, ma.cols, vec![g.item(); ma.data.len()]));
            }
            Op::Softmax(a, causal) => {
                // dx = y * (g - sum(g * y)) per row, restricted to the
                // visible prefix for causal rows.
                let y = value;
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let width = if *causal { r + 1 } else { y.cols };
                    let mut dot = 0.0;
                    for c in 0..width {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..width {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax(x) * rowsum(g)
                let ma = &self.nodes[a.0].value;
                let mut da = Mat::zeros(ma.rows, ma.cols);
                let mut probs = vec![0.0; ma.cols];
                for r in 0..ma.rows {
                    softmax_into(ma.row(r), &mut probs);
                    let gs: f64 = g.row(r).iter().sum();
                    for c in 0..ma.cols {
                        da.set(r, c, g.get(r, c) - probs[c] * gs);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = value;
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = value;
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let y = value;
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * 0.5 / yv)
                        .collect(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let ma = &self.nodes[a.0].value;
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ma.data)
                        .map(|(gv, xv)| gv * sigmoid(*xv))
                        .collect(),
                );
                Self::accumulate(grads, *a, da);
            }
            Op::DivElem(a, b) => {
                let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&mb.data).map(|(gv, bv)| gv / bv).collect(),
                );
                let db = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(ma.data.iter().zip(&mb.data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect(),
                );
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient at a node; zero matrix if nothing flowed there.
    pub fn get(&self, v: Var, shape_like: &Mat) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(shape_like.rows, shape_like.cols),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Finite-difference check for a scalar-valued tape program.
    fn fd_check(build: impl Fn(&mut Tape, &Mat) -> Var, x0: Mat, tol: f64) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        assert_eq!((tape.value(loss).rows, tape.value(loss).cols), (1, 1));
        let grads = tape.backward(loss);
        let leaf = Var(0);
        let analytic = grads.get(leaf, &x0);

        let h = 1e-6;
        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut tp = Tape::new();
            let lp = build(&mut tp, &xp);
            let fp = tp.value(lp).item();

            let mut xm = x0.clone();
            xm.data[i] -= h;
            let mut tm = Tape::new();
            let lm = build(&mut tm, &xm);
            let fm = tm.value(lm).item();

            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < tol,
                "coord {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn matmul_softmax_chain_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[0]);
        let x0 = rand_mat(3, 4, &mut rng);
        let w = rand_mat(4, 3, &mut rng);
        fd_check(
            move |tape, x| {
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let y = tape.matmul(xv, wv);
                let s = tape.softmax_rows(y, false);
                let t = tape.tanh(s);
                tape.mean(t)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn causal_softmax_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[1]);
        let x0 = rand_mat(4, 4, &mut rng);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let s = tape.softmax_rows(xv, true);
                let sq = tape.mul_elem(s, s);
                tape.sum(sq)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn log_softmax_pick_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[2]);
        let x0 = rand_mat(3, 5, &mut rng);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let lp = tape.log_softmax_rows(xv);
                let picked = tape.pick_elems(lp, &[(0, 2), (1, 0), (2, 4)]);
                let m = tape.mean(picked);
                tape.scale(m, -1.0)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn rms_norm_and_broadcast_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[3]);
        let x0 = rand_mat(3, 4, &mut rng);
        let gain = rand_mat(1, 4, &mut rng);
        fd_check(
            move |tape, x| {
                let xv = tape.leaf(x.clone());
                let gv = tape.leaf(gain.clone());
                let n = tape.rms_norm(xv, gv, 1e-6);
                let s = tape.sigmoid(n);
                tape.sum(s)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn gather_expand_slice_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[4]);
        let x0 = rand_mat(5, 3, &mut rng);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let gathered = tape.gather_rows(xv, &[0, 2, 2, 4]);
                let expanded = tape.expand_rows(gathered, &[1, 1, 3, 0, 2]);
                let sliced = tape.slice_rows(expanded, 1, 3);
                let sp = tape.softplus(sliced);
                tape.sum(sp)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn scalar_and_division_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[5]);
        let x0 = rand_mat(1, 6, &mut rng).map(|v| v.abs() + 0.5);
        fd_check(
            |tape, x| {
                let xv = tape.leaf(x.clone());
                let a = tape.slice_rows(xv, 0, 1);
                let s = tape.sum(a);
                let sq = tape.mul_elem(s, s);
                let shifted = tape.add_const(sq, 1.0);
                let root = tape.sqrt(shifted);
                let num = tape.scale(s, 2.0);
                tape.div_elem(num, root)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn seeded_backward_accumulates_multiple_outputs() {
        // d/dx of (2*sum(x) + 3*sum(x^2)) seeded as two separate outputs.
        let x0 = Mat::row_vec(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let s1 = tape.sum(xv);
        let sq = tape.mul_elem(xv, xv);
        let s2 = tape.sum(sq);
        let grads = tape.backward_seeded(&[(s1, Mat::scalar(2.0)), (s2, Mat::scalar(3.0))]);
        let g = grads.get(xv, &x0);
        for (i, &x) in x0.data.iter().enumerate() {
            assert!((g.data[i] - (2.0 + 6.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn mul_const_and_scalar_var_gradient() {
        let mut rng = crate::rngutil::substream(31, "tape-test", &[6]);
        let x0 = rand_mat(2, 3, &mut rng);
        let k = rand_mat(2, 3, &mut rng);
        fd_check(
            move |tape, x| {
                let xv = tape.leaf(x.clone());
                let kx = tape.mul_const(xv, &k);
                let s = tape.sum(kx);
                let scaled = tape.mul_scalar_var(xv, s);
                tape.sum(scaled)
            },
            x0,
            1e-5,
        );
    }
}
