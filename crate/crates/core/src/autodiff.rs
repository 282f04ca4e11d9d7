//! Minimal reverse-mode automatic differentiation over f64 matrices.
//!
//! Every training path in this crate (speaker encoder, synthesizer decoder,
//! vocoder) records its forward pass on a [`Tape`] and gets exact gradients
//! from a single backward sweep. Ops are matrix-level so the recurrent loops
//! stay cheap: one node per gate activation, not per scalar.

use ndarray::{s, Array2, Axis};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a · b
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// (B×D) + (1×D), bias-style row broadcast
    AddRow(NodeId, NodeId),
    /// (B×D) ⊙ (B×1)
    MulCol(NodeId, NodeId),
    /// (B×D) / (B×1)
    DivCol(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a + s with s a 1×1 node broadcast everywhere
    AddScalar(NodeId, NodeId),
    /// a ⊙ s with s a 1×1 node
    MulScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    /// → 1×1
    SumAll(NodeId),
    /// per-row sum, (B×D) → (B×1)
    SumAxis1(NodeId),
    /// per-column mean, (B×D) → (1×D)
    MeanAxis0(NodeId),
    /// per-row log-sum-exp, (B×D) → (B×1)
    LseAxis1(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    /// gather rows by index; backward scatter-adds
    Rows(NodeId, Vec<usize>),
    /// concat along axis 0
    StackRows(Vec<NodeId>),
}

pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id].dim(), (1, 1));
        self.values[id][[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].dot(&self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].dot(&self.values[b].t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] + &self.values[b];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] - &self.values[b];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] * &self.values[b];
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] / &self.values[b];
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.values[row].nrows(), 1);
        let v = &self.values[a] + &self.values[row];
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.values[col].ncols(), 1);
        let v = &self.values[a] * &self.values[col];
        self.push(v, Op::MulCol(a, col))
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.values[col].ncols(), 1);
        let v = &self.values[a] / &self.values[col];
        self.push(v, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.values[a].mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        let s = self.scalar(scalar);
        let v = self.values[a].mapv(|x| x + s);
        self.push(v, Op::AddScalar(a, scalar))
    }

    pub fn mul_scalar(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        let s = self.scalar(scalar);
        let v = self.values[a].mapv(|x| x * s);
        self.push(v, Op::MulScalar(a, scalar))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.values[a].sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumAxis1(a))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let v = self
            .values[a]
            .mean_axis(Axis(0))
            .expect("mean over empty axis")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanAxis0(a))
    }

    pub fn lse_axis1(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a];
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&e| (e - m).exp()).sum();
            v[[i, 0]] = m + s.ln();
        }
        self.push(v, Op::LseAxis1(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(Axis(1), &[self.values[a].view(), self.values[b].view()])
            .expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.values[a].slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.values[a].slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let src = &self.values[a];
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &r) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::Rows(a, indices))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.values[p].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows shape mismatch");
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    /// x · w + b with b a 1×D row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Rowwise L2 normalization: v / ||v||₂ per row. Rows must have norm > 0.
    pub fn normalize_rows(&mut self, v: NodeId) -> NodeId {
        let sq = self.mul(v, v);
        let sums = self.sum_axis1(sq);
        let norms = self.sqrt(sums);
        self.div_col(v, norms)
    }

    /// Backpropagates from `root` (any shape; seeded with ones) and returns
    /// per-node gradients.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[root] = Some(Array2::ones(self.values[root].dim()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.values[b].t());
                    let db = self.values[a].t().dot(&g);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::MatMulBt(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.values[b]);
                    let db = g.t().dot(&self.values[a]);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, b, g.mapv(|x| -x));
                    acc(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.values[b];
                    let db = &g * &self.values[a];
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g / &self.values[b];
                    let db = -&(&(&g * &self.values[id]) / &self.values[b]);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, row, drow);
                    acc(&mut grads, a, g);
                }
                Op::MulCol(a, col) => {
                    let (a, col) = (*a, *col);
                    let da = &g * &self.values[col];
                    let dcol = (&g * &self.values[a])
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut grads, a, da);
                    acc(&mut grads, col, dcol);
                }
                Op::DivCol(a, col) => {
                    let (a, col) = (*a, *col);
                    let da = &g / &self.values[col];
                    let dcol = -&((&g * &self.values[id])
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1))
                        / &self.values[col]);
                    acc(&mut grads, a, da);
                    acc(&mut grads, col, dcol);
                }
                Op::Scale(a, factor) => {
                    let (a, factor) = (*a, *factor);
                    acc(&mut grads, a, g.mapv(|x| x * factor));
                }
                Op::AddScalar(a, scalar) => {
                    let (a, scalar) = (*a, *scalar);
                    acc(&mut grads, scalar, Array2::from_elem((1, 1), g.sum()));
                    acc(&mut grads, a, g);
                }
                Op::MulScalar(a, scalar) => {
                    let (a, scalar) = (*a, *scalar);
                    let s = self.values[scalar][[0, 0]];
                    let ds = (&g * &self.values[a]).sum();
                    acc(&mut grads, scalar, Array2::from_elem((1, 1), ds));
                    acc(&mut grads, a, g.mapv(|x| x * s));
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let da = &g * &self.values[id].mapv(|v| v * (1.0 - v));
                    acc(&mut grads, a, da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = &g * &self.values[id].mapv(|v| 1.0 - v * v);
                    acc(&mut grads, a, da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.values[a].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, a, &g * &mask);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let da = &g * &self.values[id].mapv(|v| 0.5 / v);
                    acc(&mut grads, a, da);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let da = Array2::from_elem(self.values[a].dim(), g[[0, 0]]);
                    acc(&mut grads, a, da);
                }
                Op::SumAxis1(a) => {
                    let a = *a;
                    let da = g.broadcast(self.values[a].dim()).unwrap().to_owned();
                    acc(&mut grads, a, da);
                }
                Op::MeanAxis0(a) => {
                    let a = *a;
                    let rows = self.values[a].nrows() as f64;
                    let da = (&g / rows)
                        .broadcast(self.values[a].dim())
                        .unwrap()
                        .to_owned();
                    acc(&mut grads, a, da);
                }
                Op::LseAxis1(a) => {
                    let a = *a;
                    // d lse / d a_ij = exp(a_ij - lse_i)
                    let softmax = {
                        let mut m = self.values[a].clone();
                        for (mut row, lse) in
                            m.rows_mut().into_iter().zip(self.values[id].column(0))
                        {
                            row.mapv_inplace(|x| (x - lse).exp());
                        }
                        m
                    };
                    let da = &softmax * &g;
                    acc(&mut grads, a, da);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let wa = self.values[a].ncols();
                    let da = g.slice(s![.., 0..wa]).to_owned();
                    let db = g.slice(s![.., wa..]).to_owned();
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::SliceCols(a, start, end) => {
                    let (a, start, end) = (*a, *start, *end);
                    let mut da = Array2::zeros(self.values[a].dim());
                    da.slice_mut(s![.., start..end]).assign(&g);
                    acc(&mut grads, a, da);
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut da = Array2::zeros(self.values[a].dim());
                    da.slice_mut(s![start..start + len, ..]).assign(&g);
                    acc(&mut grads, a, da);
                }
                Op::Rows(a, indices) => {
                    let (a, indices) = (*a, indices.clone());
                    let mut da = Array2::zeros(self.values[a].dim());
                    for (i, &r) in indices.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, a, da);
                }
                Op::StackRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.values[p].nrows();
                        let dp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        acc(&mut grads, p, dp);
                        offset += rows;
                    }
                }
            }
        }

        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to node `id`; zero matrix
    /// if the node does not influence the root.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Array2<f64> {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Array2::zeros(tape.value(id).dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to each entry of the
    /// leaf values, compared coordinatewise against the analytic gradient.
    fn check_grad(
        seed: u64,
        shapes: &[(usize, usize)],
        f: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Array2<f64>> = shapes
            .iter()
            .map(|&(r, c)| Array2::from_shape_fn((r, c), |_| rng.gen_range(0.1..1.2)))
            .collect();

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = f(&mut tape, &leaves);
        assert_eq!(tape.value(root).dim(), (1, 1), "root must be scalar");
        let grads = tape.backward(root);

        let eps = 1e-5;
        for (li, shape) in shapes.iter().enumerate() {
            let analytic = grads.get(leaves[li], &tape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let eval = |delta: f64| {
                        let mut vs = values.clone();
                        vs[li][[r, c]] += delta;
                        let mut t = Tape::new();
                        let ls: Vec<NodeId> = vs.iter().map(|v| t.leaf(v.clone())).collect();
                        let out = f(&mut t, &ls);
                        t.scalar(out)
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (a - fd).abs() / denom < 1e-6,
                        "leaf {li} [{r},{c}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(1, &[(3, 4), (4, 2)], |t, l| {
            let m = t.matmul(l[0], l[1]);
            let s = t.sigmoid(m);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_matmul_bt() {
        check_grad(2, &[(3, 4), (5, 4)], |t, l| {
            let m = t.matmul_bt(l[0], l[1]);
            let h = t.tanh(m);
            t.sum_all(h)
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grad(3, &[(3, 3), (3, 3)], |t, l| {
            let a = t.mul(l[0], l[1]);
            let b = t.div(l[0], l[1]);
            let c = t.sub(a, b);
            let d = t.add(c, l[0]);
            t.sum_all(d)
        });
    }

    #[test]
    fn grad_broadcast_ops() {
        check_grad(4, &[(4, 3), (1, 3), (4, 1)], |t, l| {
            let a = t.add_row(l[0], l[1]);
            let b = t.mul_col(a, l[2]);
            let c = t.div_col(b, l[2]);
            let d = t.add(b, c);
            t.sum_all(d)
        });
    }

    #[test]
    fn grad_scalar_broadcast() {
        check_grad(5, &[(3, 4), (1, 1), (1, 1)], |t, l| {
            let a = t.mul_scalar(l[0], l[1]);
            let b = t.add_scalar(a, l[2]);
            let c = t.tanh(b);
            t.sum_all(c)
        });
    }

    #[test]
    fn grad_reductions() {
        check_grad(6, &[(4, 5)], |t, l| {
            let s1 = t.sum_axis1(l[0]);
            let sq = t.sqrt(s1);
            let m0 = t.mean_axis0(l[0]);
            let a = t.sum_all(sq);
            let b = t.sum_all(m0);
            t.add(a, b)
        });
    }

    #[test]
    fn grad_lse() {
        check_grad(7, &[(4, 6)], |t, l| {
            let scaled = t.scale(l[0], 3.0);
            let lse = t.lse_axis1(scaled);
            t.sum_all(lse)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_grad(8, &[(3, 4), (3, 2)], |t, l| {
            let cat = t.concat_cols(l[0], l[1]);
            let left = t.slice_cols(cat, 1, 5);
            let rows = t.rows(left, vec![2, 0, 2, 1]);
            let top = t.slice_rows(rows, 1, 2);
            let stacked = t.stack_rows(&[top, top]);
            let r = t.relu(stacked);
            t.sum_all(r)
        });
    }

    #[test]
    fn grad_normalize_rows() {
        check_grad(9, &[(4, 5)], |t, l| {
            let e = t.normalize_rows(l[0]);
            let sq = t.mul(e, e);
            let s = t.sum_all(sq);
            let lse = t.lse_axis1(e);
            let s2 = t.sum_all(lse);
            t.add(s, s2)
        });
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::ones((2, 2)));
        let b = tape.leaf(Array2::ones((2, 2)));
        let s = tape.sum_all(a);
        let grads = tape.backward(s);
        assert_eq!(grads.get(b, &tape), Array2::zeros((2, 2)));
        assert_eq!(grads.get(a, &tape), Array2::ones((2, 2)));
    }
}
