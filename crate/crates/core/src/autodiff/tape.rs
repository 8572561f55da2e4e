use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::st_sparse;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    /// a * b, both on tape.
    Matmul(Value, Value),
    /// m * rhs with a constant dense left operand (dense propagation path).
    /// `lhs_t` is the transpose, shared across layers and epochs.
    MatmulConstLhs {
        lhs_t: Rc<DenseMatrix<S>>,
        rhs: Value,
    },
    /// s * rhs with a constant sparse left operand; backward is s^T * upstream.
    Spmm {
        lhs_t: CsrMatrix<S>,
        rhs: Value,
    },
    Add(Value, Value),
    /// a + constant, folded at record time.
    AddConst(Value),
    /// a ⊙ constant mask, same shape. No gradient flows into the mask.
    HadamardConst {
        a: Value,
        mask: Rc<DenseMatrix<S>>,
    },
    /// out_ij = a_ij * scale_j with a constant per-column vector
    /// (the attention mask broadcast across node rows).
    ScaleColsConst {
        a: Value,
        scale: Rc<Vec<S>>,
    },
    /// out_ij = a_ij * v_i where v is an (n,1) value on tape.
    ScaleRows {
        a: Value,
        v: Value,
    },
    /// out_ij = a_ij * v_j where v is an (m,1) value on tape.
    ScaleCols {
        a: Value,
        v: Value,
    },
    /// (n,m) -> (n,1) row sums.
    RowSum(Value),
    /// Elementwise a^p.
    Powf {
        a: Value,
        p: S,
    },
    Relu(Value),
    /// Row-wise TopK; gradient passes only through kept entries.
    TopKRows {
        a: Value,
        kept: Vec<bool>,
    },
    /// Inverted-scale dropout; `keep` entries are 0 or 1/(1-p).
    Dropout {
        a: Value,
        keep: Vec<S>,
    },
    /// Mean masked cross entropy after a row softmax.
    SoftmaxCrossEntropy {
        logits: Value,
        softmax: DenseMatrix<S>,
        labels: Rc<Vec<usize>>,
        mask_rows: Rc<Vec<usize>>,
    },
    Sum(Value),
    /// base + Σ_p s_p * sign_p * (E_{i_p j_p} + E_{j_p i_p}); the relaxed
    /// symmetric edge perturbation of the topology attacks.
    SymPairPerturb {
        s: Value,
        pairs: Rc<Vec<(u32, u32)>>,
        signs: Rc<Vec<S>>,
    },
}

struct Node<S: Scalar> {
    data: DenseMatrix<S>,
    /// Retained gradient; populated by backward for `param` leaves only.
    grad: Option<DenseMatrix<S>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<S>,
}

/// Append-only record of primitive applications over dense matrices.
/// Backward visits nodes in exact reverse insertion order. A tape is owned
/// by one training run; repeated backward calls accumulate additively into
/// leaf gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: DenseMatrix<S>, requires_grad: bool, needs_grad: bool, op: Op<S>) -> Value {
        self.nodes.push(Node { data, grad: None, requires_grad, needs_grad, op });
        Value(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is retained across backward calls.
    pub fn param(&mut self, data: DenseMatrix<S>) -> Value {
        self.push(data, true, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, data: DenseMatrix<S>) -> Value {
        self.push(data, false, false, Op::Leaf)
    }

    pub fn data(&self, v: Value) -> &DenseMatrix<S> {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes[v.0].data.shape()
    }

    /// Retained gradient of a `param` leaf; `None` before any backward call.
    pub fn grad(&self, v: Value) -> Option<&DenseMatrix<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar(&self, v: Value) -> S {
        let d = &self.nodes[v.0].data;
        assert_eq!(d.shape(), (1, 1), "value is not a scalar");
        d.get(0, 0)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.nodes[a.0].data.matmul(&self.nodes[b.0].data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, false, ng, Op::Matmul(a, b)))
    }

    /// Constant dense matrix times a tape value.
    pub fn matmul_const_lhs(
        &mut self,
        lhs: &DenseMatrix<S>,
        lhs_t: Rc<DenseMatrix<S>>,
        rhs: Value,
    ) -> Result<Value> {
        let out = lhs.matmul(&self.nodes[rhs.0].data)?;
        let ng = self.needs(rhs);
        Ok(self.push(out, false, ng, Op::MatmulConstLhs { lhs_t, rhs }))
    }

    /// Constant sparse matrix times a tape value.
    pub fn spmm(&mut self, lhs: &CsrMatrix<S>, rhs: Value) -> Result<Value> {
        let out = lhs.spmm(&self.nodes[rhs.0].data)?;
        let ng = self.needs(rhs);
        let lhs_t = lhs.transpose();
        Ok(self.push(out, false, ng, Op::Spmm { lhs_t, rhs }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.nodes[a.0].data.add(&self.nodes[b.0].data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, false, ng, Op::Add(a, b)))
    }

    pub fn add_const(&mut self, a: Value, c: &DenseMatrix<S>) -> Result<Value> {
        let out = self.nodes[a.0].data.add(c)?;
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::AddConst(a)))
    }

    /// Elementwise product with a constant mask; gradient does not flow
    /// into the mask.
    pub fn hadamard(&mut self, a: Value, mask: Rc<DenseMatrix<S>>) -> Result<Value> {
        let out = self.nodes[a.0].data.hadamard(&mask)?;
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::HadamardConst { a, mask }))
    }

    /// Scales column j of `a` by the constant `scale[j]`.
    pub fn scale_cols_const(&mut self, a: Value, scale: Rc<Vec<S>>) -> Result<Value> {
        let (r, c) = self.shape(a);
        if scale.len() != c {
            return Err(Error::Dimension(format!(
                "column scale of length {} on a {r}x{c} matrix",
                scale.len()
            )));
        }
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..r {
            for (x, &s) in out.row_mut(i).iter_mut().zip(scale.iter()) {
                *x = *x * s;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::ScaleColsConst { a, scale }))
    }

    pub fn scale_rows(&mut self, a: Value, v: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        if self.shape(v) != (r, 1) {
            return Err(Error::Dimension("row scale must be an (n,1) column".into()));
        }
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..r {
            let s = self.nodes[v.0].data.get(i, 0);
            for x in out.row_mut(i) {
                *x = *x * s;
            }
        }
        let _ = c;
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(out, false, ng, Op::ScaleRows { a, v }))
    }

    pub fn scale_cols(&mut self, a: Value, v: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        if self.shape(v) != (c, 1) {
            return Err(Error::Dimension("column scale must be an (m,1) column".into()));
        }
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..r {
            for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                *x = *x * self.nodes[v.0].data.get(j, 0);
            }
        }
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(out, false, ng, Op::ScaleCols { a, v }))
    }

    pub fn row_sum(&mut self, a: Value) -> Result<Value> {
        let out = self.nodes[a.0].data.row_sum();
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::RowSum(a)))
    }

    pub fn powf(&mut self, a: Value, p: S) -> Result<Value> {
        let out = self.nodes[a.0].data.map(|x| x.powf(p));
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::Powf { a, p }))
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let out = self.nodes[a.0].data.map(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::Relu(a)))
    }

    /// Row-wise TopK; the boolean keep mask is saved for the backward pass.
    pub fn topk_rows(&mut self, a: Value, k: usize) -> Result<Value> {
        let (out, kept) = st_sparse::topk_rows(&self.nodes[a.0].data, k)?;
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::TopKRows { a, kept }))
    }

    /// Training-mode dropout zeros entries with probability p and scales
    /// survivors by 1/(1-p). Eval mode and p = 0 return `a` unchanged.
    pub fn dropout(
        &mut self,
        a: Value,
        p: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<Value> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let inv = S::from(1.0 / (1.0 - p)).unwrap();
        let n = self.nodes[a.0].data.as_slice().len();
        let keep: Vec<S> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { inv })
            .collect();
        let src = &self.nodes[a.0].data;
        let mut out = src.clone();
        for (x, &k) in out.as_mut_slice().iter_mut().zip(&keep) {
            *x = *x * k;
        }
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::Dropout { a, keep }))
    }

    /// Mean of -log softmax(logits)[label] over masked rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Value,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Value> {
        let (n, c) = self.shape(logits);
        if labels.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "{n} logit rows, {} labels, {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let mask_rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if mask_rows.is_empty() {
            return Err(Error::DegenerateMask);
        }
        if let Some(&bad) = mask_rows.iter().find(|&&i| labels[i] >= c) {
            return Err(Error::Contract(format!(
                "label {} at node {bad} outside [0,{c})",
                labels[bad]
            )));
        }
        let data = &self.nodes[logits.0].data;
        let mut softmax = DenseMatrix::zeros(n, c);
        let mut total = S::zero();
        for &i in &mask_rows {
            let row = data.row(i);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &z in row {
                denom = denom + (z - max).exp();
            }
            for (j, &z) in row.iter().enumerate() {
                softmax.set(i, j, (z - max).exp() / denom);
            }
            total = total + denom.ln() - (row[labels[i]] - max);
        }
        let loss = total / S::from(mask_rows.len()).unwrap();
        let out = DenseMatrix::from_vec(1, 1, vec![loss]).unwrap();
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            false,
            ng,
            Op::SoftmaxCrossEntropy {
                logits,
                softmax,
                labels: Rc::new(labels.to_vec()),
                mask_rows: Rc::new(mask_rows),
            },
        ))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s = self.nodes[a.0].data.sum();
        let out = DenseMatrix::from_vec(1, 1, vec![s]).unwrap();
        let ng = self.needs(a);
        Ok(self.push(out, false, ng, Op::Sum(a)))
    }

    /// Relaxed symmetric edge perturbation: `base` plus, for each candidate
    /// pair p = (i,j), `s_p * sign_p` added at (i,j) and (j,i).
    pub fn sym_pair_perturb(
        &mut self,
        base: &DenseMatrix<S>,
        s: Value,
        pairs: Rc<Vec<(u32, u32)>>,
        signs: Rc<Vec<S>>,
    ) -> Result<Value> {
        let n = base.rows();
        if base.cols() != n {
            return Err(Error::Dimension("perturbation base must be square".into()));
        }
        if self.shape(s) != (pairs.len(), 1) || signs.len() != pairs.len() {
            return Err(Error::Dimension(
                "perturbation vector must be (pairs,1) with one sign per pair".into(),
            ));
        }
        let mut out = base.clone();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let delta = self.nodes[s.0].data.get(p, 0) * signs[p];
            if delta != S::zero() {
                let (i, j) = (i as usize, j as usize);
                out.set(i, j, out.get(i, j) + delta);
                out.set(j, i, out.get(j, i) + delta);
            }
        }
        let ng = self.needs(s);
        Ok(self.push(out, false, ng, Op::SymPairPerturb { s, pairs, signs }))
    }

    /// Reverse pass from a scalar loss. Gradients of `param` leaves are
    /// accumulated additively into their retained grad buffers.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].data.shape();
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut work: Vec<Option<DenseMatrix<S>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![S::one()]).unwrap());

        for idx in (0..=loss.0).rev() {
            let Some(up) = work[idx].take() else { continue };
            if !self.nodes[idx].needs_grad && !self.nodes[idx].requires_grad {
                continue;
            }
            if self.nodes[idx].requires_grad {
                match &mut self.nodes[idx].grad {
                    Some(g) => g.add_assign(&up).expect("grad shape fixed"),
                    slot => *slot = Some(up.clone()),
                }
            }
            // Split borrows: the op describes parents strictly before idx.
            let (before, at) = self.nodes.split_at_mut(idx);
            let node = &at[0];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if before[a.0].needs_grad {
                        let d = up.matmul_nt(&before[b.0].data)?;
                        accumulate(&mut work[a.0], d);
                    }
                    if before[b.0].needs_grad {
                        let d = before[a.0].data.transpose().matmul(&up)?;
                        accumulate(&mut work[b.0], d);
                    }
                }
                Op::MatmulConstLhs { lhs_t, rhs } => {
                    if before[rhs.0].needs_grad {
                        let d = lhs_t.matmul(&up)?;
                        accumulate(&mut work[rhs.0], d);
                    }
                }
                Op::Spmm { lhs_t, rhs } => {
                    if before[rhs.0].needs_grad {
                        let d = lhs_t.spmm(&up)?;
                        accumulate(&mut work[rhs.0], d);
                    }
                }
                Op::Add(a, b) => {
                    if before[a.0].needs_grad {
                        accumulate(&mut work[a.0], up.clone());
                    }
                    if before[b.0].needs_grad {
                        accumulate(&mut work[b.0], up.clone());
                    }
                }
                Op::AddConst(a) => {
                    if before[a.0].needs_grad {
                        accumulate(&mut work[a.0], up);
                    }
                }
                Op::HadamardConst { a, mask } => {
                    if before[a.0].needs_grad {
                        accumulate(&mut work[a.0], up.hadamard(mask)?);
                    }
                }
                Op::ScaleColsConst { a, scale } => {
                    if before[a.0].needs_grad {
                        let mut d = up;
                        for i in 0..d.rows() {
                            for (x, &s) in d.row_mut(i).iter_mut().zip(scale.iter()) {
                                *x = *x * s;
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::ScaleRows { a, v } => {
                    let a = *a;
                    let v = *v;
                    if before[v.0].needs_grad {
                        let mut dv = DenseMatrix::zeros(up.rows(), 1);
                        for i in 0..up.rows() {
                            let s: S = up
                                .row(i)
                                .iter()
                                .zip(before[a.0].data.row(i))
                                .map(|(&u, &x)| u * x)
                                .sum();
                            dv.set(i, 0, s);
                        }
                        accumulate(&mut work[v.0], dv);
                    }
                    if before[a.0].needs_grad {
                        let mut d = up;
                        for i in 0..d.rows() {
                            let s = before[v.0].data.get(i, 0);
                            for x in d.row_mut(i) {
                                *x = *x * s;
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::ScaleCols { a, v } => {
                    let a = *a;
                    let v = *v;
                    if before[v.0].needs_grad {
                        let mut dv = DenseMatrix::zeros(up.cols(), 1);
                        for i in 0..up.rows() {
                            for (j, (&u, &x)) in
                                up.row(i).iter().zip(before[a.0].data.row(i)).enumerate()
                            {
                                dv.set(j, 0, dv.get(j, 0) + u * x);
                            }
                        }
                        accumulate(&mut work[v.0], dv);
                    }
                    if before[a.0].needs_grad {
                        let mut d = up;
                        for i in 0..d.rows() {
                            for (j, x) in d.row_mut(i).iter_mut().enumerate() {
                                *x = *x * before[v.0].data.get(j, 0);
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::RowSum(a) => {
                    if before[a.0].needs_grad {
                        let (r, c) = before[a.0].data.shape();
                        let mut d = DenseMatrix::zeros(r, c);
                        for i in 0..r {
                            let u = up.get(i, 0);
                            for x in d.row_mut(i) {
                                *x = u;
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::Powf { a, p } => {
                    if before[a.0].needs_grad {
                        let p = *p;
                        let src = &before[a.0].data;
                        let mut d = up;
                        for (x, &v) in d.as_mut_slice().iter_mut().zip(src.as_slice()) {
                            *x = *x * p * v.powf(p - S::one());
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::Relu(a) => {
                    if before[a.0].needs_grad {
                        let src = &before[a.0].data;
                        let mut d = up;
                        for (x, &v) in d.as_mut_slice().iter_mut().zip(src.as_slice()) {
                            if v <= S::zero() {
                                *x = S::zero();
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::TopKRows { a, kept } => {
                    if before[a.0].needs_grad {
                        let mut d = up;
                        for (x, &keep) in d.as_mut_slice().iter_mut().zip(kept) {
                            if !keep {
                                *x = S::zero();
                            }
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::Dropout { a, keep } => {
                    if before[a.0].needs_grad {
                        let mut d = up;
                        for (x, &k) in d.as_mut_slice().iter_mut().zip(keep) {
                            *x = *x * k;
                        }
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, softmax, labels, mask_rows } => {
                    if before[logits.0].needs_grad {
                        let u = up.get(0, 0);
                        let inv = u / S::from(mask_rows.len()).unwrap();
                        let (n, c) = softmax.shape();
                        let mut d = DenseMatrix::zeros(n, c);
                        for &i in mask_rows.iter() {
                            for j in 0..c {
                                let onehot = if labels[i] == j { S::one() } else { S::zero() };
                                d.set(i, j, (softmax.get(i, j) - onehot) * inv);
                            }
                        }
                        accumulate(&mut work[logits.0], d);
                    }
                }
                Op::Sum(a) => {
                    if before[a.0].needs_grad {
                        let (r, c) = before[a.0].data.shape();
                        let u = up.get(0, 0);
                        let mut d = DenseMatrix::zeros(r, c);
                        d.fill(u);
                        accumulate(&mut work[a.0], d);
                    }
                }
                Op::SymPairPerturb { s, pairs, signs } => {
                    if before[s.0].needs_grad {
                        let mut d = DenseMatrix::zeros(pairs.len(), 1);
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            let (i, j) = (i as usize, j as usize);
                            d.set(p, 0, signs[p] * (up.get(i, j) + up.get(j, i)));
                        }
                        accumulate(&mut work[s.0], d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<DenseMatrix<S>>, delta: DenseMatrix<S>) {
    match slot {
        Some(g) => g.add_assign(&delta).expect("gradient shapes agree"),
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;

    type M = DenseMatrix<f64>;

    #[test]
    fn relu_forward_backward() {
        let mut t = Tape::<f64>::new();
        let x = t.param(M::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y).as_slice(), &[0.0, 2.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn spmm_on_normalized_path() {
        let adj = CsrMatrix::<f64>::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let norm = normalize_adjacency(&adj).unwrap();
        let mut t = Tape::<f64>::new();
        let i2 = t.param(M::identity(2));
        let y = t.spmm(&norm, i2).unwrap();
        assert_eq!(t.data(y).as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sum_of_weights_grad_is_ones() {
        let mut t = Tape::<f64>::new();
        let w = t.param(M::from_fn(2, 2, |i, j| (i + j) as f64));
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn matmul_vjp() {
        // loss = sum(A*B) => dA = ones * B^T
        let mut t = Tape::<f64>::new();
        let a = t.param(M::zeros(2, 3));
        let b = t.constant(M::from_fn(3, 2, |i, j| (i * 2 + j) as f64));
        let ab = t.matmul(a, b).unwrap();
        let loss = t.sum(ab).unwrap();
        t.backward(loss).unwrap();
        let ones = M::from_fn(2, 2, |_, _| 1.0);
        let expect = ones.matmul_nt(t.data(b)).unwrap();
        assert!(t.grad(a).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn cross_entropy_symmetric_logits() {
        let mut t = Tape::<f64>::new();
        let logits = t.param(M::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let loss = t.softmax_cross_entropy(logits, &[0], &[true]).unwrap();
        assert!((t.scalar(loss) - (2.0f64).ln()).abs() < 1e-12);
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert!((g.get(0, 0) + 0.5).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_extreme_logits_stable() {
        let mut t = Tape::<f64>::new();
        let logits = t.param(M::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let loss = t.softmax_cross_entropy(logits, &[0], &[true]).unwrap();
        let v = t.scalar(loss);
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_empty_mask_rejected() {
        let mut t = Tape::<f64>::new();
        let logits = t.param(M::zeros(2, 2));
        let r = t.softmax_cross_entropy(logits, &[0, 1], &[false, false]);
        assert!(matches!(r, Err(Error::DegenerateMask)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let logits = t.param(M::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 3.7));
        let loss = t
            .softmax_cross_entropy(logits, &[0, 1, 2], &[true, true, true])
            .unwrap();
        t.backward(loss).unwrap();
        // Row sums of (softmax - onehot)/|M| are zero, so softmax rows sum to 1.
        let g = t.grad(logits).unwrap();
        for i in 0..3 {
            let s: f64 = g.row(i).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let x = t.param(M::from_fn(4, 4, |i, j| (i * 4 + j) as f64));
        let eval = t.dropout(x, 0.5, &mut rng, false).unwrap();
        let p0 = t.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(eval, x);
        assert_eq!(p0, x);
    }

    #[test]
    fn dropout_training_scales_survivors() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::<f64>::new();
        let x = t.param(M::from_fn(8, 8, |_, _| 1.0));
        let y = t.dropout(x, 0.25, &mut rng, true).unwrap();
        for &v in t.data(y).as_slice() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::<f64>::new();
        let w = t.param(M::zeros(2, 2));
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[2.0; 4]);
        t.zero_grads();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let w = t.param(M::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn sym_pair_perturb_gradient() {
        let mut t = Tape::<f64>::new();
        let base = M::zeros(3, 3);
        let s = t.param(M::from_vec(2, 1, vec![0.5, 0.25]).unwrap());
        let pairs = Rc::new(vec![(0u32, 1u32), (1, 2)]);
        let signs = Rc::new(vec![1.0, -1.0]);
        let a = t.sym_pair_perturb(&base, s, pairs, signs).unwrap();
        assert_eq!(t.data(a).get(0, 1), 0.5);
        assert_eq!(t.data(a).get(1, 0), 0.5);
        assert_eq!(t.data(a).get(2, 1), -0.25);
        let loss = t.sum(a).unwrap();
        t.backward(loss).unwrap();
        // Each pair contributes sign * (up_ij + up_ji) = sign * 2.
        assert_eq!(t.grad(s).unwrap().as_slice(), &[2.0, -2.0]);
    }
}
