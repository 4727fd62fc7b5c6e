use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Sigmoid(Var),
    Softmax(Var),
    Concat(Var, Var),
    MeanRows { m: Var, mask: Vec<bool>, count: usize },
    Dropout { x: Var, scale: Vec<S> },
    Rmse { pred: Var, target: Vec<S> },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    NegEntropy(Var),
    Add(Var, Var),
    Scale(Var, S),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Leaf gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S> Gradients<S> {
    /// Gradient of the loss with respect to a leaf created with
    /// `requires_grad = true`; `None` if the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf. Gradients are only collected for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite leaf value".into()));
        }
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input: no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `x · W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        if wv.shape().len() != 2 {
            return shape_err(format!("affine weight must be 2-D, got {:?}", wv.shape()));
        }
        let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != n_in || bv.len() != n_out {
            return shape_err(format!(
                "affine: x {:?}, W {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let batch = xv.rows();
        let mut out = Vec::with_capacity(batch * n_out);
        let (w_data, b_data) = (wv.data(), bv.data());
        for r in 0..batch {
            let mut acc = b_data.to_vec();
            for (k, &a) in xv.row(r).iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let w_row = &w_data[k * n_out..(k + 1) * n_out];
                for (o, &wk) in acc.iter_mut().zip(w_row) {
                    *o += a * wk;
                }
            }
            out.extend_from_slice(&acc);
        }
        let value = Tensor::matrix(batch, n_out, out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Affine { x, w, b }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rows() != bv.rows() {
            return shape_err(format!("concat: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let rows = av.rows();
        let cols = av.cols() + bv.cols();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Concat(a, b), rg)
    }

    /// Mean over the rows of `m` whose mask entry is set; result is `[1, cols]`.
    pub fn mean_rows(&mut self, m: Var, row_mask: &[bool]) -> Result<Var> {
        let mv = &self.node(m)?.value;
        if row_mask.len() != mv.rows() {
            return shape_err(format!(
                "mean_rows: {} mask entries for {} rows",
                row_mask.len(),
                mv.rows()
            ));
        }
        let count = row_mask.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Data("mean_rows: every row is masked out".into()));
        }
        let inv = S::one() / S::of(count as f64);
        let mut out = vec![S::zero(); mv.cols()];
        for (r, _) in row_mask.iter().enumerate().filter(|(_, &k)| k) {
            for (o, &v) in out.iter_mut().zip(mv.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let value = Tensor::row_vector(out)?;
        let rg = self.rg(&[m]);
        self.push(
            value,
            Op::MeanRows {
                m,
                mask: row_mask.to_vec(),
                count,
            },
            rg,
        )
    }

    /// Inverted dropout. Identity (no node recorded) outside training or at
    /// rate zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        self.node(x)?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let kept = S::of(1.0 / keep);
        let xv = &self.nodes[x.0].value;
        let scale: Vec<S> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    kept
                } else {
                    S::zero()
                }
            })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, scale }, rg)
    }

    /// `sqrt(mean((pred - target)^2))`.
    pub fn rmse_loss(&mut self, pred: Var, target: &[S]) -> Result<Var> {
        let pv = &self.node(pred)?.value;
        if pv.len() != target.len() {
            return shape_err(format!(
                "rmse_loss: {} predictions, {} targets",
                pv.len(),
                target.len()
            ));
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite rmse target".into()));
        }
        let n = S::of(pv.len() as f64);
        let mse = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<S>()
            / n;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(mse.sqrt()),
            Op::Rmse {
                pred,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of `-ln p[label]`, probabilities floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = &self.node(probs)?.value;
        if pv.rows() != labels.len() {
            return shape_err(format!(
                "cross_entropy: {} rows, {} labels",
                pv.rows(),
                labels.len()
            ));
        }
        let classes = pv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        let floor = S::of(PROB_FLOOR);
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -pv.row(r)[l].max(floor).ln())
            .sum();
        let value = Tensor::scalar(total / S::of(labels.len() as f64));
        let rg = self.rg(&[probs]);
        self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of `Σ_c p_c ln p_c` (the negative entropy, `<= 0`).
    pub fn neg_entropy(&mut self, probs: Var) -> Result<Var> {
        let pv = &self.node(probs)?.value;
        let floor = S::of(PROB_FLOOR);
        let total: S = pv.data().iter().map(|&p| p * p.max(floor).ln()).sum();
        let value = Tensor::scalar(total / S::of(pv.rows() as f64));
        let rg = self.rg(&[probs]);
        self.push(value, Op::NegEntropy(probs), rg)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.len() != bv.len() {
            return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let value = self.node(a)?.value.map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().map(|&v| v * v).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::SumSquares(a), rg)
    }

    /// One reverse sweep from the scalar `loss`. Returns gradients for every
    /// leaf that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![S::one()])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (target, contribution) in self.local_grads(node, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        // Keep leaf gradients only.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
                let batch = xv.rows();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(batch * n_in);
                    for r in 0..batch {
                        let gr = g.row(r);
                        for k in 0..n_in {
                            let w_row = &wv.data()[k * n_out..(k + 1) * n_out];
                            dx.push(dot(gr, w_row));
                        }
                    }
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![S::zero(); n_in * n_out];
                    for r in 0..batch {
                        let gr = g.row(r);
                        for (k, &a) in xv.row(r).iter().enumerate() {
                            if a == S::zero() {
                                continue;
                            }
                            for (d, &gv) in dw[k * n_out..(k + 1) * n_out].iter_mut().zip(gr) {
                                *d += a * gv;
                            }
                        }
                    }
                    out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); n_out];
                    for r in 0..batch {
                        for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (S::one() - yv))
                    .collect();
                out.push((*x, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::Concat(a, b) => {
                let (ac, bc) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ac);
                let mut db = Vec::with_capacity(rows * bc);
                for r in 0..rows {
                    let gr = g.row(r);
                    da.extend_from_slice(&gr[..ac]);
                    db.extend_from_slice(&gr[ac..]);
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), da)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
                }
            }
            Op::MeanRows { m, mask, count } => {
                let mv = self.value(*m);
                let inv = S::one() / S::of(*count as f64);
                let scaled: Vec<S> = g.data().iter().map(|&v| v * inv).collect();
                let mut dm = Vec::with_capacity(mv.len());
                for &keep in mask {
                    if keep {
                        dm.extend_from_slice(&scaled);
                    } else {
                        dm.extend(std::iter::repeat_n(S::zero(), scaled.len()));
                    }
                }
                out.push((*m, Tensor::new(mv.shape().to_vec(), dm)?));
            }
            Op::Dropout { x, scale } => {
                let data = g.data().iter().zip(scale).map(|(&gv, &s)| gv * s).collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), data)?));
            }
            Op::Rmse { pred, target } => {
                let pv = self.value(*pred);
                let loss = node.value.data()[0];
                let gl = g.data()[0];
                let data = if loss == S::zero() {
                    vec![S::zero(); pv.len()]
                } else {
                    let denom = S::of(pv.len() as f64) * loss;
                    pv.data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| gl * (p - t) / denom)
                        .collect()
                };
                out.push((*pred, Tensor::new(pv.shape().to_vec(), data)?));
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let floor = S::of(PROB_FLOOR);
                let gl = g.data()[0] / S::of(labels.len() as f64);
                let mut data = vec![S::zero(); pv.len()];
                let cols = pv.cols();
                for (r, &l) in labels.iter().enumerate() {
                    let p = pv.row(r)[l];
                    if p > floor {
                        data[r * cols + l] = -gl / p;
                    }
                }
                out.push((*probs, Tensor::new(pv.shape().to_vec(), data)?));
            }
            Op::NegEntropy(probs) => {
                let pv = self.value(*probs);
                let floor = S::of(PROB_FLOOR);
                let gl = g.data()[0] / S::of(pv.rows() as f64);
                let data = pv
                    .data()
                    .iter()
                    .map(|&p| {
                        if p > floor {
                            gl * (p.ln() + S::one())
                        } else {
                            gl * floor.ln()
                        }
                    })
                    .collect();
                out.push((*probs, Tensor::new(pv.shape().to_vec(), data)?));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), g.data().to_vec())?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), g.data().to_vec())?));
                }
            }
            Op::Scale(a, s) => {
                out.push((*a, g.map(|v| v * *s)));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                out.push((*a, Tensor::new(av.shape().to_vec(), vec![g.data()[0]; av.len()])?));
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                let gl = g.data()[0];
                out.push((*a, av.map(|v| S::of(2.0) * v * gl)));
            }
        }
        Ok(out
            .into_iter()
            .filter(|(v, _)| self.wants(*v))
            .collect())
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax(_) => "softmax",
        Op::Concat(..) => "concat",
        Op::MeanRows { .. } => "mean_rows",
        Op::Dropout { .. } => "dropout",
        Op::Rmse { .. } => "rmse_loss",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::NegEntropy(_) => "neg_entropy",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::SumSquares(_) => "sum_squares",
    }
}
