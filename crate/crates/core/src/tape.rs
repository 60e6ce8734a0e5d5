//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends one node holding its forward value and enough
//! cached state to compute its vector-Jacobian product. Nodes are appended
//! in execution order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] is a single reverse sweep that visits each
//! recorded op once.
//!
//! Broadcasting is restricted to scalar-vs-tensor and equal shapes. The
//! only other mixed-shape op is [`Tape::add_row`], the bias add of a
//! pointwise linear layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard used by [`Tape::log`].
pub const LOG_EPS: f64 = 1e-12;
/// Variance guard used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Log,
    Exp,
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-feature statistics measured by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Reduce {
        src: Var,
        op: ReduceOp,
        axis: usize,
        // For max: flat source offset of the winner of each output element.
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, keyed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or is not connected to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records operations for one forward pass. Not shareable across threads
/// while recording; drop it after [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are reported only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = if ta.shape() == tb.shape() {
            Broadcast::None
        } else if ta.numel() == 1 {
            Broadcast::LhsScalar
        } else if tb.numel() == 1 {
            Broadcast::RhsScalar
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        let value = match bcast {
            Broadcast::None => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::LhsScalar => {
                let s = ta.item();
                tb.map(|y| f(s, y))
            }
            Broadcast::RhsScalar => {
                let s = tb.item();
                ta.map(|x| f(x, s))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let d = tb.numel();
        let bv = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + bv[k % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnaryKind::Log => v.max(eps).ln(),
            UnaryKind::Exp => v.exp(),
        });
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Concatenates along `axis`, preserving input order. A single input is
    /// returned unchanged.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of an empty list".into()))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects leading-axis slices by index; duplicates are allowed and
    /// accumulate gradient.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() == 0 {
            return Err(Error::Shape("gather_rows on a scalar".into()));
        }
        let n = t.rows();
        let w = t.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(src).clone().reshape(shape)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::Reshape(src), rg))
    }

    /// Reduces `axis` away. Max routes gradient to the first maximal entry.
    pub fn reduce(&mut self, src: Var, op: ReduceOp, axis: usize) -> Result<Var> {
        let t = self.value(src);
        if axis >= t.rank() {
            return Err(Error::Shape(format!("reduce axis {axis} for rank {}", t.rank())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyReduction {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                match op {
                    ReduceOp::Max => {
                        let mut best = at(0);
                        for k in 1..len {
                            if d[at(k)] > d[best] {
                                best = at(k);
                            }
                        }
                        argmax.push(best);
                        out.push(d[best]);
                    }
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = T::zero();
                        for k in 0..len {
                            s += d[at(k)];
                        }
                        if op == ReduceOp::Mean {
                            s = s / T::lit(len as f64);
                        }
                        out.push(s);
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Reduce {
                src,
                op,
                axis,
                argmax,
            },
            rg,
        ))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, src: Var) -> Result<Var> {
        let n = self.value(src).numel();
        let flat = self.reshape(src, &[n])?;
        self.reduce(flat, ReduceOp::Sum, 0)
    }

    /// Mean over rows of `−log softmax(logits)[label]`, max-shifted for
    /// stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if n == 0 {
            return Err(Error::EmptyReduction {
                axis: 0,
                shape: t.shape().to_vec(),
            });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: label,
                    extent: c,
                });
            }
            let row = t.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &v in row {
                z += (v - m).exp();
            }
            for &v in row {
                probs.push((v - m).exp() / z);
            }
            total += z.ln() + m - row[label];
        }
        let loss = total / T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Per-column normalization of an `n×d` matrix followed by the affine
    /// `gamma * x̂ + beta`. Batch statistics use the biased variance and are
    /// returned so the caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("batch_norm expects n×d, got {:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(BN_EPS);
        let xv = t.data();
        let (mean, var, training) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::BatchSize { rows: n });
                }
                let nf = T::lit(n as f64);
                let mut mean = vec![T::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        mean[c] += xv[r * d + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        let e = xv[r * d + c] - mean[c];
                        var[c] += e * e;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nf);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::Shape("running statistics width".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                let h = (xv[r * d + c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let y = self.push(
            Tensor::new(vec![n, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        let stats = training.then_some(BatchStats { mean, var });
        Ok((y, stats))
    }

    /// Propagates `d loss / d node` from `loss` back to every leaf that
    /// requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into the gradient slot of `v` in place, allocating zeros first.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let (ad, bd) = (av.data(), bv.data());
                // dA = dC · Bᵀ
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            let out = &mut gb[p * n..(p + 1) * n];
                            for (o, &x) in out.iter_mut().zip(grow) {
                                *o += s * x;
                            }
                        }
                    }
                });
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // d/d(lhs) and d/d(rhs) of one elementwise application.
                let partial = |x: T, y: T, lhs: bool| match kind {
                    BinaryKind::Add => T::one(),
                    BinaryKind::Mul => {
                        if lhs {
                            y
                        } else {
                            x
                        }
                    }
                };
                let pair = |k: usize| -> (T, T) {
                    match bcast {
                        Broadcast::None => (av.data()[k], bv.data()[k]),
                        Broadcast::LhsScalar => (av.item(), bv.data()[k]),
                        Broadcast::RhsScalar => (av.data()[k], bv.item()),
                    }
                };
                for (v, lhs, is_scalar) in [
                    (*a, true, *bcast == Broadcast::LhsScalar),
                    (*b, false, *bcast == Broadcast::RhsScalar),
                ] {
                    self.accumulate_with(grads, v, |gv| {
                        for (k, &gk) in gd.iter().enumerate() {
                            let (x, y) = pair(k);
                            let term = gk * partial(x, y, lhs);
                            if is_scalar {
                                gv[0] += term;
                            } else {
                                gv[k] += term;
                            }
                        }
                    });
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let d = self.value(*bias).numel();
                self.accumulate_with(grads, *bias, |gb| {
                    for (k, &v) in gd.iter().enumerate() {
                        gb[k % d] += v;
                    }
                });
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let eps = T::lit(LOG_EPS);
                self.accumulate_with(grads, *x, |gx| {
                    for k in 0..gd.len() {
                        let local = match kind {
                            UnaryKind::Relu => {
                                if xv[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Log => {
                                if xv[k] > eps {
                                    xv[k].recip()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Exp => yv[k],
                        };
                        gx[k] += gd[k] * local;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * *factor));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    self.accumulate_with(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut gv[o * ext * inner..(o + 1) * ext * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::GatherRows { src, idx: rows } => {
                let w = node.value.row_len();
                self.accumulate_with(grads, *src, |gs| {
                    for (r, &i) in rows.iter().enumerate() {
                        let from = &gd[r * w..(r + 1) * w];
                        for (d, &s) in gs[i * w..(i + 1) * w].iter_mut().zip(from) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(src) => {
                let t = g.clone().reshape(self.shape(*src))?;
                self.accumulate(grads, *src, t);
            }
            Op::Reduce {
                src,
                op,
                axis,
                argmax,
            } => {
                let sshape = self.shape(*src).to_vec();
                let (outer, len, inner) = axis_split(&sshape, *axis);
                self.accumulate_with(grads, *src, |gs| match op {
                    ReduceOp::Max => {
                        for (k, &at) in argmax.iter().enumerate() {
                            gs[at] += gd[k];
                        }
                    }
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let f = if *op == ReduceOp::Mean {
                            T::lit(len as f64).recip()
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for i in 0..inner {
                                let gk = gd[o * inner + i] * f;
                                for k in 0..len {
                                    gs[o * len * inner + k * inner + i] += gk;
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let up = gd[0] / T::lit(n as f64);
                self.accumulate_with(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * c + j] += (probs[r * c + j] - onehot) * up;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate_with(grads, *x, |gx| {
                    for k in 0..gd.len() {
                        gx[k] += gd[k] * mask[k];
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let d = inv_std.len();
                let n = gd.len() / d;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dy_xhat = vec![T::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        sum_dy[c] += gd[r * d + c];
                        sum_dy_xhat[c] += gd[r * d + c] * xhat[r * d + c];
                    }
                }
                self.accumulate_with(grads, *gamma, |gg| {
                    for c in 0..d {
                        gg[c] += sum_dy_xhat[c];
                    }
                });
                self.accumulate_with(grads, *beta, |gb| {
                    for c in 0..d {
                        gb[c] += sum_dy[c];
                    }
                });
                let nf = T::lit(n as f64);
                self.accumulate_with(grads, *x, |gx| {
                    for r in 0..n {
                        for c in 0..d {
                            let k = r * d + c;
                            let dxhat = gd[k] * gv[c];
                            gx[k] += if *training {
                                // dx = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))
                                inv_std[c] / nf
                                    * (nf * dxhat
                                        - gv[c] * sum_dy[c]
                                        - xhat[k] * gv[c] * sum_dy_xhat[c])
                            } else {
                                dxhat * inv_std[c]
                            };
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
