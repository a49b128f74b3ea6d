use crate::error::{AutogradError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{broadcast_shape, broadcast_zip, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom operation: `(inputs, output, upstream grad) -> input grads`.
///
/// Returning `None` for an input means "no contribution".
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, axis: usize },
    Mse(usize, usize),
    SoftmaxXent { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    Softmax(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Linear { x: usize, w: usize, b: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Gather { a: usize, rows: Vec<usize> },
    BroadcastTo(usize),
    Reshape(usize),
    Transpose(usize),
    Custom { inputs: Vec<usize>, backward: BackwardFn<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder. Inputs always precede the operations that consume them.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every leaf of a tape with respect to one scalar loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` for non-leaf handles.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, panicking on non-leaf handles.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("gradient requested for a non-leaf value")
    }
}

/// Split `shape` around `axis` into (outer, dim, inner) extents.
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v.0)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let value = broadcast_zip(self.value(a), self.value(b), &shape, f);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, make(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a.0);
        self.push(value, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, T::sin, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, T::cos, Op::Cos(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, T::sqrt, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::of(t.numel() as f64);
        let s: T = t.data().iter().copied().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s / n), Op::Mean(a.0), ng)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutogradError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::from_vec(&oshape, out), Op::SumAxis { a: a.0, axis }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dim = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / dim as f64))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutogradError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let n = T::of(va.numel() as f64);
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a.0, b.0), ng))
    }

    /// Mean softmax cross-entropy of `batch×classes` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutogradError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for k in 0..c {
                probs[r * c + k] = (row[k] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        loss = loss / T::of(b as f64);
        let ng = self.ng(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::from_vec(t.shape(), out);
        let ng = self.ng(a.0);
        self.push(value, Op::Softmax(a.0), ng)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || AutogradError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k) = match sa.len() {
            2 => (None, sa[0], sa[1]),
            3 => (Some(sa[0]), sa[1], sa[2]),
            _ => return Err(mismatch()),
        };
        let (kb, n) = match (sb.len(), batch) {
            (2, None) | (3, Some(_)) => {
                let r = sb.len();
                if trans_b {
                    (sb[r - 1], sb[r - 2])
                } else {
                    (sb[r - 2], sb[r - 1])
                }
            }
            _ => return Err(mismatch()),
        };
        if kb != k || (batch.is_some() && sb[0] != sa[0]) {
            return Err(mismatch());
        }
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..nb {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = match batch {
            Some(bn) => vec![bn, m, n],
            None => vec![m, n],
        };
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            ng,
        ))
    }

    /// `a·b` for rank-2 operands, or per-batch for rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` (transpose of the last two axes of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Affine map `x·Wᵀ + b` with `W` stored `out×in` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(AutogradError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(AutogradError::ShapeMismatch {
                op: "linear",
                lhs: sw,
                rhs: sb,
            });
        }
        let (n, k, m) = (sx[0], sx[1], sw[0]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        Ok(self.push(
            Tensor::from_vec(&[n, m], out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutogradError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutogradError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutogradError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_vec(&oshape, out),
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            ng,
        ))
    }

    /// Select rows (axis 0) by index; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(AutogradError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index out of range for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_vec(&oshape, out),
            Op::Gather {
                a: a.0,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let target = broadcast_shape("broadcast", self.shape(a), shape)?;
        if target != shape {
            return Err(AutogradError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).expand(shape);
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::BroadcastTo(a.0), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshape(shape)
            .map_err(|_| AutogradError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            })?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if !(2..=3).contains(&shape.len()) {
            return Err(AutogradError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2 or 3, got {shape:?}"),
            });
        }
        let value = transpose_last2(self.value(a));
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::Transpose(a.0), ng))
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let ng = inputs.iter().any(|v| self.ng(v.0));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf receives a gradient tensor (zeros when no path reaches it).
    /// The tape is left untouched, so calling this twice gives identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutogradError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: usize, g: Tensor<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[target].value.shape());
        match &mut grads[target] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.reduce_to(val(*a).shape()));
                self.accumulate(grads, *b, g.reduce_to(val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.reduce_to(val(*a).shape()));
                self.accumulate(grads, *b, g.reduce_to(val(*b).shape()).map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    let gb = broadcast_zip(g, vb, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *a, gb.reduce_to(va.shape()));
                }
                if self.ng(*b) {
                    let ga = broadcast_zip(g, va, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *b, ga.reduce_to(vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    let q = broadcast_zip(g, vb, g.shape(), |x, y| x / y);
                    self.accumulate(grads, *a, q.reduce_to(va.shape()));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out/b
                    let q = broadcast_zip(out, vb, g.shape(), |o, y| o / y);
                    let q = q.zip_map(g, |x, gg| -x * gg);
                    self.accumulate(grads, *b, q.reduce_to(vb.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c))
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sin(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gg, x| gg * x.cos())),
            Op::Cos(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gg, x| -gg * x.sin())),
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gg, y| gg * (T::one() - y * y)))
            }
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gg, x| if x > T::zero() { gg } else { T::zero() }),
            ),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gg, y| gg * y * (T::one() - y)))
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gg, y| gg * y)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gg, x| gg / x)),
            Op::Sqrt(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(out, |gg, y| gg / (T::of(2.0) * y)),
            ),
            Op::Square(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gg, x| T::of(2.0) * gg * x),
            ),
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s))
            }
            Op::Mean(a) => {
                let va = val(*a);
                let s = g.item() / T::of(va.numel() as f64);
                self.accumulate(grads, *a, Tensor::full(va.shape(), s))
            }
            Op::SumAxis { a, axis } => {
                let shape = val(*a).shape();
                let (outer, dim, inner) = axis_split(shape, *axis);
                let mut d = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    for k in 0..dim {
                        let base = (o * dim + k) * inner;
                        d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(shape, d))
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = T::of(2.0) * g.item() / T::of(va.numel() as f64);
                let diff = va.zip_map(vb, |x, y| (x - y) * c);
                if self.ng(*b) {
                    self.accumulate(grads, *b, diff.map(|x| -x));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let shape = val(*logits).shape();
                let (b, c) = (shape[0], shape[1]);
                let s = g.item() / T::of(b as f64);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= T::one();
                }
                for x in d.iter_mut() {
                    *x *= s;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(shape, d))
            }
            Op::Softmax(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); out.numel()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d))
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let sa = va.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = *out.shape().last().unwrap();
                let nb = if r == 3 { sa[0] } else { 1 };
                if self.ng(*a) {
                    // dA = G·op(B)ᵀ
                    let mut da = vec![T::zero(); va.numel()];
                    for i in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(sa, da));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); vb.numel()];
                    for i in 0..nb {
                        let ga = &g.data()[i * m * n..(i + 1) * m * n];
                        let aa = &va.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is n×k: dB = Gᵀ·A
                            gemm(n, m, k, ga, true, aa, false, T::zero(), dst);
                        } else {
                            // dB = Aᵀ·G
                            gemm(k, m, n, aa, true, ga, false, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, k) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[0];
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm(n, m, k, g.data(), false, vw.data(), false, T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, k], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), true, vx.data(), false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(&[m, k], dw));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[m], db));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&p| Vec::with_capacity(val(p).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (j, &p) in inputs.iter().enumerate() {
                        let chunk = val(p).shape()[*axis] * inner;
                        parts[j].extend_from_slice(&g.data()[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (&p, d) in inputs.iter().zip(parts) {
                    if self.ng(p) {
                        self.accumulate(grads, p, Tensor::from_vec(val(p).shape(), d));
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = val(*a).shape();
                let (outer, dim, inner) = axis_split(shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(shape, d))
            }
            Op::Gather { a, rows } => {
                let shape = val(*a).shape();
                let inner: usize = shape[1..].iter().product();
                let mut d = vec![T::zero(); val(*a).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (dst, &v) in d[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *dst += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(shape, d))
            }
            Op::BroadcastTo(a) => self.accumulate(grads, *a, g.reduce_to(val(*a).shape())),
            Op::Reshape(a) => {
                let shape = val(*a).shape();
                self.accumulate(grads, *a, Tensor::from_vec(shape, g.data().to_vec()))
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose_last2(g)),
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&p| val(p)).collect();
                let gs = backward(&ins, out, g);
                for (&p, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, p, gi);
                    }
                }
            }
        }
    }
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let nb = if r == 3 { s[0] } else { 1 };
    let src = t.data();
    let mut out = vec![T::zero(); t.numel()];
    for b in 0..nb {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_vec(&shape, out)
}
