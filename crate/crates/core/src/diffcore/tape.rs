use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::{broadcast_shape, split_last, BroadcastIndex};
use super::{DenseArray, DiffError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stable identity of a trainable parameter across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// The primitive operation kinds, for callers that dispatch by kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Multiply,
    Sigmoid,
    Tanh,
    B2Bsqrt { alpha: f64 },
    SoftmaxLastAxis,
    Log,
    SumAxis { axis: usize },
    Scale { factor: f64 },
    Concat { axis: usize },
    LayerNormLastAxis { eps: f64 },
    LogSumExpLastAxis,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Add => "add",
            Self::Multiply => "multiply",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::B2Bsqrt { .. } => "b2bsqrt",
            Self::SoftmaxLastAxis => "softmax-last-axis",
            Self::Log => "log",
            Self::SumAxis { .. } => "sum-axis",
            Self::Scale { .. } => "scale",
            Self::Concat { .. } => "concat",
            Self::LayerNormLastAxis { .. } => "layernorm-last-axis",
            Self::LogSumExpLastAxis => "logsumexp-last-axis",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] x [k, n]`, leading axes folded into `rows`.
    Plain { rows: usize, k: usize, n: usize },
    /// `[b.., m, k] x [b.., k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul { a: Var, b: Var, kind: MatMulKind },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    B2Bsqrt { a: Var, alpha: f64 },
    Softmax(Var),
    Log(Var),
    SumAxis { a: Var, axis: usize },
    Scale { a: Var, factor: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    LogSumExp(Var),
    Slice { a: Var, axis: usize, start: usize },
    Take { a: Var, axis: usize, indices: Vec<usize> },
    Reshape(Var),
    TransposeLast2(Var),
    BroadcastTo(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
}

/// Define-by-run record of array operations.
///
/// Every method that produces a [`Var`] appends one node. [`Tape::backward`]
/// walks the nodes in reverse recording order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to the parameters registered on a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, DenseArray>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &DenseArray)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is logically `[m, k]` (stored `[k, m]` when `ta`), `b` is logically
/// `[k, n]` (stored `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(outer, axis_len, inner)` for a reduction or slice along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn b2bsqrt_value(x: f64, alpha: f64) -> f64 {
    x.signum() * ((alpha + x.abs()).sqrt() - alpha.sqrt())
}

fn b2bsqrt_slope(x: f64, alpha: f64) -> f64 {
    0.5 / (alpha + x.abs()).sqrt()
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a trainable parameter. Registering the same id twice
    /// returns the original handle.
    pub fn param(&mut self, id: ParamId, value: &DenseArray) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        let arity = |n: usize| -> Result<(), DiffError> {
            if inputs.len() != n {
                return Err(DiffError::Arity {
                    op: prim.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
            Ok(())
        };
        match prim {
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::MatMul | Primitive::Add | Primitive::Multiply => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::MatMul => self.matmul(a, b),
                    Primitive::Add => self.add(a, b),
                    _ => self.mul(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match prim {
                    Primitive::Sigmoid => Ok(self.sigmoid(a)),
                    Primitive::Tanh => Ok(self.tanh(a)),
                    Primitive::B2Bsqrt { alpha } => self.b2bsqrt(a, *alpha),
                    Primitive::SoftmaxLastAxis => self.softmax(a),
                    Primitive::Log => self.log(a),
                    Primitive::SumAxis { axis } => self.sum_axis(a, *axis),
                    Primitive::Scale { factor } => Ok(self.scale(a, *factor)),
                    Primitive::LayerNormLastAxis { eps } => self.layernorm(a, *eps),
                    Primitive::LogSumExpLastAxis => self.logsumexp(a),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Matrix product. `b` is either a matrix applied to the trailing axis
    /// of `a`, or a stack with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || mismatch("matmul", &[&sa, &sb]);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (k, m) = (sa[sa.len() - 1], sa[sa.len() - 2]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let (kind, out_shape) = if sb.len() == 2 {
            let rows = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (MatMulKind::Plain { rows, k, n }, out)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch = sa[..sa.len() - 2].iter().product();
            let mut out = sa[..sa.len() - 2].to_vec();
            out.extend([m, n]);
            (MatMulKind::Batched { batch, m, k, n }, out)
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        let av = self.value(a).values();
        let bv = self.value(b).values();
        match kind {
            MatMulKind::Plain { rows, k, n } => gemm(rows, k, n, av, false, bv, false, 0.0, &mut out),
            MatMulKind::Batched { batch, m, k, n } => {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        false,
                        0.0,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        Ok(self.push(DenseArray::new(out_shape, out)?, Op::MatMul { a, b, kind }))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| mismatch(name, &[sa, sb]))?;
        let ia = BroadcastIndex::new(sa, &out_shape);
        let ib = BroadcastIndex::new(sb, &out_shape);
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let n: usize = out_shape.iter().product();
        let values = match (&ia, &ib) {
            (BroadcastIndex::Identity, BroadcastIndex::Identity) => {
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
            }
            (BroadcastIndex::Identity, BroadcastIndex::Modulo(m)) if *m > 0 => {
                let mut out = Vec::with_capacity(n);
                for chunk in av.chunks(*m) {
                    out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            (BroadcastIndex::Modulo(m), BroadcastIndex::Identity) if *m > 0 => {
                let mut out = Vec::with_capacity(n);
                for chunk in bv.chunks(*m) {
                    out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => (0..n).map(|i| f(av[ia.map(i)], bv[ib.map(i)])).collect(),
        };
        DenseArray::new(out_shape, values)
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.binary(a, b, "multiply", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> DenseArray {
        let src = self.value(a);
        DenseArray::from_fn(src.shape(), |i| f(src.values()[i]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.unary(a, f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `sign(x) (sqrt(alpha + |x|) - sqrt(alpha))`; slope `1 / (2 sqrt(alpha))` at 0.
    pub fn b2bsqrt(&mut self, a: Var, alpha: f64) -> Result<Var, DiffError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DiffError::InvalidAttr {
                op: "b2bsqrt",
                detail: format!("alpha must be positive, got {alpha}"),
            });
        }
        let value = self.unary(a, |x| b2bsqrt_value(x, alpha));
        Ok(self.push(value, Op::B2Bsqrt { a, alpha }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = self.value(a);
        if src.rank() == 0 {
            return Err(mismatch("softmax-last-axis", &[src.shape()]));
        }
        let (_, n) = split_last(src.shape());
        let mut out = src.values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = DenseArray::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Natural log; any nonpositive entry is an error.
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = self.value(a);
        if let Some((index, &value)) = src.values().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(DiffError::LogDomain { index, value });
        }
        let value = self.unary(a, f64::ln);
        Ok(self.push(value, Op::Log(a)))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("sum-axis", &[&shape, &[axis]]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(DenseArray::new(out_shape, out)?, Op::SumAxis { a, axis }))
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(mismatch("mean", &[self.shape(a)]));
        }
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.unary(a, |x| x * factor);
        self.push(value, Op::Scale { a, factor })
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
        let err = || DiffError::ShapeMismatch {
            op: "concat",
            shapes: shapes.clone(),
        };
        let first = shapes.first().ok_or_else(err)?;
        if axis >= first.len() {
            return Err(err());
        }
        for s in &shapes {
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(err());
            }
        }
        let (outer, _, inner) = axis_split(first, axis);
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, s) in inputs.iter().zip(&shapes) {
                let block = s[axis] * inner;
                out.extend_from_slice(&self.value(v).values()[o * block..(o + 1) * block]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let value = DenseArray::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Normalizes each row of the trailing axis to zero mean and unit variance.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var, DiffError> {
        if !(eps > 0.0) {
            return Err(DiffError::InvalidAttr {
                op: "layernorm-last-axis",
                detail: format!("epsilon must be positive, got {eps}"),
            });
        }
        let src = self.value(a);
        if src.rank() == 0 {
            return Err(mismatch("layernorm-last-axis", &[src.shape()]));
        }
        let (rows, n) = split_last(src.shape());
        let mut out = src.values().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.chunks_mut(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let value = DenseArray::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { a, inv_std }))
    }

    /// `log(sum(exp(x)))` over the trailing axis, removing it.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = self.value(a);
        if src.rank() == 0 || src.shape()[src.rank() - 1] == 0 {
            return Err(mismatch("logsumexp-last-axis", &[src.shape()]));
        }
        let (_, n) = split_last(src.shape());
        let out: Vec<f64> = src
            .values()
            .chunks(n)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = src.shape()[..src.rank() - 1].to_vec();
        Ok(self.push(DenseArray::new(shape, out)?, Op::LogSumExp(a)))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch("slice", &[&shape, &[axis, start, len]]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(DenseArray::new(out_shape, out)?, Op::Slice { a, axis, start }))
    }

    /// Gathers `indices` (repeats allowed) along `axis`.
    pub fn take(&mut self, a: Var, axis: usize, indices: Vec<usize>) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(mismatch("take", &[&shape, &[axis]]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in &indices {
                let base = (o * n + j) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.push(DenseArray::new(out_shape, out)?, Op::Take { a, axis, indices }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("transpose", &[&shape]));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape[..shape.len() - 2].iter().product::<usize>();
        let src = self.value(a).values();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        Ok(self.push(DenseArray::new(out_shape, out)?, Op::TransposeLast2(a)))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, &shape).as_deref() != Some(&shape[..]) {
            return Err(mismatch("broadcast", &[&sa, &shape]));
        }
        let idx = BroadcastIndex::new(&sa, &shape);
        let src = self.value(a).values();
        let value = DenseArray::from_fn(&shape, |i| src[idx.map(i)]);
        Ok(self.push(value, Op::BroadcastTo(a)))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns a gradient for every parameter registered on this tape;
    /// parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(DiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Constant | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let shape = self.shape(v).to_vec();
                let values = match grads.get_mut(v.0).and_then(Option::take) {
                    Some(g) => g,
                    None => vec![0.0; shape.iter().product()],
                };
                Ok((id, DenseArray::new(shape, values)?))
            })
            .collect::<Result<_, DiffError>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.values();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b, kind } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                match *kind {
                    MatMulKind::Plain { rows, k, n } => {
                        if self.tracks(*a) {
                            let ga = slot(grads, *a, av.len());
                            gemm(rows, n, k, g, false, bv, true, 1.0, ga);
                        }
                        if self.tracks(*b) {
                            let gb = slot(grads, *b, bv.len());
                            gemm(k, rows, n, av, true, g, false, 1.0, gb);
                        }
                    }
                    MatMulKind::Batched { batch, m, k, n } => {
                        if self.tracks(*a) {
                            let ga = slot(grads, *a, av.len());
                            for i in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    false,
                                    &bv[i * k * n..],
                                    true,
                                    1.0,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                );
                            }
                        }
                        if self.tracks(*b) {
                            let gb = slot(grads, *b, bv.len());
                            for i in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..],
                                    true,
                                    &g[i * m * n..],
                                    false,
                                    1.0,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                );
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b] {
                    if !self.tracks(v) {
                        continue;
                    }
                    let src = self.value(v);
                    let idx = BroadcastIndex::new(src.shape(), node.value.shape());
                    let gv = slot(grads, v, src.len());
                    match idx {
                        BroadcastIndex::Identity => gv.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        BroadcastIndex::Modulo(m) if m > 0 => {
                            for chunk in g.chunks(m) {
                                gv.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                            }
                        }
                        _ => g.iter().enumerate().for_each(|(i, y)| gv[idx.map(i)] += y),
                    }
                }
            }
            Op::Mul { a, b } => {
                for (&v, &w) in [(a, b), (b, a)] {
                    if !self.tracks(v) {
                        continue;
                    }
                    let src = self.value(v);
                    let other = self.value(w);
                    let iv = BroadcastIndex::new(src.shape(), node.value.shape());
                    let iw = BroadcastIndex::new(other.shape(), node.value.shape());
                    let ov = other.values();
                    let gv = slot(grads, v, src.len());
                    match (&iv, &iw) {
                        (BroadcastIndex::Identity, BroadcastIndex::Identity) => {
                            gv.iter_mut().zip(g).zip(ov).for_each(|((x, y), o)| *x += y * o)
                        }
                        (BroadcastIndex::Identity, BroadcastIndex::Modulo(m)) if *m > 0 => {
                            for (gc, xc) in g.chunks(*m).zip(gv.chunks_mut(*m)) {
                                xc.iter_mut().zip(gc).zip(ov).for_each(|((x, y), o)| *x += y * o);
                            }
                        }
                        (BroadcastIndex::Modulo(m), BroadcastIndex::Identity) if *m > 0 => {
                            for (gc, oc) in g.chunks(*m).zip(ov.chunks(*m)) {
                                gv.iter_mut().zip(gc).zip(oc).for_each(|((x, y), o)| *x += y * o);
                            }
                        }
                        _ => g.iter().enumerate().for_each(|(i, y)| gv[iv.map(i)] += y * ov[iw.map(i)]),
                    }
                }
            }
            Op::Sigmoid(a) => self.elementwise(*a, grads, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => self.elementwise(*a, grads, |i| g[i] * (1.0 - out[i] * out[i])),
            Op::Relu(a) => {
                let x = self.value(*a).values();
                self.elementwise(*a, grads, |i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::B2Bsqrt { a, alpha } => {
                let x = self.value(*a).values();
                self.elementwise(*a, grads, |i| g[i] * b2bsqrt_slope(x[i], *alpha))
            }
            Op::Softmax(a) => {
                let (_, n) = split_last(node.value.shape());
                let mut dx = vec![0.0; out.len()];
                for ((y, gy), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.elementwise(*a, grads, |i| dx[i])
            }
            Op::Log(a) => {
                let x = self.value(*a).values();
                self.elementwise(*a, grads, |i| g[i] / x[i])
            }
            Op::SumAxis { a, axis } => {
                if !self.tracks(*a) {
                    return;
                }
                let src = self.value(*a);
                let (outer, len, inner) = axis_split(src.shape(), *axis);
                let ga = slot(grads, *a, src.len());
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Scale { a, factor } => self.elementwise(*a, grads, |i| g[i] * factor),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let src = self.value(v);
                    let len = src.shape()[*axis];
                    if self.tracks(v) {
                        let gv = slot(grads, v, src.len());
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let to = o * len * inner;
                            gv[to..to + len * inner]
                                .iter_mut()
                                .zip(&g[from..from + len * inner])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let (_, n) = split_last(node.value.shape());
                let mut dx = vec![0.0; out.len()];
                for (r, ((y, gy), d)) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[j] = inv_std[r] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.elementwise(*a, grads, |i| dx[i])
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let (_, n) = split_last(x.shape());
                let xv = x.values();
                self.elementwise(*a, grads, |i| g[i / n] * (xv[i] - out[i / n]).exp())
            }
            Op::Slice { a, axis, start } => {
                if !self.tracks(*a) {
                    return;
                }
                let src = self.value(*a);
                let (outer, n, inner) = axis_split(src.shape(), *axis);
                let len = node.value.shape()[*axis];
                let ga = slot(grads, *a, src.len());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    ga[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Take { a, axis, indices } => {
                if !self.tracks(*a) {
                    return;
                }
                let src = self.value(*a);
                let (outer, n, inner) = axis_split(src.shape(), *axis);
                let ga = slot(grads, *a, src.len());
                let mut pos = 0;
                for o in 0..outer {
                    for &j in indices {
                        let base = (o * n + j) * inner;
                        ga[base..base + inner]
                            .iter_mut()
                            .zip(&g[pos..pos + inner])
                            .for_each(|(x, y)| *x += y);
                        pos += inner;
                    }
                }
            }
            Op::Reshape(a) => self.elementwise(*a, grads, |i| g[i]),
            Op::TransposeLast2(a) => {
                let shape = node.value.shape();
                let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = out.len() / (m * n).max(1);
                let mut dx = vec![0.0; out.len()];
                // output is [.., m, n]; input was [.., n, m]
                for b in 0..batch {
                    let off = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            dx[off + j * m + i] = g[off + i * n + j];
                        }
                    }
                }
                self.elementwise(*a, grads, |i| dx[i])
            }
            Op::BroadcastTo(a) => {
                if !self.tracks(*a) {
                    return;
                }
                let src = self.value(*a);
                let idx = BroadcastIndex::new(src.shape(), node.value.shape());
                let ga = slot(grads, *a, src.len());
                g.iter().enumerate().for_each(|(i, y)| ga[idx.map(i)] += y);
            }
        }
    }

    /// Whether gradients flowing into `v` are needed.
    fn tracks(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }

    fn elementwise(&self, a: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.tracks(a) {
            return;
        }
        let n = self.value(a).len();
        let ga = slot(grads, a, n);
        for (i, x) in ga.iter_mut().enumerate() {
            *x += f(i);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass; see [`Tape::backward`].
pub fn backward(loss: Var, tape: &Tape) -> Result<Gradients, DiffError> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn logsumexp_of_zeros_is_log2() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[0.0, 0.0]));
        let y = t.logsumexp(x).unwrap();
        assert!((t.value(y).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3], &[1000.0, 1000.0, -1000.0]));
        let y = t.logsumexp(x).unwrap();
        assert!((t.value(y).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn matmul_of_ones() {
        let mut t = Tape::new();
        let a = t.constant(DenseArray::full(&[2, 3], 1.0));
        let b = t.constant(DenseArray::full(&[3, 1], 1.0));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).values(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(DenseArray::zeros(&[2, 3]));
        let b = t.constant(DenseArray::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[1.0, 0.0]));
        assert!(matches!(t.log(x), Err(DiffError::LogDomain { index: 1, .. })));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &arr(&[3], &[1.0, 2.0, 3.0]));
        let s = t.sum_all(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &arr(&[3], &[1.0, 2.0, 3.0]));
        let sq = t.mul(p, p).unwrap();
        let s = t.sum_all(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &arr(&[2], &[1.0, 2.0]));
        t.param(ParamId(7), &arr(&[2, 2], &[1.0; 4]));
        let s = t.sum_all(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(ParamId(7)).unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &arr(&[2], &[1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn b2bsqrt_rejects_nonpositive_alpha() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1], &[1.0]));
        assert!(t.b2bsqrt(x, 0.0).is_err());
        assert!(t.b2bsqrt(x, -1.0).is_err());
    }

    #[test]
    fn b2bsqrt_slope_at_origin() {
        let mut t = Tape::new();
        let p = t.param(ParamId(0), &arr(&[1], &[0.0]));
        let y = t.b2bsqrt(p, 4.0).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().values(), &[0.25]);
    }

    #[test]
    fn concat_slice_take_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(arr(&[2, 1], &[5.0, 6.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice_axis(c, 1, 1, 2).unwrap();
        assert_eq!(t.value(s).values(), &[2.0, 5.0, 4.0, 6.0]);
        let k = t.take(c, 0, vec![1, 1, 0]).unwrap();
        assert_eq!(t.value(k).shape(), &[3, 3]);
        assert_eq!(t.value(k).values()[..3], [3.0, 4.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let w = t.param(ParamId(0), &DenseArray::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
            let x = t.constant(DenseArray::from_fn(&[5, 3], |i| (i as f64 * 0.11).cos()));
            let h = t.matmul(x, w).unwrap();
            let h = t.tanh(h);
            let l = t.logsumexp(h).unwrap();
            let l = t.sum_all(l).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).clone(), g.get(ParamId(0)).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
