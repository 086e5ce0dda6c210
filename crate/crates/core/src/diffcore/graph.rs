use std::fmt;

use super::tensor::{axis_split, strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Graph::custom`] node: `(inputs, output, upstream) -> input grads`.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Abs,
    Square,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Gelu,
    Hinge(T),
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(Unary<T>, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize, Option<Vec<bool>>),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
    Custom {
        name: String,
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "add_scalar",
            Op::Unary(u, _) => match u {
                Unary::Abs => "abs",
                Unary::Square => "square",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Gelu => "gelu",
                Unary::Hinge(_) => "hinge",
            },
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::SumAxis(..) => "sum",
            Op::SumAll(..) => "sum_all",
            Op::MaxAxis(..) => "max",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Eagerly recorded reverse-mode computation graph.
///
/// Every primitive appends a node holding its output value, so node order is
/// a topological order and [`Graph::backward`] is a single reverse sweep.
/// Gradients accumulate on leaves created with `requires_grad`.
///
/// Non-smooth primitives (`abs`, `relu`, `hinge`, `max`) append their branch
/// choice to a signature that [`gradcheck`](super::gradcheck) uses to detect
/// finite-difference stencils straddling a kink.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    branches: Vec<u32>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn branch_signature(&self) -> &[u32] {
        &self.branches
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    // ---- elementwise binary (numpy-style broadcasting) -------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::Dimension {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, kind: Unary<T>, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = xv.map(|e| unary_forward(kind, e));
        let kink = match kind {
            Unary::Abs | Unary::Relu => Some(T::zero()),
            Unary::Hinge(t) => Some(t),
            _ => None,
        };
        if let Some(k) = kink {
            self.branches.extend(xv.data().iter().map(|&e| sign_code(e, k)));
        }
        self.push(value, Op::Unary(kind, x), &[x])
    }

    /// Elementwise `|x|`; subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    /// `max(x - t, 0)`; subgradient 0 at the kink.
    pub fn hinge(&mut self, x: Var, t: T) -> Var {
        self.unary(Unary::Hinge(t), x)
    }

    // ---- linear algebra and layout --------------------------------------

    /// Batched matrix product `[.., i, j] x [.., j, k] -> [.., i, k]`.
    ///
    /// `b` is either rank 2 (shared across the batch) or has the same batch
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb).ok_or_else(|| Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let mut out = vec![T::zero(); dims.batch * dims.i * dims.k];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if dims.shared_b {
            matmul_acc(av, bv, &mut out, dims.batch * dims.i, dims.j, dims.k);
        } else {
            let (sa_, sb_, so_) = (dims.i * dims.j, dims.j * dims.k, dims.i * dims.k);
            for t in 0..dims.batch {
                matmul_acc(
                    &av[t * sa_..(t + 1) * sa_],
                    &bv[t * sb_..(t + 1) * sb_],
                    &mut out[t * so_..(t + 1) * so_],
                    dims.i,
                    dims.j,
                    dims.k,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.k);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyReduction { op: "concat" })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice(x, axis, start), &[x]))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(reduced_shape(&shape, axis), out), Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).ok_or(Error::Axis {
            op: "mean",
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Maximum over `axis`; the first maximal entry receives the gradient.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let at = (o * n + k) * inner + i;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
        self.branches.extend(arg.iter().map(|&a| a as u32));
        Ok(self.push(Tensor::from_parts(reduced_shape(&shape, axis), out), Op::MaxAxis(x, arg), &[x]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut data = self.value(x).data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for i in idx.clone() {
                data[i] = (data[i] - m).exp();
                z += data[i];
            }
            for i in idx {
                data[i] /= z;
            }
        });
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut data = self.value(x).data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
            let z: T = idx.clone().map(|i| (data[i] - m).exp()).sum();
            let lse = m + z.ln();
            for i in idx {
                data[i] -= lse;
            }
        });
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x, axis), &[x]))
    }

    /// `max(x) + ln sum exp(x - max(x))` along `axis`, removing it.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lse_impl(x, axis, None)
    }

    /// Log-sum-exp over the entries where `mask` is true. Every reduced lane
    /// must keep at least one entry.
    pub fn logsumexp_masked(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension {
                op: "logsumexp",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        self.lse_impl(x, axis, Some(mask.to_vec()))
    }

    fn lse_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = Vec::new();
        let mut empty = false;
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().filter(|&i| keep(i)).map(|i| src[i]).fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() && !idx.clone().any(keep) {
                empty = true;
                out.push(T::zero());
                return;
            }
            let z: T = idx.filter(|&i| keep(i)).map(|i| (src[i] - m).exp()).sum();
            out.push(m + z.ln());
        });
        if empty {
            return Err(Error::EmptyReduction { op: "logsumexp" });
        }
        Ok(self.push(Tensor::from_parts(reduced_shape(&shape, axis), out), Op::LogSumExp(x, axis, mask), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        let n = T::of(shape[axis] as f64);
        let mut data = self.value(x).data().to_vec();
        let mut inv_std = Vec::new();
        for_each_lane(&shape, axis, |idx| {
            let mu = idx.clone().map(|i| data[i]).sum::<T>() / n;
            let var = idx.clone().map(|i| (data[i] - mu) * (data[i] - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for i in idx {
                data[i] = (data[i] - mu) * r;
            }
            inv_std.push(r);
        });
        Ok(self.push(Tensor::from_parts(shape, data), Op::LayerNorm(x, inv_std), &[x]))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        let mut data = self.value(x).data().to_vec();
        let mut inv = Vec::new();
        let floor = T::of(1e-12);
        for_each_lane(&shape, axis, |idx| {
            let norm = idx.clone().map(|i| data[i] * data[i]).sum::<T>().sqrt().max(floor);
            let r = T::one() / norm;
            for i in idx {
                data[i] *= r;
            }
            inv.push(r);
        });
        Ok(self.push(Tensor::from_parts(shape, data), Op::L2Normalize(x, inv), &[x]))
    }

    /// Records an externally computed node with a caller-supplied backward rule.
    pub fn custom(&mut self, name: &str, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.node_backward(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                let same = sa == sb;
                let ma = if same { Vec::new() } else { broadcast_map(out.shape(), sa) };
                let mb = if same { Vec::new() } else { broadcast_map(out.shape(), sb) };
                for (o, &go) in gd.iter().enumerate() {
                    let (i, j) = if same { (o, o) } else { (ma[o], mb[o]) };
                    let (x, y) = (av.data()[i], bv.data()[j]);
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    ga[i] += da;
                    gb[j] += db;
                }
                vec![
                    (*a, Tensor::from_parts(sa.to_vec(), ga)),
                    (*b, Tensor::from_parts(sb.to_vec(), gb)),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|e| e * *c))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let od = out.data();
                let data = (0..gd.len()).map(|i| gd[i] * unary_derivative(*kind, xv[i], od[i])).collect();
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dims = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                if dims.shared_b {
                    let rows = dims.batch * dims.i;
                    matmul_grad_a(gd, bv.data(), &mut ga, rows, dims.j, dims.k);
                    matmul_grad_b(av.data(), gd, &mut gb, rows, dims.j, dims.k);
                } else {
                    let (sa, sb, so) = (dims.i * dims.j, dims.j * dims.k, dims.i * dims.k);
                    for t in 0..dims.batch {
                        let gt = &gd[t * so..(t + 1) * so];
                        matmul_grad_a(gt, &bv.data()[t * sb..(t + 1) * sb], &mut ga[t * sa..(t + 1) * sa], dims.i, dims.j, dims.k);
                        matmul_grad_b(&av.data()[t * sa..(t + 1) * sa], gt, &mut gb[t * sb..(t + 1) * sb], dims.i, dims.j, dims.k);
                    }
                }
                vec![
                    (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
                ]
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(gd, out.shape(), &inverse);
                vec![(*x, Tensor::from_parts(shape, data))]
            }
            Op::Reshape(x) => vec![(*x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec()))],
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((x, Tensor::from_parts(shape, data)));
                }
                res
            }
            Op::Slice(x, axis, start) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = out.shape()[*axis];
                let mut data = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::from_parts(shape, data))]
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mut data = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, Tensor::from_parts(shape, data))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::MaxAxis(x, arg) => {
                let mut grad = Tensor::zeros(self.shape(*x));
                for (&a, &go) in arg.iter().zip(gd) {
                    grad.data_mut()[a] += go;
                }
                vec![(*x, grad)]
            }
            Op::Softmax(x, axis) => {
                let y = out.data();
                let mut data = vec![T::zero(); y.len()];
                for_each_lane(out.shape(), *axis, |idx| {
                    let dot: T = idx.clone().map(|i| gd[i] * y[i]).sum();
                    for i in idx {
                        data[i] = y[i] * (gd[i] - dot);
                    }
                });
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::LogSoftmax(x, axis) => {
                let y = out.data();
                let mut data = vec![T::zero(); y.len()];
                for_each_lane(out.shape(), *axis, |idx| {
                    let total: T = idx.clone().map(|i| gd[i]).sum();
                    for i in idx {
                        data[i] = gd[i] - y[i].exp() * total;
                    }
                });
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::LogSumExp(x, axis, mask) => {
                let xv = self.value(*x);
                let src = xv.data();
                let lse = out.data();
                let mut data = vec![T::zero(); src.len()];
                let mut lane = 0;
                for_each_lane(xv.shape(), *axis, |idx| {
                    for i in idx {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            data[i] = gd[lane] * (src[i] - lse[lane]).exp();
                        }
                    }
                    lane += 1;
                });
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), data))]
            }
            Op::LayerNorm(x, inv_std) => {
                let y = out.data();
                let shape = out.shape();
                let n = T::of(shape[shape.len() - 1] as f64);
                let mut data = vec![T::zero(); y.len()];
                let mut lane = 0;
                for_each_lane(shape, shape.len() - 1, |idx| {
                    let mg = idx.clone().map(|i| gd[i]).sum::<T>() / n;
                    let mgy = idx.clone().map(|i| gd[i] * y[i]).sum::<T>() / n;
                    for i in idx {
                        data[i] = inv_std[lane] * (gd[i] - mg - y[i] * mgy);
                    }
                    lane += 1;
                });
                vec![(*x, Tensor::from_parts(shape.to_vec(), data))]
            }
            Op::L2Normalize(x, inv) => {
                let y = out.data();
                let shape = out.shape();
                let floor_hit = |r: T| r >= T::of(1e12);
                let mut data = vec![T::zero(); y.len()];
                let mut lane = 0;
                for_each_lane(shape, shape.len() - 1, |idx| {
                    let r = inv[lane];
                    let dot: T = idx.clone().map(|i| gd[i] * y[i]).sum();
                    for i in idx {
                        data[i] = if floor_hit(r) { gd[i] * r } else { r * (gd[i] - y[i] * dot) };
                    }
                    lane += 1;
                });
                vec![(*x, Tensor::from_parts(shape.to_vec(), data))]
            }
            Op::Custom { inputs, backward, .. } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                inputs.iter().copied().zip(backward(&vals, out, g)).collect()
            }
        }
    }
}

fn sign_code<T: Scalar>(x: T, kink: T) -> u32 {
    if x > kink {
        2
    } else if x < kink {
        0
    } else {
        1
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_forward<T: Scalar>(kind: Unary<T>, x: T) -> T {
    match kind {
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Hinge(t) => (x - t).max(T::zero()),
    }
}

fn unary_derivative<T: Scalar>(kind: Unary<T>, x: T, y: T) -> T {
    let zero = T::zero();
    match kind {
        Unary::Abs => {
            if x > zero {
                T::one()
            } else if x < zero {
                -T::one()
            } else {
                zero
            }
        }
        Unary::Square => T::of(2.0) * x,
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Tanh => T::one() - y * y,
        Unary::Relu => {
            if x > zero {
                T::one()
            } else {
                zero
            }
        }
        Unary::Gelu => {
            let c = T::of(GELU_C);
            let a = T::of(GELU_A);
            let th = (c * (x + a * x * x * x)).tanh();
            let half = T::of(0.5);
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
        }
        Unary::Hinge(t) => {
            if x > t {
                T::one()
            } else {
                zero
            }
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    let (outer, n, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let r = out.len();
    let pad = r - src.len();
    let src_strides = strides(src);
    let eff: Vec<usize> = (0..r)
        .map(|i| if i < pad || src[i - pad] == 1 { 0 } else { src_strides[i - pad] })
        .collect();
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let r = shape.len();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..src.len() {
        data.push(src[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, data)
}

struct MatMulDims {
    batch: usize,
    i: usize,
    j: usize,
    k: usize,
    shared_b: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<MatMulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (i, j) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (j2, k) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if j != j2 {
        return None;
    }
    let batch_a = &sa[..sa.len() - 2];
    let shared_b = sb.len() == 2;
    if !shared_b && batch_a != &sb[..sb.len() - 2] {
        return None;
    }
    Some(MatMulDims {
        batch: batch_a.iter().product(),
        i,
        j,
        k,
        shared_b,
    })
}

/// `out += a[i,j] * b[j,k]`.
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], i: usize, j: usize, k: usize) {
    for r in 0..i {
        let orow = &mut out[r * k..(r + 1) * k];
        let arow = &a[r * j..(r + 1) * j];
        for (c, &av) in arow.iter().enumerate() {
            let brow = &b[c * k..(c + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `ga += g[i,k] * b[j,k]^T`.
fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], i: usize, j: usize, k: usize) {
    for r in 0..i {
        let grow = &g[r * k..(r + 1) * k];
        for c in 0..j {
            let brow = &b[c * k..(c + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            ga[r * j + c] += acc;
        }
    }
}

/// `gb += a[i,j]^T * g[i,k]`.
fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], gb: &mut [T], i: usize, j: usize, k: usize) {
    for r in 0..i {
        let grow = &g[r * k..(r + 1) * k];
        for c in 0..j {
            let av = a[r * j + c];
            let brow = &mut gb[c * k..(c + 1) * k];
            for (o, &x) in brow.iter_mut().zip(grow) {
                *o += av * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 0.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000., 0.]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!(g.value(s).is_finite());
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
    }

    #[test]
    fn logsumexp_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let l = g.logsumexp(x, 0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let x = g.constant(t(&[1], &[-3.25]));
        let l = g.logsumexp(x, 0).unwrap();
        assert_eq!(g.value(l).item(), -3.25);

        let x = g.constant(t(&[2], &[1e4, 0.]));
        let l = g.logsumexp(x, 0).unwrap();
        assert!((g.value(l).item() - 1e4).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_masked_rejects_empty_lane() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let err = g.logsumexp_masked(x, 1, &[true, false, false, false]).unwrap_err();
        assert_eq!(err, Error::EmptyReduction { op: "logsumexp" });
        let l = g.logsumexp_masked(x, 1, &[false, true, true, false]).unwrap();
        assert_eq!(g.value(l).data(), &[2., 3.]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.3, -1.0, 2.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarRoot(vec![2]));
    }

    #[test]
    fn diamond_fan_out_sums_paths() {
        // y = a*x + b*x, both paths read the same x.
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let left = g.scale(x, 3.0);
        let right = g.square(x);
        let y = g.add(left, right).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let got = g.grad(x).unwrap().data().to_vec();
        assert_eq!(got, vec![3.0 + 2.0 * 1.5, 3.0 + 2.0 * -2.0]);
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(t(&[3], &[1., 2., 3.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 1., 2., 3.]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2., 2., 2.]);

        let c = g.constant(Tensor::zeros(&[2, 1]));
        let z = g.add(x, c).unwrap();
        assert_eq!(g.shape(z), &[2, 3]);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn permute_concat_slice_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn layer_norm_and_l2_normalize_contracts() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., -4., 0., 10.]));
        let y = g.layer_norm(x, 0.0).unwrap();
        for row in g.value(y).data().chunks(3) {
            let mu: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 3.0;
            assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        let z = g.l2_normalize(x).unwrap();
        for row in g.value(z).data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_records_branch() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[1., 5., 7., 3.]));
        let m = g.max(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[5., 7.]);
        assert_eq!(g.branch_signature(), &[1, 2]);
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1., 1., 0.]);
    }
}
