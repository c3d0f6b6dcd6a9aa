use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::{numel, Real, Tensor, TensorError, TensorResult};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Softmax(usize),
    MixSoftmax { logits: usize, lambda: Vec<T>, probs: Tensor<T> },
    Attention { q: usize, k: usize, v: usize, bias: Arc<Tensor<T>>, lambda: Vec<T> },
    Gelu(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    GatherRows { table: usize, index: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications in creation order, which is also a
/// topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    trap_non_finite: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            trap_non_finite: false,
        }
    }

    /// A tape whose primitives fail on NaN or infinite outputs.
    pub fn with_non_finite_trap() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            trap_non_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> TensorResult<Var<'_, T>> {
        if self.trap_non_finite && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> TensorResult<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, contrib: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.data.iter_mut().zip(contrib.data) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to_shape(&g, val(*a).shape()));
                    acc(*b, reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to_shape(&g, val(*a).shape()));
                    let neg = g.map(|v| -v);
                    acc(*b, reduce_to_shape(&neg, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let prod = broadcast_binary(&g, bv, |x, y| x * y)?;
                        acc(*a, reduce_to_shape(&prod, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let prod = broadcast_binary(&g, av, |x, y| x * y)?;
                        acc(*b, reduce_to_shape(&prod, bv.shape()));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MatMul { a, b, trans_b } => {
                    let (ga, gb) = matmul_backward(
                        &g,
                        val(*a),
                        val(*b),
                        *trans_b,
                        nodes[*a].requires_grad,
                        nodes[*b].requires_grad,
                    );
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Permute { a, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(*a, permute(&g, &inv));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, Tensor { shape, data: g.data });
                }
                Op::Concat { inputs, axis } => {
                    let mut start = 0;
                    for &i in inputs {
                        let len = val(i).shape()[*axis];
                        acc(i, slice_axis(&g, *axis, start, len));
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let shape = val(*a).shape();
                    let mut full = Tensor::zeros(shape);
                    let (outer, inner) = split_axis(shape, *axis);
                    let len = g.shape()[*axis];
                    let src_row = len * inner;
                    let dst_row = shape[*axis] * inner;
                    for o in 0..outer {
                        full.data[o * dst_row + start * inner..o * dst_row + (start + len) * inner]
                            .copy_from_slice(&g.data[o * src_row..(o + 1) * src_row]);
                    }
                    acc(*a, full);
                }
                Op::Softmax(a) => {
                    acc(*a, softmax_backward(&node.value, &g, None));
                }
                Op::MixSoftmax {
                    logits,
                    lambda,
                    probs,
                } => {
                    acc(*logits, softmax_backward(probs, &g, Some(lambda)));
                }
                Op::Attention { q, k, v, bias, lambda } => {
                    let need = [nodes[*q].requires_grad, nodes[*k].requires_grad, nodes[*v].requires_grad];
                    let [gq, gk, gv] = attention_backward(&g, val(*q), val(*k), val(*v), bias, lambda, need);
                    for (target, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if let Some(grad) = grad {
                            acc(target, grad);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    acc(*a, zip_map(x, &g, |x, gy| gy * gelu_tanh_grad(x)));
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    acc(
                        *a,
                        zip_map(x, &g, |x, gy| {
                            let s = sigmoid(x);
                            gy * (s + x * s * (T::one() - s))
                        }),
                    );
                }
                Op::Exp(a) => acc(*a, zip_map(&node.value, &g, |y, gy| gy * y)),
                Op::Log(a) => {
                    acc(*a, zip_map(val(*a), &g, |x, gy| gy / x));
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let shape = val(*a).shape();
                    let gv = g.item() / T::of(numel(shape) as f64);
                    acc(*a, Tensor::full(shape, gv));
                }
                Op::GatherRows { table, index } => {
                    let tshape = val(*table).shape();
                    let cols = tshape[1];
                    let mut out = Tensor::zeros(tshape);
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..cols {
                            out.data[src * cols + c] += g.data[r * cols + c];
                        }
                    }
                    acc(*table, out);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }
}

/// Gradients of the leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; leaves not connected to the loss get zeros.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> TensorResult<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            broadcast_binary(&a, &b, f).map_err(|e| match e {
                TensorError::ShapeMismatch { lhs, rhs, .. } => TensorError::ShapeMismatch { op: name, lhs, rhs },
                e => e,
            })?
        };
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(|v| v * s);
        self.tape.record("scale", out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(self) -> TensorResult<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(|v| v + s);
        self.tape.record("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    /// `[..., m, k] x [..., k, n]`; a rank-2 right operand is shared across
    /// the batch.
    pub fn matmul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self x other^T` for `other` of shape `[..., n, k]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, T>, trans_b: bool) -> TensorResult<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            matmul_forward(&a, &b, trans_b)?
        };
        self.tape.record(
            "matmul",
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> TensorResult<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                msg: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(self, perm: &[usize]) -> TensorResult<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let mut seen = vec![false; a.rank()];
            if perm.len() != a.rank() || perm.iter().any(|&p| p >= a.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::InvalidShape {
                    op: "permute",
                    msg: format!("{perm:?} is not a permutation of rank {}", a.rank()),
                });
            }
            permute(&a, perm)
        };
        self.tape.record(
            "permute",
            out,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).clone().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> TensorResult<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            if axis >= a.rank() || start + len > a.shape()[axis] {
                return Err(TensorError::InvalidShape {
                    op: "slice",
                    msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
                });
            }
            slice_axis(&a, axis, start, len)
        };
        self.tape.record(
            "slice",
            out,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> TensorResult<Var<'t, T>> {
        let out = softmax_rows(&self.tape.value(self.id));
        self.tape.record("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    /// `lambda_b * bias + (1 - lambda_b) * softmax(logits)` for logits of shape
    /// `[B, H, Lq, Lk]`, a constant row-stochastic `bias` of shape
    /// `[B, 1 | H, Lq, Lk]` and one mixing weight per batch item.
    pub fn mix_softmax(self, bias: &Tensor<T>, lambda: &[T]) -> TensorResult<Var<'t, T>> {
        let (out, probs) = {
            let s = self.tape.value(self.id);
            mix_softmax_forward(&s, bias, lambda)?
        };
        self.tape.record(
            "mix_softmax",
            out,
            Op::MixSoftmax {
                logits: self.id,
                lambda: lambda.to_vec(),
                probs,
            },
            &[self.id],
        )
    }

    /// `mix_softmax(self k^T, bias, lambda) v` for `self`, `k`, `v` of shape
    /// `[B, H, L, D]`, evaluated one `(batch, head)` block at a time. The
    /// `L x L` weights are never stored; the backward pass recomputes them.
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, bias: &Arc<Tensor<T>>, lambda: &[T]) -> TensorResult<Var<'t, T>> {
        let out = {
            let (q, kv, vv) = (self.tape.value(self.id), self.tape.value(k.id), self.tape.value(v.id));
            attention_forward(&q, &kv, &vv, bias, lambda)?
        };
        self.tape.record(
            "attention",
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                bias: Arc::clone(bias),
                lambda: lambda.to_vec(),
            },
            &[self.id, k.id, v.id],
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(self) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(gelu_tanh);
        self.tape.record("gelu", out, Op::Gelu(self.id), &[self.id])
    }

    pub fn silu(self) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(|x| x * sigmoid(x));
        self.tape.record("silu", out, Op::Silu(self.id), &[self.id])
    }

    pub fn exp(self) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(|x| x.exp());
        self.tape.record("exp", out, Op::Exp(self.id), &[self.id])
    }

    pub fn ln(self) -> TensorResult<Var<'t, T>> {
        let out = self.tape.value(self.id).map(|x| x.ln());
        self.tape.record("log", out, Op::Log(self.id), &[self.id])
    }

    pub fn sum(self) -> TensorResult<Var<'t, T>> {
        let out = Tensor::scalar(self.tape.value(self.id).data().iter().copied().sum());
        self.tape.record("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> TensorResult<Var<'t, T>> {
        let out = {
            let a = self.tape.value(self.id);
            let s: T = a.data().iter().copied().sum();
            Tensor::scalar(s / T::of(a.numel().max(1) as f64))
        };
        self.tape.record("mean", out, Op::Mean(self.id), &[self.id])
    }

    /// Rows `index` of a rank-2 table.
    pub fn gather_rows(self, index: &[usize]) -> TensorResult<Var<'t, T>> {
        let out = {
            let t = self.tape.value(self.id);
            if t.rank() != 2 || index.iter().any(|&i| i >= t.shape()[0]) {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    msg: format!("index {index:?} into {:?}", t.shape()),
                });
            }
            let cols = t.shape()[1];
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index {
                data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
            }
            Tensor {
                shape: vec![index.len(), cols],
                data,
            }
        };
        self.tape.record(
            "gather_rows",
            out,
            Op::GatherRows {
                table: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        )
    }
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<'t, T: Real>(vars: &[Var<'t, T>], axis: usize) -> TensorResult<Var<'t, T>> {
    let tape = vars
        .first()
        .ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?
        .tape;
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let out = {
        let values: Vec<Ref<'_, Tensor<T>>> = ids.iter().map(|&i| tape.value(i)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} of rank {}", first.len()),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let row = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * row..(o + 1) * row]);
            }
        }
        Tensor { shape, data }
    };
    tape.record("concat", out, Op::Concat { inputs: ids.clone(), axis }, &ids)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

fn slice_axis<T: Real>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, inner) = split_axis(a.shape(), axis);
    let src_row = a.shape()[axis] * inner;
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = o * src_row + start * inner;
        data.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    Tensor { shape, data }
}

fn permute<T: Real>(a: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = a.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = a.numel();
    let mut data = Vec::with_capacity(n);
    if rank == 0 {
        return a.clone();
    }
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while data.len() < n {
        for i in 0..inner_len {
            data.push(a.data()[offset + i * inner_stride]);
        }
        // advance the outer counter
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through `out_shape`, 0 on broadcast dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let off = r - shape.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        if shape[d] != 1 {
            strides[d + off] = s;
        }
        s *= shape[d];
    }
    strides
}

/// Visits the output in contiguous runs along the last axis. `f` receives the
/// output offset, the two input offsets, the run length and the two input
/// strides along the run (0 or 1).
fn for_each_run(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let n = numel(out_shape);
    let r = out_shape.len();
    if r == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let last = r - 1;
    let inner = out_shape[last];
    if inner == 0 {
        return;
    }
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        f(o, oa, ob, inner, ia, ib);
        o += inner;
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> TensorResult<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut data = vec![T::zero(); numel(&shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&shape, &sa, &sb, |o, i, j, len, ia, ib| {
        let dst = &mut data[o..o + len];
        match (ia, ib) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&ad[i..i + len]).zip(&bd[j..j + len]) {
                    *d = f(x, y);
                }
            }
            (1, _) => {
                let y = bd[j];
                for (d, &x) in dst.iter_mut().zip(&ad[i..i + len]) {
                    *d = f(x, y);
                }
            }
            (_, 1) => {
                let x = ad[i];
                for (d, &y) in dst.iter_mut().zip(&bd[j..j + len]) {
                    *d = f(x, y);
                }
            }
            _ => dst.fill(f(ad[i], bd[j])),
        }
    });
    Ok(Tensor { shape, data })
}

/// Sums a gradient over the axes along which `shape` was broadcast.
fn reduce_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out_shape = g.shape();
    let st = broadcast_strides(shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut out = Tensor::zeros(shape);
    let gd = g.data();
    for_each_run(out_shape, &st, &zeros, |o, i, _, len, ia, _| {
        let src = &gd[o..o + len];
        if ia == 1 {
            for (d, &v) in out.data[i..i + len].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            out.data[i] += src.iter().copied().sum::<T>();
        }
    });
    out
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> TensorResult<MatDims> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(err());
    }
    let batch = numel(&a[..a.len() - 2]);
    let shared_b = b.len() == 2;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    Ok(MatDims {
        batch,
        m,
        k,
        n,
        shared_b,
    })
}

fn b_strides(trans_b: bool, k: usize, n: usize) -> (isize, isize) {
    if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    }
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> TensorResult<Tensor<T>> {
    let MatDims {
        batch,
        m,
        k,
        n,
        shared_b,
    } = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    let (rsb, csb) = b_strides(trans_b, k, n);
    if shared_b {
        // one gemm over all stacked rows
        unsafe {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                a.data().as_ptr(),
                k as isize,
                1,
                b.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    } else {
        for i in 0..batch {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.data().as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    b.data().as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

fn matmul_backward<T: Real>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let dims = matmul_dims(a.shape(), b.shape(), trans_b).expect("shapes checked in forward");
    let MatDims {
        batch,
        m,
        k,
        n,
        shared_b,
    } = dims;
    let (rsb, csb) = b_strides(trans_b, k, n);
    let ga = need_a.then(|| {
        // dA = dC B^T: B^T as an n x k view swaps the strides of B
        let mut out = Tensor::<T>::zeros(a.shape());
        let rows = if shared_b { batch * m } else { m };
        let reps = if shared_b { 1 } else { batch };
        for i in 0..reps {
            unsafe {
                T::gemm(
                    rows,
                    n,
                    k,
                    T::one(),
                    g.data().as_ptr().add(i * m * n),
                    n as isize,
                    1,
                    b.data().as_ptr().add(if shared_b { 0 } else { i * k * n }),
                    csb,
                    rsb,
                    T::zero(),
                    out.data.as_mut_ptr().add(i * m * k),
                    k as isize,
                    1,
                );
            }
        }
        out
    });
    let gb = need_b.then(|| {
        let mut out = Tensor::<T>::zeros(b.shape());
        let rows = if shared_b { batch * m } else { m };
        let reps = if shared_b { 1 } else { batch };
        for i in 0..reps {
            let a_ptr = unsafe { a.data().as_ptr().add(i * m * k) };
            let g_ptr = unsafe { g.data().as_ptr().add(i * m * n) };
            let o_ptr = unsafe { out.data.as_mut_ptr().add(if shared_b { 0 } else { i * k * n }) };
            unsafe {
                if trans_b {
                    // dB (n x k) = dC^T A
                    T::gemm(
                        n,
                        rows,
                        k,
                        T::one(),
                        g_ptr,
                        1,
                        n as isize,
                        a_ptr,
                        k as isize,
                        1,
                        T::zero(),
                        o_ptr,
                        k as isize,
                        1,
                    );
                } else {
                    // dB (k x n) = A^T dC
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        a_ptr,
                        1,
                        k as isize,
                        g_ptr,
                        n as isize,
                        1,
                        T::zero(),
                        o_ptr,
                        n as isize,
                        1,
                    );
                }
            }
        }
        out
    });
    (ga, gb)
}

fn softmax_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let cols = *a.shape().last().unwrap_or(&1);
    let mut data = a.data().to_vec();
    if cols > 0 {
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    // Eight independent lanes so max and sum reductions vectorize.
    let mut m = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            m[k] = if c[k] > m[k] { c[k] } else { m[k] };
        }
    }
    let mut max = m.iter().copied().fold(T::neg_infinity(), T::max);
    for &v in chunks.remainder() {
        max = max.max(v);
    }
    let mut acc = [T::zero(); 8];
    let mut chunks = row.chunks_exact_mut(8);
    for c in &mut chunks {
        for k in 0..8 {
            c[k] = (c[k] - max).exp_fast();
            acc[k] += c[k];
        }
    }
    let mut sum: T = acc.iter().copied().sum();
    for v in chunks.into_remainder() {
        *v = (*v - max).exp_fast();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dx = p * (dy - <dy, p>)` per row; `lambda` scales dy by `1 - lambda_b`
/// for the mixed variant, whose leading axis indexes the batch.
fn softmax_backward<T: Real>(p: &Tensor<T>, g: &Tensor<T>, lambda: Option<&[T]>) -> Tensor<T> {
    let cols = *p.shape().last().unwrap_or(&1);
    let rows_per_batch = lambda.map(|l| p.numel() / cols / l.len().max(1));
    let mut out = vec![T::zero(); p.numel()];
    for (r, ((pr, gr), orow)) in p
        .data()
        .chunks(cols)
        .zip(g.data().chunks(cols))
        .zip(out.chunks_mut(cols))
        .enumerate()
    {
        let w = match (lambda, rows_per_batch) {
            (Some(l), Some(rpb)) => T::one() - l[r / rpb],
            _ => T::one(),
        };
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &gv) in orow.iter_mut().zip(pr).zip(gr) {
            *o = w * pv * (gv - dot);
        }
    }
    Tensor {
        shape: p.shape().to_vec(),
        data: out,
    }
}

fn mix_softmax_forward<T: Real>(
    s: &Tensor<T>,
    bias: &Tensor<T>,
    lambda: &[T],
) -> TensorResult<(Tensor<T>, Tensor<T>)> {
    let bad = || TensorError::ShapeMismatch {
        op: "mix_softmax",
        lhs: s.shape().to_vec(),
        rhs: bias.shape().to_vec(),
    };
    if s.rank() != 4 || bias.rank() != 4 {
        return Err(bad());
    }
    let (b, h, lq, lk) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let bs = bias.shape();
    if bs[0] != b || !(bs[1] == 1 || bs[1] == h) || bs[2] != lq || bs[3] != lk || lambda.len() != b {
        return Err(bad());
    }
    let probs = softmax_rows(s);
    let mut out = vec![T::zero(); s.numel()];
    let mat = lq * lk;
    for bi in 0..b {
        let l = lambda[bi];
        let one_m = T::one() - l;
        for hi in 0..h {
            let o = (bi * h + hi) * mat;
            let bo = (bi * bs[1] + if bs[1] == 1 { 0 } else { hi }) * mat;
            let p = &probs.data()[o..o + mat];
            let bb = &bias.data()[bo..bo + mat];
            for ((dst, &pv), &bv) in out[o..o + mat].iter_mut().zip(p).zip(bb) {
                *dst = l * bv + one_m * pv;
            }
        }
    }
    Ok((
        Tensor {
            shape: s.shape().to_vec(),
            data: out,
        },
        probs,
    ))
}

struct AttentionDims {
    b: usize,
    h: usize,
    l: usize,
    d: usize,
    bias_heads: usize,
}

fn attention_dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, bias: &Tensor<T>, lambda: &[T]) -> TensorResult<AttentionDims> {
    let bad = |rhs: &Tensor<T>| TensorError::ShapeMismatch {
        op: "attention",
        lhs: q.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    if q.rank() != 4 {
        return Err(bad(q));
    }
    let (b, h, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    for t in [k, v] {
        if t.shape() != q.shape() {
            return Err(bad(t));
        }
    }
    let bs = bias.shape();
    if bias.rank() != 4 || bs[0] != b || !(bs[1] == 1 || bs[1] == h) || bs[2] != l || bs[3] != l || lambda.len() != b {
        return Err(bad(bias));
    }
    Ok(AttentionDims { b, h, l, d, bias_heads: bs[1] })
}

/// `c = a b` (or `a b^T`) for row-major `a: m x k`, `b: k x n` (`n x k`).
///
/// # Safety
/// Slices must hold the described matrices.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rm<T: Real>(m: usize, k: usize, n: usize, a: &[T], trans_a: bool, b: &[T], trans_b: bool, c: &mut [T]) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, T::zero(), c.as_mut_ptr(), n as isize, 1);
}

/// Softmax probabilities of `q k^T` for one block, written into `p`.
fn block_probs<T: Real>(q: &[T], k: &[T], l: usize, d: usize, p: &mut [T]) {
    unsafe { gemm_rm(l, d, l, q, false, k, true, p) };
    for row in p.chunks_mut(l) {
        softmax_in_place(row);
    }
}

fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    lambda: &[T],
) -> TensorResult<Tensor<T>> {
    let AttentionDims { b, h, l, d, bias_heads } = attention_dims(q, k, v, bias, lambda)?;
    let (blk, mat) = (l * d, l * l);
    let mut out = vec![T::zero(); q.numel()];
    let mut w = vec![T::zero(); mat];
    for bi in 0..b {
        let (lam, one_m) = (lambda[bi], T::one() - lambda[bi]);
        for hi in 0..h {
            let o = (bi * h + hi) * blk;
            let bo = (bi * bias_heads + if bias_heads == 1 { 0 } else { hi }) * mat;
            block_probs(&q.data[o..o + blk], &k.data[o..o + blk], l, d, &mut w);
            for (wv, &bv) in w.iter_mut().zip(&bias.data[bo..bo + mat]) {
                *wv = lam * bv + one_m * *wv;
            }
            unsafe { gemm_rm(l, l, d, &w, false, &v.data[o..o + blk], false, &mut out[o..o + blk]) };
        }
    }
    Ok(Tensor { shape: q.shape().to_vec(), data: out })
}

fn attention_backward<T: Real>(
    g: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    lambda: &[T],
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let AttentionDims { b, h, l, d, bias_heads } = attention_dims(q, k, v, bias, lambda).expect("shapes checked in forward");
    let (blk, mat) = (l * d, l * l);
    let mut grads: [Option<Vec<T>>; 3] = need.map(|n| n.then(|| vec![T::zero(); q.numel()]));
    let mut p = vec![T::zero(); mat];
    let mut w = vec![T::zero(); mat];
    let mut dw = vec![T::zero(); mat];
    for bi in 0..b {
        let (lam, one_m) = (lambda[bi], T::one() - lambda[bi]);
        for hi in 0..h {
            let o = (bi * h + hi) * blk;
            let bo = (bi * bias_heads + if bias_heads == 1 { 0 } else { hi }) * mat;
            let (qb, kb, vb, gb) = (&q.data[o..o + blk], &k.data[o..o + blk], &v.data[o..o + blk], &g.data[o..o + blk]);
            block_probs(qb, kb, l, d, &mut p);
            if let Some(gv) = grads[2].as_mut() {
                for ((wv, &pv), &bv) in w.iter_mut().zip(&p).zip(&bias.data[bo..bo + mat]) {
                    *wv = lam * bv + one_m * pv;
                }
                unsafe { gemm_rm(l, l, d, &w, true, gb, false, &mut gv[o..o + blk]) };
            }
            if !(need[0] || need[1]) {
                continue;
            }
            unsafe { gemm_rm(l, d, l, gb, false, vb, true, &mut dw) };
            // dS = (1 - lambda) P * (dW - rowdot(P, dW)), reusing dw
            for (pr, dr) in p.chunks(l).zip(dw.chunks_mut(l)) {
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &c)| a * c).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = one_m * pv * (*dv - dot);
                }
            }
            if let Some(gq) = grads[0].as_mut() {
                unsafe { gemm_rm(l, l, d, &dw, false, kb, false, &mut gq[o..o + blk]) };
            }
            if let Some(gk) = grads[1].as_mut() {
                unsafe { gemm_rm(l, l, d, &dw, true, qb, false, &mut gk[o..o + blk]) };
            }
        }
    }
    grads.map(|g| g.map(|data| Tensor { shape: q.shape().to_vec(), data }))
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

pub(crate) fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh_fast())
}

fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_C);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh_fast();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
