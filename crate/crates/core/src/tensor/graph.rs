use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_shape, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, rstd: Vec<T> },
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    SumAll(Var),
    SumAxis { input: Var, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only computation record. Rebuilt on every forward pass.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    flops: u64,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, axis length, inner) decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let na: usize = a_shape.iter().product();
    let nb: usize = b_shape.iter().product();
    if na == total && nb == total {
        (0..total).for_each(|i| f(i, i, i));
        return;
    }
    if na == total && out_shape.ends_with(b_shape) {
        (0..total).for_each(|i| f(i, i, i % nb.max(1)));
        return;
    }
    if nb == total && out_shape.ends_with(a_shape) {
        (0..total).for_each(|i| f(i, i % na.max(1), i));
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
            backward_done: false,
        }
    }

    /// FLOPs recorded so far, forward and backward.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, 0)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, 0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` for constants or before backward.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, flops: u64) -> Var {
        self.flops += flops;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg, 2 * (m * k * n) as u64))
    }

    /// Batched product over matching leading dims: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                let ag = &da[g * m * k..(g + 1) * m * k];
                let bg = &db[g * k * n..(g + 1) * k * n];
                let cg = &mut out[g * m * n..(g + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ag, bg, cg);
                } else {
                    gemm_nn(m, k, n, ag, bg, cg);
                }
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        let flops = 2 * (groups * m * k * n) as u64;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, rg, flops))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::NotBroadcastable {
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let total: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); total];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for_each_broadcast(&sa, &sb, &out_shape, |i, ia, ib| {
                out[i] = match kind {
                    Binary::Add => da[ia] + db[ib],
                    Binary::Sub => da[ia] - db[ib],
                    Binary::Mul => da[ia] * db[ib],
                };
            });
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg, total as u64))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => {
                    if x >= T::zero() {
                        T::one() / (T::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (T::one() + e)
                    }
                }
                Unary::Relu => x.max(T::zero()),
                Unary::Abs => x.abs(),
            })
            .collect::<Vec<_>>();
        let n = data.len() as u64;
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::Unary(kind, a), rg, n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        let n = value.numel() as u64;
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg, n)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + r;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        // max-shift, exp, sum, divide
        let flops = 4 * out.len() as u64;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input: a, axis }, rg, flops))
    }

    /// Normalizes each slice along the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "scalar input".into(),
        })?;
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                axis: shape.len() - 1,
                shape,
            });
        }
        let src = self.value(a).data();
        let rows = src.len() / n;
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        let nf = T::lit(n as f64);
        for (x, y) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mean = x.iter().copied().sum::<T>() / nf;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::lit(eps)).sqrt();
            for (yv, &xv) in y.iter_mut().zip(x) {
                *yv = (xv - mean) * r;
            }
            rstd.push(r);
        }
        let flops = 5 * out.len() as u64;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { input: a, rstd }, rg, flops))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg, 0))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let data = permute_data(self.value(a).data(), &shape, axes);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
            0,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::SliceOutOfRange {
                start,
                end: start + len,
                len: shape[axis],
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { input: a, axis, start }, rg, 0))
    }

    /// Entry `index` along `axis`, with that axis removed.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.slice(a, axis, index, 1)?;
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            0,
        ))
    }

    /// Stacks equally shaped inputs along a new `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut shape = self.shape(v).to_vec();
            if axis > shape.len() {
                return Err(TensorError::InvalidAxis {
                    axis,
                    rank: shape.len(),
                });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let total = src.iter().copied().sum::<T>();
        let n = src.len() as u64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg, n)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over `axis`, which is removed from the output shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let n = src.len() as u64;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { input: a, axis }, rg, n))
    }

    /// Reverse sweep from a scalar `loss`; fills gradients of every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut flops = 0u64;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            flops += self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
        }
        self.flops += flops;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> u64 {
        let node = &self.nodes[i];
        let mut flops = 0u64;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return false;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
            true
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if acc(grads, a, &mut |ga| gemm_nt(m, n, k, g, db, ga)) {
                    flops += 2 * (m * k * n) as u64;
                }
                if acc(grads, b, &mut |gb| gemm_tn(m, k, n, da, g, gb)) {
                    flops += 2 * (m * k * n) as u64;
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let groups: usize = sa[..r - 2].iter().product();
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let mk = m * k;
                let kn = k * n;
                let mn = m * n;
                let done_a = acc(grads, a, &mut |ga| {
                    for gi in 0..groups {
                        let gg = &g[gi * mn..(gi + 1) * mn];
                        let bg = &db[gi * kn..(gi + 1) * kn];
                        let out = &mut ga[gi * mk..(gi + 1) * mk];
                        if trans_b {
                            // b is [n×k]: dA = dC · B
                            gemm_nn(m, n, k, gg, bg, out);
                        } else {
                            gemm_nt(m, n, k, gg, bg, out);
                        }
                    }
                });
                let done_b = acc(grads, b, &mut |gb| {
                    for gi in 0..groups {
                        let gg = &g[gi * mn..(gi + 1) * mn];
                        let ag = &da[gi * mk..(gi + 1) * mk];
                        let out = &mut gb[gi * kn..(gi + 1) * kn];
                        if trans_b {
                            // dB[n×k] = dCᵀ · A
                            gemm_tn(m, n, k, gg, ag, out);
                        } else {
                            gemm_tn(m, k, n, ag, gg, out);
                        }
                    }
                });
                let per = 2 * (groups * m * k * n) as u64;
                flops += per * (done_a as u64 + done_b as u64);
            }
            &Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let out_shape = node.value.shape();
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let done_a = acc(grads, a, &mut |ga| {
                    for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| {
                        ga[ia] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * db[ib],
                        };
                    })
                });
                let done_b = acc(grads, b, &mut |gb| {
                    for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| {
                        match kind {
                            Binary::Add => gb[ib] += g[o],
                            Binary::Sub => gb[ib] -= g[o],
                            Binary::Mul => gb[ib] += g[o] * da[ia],
                        };
                    })
                });
                flops += g.len() as u64 * (done_a as u64 + done_b as u64);
            }
            &Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let y = node.value.data();
                if acc(grads, a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j]
                            * match kind {
                                Unary::Tanh => T::one() - y[j] * y[j],
                                Unary::Sigmoid => y[j] * (T::one() - y[j]),
                                Unary::Relu => {
                                    if x[j] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Unary::Abs => {
                                    if x[j] > T::zero() {
                                        T::one()
                                    } else if x[j] < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                    }
                }) {
                    flops += g.len() as u64;
                }
            }
            &Op::Scale(a, c) => {
                if acc(grads, a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv * c);
                }) {
                    flops += g.len() as u64;
                }
            }
            &Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let y = node.value.data();
                if acc(grads, input, &mut |ga| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + r;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }) {
                    flops += 3 * g.len() as u64;
                }
            }
            Op::LayerNorm { input, rstd } => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                let nf = T::lit(n as f64);
                if acc(grads, *input, &mut |ga| {
                    for (row, &r) in rstd.iter().enumerate() {
                        let gs = &g[row * n..(row + 1) * n];
                        let ys = &y[row * n..(row + 1) * n];
                        let mean_g = gs.iter().copied().sum::<T>() / nf;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            ga[row * n + j] += r * (gs[j] - mean_g - ys[j] * mean_gy);
                        }
                    }
                }) {
                    flops += 5 * g.len() as u64;
                }
            }
            &Op::Reshape(a) => {
                acc(grads, a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                });
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                acc(grads, *input, &mut |ga| {
                    ga.iter_mut().zip(&back).for_each(|(x, &gv)| *x += gv);
                });
            }
            &Op::Slice { input, axis, start } => {
                let in_shape = self.shape(input);
                let (outer, full, inner) = split_axis(in_shape, axis);
                let len = node.value.shape()[axis];
                acc(grads, input, &mut |ga| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            ga[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    acc(grads, v, &mut |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::SumAll(a) => {
                if acc(grads, a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])) {
                    flops += self.value(a).numel() as u64;
                }
            }
            &Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                if acc(grads, input, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (x, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *x += gv;
                            }
                        }
                    }
                }) {
                    flops += (outer * len * inner) as u64;
                }
            }
        }
        flops
    }
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
    let strides: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..src.len() {
        out.push(src[pos]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
