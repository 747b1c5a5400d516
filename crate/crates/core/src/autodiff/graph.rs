//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so creation order is a topological order and `backward`
//! walks the tape once in reverse. Gradients accumulate with `+=`, which is
//! what makes shared parameters (query banks, shared heads) work.

use std::sync::Arc;

use super::tensor::{split_at_axis, strides, Real, Tensor};
use crate::error::{contract, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    Relu(Var),
    Softmax(Var),
    LayerNorm { a: Var, inv_std: Vec<T> },
    MaxReduce { a: Var, axis: usize, argmax: Vec<usize> },
    MeanReduce { a: Var, axis: usize },
    SumAll(Var),
    SquaredError(Var, Var),
    Chamfer { pred: Var, target: Arc<Tensor<T>>, pred_nn: Vec<usize>, target_nn: Vec<usize> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-owner computation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if a == b {
        return Some(1);
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Some(a[..a.len() - b.len()].iter().product());
    }
    None
}

impl<T: Real> Graph<T> {
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
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A gradient-receiving leaf that shares storage with a parameter store.
    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `a + b`, where `b` may drop leading axes of `a` (leading-batch broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_repeats(va.shape(), vb.shape()).ok_or_else(|| {
            contract(format!("add: shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape()))
        })?;
        let nb = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_repeats(va.shape(), vb.shape()).ok_or_else(|| {
            contract(format!("mul: shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape()))
        })?;
        let nb = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]` (shared across every
    /// leading index of `a`) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let err = || contract(format!("matmul: shapes {sa:?} and {sb:?} are incompatible"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        if shared_rhs {
            T::gemm(
                batch * m,
                k,
                n,
                va.data(),
                (k as isize, 1),
                vb.data(),
                (n as isize, 1),
                out.data_mut(),
                false,
            );
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, shared_rhs }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::clone(va).reshaped(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let rank = va.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(contract(format!(
                "permute: {perm:?} is not a permutation of the axes of {:?}",
                va.shape()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| va.shape()[p]).collect();
        let mut out = Tensor::zeros(&out_shape);
        permute_into(va.shape(), perm, va.data(), out.data_mut(), |dst, src| *dst = src);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(contract(format!("transpose: rank-{rank} tensor")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| contract("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(contract(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(contract(format!(
                    "concat along {axis}: shapes {base:?} and {s:?} differ off-axis"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(contract(format!(
                "slice: [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_at_axis(s, axis);
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Slice { a, axis, start }, ng))
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.is_empty() {
            return Err(contract("index_select on a scalar"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(contract(format!("index_select: index {bad} out of range for {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&va.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[0] = indices.len();
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            out,
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i].max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = *va
            .shape()
            .last()
            .ok_or_else(|| contract("softmax on a scalar"))?;
        let mut out = Tensor::clone(va);
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let va = self.value(a);
        let d = *va
            .shape()
            .last()
            .ok_or_else(|| contract("layer_norm on a scalar"))?;
        let mut out = Tensor::clone(va);
        let mut inv_std = Vec::with_capacity(va.len() / d.max(1));
        let dn = T::of(d as f64);
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::LayerNorm { a, inv_std }, ng))
    }

    /// Maximum over `axis` (removed). Gradient goes to the first maximal index.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(contract(format!("max_reduce: axis {axis} invalid for {s:?}")));
        }
        let (outer, alen, inner) = split_at_axis(s, axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = va.data()[o * alen * inner + i];
                for j in 1..alen {
                    let v = va.data()[(o * alen + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MaxReduce { a, axis, argmax }, ng))
    }

    /// Mean over `axis` (removed).
    pub fn mean_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(contract(format!("mean_reduce: axis {axis} invalid for {s:?}")));
        }
        let (outer, alen, inner) = split_at_axis(s, axis);
        let scale = T::one() / T::of(alen as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + va.data()[(o * alen + j) * inner + i];
                }
            }
        }
        for x in &mut data {
            *x = *x * scale;
        }
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MeanReduce { a, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll(a), ng)
    }

    /// `Σ (a − b)²` over all elements; shapes must match exactly.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(contract(format!(
                "squared_error: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let total = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(total), Op::SquaredError(a, b), ng))
    }

    /// Bidirectional Chamfer distance between predicted points `pred`
    /// (`[.., 3]`) and a fixed target set `[m, 3]`:
    /// mean squared nearest-neighbour distance in each direction, summed.
    pub fn chamfer(&mut self, pred: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape().last() != Some(&3) || target.shape().len() != 2 || target.shape()[1] != 3 {
            return Err(contract(format!(
                "chamfer: expected [.., 3] and [m, 3], got {:?} and {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let n = vp.len() / 3;
        let m = target.shape()[0];
        if n == 0 || m == 0 {
            return Err(contract("chamfer: empty point set"));
        }
        let p = vp.data();
        let q = target.data();
        let sq = |i: usize, j: usize| {
            let dx = p[3 * i] - q[3 * j];
            let dy = p[3 * i + 1] - q[3 * j + 1];
            let dz = p[3 * i + 2] - q[3 * j + 2];
            dx * dx + dy * dy + dz * dz
        };
        let mut pred_nn = vec![0; n];
        let mut pred_best = vec![T::infinity(); n];
        let mut target_nn = vec![0; m];
        let mut target_best = vec![T::infinity(); m];
        for i in 0..n {
            for j in 0..m {
                let d = sq(i, j);
                if d < pred_best[i] {
                    pred_best[i] = d;
                    pred_nn[i] = j;
                }
                if d < target_best[j] {
                    target_best[j] = d;
                    target_nn[j] = i;
                }
            }
        }
        let fwd: T = pred_best.iter().copied().sum::<T>() / T::of(n as f64);
        let bwd: T = target_best.iter().copied().sum::<T>() / T::of(m as f64);
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(fwd + bwd),
            Op::Chamfer {
                pred,
                target,
                pred_nn,
                target_nn,
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only keep gradients for nodes that asked for them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let nb = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let nb = vb.len();
                acc(*a, &mut |ga| {
                    for (i, &x) in g.iter().enumerate() {
                        ga[i] = ga[i] + x * vb[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + x * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d = *d + x * *c;
                }
            }),
            Op::MatMul { a, b, shared_rhs } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let sa = va.shape();
                let sb = vb.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if *shared_rhs {
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC over all stacked rows.
                    acc(*a, &mut |ga| {
                        T::gemm(batch * m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), ga, true)
                    });
                    acc(*b, &mut |gb| {
                        T::gemm(k, batch * m, n, va.data(), (1, k as isize), g, (n as isize, 1), gb, true)
                    });
                } else {
                    acc(*a, &mut |ga| {
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &vb.data()[bi * k * n..(bi + 1) * k * n],
                                (1, n as isize),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                true,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &va.data()[bi * m * k..(bi + 1) * m * k],
                                (1, k as isize),
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Permute(a, perm) => {
                let in_shape = self.value(*a).shape();
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*a, &mut |ga| {
                    permute_into(&out_shape, &inverse, g, ga, |dst, src| *dst = *dst + src)
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.value(*a).shape();
                let (outer, alen, inner) = split_at_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        add_into(&mut ga[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::IndexSelect { a, indices } => {
                let inner: usize = self.value(*a).shape()[1..].iter().product();
                acc(*a, &mut |ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner]);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if va[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / d.max(1) {
                        let row = r * d..(r + 1) * d;
                        let dot: T = y[row.clone()].iter().zip(&g[row.clone()]).map(|(&p, &q)| p * q).sum();
                        for i in row {
                            ga[i] = ga[i] + y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let xhat = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let dn = T::of(d as f64);
                acc(*a, &mut |ga| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let mean_g = g[row.clone()].iter().copied().sum::<T>() / dn;
                        let mean_gx =
                            g[row.clone()].iter().zip(&xhat[row.clone()]).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for i in row {
                            ga[i] = ga[i] + inv * (g[i] - mean_g - xhat[i] * mean_gx);
                        }
                    }
                });
            }
            Op::MaxReduce { a, axis, argmax } => {
                let (_, alen, inner) = split_at_axis(self.value(*a).shape(), *axis);
                acc(*a, &mut |ga| {
                    for (idx, &j) in argmax.iter().enumerate() {
                        let (o, i) = (idx / inner, idx % inner);
                        let dst = (o * alen + j) * inner + i;
                        ga[dst] = ga[dst] + g[idx];
                    }
                });
            }
            Op::MeanReduce { a, axis } => {
                let (outer, alen, inner) = split_at_axis(self.value(*a).shape(), *axis);
                let scale = T::one() / T::of(alen as f64);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..alen {
                            for i in 0..inner {
                                let dst = (o * alen + j) * inner + i;
                                ga[dst] = ga[dst] + g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::SquaredError(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let two = T::of(2.0) * g[0];
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + two * (va[i] - vb[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] - two * (va[i] - vb[i]);
                    }
                });
            }
            Op::Chamfer {
                pred,
                target,
                pred_nn,
                target_nn,
            } => {
                let p = self.value(*pred).data();
                let q = target.data();
                let n = pred_nn.len();
                let m = target_nn.len();
                let cf = T::of(2.0) * g[0] / T::of(n as f64);
                let cb = T::of(2.0) * g[0] / T::of(m as f64);
                acc(*pred, &mut |gp| {
                    for (i, &j) in pred_nn.iter().enumerate() {
                        for c in 0..3 {
                            gp[3 * i + c] = gp[3 * i + c] + cf * (p[3 * i + c] - q[3 * j + c]);
                        }
                    }
                    for (j, &i) in target_nn.iter().enumerate() {
                        for c in 0..3 {
                            gp[3 * i + c] = gp[3 * i + c] + cb * (p[3 * i + c] - q[3 * j + c]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Walks `src` (of `in_shape`) in the order of the permuted output and hands
/// each (output slot, input value) pair to `f`.
fn permute_into<T: Real>(in_shape: &[usize], perm: &[usize], src: &[T], dst: &mut [T], f: impl Fn(&mut T, T)) {
    let rank = in_shape.len();
    if rank == 0 {
        f(&mut dst[0], src[0]);
        return;
    }
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    // Innermost output axis is iterated as a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_step = step[last];
    let mut counter = vec![0usize; rank];
    let mut out_pos = 0;
    loop {
        let base: usize = counter.iter().zip(&step).map(|(c, s)| c * s).sum();
        for j in 0..inner_len {
            f(&mut dst[out_pos + j], src[base + j * inner_step]);
        }
        out_pos += inner_len;
        // Advance the multi-index over all but the last axis.
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.param(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[2, 7], 3.5));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-7);
            for &v in row {
                assert!((v - 1.0 / 7.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn max_gradient_goes_to_first_tie() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3, 2], &[1., 5., 4., 5., 4., 2.]));
        let m = g.max_reduce(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[4., 5.]);
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0., 1., 1., 0., 0., 0.]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (c, a, b) of p equals x[a, b, c]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn broadcast_add_backward_sums_leading_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[4, 3]));
        let b = g.param(t(&[3], &[1., 2., 3.]));
        let y = g.add(x, b).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[4., 4., 4.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1., 2.]));
        let p = g.param(t(&[2], &[3., 4.]));
        let e = g.squared_error(p, c).unwrap();
        let grads = g.backward(e).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[4., 4.]);
    }

    #[test]
    fn chamfer_single_points() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[1, 3], &[0., 0., 0.]));
        let c = g.chamfer(p, Arc::new(t(&[1, 3], &[1., 0., 0.]))).unwrap();
        assert_eq!(g.value(c).item(), 2.0);
    }
}
