//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in exact
//! reverse order of execution and accumulates gradients into leaves created
//! with `requires_grad`.
//!
//! Broadcasting is limited to adding a column vector to every column of a
//! matrix (`x + b·1ᵀ`); every other binary op requires identical shapes.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    /// Element-wise map with its derivative evaluated at the input.
    Map(Var, Vec<f64>),
    Sum(Var),
    SoftmaxColumns(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Vec<Var>),
    /// `out[j] = in[idx[j]]` over flat storage.
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | BatchMatMul(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | AddScalar(x) | Sigmoid(x) | Tanh(x) | Relu(x) | Log(x)
            | Clamp(x, _, _) | Map(x, _) | Sum(x) | SoftmaxColumns(x) | Gather(x, _)
            | Reshape(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(v) | ConcatCols(v) | Mean(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    value_bytes: usize,
    peak_bytes: usize,
    counters: BTreeMap<&'static str, usize>,
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

    /// Bytes held by forward values currently on the tape.
    pub fn value_bytes(&self) -> usize {
        self.value_bytes
    }

    /// Peak of forward values plus live gradient buffers seen so far.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.max(self.value_bytes)
    }

    /// Increments a named instrumentation counter.
    pub fn bump(&mut self, key: &'static str) {
        *self.counters.entry(key).or_default() += 1;
    }

    pub fn counter(&self, key: &str) -> usize {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if it does not require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.value_bytes += value.numel() * std::mem::size_of::<f64>();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    /// Batched product of `[G×m×k]` and `[G×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm of {sa:?} and {sb:?}"));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push_op(out, Op::BatchMatMul(a, b)))
    }

    // ---- element-wise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| f(z)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("unary shape");
        self.push_op(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// `x + b·1ᵀ` for `x: [m×n]`, `b: [m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let ok = sx.len() == 2
            && match sb {
                [m] => *m == sx[0],
                [m, 1] => *m == sx[0],
                _ => false,
            };
        if !ok {
            return Err(shape_err!("bias {sb:?} cannot broadcast over {sx:?}"));
        }
        let n = sx[1];
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / n])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push_op(out, Op::AddBias(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |z| z * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |z| z + s, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |z| if z > 0.0 { z } else { 0.0 }, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&z| !(z > 0.0)) {
            return Err(Error::NonFinite("log of a non-positive value"));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |z| z.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Element-wise `f` with user-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let deriv = self.value(x).data().iter().map(|&z| df(z)).collect();
        self.unary(x, f, Op::Map(x, deriv))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    /// Softmax over the rows of every column. Applies to each matrix of a
    /// `[G×R×C]` batch.
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let (g, r, c) = batch_dims(v.shape())
            .ok_or_else(|| shape_err!("softmax_columns needs 2 or 3 dims, got {:?}", v.shape()))?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..g {
            let base = b * r * c;
            for j in 0..c {
                let mut max = f64::NEG_INFINITY;
                for i in 0..r {
                    max = max.max(src[base + i * c + j]);
                }
                let mut total = 0.0;
                for i in 0..r {
                    let e = (src[base + i * c + j] - max).exp();
                    out[base + i * c + j] = e;
                    total += e;
                }
                for i in 0..r {
                    out[base + i * c + j] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::SoftmaxColumns(x)))
    }

    /// Standardizes every column of `x: [D×N]` over its `D` entries, then
    /// applies the per-row affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(shape_err!("layer_norm needs a matrix, got {sx:?}"));
        }
        let (d, n) = (sx[0], sx[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm over {d} rows with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; d * n];
        for j in 0..n {
            let mean = (0..d).map(|i| xv[i * n + j]).sum::<f64>() / d as f64;
            let var = (0..d).map(|i| (xv[i * n + j] - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[j] = inv;
            for i in 0..d {
                let h = (xv[i * n + j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = gv[i] * h + bv[i];
            }
        }
        let out = Tensor::new(vec![d, n], out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- shape ops ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err!("ragged concat_rows: {s:?} with {cols} columns"));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let rows = self.shape(*first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err!("ragged concat_cols: {s:?} with {rows} rows"));
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Average of equally shaped tensors (the mean over a stacking axis).
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("mean of nothing"))?;
        let shape = self.shape(*first).to_vec();
        let mut acc = vec![0.0; self.value(*first).numel()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err!("mean of {:?} and {shape:?}", self.shape(p)));
            }
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += v;
            }
        }
        let n = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::new(shape, acc)?;
        Ok(self.push_op(out, Op::Mean(parts.to_vec())))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, idx: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::Gather(x, idx)))
    }

    /// Transposes a matrix, or each matrix of a `[G×R×C]` batch.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (g, r, c) =
            batch_dims(&s).ok_or_else(|| shape_err!("transpose needs 2 or 3 dims, got {s:?}"))?;
        let mut idx = Vec::with_capacity(g * r * c);
        for b in 0..g {
            for j in 0..c {
                for i in 0..r {
                    idx.push(b * r * c + i * c + j);
                }
            }
        }
        let shape = if s.len() == 2 { vec![c, r] } else { vec![g, c, r] };
        self.gather(x, shape, idx)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(shape_err!("row slice {start}..{end} of {s:?}"));
        }
        let c = s[1];
        self.gather(x, vec![end - start, c], (start * c..end * c).collect())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(shape_err!("column slice {start}..{end} of {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let idx = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(x, vec![r, end - start], idx)
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || perm.iter().any(|&p| p >= s[1]) {
            return Err(shape_err!("column permutation of {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let idx = (0..r).flat_map(|i| perm.iter().map(move |&p| i * c + p)).collect();
        self.gather(x, vec![r, perm.len()], idx)
    }

    /// `[d × G·L] → [G × d × L]`: splits the columns into `groups` contiguous
    /// runs and stacks them.
    pub fn to_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || groups == 0 || s[1] % groups != 0 {
            return Err(shape_err!("cannot split {s:?} into {groups} column groups"));
        }
        let (d, n) = (s[0], s[1]);
        let l = n / groups;
        let mut idx = Vec::with_capacity(d * n);
        for g in 0..groups {
            for i in 0..d {
                idx.extend((0..l).map(|t| i * n + g * l + t));
            }
        }
        self.gather(x, vec![groups, d, l], idx)
    }

    /// Inverse of [`to_groups`](Self::to_groups).
    pub fn from_groups(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("from_groups needs 3 dims, got {s:?}"));
        }
        let (g, d, l) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(g * d * l);
        for i in 0..d {
            for gi in 0..g {
                idx.extend((0..l).map(|t| gi * d * l + i * l + t));
            }
        }
        self.gather(x, vec![d, g * l], idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, Op::Reshape(x)))
    }

    // ---- backward ----

    /// Accumulates `∂loss/∂leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss does not depend on any trainable leaf".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let word = std::mem::size_of::<f64>();
        let mut live = word;
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            live -= g.len() * word;
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let mut cx = BackwardCtx {
                nodes: &self.nodes,
                grads: &mut grads,
                live: &mut live,
            };
            cx.apply(node, &g);
            self.peak_bytes = self.peak_bytes.max(self.value_bytes + live);
        }
        Ok(())
    }
}

struct BackwardCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    live: &'a mut usize,
}

impl<'a> BackwardCtx<'a> {
    fn val(&self, v: Var) -> &'a [f64] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.data()
    }

    fn dims(&self, v: Var) -> &'a [usize] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.shape()
    }

    /// Gradient buffer of `v`, or `None` if `v` needs no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *self.live += node.value.numel() * std::mem::size_of::<f64>();
            *slot = Some(vec![0.0; node.value.numel()]);
        }
        slot.as_mut()
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize, f64) -> f64, g: &[f64]) {
        if let Some(buf) = self.buf(v) {
            for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(i, gi);
            }
        }
    }

    fn apply(&mut self, node: &Node, g: &[f64]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bv = self.val(*b);
                let av = self.val(*a);
                if let Some(da) = self.buf(*a) {
                    gemm(m, n, k, g, false, bv, true, da, true);
                }
                if let Some(db) = self.buf(*b) {
                    gemm(k, m, n, av, true, g, false, db, true);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.dims(*a), self.dims(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let bv = self.val(*b);
                let av = self.val(*a);
                if let Some(da) = self.buf(*a) {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(db) = self.buf(*b) {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |_, gi| gi, g);
                self.accumulate(*b, |_, gi| gi, g);
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, |_, gi| gi, g);
                let n = node.value.shape()[1];
                if let Some(db) = self.buf(*b) {
                    for (i, row) in g.chunks(n).enumerate() {
                        db[i] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(*a, |i, gi| gi * bv[i], g);
                self.accumulate(*b, |i, gi| gi * av[i], g);
            }
            Op::Scale(x, s) => self.accumulate(*x, |_, gi| gi * s, g),
            Op::AddScalar(x) => self.accumulate(*x, |_, gi| gi, g),
            Op::Sigmoid(x) => self.accumulate(*x, |i, gi| gi * y[i] * (1.0 - y[i]), g),
            Op::Tanh(x) => self.accumulate(*x, |i, gi| gi * (1.0 - y[i] * y[i]), g),
            Op::Relu(x) => {
                self.accumulate(*x, |i, gi| if y[i] > 0.0 { gi } else { 0.0 }, g)
            }
            Op::Log(x) => {
                let xv = self.val(*x);
                self.accumulate(*x, |i, gi| gi / xv[i], g)
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.val(*x);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    *x,
                    |i, gi| if xv[i] > lo && xv[i] < hi { gi } else { 0.0 },
                    g,
                )
            }
            Op::Map(x, deriv) => self.accumulate(*x, |i, gi| gi * deriv[i], g),
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(dx) = self.buf(*x) {
                    dx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::SoftmaxColumns(x) => {
                let (bs, r, c) = batch_dims(node.value.shape()).expect("softmax dims");
                if let Some(dx) = self.buf(*x) {
                    for b in 0..bs {
                        let base = b * r * c;
                        for j in 0..c {
                            let dot: f64 = (0..r)
                                .map(|i| y[base + i * c + j] * g[base + i * c + j])
                                .sum();
                            for i in 0..r {
                                let k = base + i * c + j;
                                dx[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (d, n) = (s[0], s[1]);
                if let Some(db) = self.buf(*beta) {
                    for i in 0..d {
                        db[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
                if let Some(dg) = self.buf(*gamma) {
                    for i in 0..d {
                        dg[i] += (0..n).map(|j| g[i * n + j] * xhat[i * n + j]).sum::<f64>();
                    }
                }
                let gv = self.val(*gamma);
                if let Some(dx) = self.buf(*x) {
                    for j in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            let dh = g[i * n + j] * gv[i];
                            m1 += dh;
                            m2 += dh * xhat[i * n + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for i in 0..d {
                            let k = i * n + j;
                            dx[k] += inv_std[j] * (g[k] * gv[i] - m1 - xhat[k] * m2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.accumulate(*p, |_, gi| gi, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let s = self.dims(*p);
                    let (r, c) = (s[0], s[1]);
                    if let Some(dp) = self.buf(*p) {
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Mean(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    self.accumulate(*p, |_, gi| gi * inv, g);
                }
            }
            Op::Gather(x, idx) => {
                if let Some(dx) = self.buf(*x) {
                    for (&i, &gi) in idx.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::Reshape(x) => self.accumulate(*x, |_, gi| gi, g),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(batch, rows, cols)` view of a matrix or a batch of matrices.
fn batch_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [g, r, c] => Some((g, r, c)),
        _ => None,
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences for every entry of every input.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
        .collect();
    grad_check_entries(f, inputs, &entries, step, tol)
}

/// [`grad_check`] restricted to the given `(input, flat index)` entries.
pub fn grad_check_entries<F>(
    f: F,
    inputs: &[Tensor],
    entries: &[(usize, usize)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("leaf grad")).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    for &(k, i) in entries {
        let orig = work[k].data()[i];
        work[k].data_mut()[i] = orig + step;
        let up = eval(&work)?;
        work[k].data_mut()[i] = orig - step;
        let down = eval(&work)?;
        work[k].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k].data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: entries.len(),
        passed: max_rel_err <= tol,
    })
}
