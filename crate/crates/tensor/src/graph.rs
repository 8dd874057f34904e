//! Tape of recorded operations and its reverse sweep.
//!
//! Every operation appends one node holding its forward value. Node indices are
//! a topological order, so the backward sweep walks them in reverse once.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::kernels::{self, ConvGeom};
use crate::tensor::{inverse_axes, permute};
use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Boundary handling for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Periodic,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Zero => "zero",
            Padding::Periodic => "periodic",
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    BroadcastMid(Var, usize),
    MulScalar(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f32> },
    Silu(Var),
    Saturate(Var, f32),
    LayerNorm { x: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L1(Var, Var),
    Rope { x: Var, cos: Rc<Vec<f32>>, sin: Rc<Vec<f32>>, pairs: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of parameters after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over all gradient entries, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }
}

/// Recording context for one forward (and at most one backward) pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    dropout_rng: Option<Box<dyn RngCore>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records gradients; dropout is inactive.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            grads: Vec::new(),
            consumed: false,
            dropout_rng: None,
        }
    }

    /// Inference graph: nothing is retained for a backward pass.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Training graph with dropout masks drawn from `rng`.
    pub fn training(rng: impl RngCore + 'static) -> Self {
        Self { dropout_rng: Some(Box::new(rng)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained after [`Graph::backward`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let needs_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    fn trailing_check(&self, x: Var, b: Var, op: &'static str) -> Result<usize> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(TensorError::shape(op, format!("{bs:?} is not a suffix of {xs:?}")));
        }
        Ok(bs.iter().product())
    }

    /// `x + b` where `b` matches the trailing dimensions of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let inner = self.trailing_check(x, b, "add_trailing")?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            chunk.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
        }
        self.push(out, Op::AddTrailing(x, b), &[x, b], "add_trailing")
    }

    /// `x * g` where `g` matches the trailing dimensions of `x`.
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        let inner = self.trailing_check(x, g, "mul_trailing")?;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            chunk.iter_mut().zip(gv).for_each(|(o, &gg)| *o *= gg);
        }
        self.push(out, Op::MulTrailing(x, g), &[x, g], "mul_trailing")
    }

    /// `[B, D] -> [B, reps, D]` by repetition.
    pub fn broadcast_mid(&mut self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("broadcast_mid", format!("expected [B, D], got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * reps * d);
        for i in 0..b {
            for _ in 0..reps {
                out.extend_from_slice(&xv[i * d..(i + 1) * d]);
            }
        }
        let t = Tensor::new(&[b, reps, d], out)?;
        self.push(t, Op::BroadcastMid(x, reps), &[x], "broadcast_mid")
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::shape("mul_scalar", format!("scalar has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::MulScalar(x, s), &[x, s], "mul_scalar")
    }

    /// Matrix product of 2-d operands or batched product of 3-d operands.
    ///
    /// `ta`/`tb` transpose the last two axes of the respective operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::shape("matmul", format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"));
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(err());
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(err());
            }
            sa[0]
        } else {
            1
        };
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0f32; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    /// Stride-1 "same" convolution of channels-last `x: [B, H, W, Cin]` with
    /// `w: [kh, kw, Cin, Cout]`; kernel extents must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(TensorError::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            pad,
        };
        let cout = ws[3];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0f32; geom.rows() * cout];
        kernels::gemm(geom.rows(), geom.cols(), cout, &cols, false, self.value(w).data(), false, 0.0, &mut out);
        let t = Tensor::new(&[xs[0], xs[1], xs[2], cout], out)?;
        self.push(t, Op::Conv2d { x, w, geom, cols }, &[x, w], "conv2d")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * kernels::sigmoid(a));
        self.push(v, Op::Silu(x), &[x], "silu")
    }

    /// `z / sqrt(1 + z^2 / bound^2)`, an odd monotone map onto `(-bound, bound)`.
    pub fn saturate(&mut self, x: Var, bound: f32) -> Result<Var> {
        if !(bound > 0.0) {
            return Err(TensorError::shape("saturate", format!("bound must be positive, got {bound}")));
        }
        let inv_b2 = 1.0 / (bound as f64 * bound as f64);
        let v = self.value(x).map(|z| {
            let z = z as f64;
            (z / (1.0 + z * z * inv_b2).sqrt()) as f32
        });
        self.push(v, Op::Saturate(x, bound), &[x], "saturate")
    }

    /// Normalization over the last axis (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| TensorError::shape("layer_norm", "scalar input".into()))?;
        let xv = self.value(x).data();
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
        }
        let t = Tensor::new(&xs, xhat.clone())?;
        self.push(t, Op::LayerNorm { x, xhat, rstd }, &[x], "layer_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| TensorError::shape("softmax", "scalar input".into()))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v as f64;
            }
            let inv = (1.0 / total) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = permute(self.value(x), axes)?;
        self.push(v, Op::Permute(x, axes.to_vec()), &[x], "permute")
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(TensorError::shape("slice", format!("{start}+{len} on axis {axis} of {xs:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Slice { x, axis, start }, &[x], "slice")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts, "concat")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum() as f32);
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean() as f32);
        self.push(v, Op::Mean(x), &[x], "mean")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av.iter().zip(bv).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        let v = Tensor::scalar((s / av.len().max(1) as f64) as f32);
        self.push(v, Op::Mse(a, b), &[a, b], "mse")
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av.iter().zip(bv).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
        let v = Tensor::scalar((s / av.len().max(1) as f64) as f32);
        self.push(v, Op::L1(a, b), &[a, b], "l1")
    }

    /// Rotates channel pairs `(2j, 2j+1)`, `j < pairs`, of `x: [N, T, D]` by
    /// per-position angles given as `cos`/`sin` tables of shape `[T, pairs]`.
    pub fn rope(&mut self, x: Var, cos: Rc<Vec<f32>>, sin: Rc<Vec<f32>>, pairs: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || 2 * pairs > xs[2] || cos.len() != xs[1] * pairs || sin.len() != cos.len() {
            return Err(TensorError::shape("rope", format!("{xs:?} with {pairs} pairs")));
        }
        let (t, d) = (xs[1], xs[2]);
        let mut out = self.value(x).clone();
        for (row_idx, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            let pos = row_idx % t;
            for j in 0..pairs {
                let (c, s) = (cos[pos * pairs + j], sin[pos * pairs + j]);
                let (x0, x1) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = x0 * c - x1 * s;
                row[2 * j + 1] = x0 * s + x1 * c;
            }
        }
        self.push(out, Op::Rope { x, cos, sin, pairs }, &[x], "rope")
    }

    /// Inverted dropout; identity unless the graph was built with [`Graph::training`].
    pub fn dropout(&mut self, x: Var, p: f32) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f32> =
            (0..n).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.constant(Tensor::new(self.shape(x), mask)?);
        self.mul(x, m)
    }

    /// Reverse sweep from a single-element `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            for (parent, contrib) in self.node_vjp(i, &gy)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
            // leaves keep their gradient for inspection
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound via [`Graph::param`]; zero if unused by the loss.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            let g = self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            out.insert(id, g);
        }
        out
    }

    fn node_vjp(&self, i: usize, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let shaped = |v: Var, data: Vec<f32>| Tensor::new(val(v).shape(), data);
        let gyd = gy.data();
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, gy.zip_map(val(*b), |g, y| g * y)?),
                (*b, gy.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Scale(a, c) => vec![(*a, gy.map(|g| g * c))],
            Op::AddTrailing(x, b) => {
                let inner = val(*b).numel();
                let mut gb = vec![0.0f32; inner];
                for chunk in gyd.chunks_exact(inner) {
                    gb.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                }
                vec![(*x, gy.clone()), (*b, shaped(*b, gb)?)]
            }
            Op::MulTrailing(x, g) => {
                let gv = val(*g).data();
                let inner = gv.len();
                let xv = val(*x).data();
                let mut gx = gy.clone();
                let mut gg = vec![0.0f32; inner];
                for (r, chunk) in gx.data_mut().chunks_exact_mut(inner).enumerate() {
                    for j in 0..inner {
                        gg[j] += chunk[j] * xv[r * inner + j];
                        chunk[j] *= gv[j];
                    }
                }
                vec![(*x, gx), (*g, shaped(*g, gg)?)]
            }
            Op::BroadcastMid(x, reps) => {
                let s = val(*x).shape();
                let (b, d) = (s[0], s[1]);
                let mut gx = vec![0.0f32; b * d];
                for bi in 0..b {
                    for r in 0..*reps {
                        let src = &gyd[(bi * reps + r) * d..(bi * reps + r + 1) * d];
                        gx[bi * d..(bi + 1) * d].iter_mut().zip(src).for_each(|(a, g)| *a += g);
                    }
                }
                vec![(*x, shaped(*x, gx)?)]
            }
            Op::MulScalar(x, s) => {
                let c = val(*s).item();
                let dot: f64 = gyd.iter().zip(val(*x).data()).map(|(&g, &v)| g as f64 * v as f64).sum();
                vec![(*x, gy.map(|g| g * c)), (*s, shaped(*s, vec![dot as f32])?)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let nd = av.ndim();
                let batch = if nd == 3 { av.shape()[0] } else { 1 };
                let (ra, ca) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = gy.shape()[nd - 1];
                let mut ga = vec![0.0f32; av.numel()];
                let mut gb = vec![0.0f32; bv.numel()];
                for bi in 0..batch {
                    let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let gsl = &gyd[bi * m * n..(bi + 1) * m * n];
                    let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if *ta {
                        kernels::gemm(k, n, m, bsl, *tb, gsl, true, 0.0, gas);
                    } else {
                        kernels::gemm(m, n, k, gsl, false, bsl, !*tb, 0.0, gas);
                    }
                    let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *tb {
                        kernels::gemm(n, m, k, gsl, true, asl, *ta, 0.0, gbs);
                    } else {
                        kernels::gemm(k, m, n, asl, !*ta, gsl, false, 0.0, gbs);
                    }
                }
                vec![(*a, shaped(*a, ga)?), (*b, shaped(*b, gb)?)]
            }
            Op::Conv2d { x, w, geom, cols } => {
                let cout = gy.shape()[3];
                let (rows, kc) = (geom.rows(), geom.cols());
                let mut gw = vec![0.0f32; kc * cout];
                kernels::gemm(kc, rows, cout, cols, true, gyd, false, 0.0, &mut gw);
                let mut dcols = vec![0.0f32; rows * kc];
                kernels::gemm(rows, cout, kc, gyd, false, val(*w).data(), true, 0.0, &mut dcols);
                let gx = kernels::col2im(&dcols, geom);
                vec![(*x, shaped(*x, gx)?), (*w, shaped(*w, gw)?)]
            }
            Op::Silu(x) => {
                let g = gy.zip_map(val(*x), |g, a| {
                    let s = kernels::sigmoid(a);
                    g * s * (1.0 + a * (1.0 - s))
                })?;
                vec![(*x, g)]
            }
            Op::Saturate(x, bound) => {
                let inv_b2 = 1.0 / (*bound as f64 * *bound as f64);
                let g = gy.zip_map(val(*x), |g, z| {
                    let q = 1.0 + (z as f64).powi(2) * inv_b2;
                    (g as f64 / (q * q.sqrt())) as f32
                })?;
                vec![(*x, g)]
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let d = *gy.shape().last().unwrap();
                let mut gx = vec![0.0f32; gyd.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let g = &gyd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mg = g.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let mgx = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = (*rs as f64 * (g[j] as f64 - mg - xh[j] as f64 * mgx)) as f32;
                    }
                }
                vec![(*x, shaped(*x, gx)?)]
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let d = *gy.shape().last().unwrap();
                let mut gx = vec![0.0f32; y.len()];
                for r in 0..y.len() / d {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &gyd[r * d..(r + 1) * d]);
                    let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..d {
                        gx[r * d + j] = ys[j] * (gs[j] - dot as f32);
                    }
                }
                vec![(*x, shaped(*x, gx)?)]
            }
            Op::Reshape(x) => vec![(*x, gy.clone().reshape(val(*x).shape())?)],
            Op::Permute(x, axes) => vec![(*x, permute(gy, &inverse_axes(axes))?)],
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = kernels::axis_split(xs, *axis);
                let len = gy.shape()[*axis];
                let mut gx = vec![0.0f32; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gyd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, shaped(*x, gx)?)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(gy.shape(), *axis);
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp.extend_from_slice(&gyd[src..src + n * inner]);
                    }
                    offset += n;
                    out.push((p, shaped(p, gp)?));
                }
                out
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gy.item()))],
            Op::Mean(x) => {
                let n = val(*x).numel().max(1) as f32;
                vec![(*x, Tensor::full(val(*x).shape(), gy.item() / n))]
            }
            Op::Mse(a, b) => {
                let n = val(*a).numel().max(1) as f64;
                let c = 2.0 * gy.item() as f64 / n;
                let ga = val(*a).zip_map(val(*b), |x, y| ((x as f64 - y as f64) * c) as f32)?;
                let gb = ga.map(|v| -v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::L1(a, b) => {
                let n = val(*a).numel().max(1) as f32;
                let c = gy.item() / n;
                let ga = val(*a).zip_map(val(*b), |x, y| {
                    if x > y {
                        c
                    } else if x < y {
                        -c
                    } else {
                        0.0
                    }
                })?;
                let gb = ga.map(|v| -v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Rope { x, cos, sin, pairs } => {
                let (t, d) = (gy.shape()[1], gy.shape()[2]);
                let mut gx = gy.clone();
                for (row_idx, row) in gx.data_mut().chunks_exact_mut(d).enumerate() {
                    let pos = row_idx % t;
                    for j in 0..*pairs {
                        let (c, s) = (cos[pos * pairs + j], sin[pos * pairs + j]);
                        let (g0, g1) = (row[2 * j], row[2 * j + 1]);
                        row[2 * j] = g0 * c + g1 * s;
                        row[2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
                vec![(*x, gx)]
            }
        })
    }
}
