//! Building blocks shared by the autoencoder and the emulator transformer.

use std::rc::Rc;

use latemu_tensor::nn::{LayerNorm, Linear};
use latemu_tensor::{Graph, ParamId, ParamStore, Result as TResult, Tensor, TensorError, Var};
use rand::Rng;

/// `[B, H, W, C] -> [B, H/f, W/f, f*f*C]`; output channel `(dy * f + dx) * C + c`.
pub fn space_to_depth(g: &mut Graph, x: Var, f: usize) -> TResult<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % f != 0 || w % f != 0 {
        return Err(TensorError::shape("space_to_depth", format!("{h}x{w} not divisible by {f}")));
    }
    let y = g.reshape(x, &[b, h / f, f, w / f, f, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(y, &[b, h / f, w / f, f * f * c])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(g: &mut Graph, x: Var, f: usize) -> TResult<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w, cc) = (s[0], s[1], s[2], s[3]);
    if cc % (f * f) != 0 {
        return Err(TensorError::shape("depth_to_space", format!("{cc} channels not divisible by {}", f * f)));
    }
    let c = cc / (f * f);
    let y = g.reshape(x, &[b, h, w, f, f, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(y, &[b, h * f, w * f, c])
}

/// Sinusoidal embedding of a scalar, `dim` even.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (1000.0f64).powf(-(j as f64) / half.max(1) as f64);
        out.push((value * 1000.0 * freq).sin() as f32);
    }
    for j in 0..half {
        let freq = (1000.0f64).powf(-(j as f64) / half.max(1) as f64);
        out.push((value * 1000.0 * freq).cos() as f32);
    }
    out
}

/// Rotary tables for tokens laid out on a `dims[0] x dims[1] x ...` grid.
///
/// Each axis gets `pairs_per_axis` rotated channel pairs; remaining pairs are left untouched.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Rc<Vec<f32>>,
    pub sin: Rc<Vec<f32>>,
    pub pairs: usize,
}

impl RopeTables {
    pub fn new(dims: &[usize], head_dim: usize) -> Self {
        let pairs_per_axis = head_dim / 2 / dims.len().max(1);
        let pairs = pairs_per_axis * dims.len();
        let tokens: usize = dims.iter().product();
        let mut cos = Vec::with_capacity(tokens * pairs);
        let mut sin = Vec::with_capacity(tokens * pairs);
        for t in 0..tokens {
            let mut rem = t;
            let mut pos = vec![0usize; dims.len()];
            for (a, &d) in dims.iter().enumerate().rev() {
                pos[a] = rem % d;
                rem /= d;
            }
            for &p in &pos {
                for j in 0..pairs_per_axis {
                    let freq = (100.0f64).powf(-(j as f64) / pairs_per_axis as f64);
                    let angle = p as f64 * freq;
                    cos.push(angle.cos() as f32);
                    sin.push(angle.sin() as f32);
                }
            }
        }
        Self { cos: Rc::new(cos), sin: Rc::new(sin), pairs }
    }
}

/// Multi-head self-attention with query/key normalization, optional rotary
/// embedding and optional value-residual mixing with the first block's values.
#[derive(Clone, Debug)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
    /// Mixing weight `lambda` in `v1 + lambda (v - v1)`.
    value_mix: Option<ParamId>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        value_residual: bool,
        zero_out: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng);
        let out = if zero_out {
            Linear::zeros(store, &format!("{name}.out"), dim, dim)
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)
        };
        let value_mix = value_residual.then(|| store.add(format!("{name}.value_mix"), Tensor::scalar(0.5)));
        Self { qkv, out, heads, dim, value_mix }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x: [B, T, D]`. Returns the projected output and this block's (mixed)
    /// values in `[B * heads, T, head_dim]` layout for later blocks.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        rope: Option<&RopeTables>,
        first_values: Option<Var>,
    ) -> TResult<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.head_dim());
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = g.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * b * h, t, dh])?;
        let q = g.slice(qkv, 0, 0, b * h)?;
        let k = g.slice(qkv, 0, b * h, b * h)?;
        let mut v = g.slice(qkv, 0, 2 * b * h, b * h)?;
        let mut q = g.layer_norm(q, 1e-6)?;
        let mut k = g.layer_norm(k, 1e-6)?;
        if let Some(r) = rope {
            if r.pairs > 0 {
                q = g.rope(q, r.cos.clone(), r.sin.clone(), r.pairs)?;
                k = g.rope(k, r.cos.clone(), r.sin.clone(), r.pairs)?;
            }
        }
        if let (Some(v1), Some(mix)) = (first_values, self.value_mix) {
            let lam = g.param(store, mix);
            let delta = g.sub(v, v1)?;
            let delta = g.mul_scalar(delta, lam)?;
            v = g.add(v1, delta)?;
        }
        let logits = g.matmul(q, k, false, true)?;
        let logits = g.scale(logits, 1.0 / (dh as f32).sqrt())?;
        let attn = g.softmax(logits)?;
        let y = g.matmul(attn, v, false, false)?;
        let y = g.reshape(y, &[b, h, t, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, t, d])?;
        let y = self.out.forward(g, store, y)?;
        Ok((y, v))
    }
}

/// Pre-norm residual attention over the spatial positions of a `[B, H, W, C]` map.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, true),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, false, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let s = g.shape(x).to_vec();
        let h = self.norm.forward(g, store, x)?;
        let h = g.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
        let (y, _) = self.attn.forward(g, store, h, None, None)?;
        let y = g.reshape(y, &s)?;
        g.add(x, y)
    }
}
