//! Rectified-flow schedule, masking, the emulator transformer and its two
//! training objectives (denoising score matching and mean regression).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use latemu_tensor::nn::Linear;
use latemu_tensor::{adam_step, AdamConfig, AdamState, CosineSchedule, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::layers::{sinusoidal, Attention, RopeTables};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// schedule

pub fn alpha(t: f64) -> f64 {
    1.0 - t
}

pub fn sigma(t: f64) -> f64 {
    t
}

/// Drift `f_t = alpha'/alpha = -1/(1-t)`.
pub fn drift_f(t: f64) -> f64 {
    -1.0 / (1.0 - t)
}

/// Squared diffusion `g_t^2 = 2 sigma sigma' - 2 f sigma^2 = 2t/(1-t)`.
pub fn diffusion_g2(t: f64) -> f64 {
    2.0 * t / (1.0 - t)
}

pub fn snr(t: f64) -> f64 {
    alpha(t) / sigma(t)
}

/// `z_t = alpha_t z + sigma_t eps`.
pub fn noise_state(z: &[f32], t: f64, eps: &[f32]) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("noise level {t} outside [0, 1]")));
    }
    if z.len() != eps.len() {
        return Err(Error::Invalid(format!("noise_state lengths {} vs {}", z.len(), eps.len())));
    }
    let (a, s) = (alpha(t), sigma(t));
    Ok(z.iter().zip(eps).map(|(&z, &e)| (a * z as f64 + s * e as f64) as f32).collect())
}

/// Tweedie: `score = (alpha_t d - z_t) / sigma_t^2`, with `d` the posterior mean of the clean state.
pub fn denoiser_to_score(d: &[f32], z_t: &[f32], t: f64) -> Result<Vec<f32>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Invalid(format!("score undefined at t = {t}")));
    }
    let (a, s2) = (alpha(t), sigma(t) * sigma(t));
    Ok(d.iter().zip(z_t).map(|(&d, &z)| ((a * d as f64 - z as f64) / s2) as f32).collect())
}

/// Noise level drawn uniformly from `[t_min, 1]`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f64 {
    t_min + (1.0 - t_min) * rng.random::<f64>()
}

// ---------------------------------------------------------------------------
// masks

/// Known-frame indicator over a bundle of `n + 1` frames: a contiguous run of
/// ones anchored at either end, with at least one frame unknown.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        let ones = bits.iter().filter(|&&b| b).count();
        let n = bits.len().saturating_sub(1);
        let left = bits.iter().take_while(|&&b| b).count() == ones;
        let right = bits.iter().rev().take_while(|&&b| b).count() == ones;
        if bits.len() < 2 || ones == 0 || ones > n || !(left || right) {
            return Err(Error::Invalid(format!("invalid mask {bits:?}")));
        }
        Ok(Self { bits })
    }

    /// First `c` of `n + 1` frames known.
    pub fn context(n: usize, c: usize) -> Result<Self> {
        Self::new((0..=n).map(|i| i < c).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn frames(&self) -> usize {
        self.bits.len()
    }

    pub fn known(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn flipped(&self) -> Self {
        Self { bits: self.bits.iter().rev().copied().collect() }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Poisson(`lambda`) pmf restricted to `1..=n` and renormalized; index 0 is `c = 1`.
pub fn truncated_poisson_pmf(lambda: f64, n: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n);
    let mut term = (-lambda).exp();
    for k in 1..=n {
        term *= lambda / k as f64;
        w.push(term);
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Context length from truncated Poisson, left-anchored, flipped with probability `flip_prob`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, lambda: f64, flip_prob: f64, rng: &mut R) -> Result<Mask> {
    if n == 0 {
        return Err(Error::Invalid("mask needs n >= 1".into()));
    }
    let pmf = truncated_poisson_pmf(lambda, n);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut c = n;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            c = i + 1;
            break;
        }
    }
    let m = Mask::context(n, c)?;
    Ok(if rng.random::<f64>() < flip_prob { m.flipped() } else { m })
}

// ---------------------------------------------------------------------------
// network

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmulatorKind {
    Diffusion,
    Solver,
}

impl EmulatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmulatorKind::Diffusion => "diffusion",
            EmulatorKind::Solver => "solver",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spatial patch size; 1 for latent models.
    pub patch: usize,
    pub rope: bool,
    pub value_residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { embed_dim: 128, blocks: 6, heads: 4, mlp_ratio: 4, patch: 1, rope: true, value_residual: true }
    }
}

/// Shape of the bundles the network operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleShape {
    /// Frames per bundle, `n + 1`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Length of the conditioning vector (physical parameters plus boundary one-hot).
    pub cond_dim: usize,
}

const TIME_EMBED: usize = 32;

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    attn: Attention,
    fc1: Linear,
    fc2: Linear,
}

/// Transformer over the tokens of a bundle, modulated by `(theta, t)` through
/// zero-initialized adaptive layer norm.
#[derive(Clone, Debug)]
pub struct EmulatorNet {
    pub kind: EmulatorKind,
    pub config: NetConfig,
    pub shape: BundleShape,
    pub store: ParamStore,
    embed_in: Linear,
    pos: ParamId,
    cond1: Linear,
    cond2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
    rope: Option<RopeTables>,
}

impl EmulatorNet {
    pub fn new(kind: EmulatorKind, config: NetConfig, shape: BundleShape, seed: u64) -> Result<Self> {
        let p = config.patch.max(1);
        if shape.height % p != 0 || shape.width % p != 0 {
            return Err(Error::Config(format!("patch {p} does not tile {}x{}", shape.height, shape.width)));
        }
        let d = config.embed_dim;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {} heads", config.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let token_in = p * p * shape.channels + 1;
        let tokens = shape.frames * (shape.height / p) * (shape.width / p);
        let embed_in = Linear::new(s, "embed_in", token_in, d, true, r);
        let pos = s.add("pos_embed", Tensor::randn(&[tokens, d], 0.02, r));
        let cond_in = shape.cond_dim + if kind == EmulatorKind::Diffusion { TIME_EMBED } else { 0 };
        let cond1 = Linear::new(s, "cond1", cond_in.max(1), d, true, r);
        let cond2 = Linear::new(s, "cond2", d, d, true, r);
        let blocks = (0..config.blocks)
            .map(|b| Block {
                modulation: Linear::zeros(s, &format!("block{b}.mod"), d, 6 * d),
                attn: Attention::new(s, &format!("block{b}.attn"), d, config.heads, config.value_residual && b > 0, false, r),
                fc1: Linear::new(s, &format!("block{b}.fc1"), d, config.mlp_ratio * d, true, r),
                fc2: Linear::new(s, &format!("block{b}.fc2"), config.mlp_ratio * d, d, true, r),
            })
            .collect();
        let final_mod = Linear::zeros(s, "final.mod", d, 2 * d);
        let head = Linear::zeros(s, "head", d, p * p * shape.channels);
        let rope = config
            .rope
            .then(|| RopeTables::new(&[shape.frames, shape.height / p, shape.width / p], d / config.heads));
        Ok(Self { kind, config, shape, store, embed_in, pos, cond1, cond2, blocks, final_mod, head, rope })
    }

    pub fn load(kind: EmulatorKind, config: NetConfig, shape: BundleShape, path: &Path) -> Result<Self> {
        let mut net = Self::new(kind, config, shape, 0)?;
        let stored = ParamStore::load(path).map_err(|e| Error::format(path, e.to_string()))?;
        net.store.load_values_from(&stored).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.store.save(path).map_err(|e| Error::format(path, e.to_string()))
    }

    fn tokens(&self) -> usize {
        let p = self.config.patch.max(1);
        self.shape.frames * (self.shape.height / p) * (self.shape.width / p)
    }

    /// `[B, F, H, W, C] -> [B, T, p*p*C]`.
    fn tokenize(&self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let BundleShape { frames, height, width, channels, .. } = self.shape;
        let p = self.config.patch.max(1);
        if p == 1 {
            return Ok(g.reshape(x, &[b, self.tokens(), channels])?);
        }
        let y = g.reshape(x, &[b, frames, height / p, p, width / p, p, channels])?;
        let y = g.permute(y, &[0, 1, 2, 4, 3, 5, 6])?;
        Ok(g.reshape(y, &[b, self.tokens(), p * p * channels])?)
    }

    fn untokenize(&self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let BundleShape { frames, height, width, channels, .. } = self.shape;
        let p = self.config.patch.max(1);
        if p == 1 {
            return Ok(g.reshape(x, &[b, frames, height, width, channels])?);
        }
        let y = g.reshape(x, &[b, frames, height / p, width / p, p, p, channels])?;
        let y = g.permute(y, &[0, 1, 2, 4, 3, 5, 6])?;
        Ok(g.reshape(y, &[b, frames, height, width, channels])?)
    }

    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var, tokens: usize) -> Result<Var> {
        let h = g.layer_norm(x, 1e-6)?;
        let sc = g.broadcast_mid(scale, tokens)?;
        let sh = g.broadcast_mid(shift, tokens)?;
        let hs = g.mul(h, sc)?;
        let h = g.add(h, hs)?;
        Ok(g.add(h, sh)?)
    }

    /// Raw network output for inputs `x: [B, F, H, W, C]`, per-row masks,
    /// conditioning rows `theta: [B, cond_dim]` and noise levels (diffusion only).
    pub fn forward(&self, g: &mut Graph, x: Var, masks: &[Mask], theta: &Tensor, t: Option<&[f64]>) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let BundleShape { frames, height, width, channels, cond_dim } = self.shape;
        let b = xs[0];
        if xs != [b, frames, height, width, channels] {
            return Err(Error::Invalid(format!(
                "emulator expects [B, {frames}, {height}, {width}, {channels}], got {xs:?}"
            )));
        }
        if masks.len() != b || masks.iter().any(|m| m.frames() != frames) {
            return Err(Error::Invalid(format!("{} masks for batch {b} of {frames} frames", masks.len())));
        }
        if theta.shape() != [b, cond_dim] {
            return Err(Error::Invalid(format!("theta shape {:?}, expected [{b}, {cond_dim}]", theta.shape())));
        }
        let d = self.config.embed_dim;
        let st = &self.store;
        let tokens = self.tokens();
        let per_frame = tokens / frames;

        let tok = self.tokenize(g, x, b)?;
        let mut bits = Vec::with_capacity(b * tokens);
        for m in masks {
            for f in m.as_f32() {
                bits.extend(std::iter::repeat_n(f, per_frame));
            }
        }
        let bits = g.constant(Tensor::new(&[b, tokens, 1], bits)?);
        let tok = g.concat(&[tok, bits], 2)?;
        let h = self.embed_in.forward(g, st, tok)?;
        let pos = g.param(st, self.pos);
        let mut h = g.add_trailing(h, pos)?;

        let mut cond = Vec::new();
        for i in 0..b {
            cond.extend_from_slice(&theta.data()[i * cond_dim..(i + 1) * cond_dim]);
            if self.kind == EmulatorKind::Diffusion {
                let ti = t.ok_or_else(|| Error::Invalid("diffusion emulator needs noise levels".into()))?;
                cond.extend(sinusoidal(ti[i], TIME_EMBED));
            }
            if cond_dim == 0 && self.kind == EmulatorKind::Solver {
                cond.push(0.0);
            }
        }
        let width_in = cond.len() / b;
        let c = g.constant(Tensor::new(&[b, width_in], cond)?);
        let c = self.cond1.forward(g, st, c)?;
        let c = g.silu(c)?;
        let c = self.cond2.forward(g, st, c)?;
        let c = g.silu(c)?;

        let mut first_values = None;
        for block in &self.blocks {
            let m = block.modulation.forward(g, st, c)?;
            let part = |g: &mut Graph, k: usize| g.slice(m, 1, k * d, d);
            let (sh1, sc1, g1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let (sh2, sc2, g2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);
            let a_in = Self::modulate(g, h, sh1, sc1, tokens)?;
            let (a, v) = block.attn.forward(g, st, a_in, self.rope.as_ref(), first_values)?;
            first_values.get_or_insert(v);
            let g1 = g.broadcast_mid(g1, tokens)?;
            let a = g.mul(a, g1)?;
            h = g.add(h, a)?;
            let m_in = Self::modulate(g, h, sh2, sc2, tokens)?;
            let y = block.fc1.forward(g, st, m_in)?;
            let y = g.silu(y)?;
            let y = block.fc2.forward(g, st, y)?;
            let g2 = g.broadcast_mid(g2, tokens)?;
            let y = g.mul(y, g2)?;
            h = g.add(h, y)?;
        }
        let fm = self.final_mod.forward(g, st, c)?;
        let sh = g.slice(fm, 1, 0, d)?;
        let sc = g.slice(fm, 1, d, d)?;
        let h = Self::modulate(g, h, sh, sc, tokens)?;
        let out = self.head.forward(g, st, h)?;
        self.untokenize(g, out, b)
    }
}

/// Per-channel affine standardization of latents before emulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScaler {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentScaler {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Fits over channels-last data with `channels` trailing entries per site.
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a [f32]>, channels: usize) -> Result<Self> {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut n = 0usize;
        for chunk in data {
            for site in chunk.chunks_exact(channels) {
                for (c, &v) in site.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Invalid("no latents to fit a scaler on".into()));
        }
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            mean.push(m as f32);
            std.push(var.sqrt().max(1e-6) as f32);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &mut [f32]) {
        let c = self.mean.len();
        for site in x.chunks_exact_mut(c) {
            for (j, v) in site.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn invert(&self, x: &mut [f32]) {
        let c = self.mean.len();
        for site in x.chunks_exact_mut(c) {
            for (j, v) in site.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }
}

/// Preconditioning for unit-variance data: `c_skip = alpha/(alpha^2+sigma^2)`,
/// `c_out = sigma/sqrt(alpha^2+sigma^2)`, `c_in = 1/sqrt(alpha^2+sigma^2)`.
pub fn preconditioning(t: f64) -> (f64, f64, f64) {
    let (a, s) = (alpha(t), sigma(t));
    let v = a * a + s * s;
    (a / v, s / v.sqrt(), 1.0 / v.sqrt())
}

fn per_row_constant(g: &mut Graph, shape: &[usize], rows: &[f64]) -> Result<Var> {
    let per = shape[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend(std::iter::repeat_n(r as f32, per));
    }
    Ok(g.constant(Tensor::new(shape, data)?))
}

/// Per-element weights: 1 on unknown frames, 0 on known frames.
fn unknown_weights(shape: &[usize], masks: &[Mask]) -> Result<Tensor> {
    let per_frame = shape[2..].iter().product::<usize>();
    let mut w = Vec::with_capacity(shape.iter().product());
    for m in masks {
        for &k in m.bits() {
            w.extend(std::iter::repeat_n(if k { 0.0 } else { 1.0 }, per_frame));
        }
    }
    Ok(Tensor::new(shape, w)?)
}

/// Known frames taken from `z`, unknown ones from `other`.
pub fn assemble_input(z: &Tensor, other: &Tensor, masks: &[Mask]) -> Result<Tensor> {
    let shape = z.shape();
    let per_frame = shape[2..].iter().product::<usize>();
    let mut out = other.clone();
    for (i, m) in masks.iter().enumerate() {
        for (f, &k) in m.bits().iter().enumerate() {
            if k {
                let off = (i * shape[1] + f) * per_frame;
                out.data_mut()[off..off + per_frame].copy_from_slice(&z.data()[off..off + per_frame]);
            }
        }
    }
    Ok(out)
}

impl EmulatorNet {
    /// Preconditioned denoiser `d = c_skip z_in + c_out F(c_in z_in)` inside a graph.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        z_in: &Tensor,
        masks: &[Mask],
        theta: &Tensor,
        t: &[f64],
    ) -> Result<Var> {
        let shape = z_in.shape().to_vec();
        let pre: Vec<(f64, f64, f64)> = t.iter().map(|&ti| preconditioning(ti)).collect();
        let zin = g.constant(z_in.clone());
        let c_in = per_row_constant(g, &shape, &pre.iter().map(|p| p.2).collect::<Vec<_>>())?;
        let x = g.mul(zin, c_in)?;
        let f = self.forward(g, x, masks, theta, Some(t))?;
        let c_out = per_row_constant(g, &shape, &pre.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let c_skip = per_row_constant(g, &shape, &pre.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let f = g.mul(f, c_out)?;
        let skip = g.mul(zin, c_skip)?;
        Ok(g.add(skip, f)?)
    }

    /// Solver prediction from the clean known frames (unknown frames zeroed).
    pub fn solver_graph(&self, g: &mut Graph, z: &Tensor, masks: &[Mask], theta: &Tensor) -> Result<Var> {
        let zin = assemble_input(z, &Tensor::zeros(z.shape()), masks)?;
        let x = g.constant(zin);
        self.forward(g, x, masks, theta, None)
    }
}

/// Mean squared error over the unknown frames only.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, masks: &[Mask]) -> Result<Var> {
    let shape = target.shape().to_vec();
    let w = unknown_weights(&shape, masks)?;
    let count = w.sum();
    if count == 0.0 {
        return Err(Error::Invalid("every frame is known; nothing to score".into()));
    }
    let w = g.constant(w);
    let tv = g.constant(target.clone());
    let diff = g.sub(pred, tv)?;
    let diff = g.mul(diff, w)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, (1.0 / count) as f32)?)
}

/// Denoising score matching with uniform weighting:
/// `|| d(z b + z_t (1 - b), b, theta, t) - z ||^2` over unknown frames.
pub fn dsm_loss(
    net: &EmulatorNet,
    g: &mut Graph,
    z: &Tensor,
    theta: &Tensor,
    masks: &[Mask],
    t: &[f64],
    eps: &Tensor,
) -> Result<Var> {
    let b = z.shape()[0];
    if t.len() != b || eps.shape() != z.shape() {
        return Err(Error::Invalid("dsm_loss: t / eps do not match the batch".into()));
    }
    let per = z.numel() / b.max(1);
    let mut zt = Vec::with_capacity(z.numel());
    for i in 0..b {
        let rows = i * per..(i + 1) * per;
        zt.extend(noise_state(&z.data()[rows.clone()], t[i], &eps.data()[rows])?);
    }
    let zt = Tensor::new(z.shape(), zt)?;
    let z_in = assemble_input(z, &zt, masks)?;
    let d = net.denoise_graph(g, &z_in, masks, theta, t)?;
    masked_mse(g, d, z, masks)
}

/// Mean regression of the unknown frames given the known ones.
pub fn solver_loss(net: &EmulatorNet, g: &mut Graph, z: &Tensor, theta: &Tensor, masks: &[Mask]) -> Result<Var> {
    let pred = net.solver_graph(g, z, masks, theta)?;
    masked_mse(g, pred, z, masks)
}

// ---------------------------------------------------------------------------
// training

/// Standardized latent trajectory: frames `[L+1, h, w, C]` plus conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeries {
    pub frames: Tensor,
    pub theta: Vec<f32>,
}

impl LatentSeries {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub t_min: f64,
    pub mask_lambda: f64,
    pub flip_prob: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for EmulatorTrainOptions {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            lr: 3e-4,
            warmup: 100,
            grad_clip: 1.0,
            t_min: 1e-3,
            mask_lambda: 2.0,
            flip_prob: 0.33,
            log_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn sample_batch<R: Rng + ?Sized>(
    series: &[LatentSeries],
    frames: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let s0 = series[0].frames.shape().to_vec();
    let per_frame: usize = s0[1..].iter().product();
    let cond = series[0].theta.len();
    let mut data = Vec::with_capacity(batch * frames * per_frame);
    let mut theta = Vec::with_capacity(batch * cond);
    for _ in 0..batch {
        let s = &series[rng.random_range(0..series.len())];
        let start = rng.random_range(0..=s.len() - frames);
        data.extend_from_slice(&s.frames.data()[start * per_frame..(start + frames) * per_frame]);
        theta.extend_from_slice(&s.theta);
    }
    let mut shape = vec![batch, frames];
    shape.extend_from_slice(&s0[1..]);
    Ok((Tensor::new(&shape, data)?, Tensor::new(&[batch, cond], theta)?))
}

/// Trains either objective on windows of `n + 1` consecutive latent frames.
/// The CSV log has columns `step,loss,lr`.
pub fn train_emulator(
    net: &mut EmulatorNet,
    series: &[LatentSeries],
    opts: &EmulatorTrainOptions,
    log_path: Option<&PathBuf>,
) -> Result<Vec<StepLog>> {
    let frames = net.shape.frames;
    let usable: Vec<LatentSeries> = series.iter().filter(|s| s.len() >= frames).cloned().collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!("no training series with at least {frames} frames")));
    }
    let n = frames - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let schedule = CosineSchedule { base: opts.lr, total: opts.steps, warmup: opts.warmup, final_fraction: 0.05 };
    let mut adam = AdamState::new(&net.store);
    let mut log_file = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "step,loss,lr").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let stage = format!("train-emulator ({})", net.kind.as_str());
    let mut logs = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 0..opts.steps {
        let (z, theta) = sample_batch(&usable, frames, opts.batch_size, &mut rng)?;
        let masks = (0..opts.batch_size)
            .map(|_| sample_mask(n, opts.mask_lambda, opts.flip_prob, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let loss = match net.kind {
            EmulatorKind::Diffusion => {
                let t: Vec<f64> = (0..opts.batch_size).map(|_| sample_t(&mut rng, opts.t_min)).collect();
                let eps: Vec<f32> = (0..z.numel()).map(|_| rng.sample(StandardNormal)).collect();
                let eps = Tensor::new(z.shape(), eps)?;
                dsm_loss(net, &mut g, &z, &theta, &masks, &t, &eps)
            }
            EmulatorKind::Solver => solver_loss(net, &mut g, &z, &theta, &masks),
        }
        .map_err(|e| Error::numerical(&stage, format!("step {step}: {e}")))?;
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let lr = schedule.lr(step);
        let cfg = AdamConfig { lr, grad_clip: Some(opts.grad_clip), ..AdamConfig::default() };
        adam_step(&mut net.store, &g.param_grads(), &mut adam, &cfg)
            .map_err(|e| Error::numerical(&stage, format!("step {step}: {e}")))?;
        running += value;
        running_n += 1;
        if (step + 1) % opts.log_every.max(1) == 0 || step + 1 == opts.steps {
            let entry = StepLog { step: step + 1, loss: running / running_n as f64, lr };
            log::info!("{stage} step {}: loss {:.5}", entry.step, entry.loss);
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{},{:.6},{:.3e}", entry.step, entry.loss, entry.lr).map_err(|e| Error::io(&*p, e))?;
            }
            logs.push(entry);
            running = 0.0;
            running_n = 0;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(kind: EmulatorKind, rope: bool) -> EmulatorNet {
        let cfg = NetConfig { embed_dim: 12, blocks: 2, heads: 2, mlp_ratio: 2, patch: 1, rope, value_residual: true };
        let shape = BundleShape { frames: 3, height: 2, width: 2, channels: 2, cond_dim: 3 };
        EmulatorNet::new(kind, cfg, shape, 1).unwrap()
    }

    fn randomize(net: &mut EmulatorNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in net.store.ids().collect::<Vec<_>>() {
            let shape = net.store.get(id).shape().to_vec();
            let fan = *shape.first().unwrap_or(&1) as f32;
            *net.store.get_mut(id) = Tensor::randn(&shape, 0.5 / fan.sqrt(), &mut rng);
        }
    }

    #[test]
    fn schedule_identities() {
        for i in 1..100 {
            let t = i as f64 / 100.0;
            assert!((alpha(t) + sigma(t) - 1.0).abs() < 1e-15);
            assert!(snr(t) < snr(t - 0.01));
            let f = drift_f(t);
            let g2 = diffusion_g2(t);
            // g^2 = d(sigma^2)/dt - 2 f sigma^2
            assert!((g2 - (2.0 * t - 2.0 * f * t * t)).abs() < 1e-9);
        }
        assert_eq!(snr(1.0), 0.0);
    }

    #[test]
    fn noise_state_examples() {
        let z = [2.0f32, -1.0];
        let e = [0.5f32, 0.25];
        assert_eq!(noise_state(&z, 0.0, &e).unwrap(), z.to_vec());
        assert_eq!(noise_state(&z, 1.0, &e).unwrap(), e.to_vec());
        assert_eq!(noise_state(&[2.0], 0.5, &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn score_examples() {
        // d = z / alpha -> alpha d - z = 0
        let s = denoiser_to_score(&[2.0], &[1.0], 0.5).unwrap();
        assert!(s[0].abs() < 1e-7);
        // Gaussian prior: d = alpha z / (alpha^2 + sigma^2) = 1 at t = 0.5, z = 1
        let d = 0.5 * 1.0 / (0.25 + 0.25);
        let s = denoiser_to_score(&[d as f32], &[1.0], 0.5).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-6, "{}", s[0]);
        assert_eq!(denoiser_to_score(&[0.0], &[0.0], 0.5).unwrap(), vec![0.0]);
        assert!(denoiser_to_score(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn masks() {
        assert!(Mask::new(vec![true, false, true]).is_err());
        assert!(Mask::new(vec![true, true]).is_err());
        assert!(Mask::new(vec![false, false]).is_err());
        let m = Mask::new(vec![true, true, false, false, false]).unwrap();
        assert_eq!(m.flipped().bits(), &[false, false, false, true, true]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_mask(1, 2.0, 0.33, &mut rng).unwrap().known(), 1);
        }
    }

    #[test]
    fn truncated_pmf_values() {
        let p = truncated_poisson_pmf(2.0, 4);
        let z = 2.0 + 2.0 + 4.0 / 3.0 + 2.0 / 3.0;
        assert!((p[0] - 2.0 / z).abs() < 1e-12 && (p[1] - 2.0 / z).abs() < 1e-12);
        assert!((p[0] - 0.3333).abs() < 1e-3 && (p[2] - 0.2222).abs() < 1e-3 && (p[3] - 0.1111).abs() < 1e-3);
    }

    #[test]
    fn sample_t_range_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_t(&mut rng, 1e-3)).collect();
        assert!(draws.iter().all(|&t| (1e-3..=1.0).contains(&t)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_t(&mut a, 1e-3), sample_t(&mut b, 1e-3));
    }

    #[test]
    fn zero_output_network_is_gaussian_optimal() {
        let (cs, co, _) = preconditioning(0.5);
        assert!((cs - 1.0).abs() < 1e-12);
        assert!((co - 0.5 / 0.5f64.sqrt()).abs() < 1e-12);
    }

    fn batch(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng))
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let net = tiny_net(EmulatorKind::Solver, true);
        let (z, _) = batch(0);
        let masks = vec![Mask::context(2, 1).unwrap(); 2];
        let mut g = Graph::new();
        let p = g.constant(z.clone());
        let l = masked_mse(&mut g, p, &z, &masks).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        drop(net);
    }

    #[test]
    fn zero_net_at_t_one_scores_data_second_moment() {
        // F = 0 at init; at t = 1, c_skip = 0, so d = 0 and the loss is E z^2 over unknown frames
        let net = tiny_net(EmulatorKind::Diffusion, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[64, 3, 2, 2, 2], 1.0, &mut rng);
        let theta = Tensor::zeros(&[64, 3]);
        let eps = Tensor::randn(z.shape(), 1.0, &mut rng);
        let masks = vec![Mask::context(2, 1).unwrap(); 64];
        let mut g = Graph::new();
        let l = dsm_loss(&net, &mut g, &z, &theta, &masks, &[1.0; 64], &eps).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 0.1, "{}", g.value(l).item());
    }

    #[test]
    fn loss_ignores_known_frame_noise_and_targets() {
        let mut net = tiny_net(EmulatorKind::Diffusion, true);
        randomize(&mut net, 9);
        let (z, theta) = batch(1);
        let masks = vec![Mask::context(2, 1).unwrap(), Mask::context(2, 2).unwrap().flipped()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = Tensor::randn(z.shape(), 1.0, &mut rng);
        let mut eps2 = eps.clone();
        let per_frame = 8;
        // perturb noise only where frames are known
        for (i, m) in masks.iter().enumerate() {
            for (f, &k) in m.bits().iter().enumerate() {
                if k {
                    let off = (i * 3 + f) * per_frame;
                    eps2.data_mut()[off..off + per_frame].iter_mut().for_each(|v| *v += 3.0);
                }
            }
        }
        let t = [0.4, 0.8];
        let run = |eps: &Tensor| {
            let mut g = Graph::new();
            let l = dsm_loss(&net, &mut g, &z, &theta, &masks, &t, eps).unwrap();
            g.value(l).item()
        };
        assert_eq!(run(&eps).to_bits(), run(&eps2).to_bits());
    }

    #[test]
    fn batch_order_is_respected() {
        let mut net = tiny_net(EmulatorKind::Solver, true);
        randomize(&mut net, 3);
        let (z, theta) = batch(2);
        let masks = vec![Mask::context(2, 1).unwrap(), Mask::context(2, 2).unwrap()];
        let mut g = Graph::inference();
        let y = net.solver_graph(&mut g, &z, &masks, &theta).unwrap();
        let y = g.value(y).clone();
        let zs = Tensor::stack(&[z.index_axis0(1), z.index_axis0(0)]).unwrap();
        let ts = Tensor::stack(&[theta.index_axis0(1), theta.index_axis0(0)]).unwrap();
        let ms = vec![masks[1].clone(), masks[0].clone()];
        let mut g = Graph::inference();
        let ys = net.solver_graph(&mut g, &zs, &ms, &ts).unwrap();
        assert_eq!(g.value(ys).index_axis0(0), y.index_axis0(1));
        assert_eq!(g.value(ys).index_axis0(1), y.index_axis0(0));
    }

    #[test]
    fn rope_changes_response_to_shifted_tokens() {
        let outputs = |rope: bool| {
            let mut net = tiny_net(EmulatorKind::Solver, rope);
            randomize(&mut net, 4);
            // remove the absolute embedding so only rotary encodes position
            let pos = net.store.id("pos_embed").unwrap();
            *net.store.get_mut(pos) = Tensor::zeros(net.store.get(pos).shape());
            let (z, theta) = batch(3);
            let theta = Tensor::new(&[1, 3], theta.data()[..3].to_vec()).unwrap();
            let z = z.index_axis0(0).reshape(&[1, 3, 2, 2, 2]).unwrap();
            // shift the grid by one column
            let mut shifted = z.clone();
            for f in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        for c in 0..2 {
                            let src = ((f * 2 + y) * 2 + (x + 1) % 2) * 2 + c;
                            shifted.data_mut()[((f * 2 + y) * 2 + x) * 2 + c] = z.data()[src];
                        }
                    }
                }
            }
            let masks = vec![Mask::context(2, 1).unwrap()];
            let mut g = Graph::inference();
            let a = net.solver_graph(&mut g, &z, &masks, &theta).unwrap();
            let b = net.solver_graph(&mut g, &shifted, &masks, &theta).unwrap();
            // un-shift b and compare
            let (av, bv) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
            let mut diff = 0.0f32;
            for f in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        for c in 0..2 {
                            let i = ((f * 2 + y) * 2 + (x + 1) % 2) * 2 + c;
                            let j = ((f * 2 + y) * 2 + x) * 2 + c;
                            diff = diff.max((av[i] - bv[j]).abs());
                        }
                    }
                }
            }
            diff
        };
        // without any positional signal the network is shift-equivariant
        assert!(outputs(false) < 1e-5);
        assert!(outputs(true) > 1e-4);
    }

    #[test]
    fn patched_network_round_trips_shape() {
        let cfg = NetConfig { embed_dim: 8, blocks: 1, heads: 2, mlp_ratio: 2, patch: 2, rope: true, value_residual: true };
        let shape = BundleShape { frames: 2, height: 4, width: 4, channels: 2, cond_dim: 1 };
        let mut net = EmulatorNet::new(EmulatorKind::Solver, cfg, shape, 0).unwrap();
        randomize(&mut net, 1);
        let z = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::inference();
        let y = net.solver_graph(&mut g, &z, &[Mask::context(1, 1).unwrap()], &Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(g.shape(y), z.shape());
    }

    #[test]
    fn short_training_reduces_loss() {
        let cfg = NetConfig { embed_dim: 32, blocks: 2, heads: 2, mlp_ratio: 2, patch: 1, rope: true, value_residual: true };
        let shape = BundleShape { frames: 3, height: 2, width: 2, channels: 2, cond_dim: 3 };
        let mut net = EmulatorNet::new(EmulatorKind::Solver, cfg, shape, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let series: Vec<LatentSeries> = (0..4)
            .map(|_| {
                let base = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
                let frames: Vec<Tensor> = (0..6).map(|_| base.index_axis0(0)).collect();
                LatentSeries { frames: Tensor::stack(&frames).unwrap(), theta: vec![0.1, 0.2, 0.3] }
            })
            .collect();
        let opts = EmulatorTrainOptions { steps: 300, batch_size: 8, lr: 3e-3, warmup: 10, log_every: 50, ..Default::default() };
        let logs = train_emulator(&mut net, &series, &opts, None).unwrap();
        assert!(logs.last().unwrap().loss < 0.2 * logs[0].loss, "{logs:?}");
    }
}
