//! Convolutional autoencoder with a saturating latent bound.
//!
//! Encoder: stem conv, then per level residual blocks (attention where flagged)
//! followed by a space-to-depth downsampler; a projection to `C_latent` and
//! `saturate` close it. The decoder mirrors it with depth-to-space upsamplers.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latemu_tensor::nn::{Conv2d, LayerNorm};
use latemu_tensor::{adam_step, AdamConfig, AdamState, CosineSchedule, Graph, Padding, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Field;
use crate::layers::{depth_to_space, space_to_depth, SpatialAttention};
use crate::{Error, Result};

pub const LATENT_BOUND: f32 = 5.0;

/// `z / sqrt(1 + z^2 / B^2)`.
pub fn saturate(z: f64, bound: f64) -> f64 {
    z / (1.0 + z * z / (bound * bound)).sqrt()
}

/// Mean absolute error over all elements.
pub fn ae_loss(x: &Field, xhat: &Field) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::Invalid(format!("ae_loss shapes {:?} vs {:?}", x.shape(), xhat.shape())));
    }
    let n = x.values().len() as f64;
    Ok(x.values().iter().zip(xhat.values()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingKind {
    Periodic,
    Zero,
}

impl From<PaddingKind> for Padding {
    fn from(p: PaddingKind) -> Self {
        match p {
            PaddingKind::Periodic => Padding::Periodic,
            PaddingKind::Zero => Padding::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub pixel_channels: usize,
    pub latent_channels: usize,
    /// Channel width per level; the spatial reduction is `2^(levels - 1)`.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub attention: Vec<bool>,
    pub heads: usize,
    pub dropout: f32,
    pub padding: PaddingKind,
    /// Initialize resamplers near identity instead of randomly.
    pub identity_init: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            pixel_channels: 2,
            latent_channels: 16,
            channels: vec![32, 64, 128, 128],
            blocks_per_level: 1,
            attention: vec![false, false, false, true],
            heads: 4,
            dropout: 0.05,
            padding: PaddingKind::Periodic,
            identity_init: true,
        }
    }
}

impl AutoencoderConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn reduction(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    /// Pixel elements per latent element.
    pub fn compression_rate(&self) -> f64 {
        let r = self.reduction() as f64;
        r * r * self.pixel_channels as f64 / self.latent_channels as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("autoencoder needs at least one level with non-zero width".into()));
        }
        if self.attention.len() != self.levels() {
            return Err(Error::Config(format!(
                "{} attention flags for {} levels",
                self.attention.len(),
                self.levels()
            )));
        }
        if self.pixel_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (l, (&c, &a)) in self.channels.iter().zip(&self.attention).enumerate() {
            if a && (self.heads == 0 || c % self.heads != 0) {
                return Err(Error::Config(format!("level {l} width {c} not divisible by {} heads", self.heads)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Latent grid stored channels-last `[h, w, C]`; every value lies in `(-B, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl LatentState {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "latent {height}x{width}x{channels} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Kernel `[3, 3, cin, cout]` whose centre tap maps channels by group averaging
/// (`cin > cout`) or replication (`cin < cout`), plus small Gaussian noise.
fn near_identity_kernel<R: Rng + ?Sized>(cin: usize, cout: usize, noise: f32, rng: &mut R) -> Result<Tensor> {
    let mut k = Tensor::randn(&[3, 3, cin, cout], noise, rng);
    let centre = 4 * cin * cout;
    let d = k.data_mut();
    if cin >= cout {
        if cin % cout != 0 {
            return Err(Error::Config(format!("resampler cannot group {cin} channels into {cout}")));
        }
        let g = cin / cout;
        for i in 0..cin {
            d[centre + i * cout + i / g] += 1.0 / g as f32;
        }
    } else {
        if cout % cin != 0 {
            return Err(Error::Config(format!("resampler cannot replicate {cin} channels into {cout}")));
        }
        let g = cout / cin;
        for j in 0..cout {
            d[centre + (j / g) * cout + j] += 1.0;
        }
    }
    Ok(k)
}

/// Factor-2 space-to-depth resampler with a 3x3 mixing convolution.
#[derive(Clone, Debug)]
pub struct Resampler {
    conv: Conv2d,
    down: bool,
}

impl Resampler {
    /// Downsampler maps `cin` channels at `H x W` to `cout` at `H/2 x W/2`; the
    /// upsampler is the mirror image.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        down: bool,
        identity: bool,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let (kin, kout) = if down { (4 * cin, cout) } else { (cin, 4 * cout) };
        let conv = if identity {
            let noise = 1e-2 / ((9 * kin) as f32).sqrt();
            Conv2d::from_kernel(store, name, near_identity_kernel(kin, kout, noise, rng)?, padding)
        } else {
            Conv2d::new(store, name, kin, kout, 3, padding, 1.0, rng)
        };
        Ok(Self { conv, down })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if self.down {
            let y = space_to_depth(g, x, 2)?;
            Ok(self.conv.forward(g, store, y)?)
        } else {
            let y = self.conv.forward(g, store, x)?;
            Ok(depth_to_space(g, y, 2)?)
        }
    }
}

/// `x + conv(silu(ln(dropout(conv(silu(ln(x)))))))` with the second conv zero-initialized.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    norm2: LayerNorm,
    conv2: Conv2d,
    dropout: f32,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, dropout: f32, pad: Padding, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, true),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, pad, 1.0, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, true),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, pad, 0.0, rng),
            dropout,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attention: Option<SpatialAttention>,
}

impl Level {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AutoencoderConfig,
        level: usize,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels[level];
        let pad = cfg.padding.into();
        let blocks = (0..cfg.blocks_per_level)
            .map(|b| ResBlock::new(store, &format!("{name}.block{b}"), c, cfg.dropout, pad, rng))
            .collect();
        let attention = cfg.attention[level].then(|| SpatialAttention::new(store, &format!("{name}.attn"), c, cfg.heads, rng));
        Self { blocks, attention }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        if let Some(a) = &self.attention {
            x = a.forward(g, store, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub store: ParamStore,
    enc_stem: Conv2d,
    enc_levels: Vec<Level>,
    enc_down: Vec<Resampler>,
    enc_norm: LayerNorm,
    enc_out: Conv2d,
    dec_stem: Conv2d,
    dec_levels: Vec<Level>,
    dec_up: Vec<Resampler>,
    dec_norm: LayerNorm,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pad: Padding = config.padding.into();
        let ch = &config.channels;
        let levels = config.levels();
        let s = &mut store;
        let r = &mut rng;

        let enc_stem = Conv2d::new(s, "enc.stem", config.pixel_channels, ch[0], 3, pad, 1.0, r);
        let mut enc_levels = Vec::new();
        let mut enc_down = Vec::new();
        for l in 0..levels {
            enc_levels.push(Level::new(s, &format!("enc.level{l}"), &config, l, r));
            if l + 1 < levels {
                enc_down.push(Resampler::new(s, &format!("enc.down{l}"), ch[l], ch[l + 1], true, config.identity_init, pad, r)?);
            }
        }
        let last = ch[levels - 1];
        let enc_norm = LayerNorm::new(s, "enc.norm", last, true);
        let enc_out = Conv2d::new(s, "enc.out", last, config.latent_channels, 3, pad, 1.0, r);

        let dec_stem = Conv2d::new(s, "dec.stem", config.latent_channels, last, 3, pad, 1.0, r);
        let mut dec_levels = Vec::new();
        let mut dec_up = Vec::new();
        for l in (0..levels).rev() {
            dec_levels.push(Level::new(s, &format!("dec.level{l}"), &config, l, r));
            if l > 0 {
                dec_up.push(Resampler::new(s, &format!("dec.up{l}"), ch[l], ch[l - 1], false, config.identity_init, pad, r)?);
            }
        }
        let dec_norm = LayerNorm::new(s, "dec.norm", ch[0], true);
        let dec_out = Conv2d::new(s, "dec.out", ch[0], config.pixel_channels, 3, pad, 1.0, r);

        Ok(Self {
            config,
            store,
            enc_stem,
            enc_levels,
            enc_down,
            enc_norm,
            enc_out,
            dec_stem,
            dec_levels,
            dec_up,
            dec_norm,
            dec_out,
        })
    }

    /// Rebuilds the architecture for `config` and loads weights from a checkpoint.
    pub fn load(config: AutoencoderConfig, path: &Path) -> Result<Self> {
        let mut ae = Self::new(config, 0)?;
        let stored = ParamStore::load(path).map_err(|e| Error::format(path, e.to_string()))?;
        ae.store.load_values_from(&stored).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.store.save(path).map_err(|e| Error::format(path, e.to_string()))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.reduction();
        if shape.len() != 4 || shape[3] != self.config.pixel_channels || shape[1] % r != 0 || shape[2] % r != 0 {
            return Err(Error::Invalid(format!(
                "autoencoder expects [B, H, W, {}] with H, W divisible by {r}, got {shape:?}",
                self.config.pixel_channels
            )));
        }
        Ok(())
    }

    /// `x: [B, H, W, C_pixel] -> [B, H/r, W/r, C_latent]`, saturated.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let st = &self.store;
        let mut h = self.enc_stem.forward(g, st, x)?;
        for (l, level) in self.enc_levels.iter().enumerate() {
            h = level.forward(g, st, h)?;
            if let Some(down) = self.enc_down.get(l) {
                h = down.forward(g, st, h)?;
            }
        }
        let h = self.enc_norm.forward(g, st, h)?;
        let h = g.silu(h)?;
        let z = self.enc_out.forward(g, st, h)?;
        Ok(g.saturate(z, LATENT_BOUND)?)
    }

    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 4 || s[3] != self.config.latent_channels {
            return Err(Error::Invalid(format!(
                "decoder expects [B, h, w, {}], got {s:?}",
                self.config.latent_channels
            )));
        }
        let st = &self.store;
        let mut h = self.dec_stem.forward(g, st, z)?;
        for (l, level) in self.dec_levels.iter().enumerate() {
            h = level.forward(g, st, h)?;
            if let Some(up) = self.dec_up.get(l) {
                h = up.forward(g, st, h)?;
            }
        }
        let h = self.dec_norm.forward(g, st, h)?;
        let h = g.silu(h)?;
        Ok(self.dec_out.forward(g, st, h)?)
    }

    /// Inference-mode encoding of a `[B, H, W, C_pixel]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn encode_field(&self, x: &Field) -> Result<LatentState> {
        let t = Tensor::new(&[1, x.height(), x.width(), x.channels()], x.to_hwc())?;
        let z = self.encode(&t)?;
        let s = z.shape().to_vec();
        LatentState::new(s[1], s[2], s[3], z.into_data())
    }

    pub fn decode_latent(&self, z: &LatentState) -> Result<Field> {
        let t = Tensor::new(&[1, z.height, z.width, z.channels], z.values.clone())?;
        let x = self.decode(&t)?;
        let s = x.shape().to_vec();
        Field::from_hwc(s[3], s[1], s[2], x.data())
    }

    /// Encodes many fields in batches of `batch`.
    pub fn encode_fields(&self, fields: &[Field], batch: usize) -> Result<Vec<LatentState>> {
        let mut out = Vec::with_capacity(fields.len());
        for chunk in fields.chunks(batch.max(1)) {
            let t = stack_fields(chunk)?;
            let z = self.encode(&t)?;
            let s = z.shape().to_vec();
            let per = s[1] * s[2] * s[3];
            for v in z.data().chunks_exact(per) {
                out.push(LatentState::new(s[1], s[2], s[3], v.to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn decode_latents(&self, latents: &[LatentState], batch: usize) -> Result<Vec<Field>> {
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(batch.max(1)) {
            let [h, w, c] = chunk[0].shape();
            let mut data = Vec::with_capacity(chunk.len() * h * w * c);
            for z in chunk {
                data.extend_from_slice(&z.values);
            }
            let x = self.decode(&Tensor::new(&[chunk.len(), h, w, c], data)?)?;
            let s = x.shape().to_vec();
            let per = s[1] * s[2] * s[3];
            for v in x.data().chunks_exact(per) {
                out.push(Field::from_hwc(s[3], s[1], s[2], v)?);
            }
        }
        Ok(out)
    }
}

/// Channels-last batch `[B, H, W, C]` from fields of equal shape.
pub fn stack_fields(fields: &[Field]) -> Result<Tensor> {
    let first = fields.first().ok_or_else(|| Error::Invalid("empty field batch".into()))?;
    let [c, h, w] = first.shape();
    let mut data = Vec::with_capacity(fields.len() * c * h * w);
    for f in fields {
        if f.shape() != first.shape() {
            return Err(Error::Invalid("field batch with mixed shapes".into()));
        }
        data.extend(f.to_hwc());
    }
    Ok(Tensor::new(&[fields.len(), h, w, c], data)?)
}

/// Spatial symmetry applied to one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub transpose: bool,
    pub flip_y: bool,
    pub flip_x: bool,
    pub roll_y: usize,
    pub roll_x: usize,
}

impl Augment {
    /// Random axis permutation (square grids only), flips, and rolls when `periodic`.
    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, periodic: bool, rng: &mut R) -> Self {
        Self {
            transpose: h == w && rng.random::<bool>(),
            flip_y: rng.random(),
            flip_x: rng.random(),
            roll_y: if periodic { rng.random_range(0..h) } else { 0 },
            roll_x: if periodic { rng.random_range(0..w) } else { 0 },
        }
    }

    /// Applies to a channels-last `[H, W, C]` sample.
    pub fn apply(&self, x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        for y in 0..h {
            for xx in 0..w {
                let (mut a, mut b) = if self.transpose { (xx, y) } else { (y, xx) };
                if self.flip_y {
                    a = h - 1 - a;
                }
                if self.flip_x {
                    b = w - 1 - b;
                }
                a = (a + h - self.roll_y % h) % h;
                b = (b + w - self.roll_x % w) % w;
                let src = (a * w + b) * c;
                let dst = (y * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainOptions {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub augment: bool,
    /// Upper bound on validation frames scored per epoch.
    pub val_frames: usize,
    pub seed: u64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 50,
            batch_size: 16,
            lr: 1e-3,
            warmup: 50,
            grad_clip: 1.0,
            augment: true,
            val_frames: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Where per-epoch artifacts go; both optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Mean absolute reconstruction error in inference mode.
pub fn eval_mae(ae: &Autoencoder, frames: &[Field], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in frames.chunks(batch.max(1)) {
        let x = stack_fields(chunk)?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let z = ae.encode_graph(&mut g, xv)?;
        let y = ae.decode_graph(&mut g, z)?;
        let loss = g.l1(y, xv)?;
        total += g.value(loss).item() as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains on normalized frames. The log CSV has columns `epoch,train_mae,val_mae,seconds`.
///
/// Aborts when validation MAE exceeds ten times its pre-training value or a
/// gradient turns non-finite.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    train: &[Field],
    val: &[Field],
    opts: &AeTrainOptions,
    periodic: bool,
    outputs: &TrainOutputs,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("autoencoder training needs non-empty train and val sets".into()));
    }
    let [c, h, w] = train[0].shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let val_set: Vec<Field> = {
        let mut idx: Vec<usize> = (0..val.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a1));
        idx.truncate(opts.val_frames.max(1));
        idx.sort_unstable();
        idx.into_iter().map(|i| val[i].clone()).collect()
    };
    let eval_batch = opts.batch_size.max(16);
    let init_val = eval_mae(ae, &val_set, eval_batch)?;
    let schedule = CosineSchedule {
        base: opts.lr,
        total: opts.epochs * opts.steps_per_epoch,
        warmup: opts.warmup,
        final_fraction: 0.05,
    };
    let mut adam = AdamState::new(&ae.store);
    let hwc: Vec<Vec<f32>> = train.iter().map(|f| f.to_hwc()).collect();
    let mut log_file = match &outputs.log {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "epoch,train_mae,val_mae,seconds").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let start = Instant::now();
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let mut train_sum = 0.0;
        for _ in 0..opts.steps_per_epoch {
            let mut batch = Vec::with_capacity(opts.batch_size * h * w * c);
            for _ in 0..opts.batch_size {
                let sample = &hwc[rng.random_range(0..hwc.len())];
                if opts.augment {
                    batch.extend(Augment::sample(h, w, periodic, &mut rng).apply(sample, h, w, c));
                } else {
                    batch.extend_from_slice(sample);
                }
            }
            let x = Tensor::new(&[opts.batch_size, h, w, c], batch)?;
            let mut g = Graph::training(ChaCha8Rng::seed_from_u64(rng.random()));
            let xv = g.input(x, false);
            let forward = (|| -> Result<Var> {
                let z = ae.encode_graph(&mut g, xv)?;
                let y = ae.decode_graph(&mut g, z)?;
                Ok(g.l1(y, xv)?)
            })()
            .map_err(|e| Error::numerical("train-ae", format!("epoch {epoch} step {step}: {e}")))?;
            train_sum += g.value(forward).item() as f64;
            g.backward(forward)?;
            let cfg = AdamConfig { lr: schedule.lr(step), grad_clip: Some(opts.grad_clip), ..AdamConfig::default() };
            adam_step(&mut ae.store, &g.param_grads(), &mut adam, &cfg)
                .map_err(|e| Error::numerical("train-ae", format!("epoch {epoch} step {step}: {e}")))?;
            step += 1;
        }
        let val_mae = eval_mae(ae, &val_set, eval_batch)?;
        if !val_mae.is_finite() || val_mae > 10.0 * init_val {
            return Err(Error::numerical(
                "train-ae",
                format!("diverged at epoch {epoch}: val MAE {val_mae:.4e} vs initial {init_val:.4e}"),
            ));
        }
        let entry = EpochLog {
            epoch,
            train_mae: train_sum / opts.steps_per_epoch.max(1) as f64,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("train-ae epoch {epoch}: train {:.4} val {:.4}", entry.train_mae, entry.val_mae);
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{},{:.6},{:.6},{:.2}", entry.epoch, entry.train_mae, entry.val_mae, entry.seconds)
                .map_err(|e| Error::io(&*p, e))?;
        }
        if let Some(p) = &outputs.checkpoint {
            ae.save(p)?;
        }
        logs.push(entry);
    }
    Ok(logs)
}
