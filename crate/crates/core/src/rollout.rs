//! Autoregressive latent emulation with temporal bundling, the on-disk latent
//! cache and decoding back to pixel space.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use latemu_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{Autoencoder, LatentState};
use crate::data::{load_trajectory, save_trajectory, splitmix64, Boundary, Field, FileMeta, Normalizer, Trajectory};
use crate::diffusion::{EmulatorKind, EmulatorNet, LatentScaler, Mask};
use crate::sampler::{initial_state, pf_ode_rhs, OdeSolver};
use crate::{Error, Result};

/// Latent magnitude (in standardized units) beyond which a member counts as blown up.
pub const BLOWUP_THRESHOLD: f32 = 1e4;

/// Short content hash of a file, used to key cached latents to a checkpoint.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Encoded frames of one trajectory plus what the emulator is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub frames: Vec<LatentState>,
    pub theta: Vec<f32>,
    pub stride: u32,
    pub boundary: Boundary,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn conditioning(&self) -> Vec<f32> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.boundary.one_hot());
        v
    }

    /// Frames `[start, start + count)` as a `[count, h, w, C]` tensor.
    pub fn window(&self, start: usize, count: usize) -> Result<Tensor> {
        let [h, w, c] = self.frames[0].shape();
        let mut data = Vec::with_capacity(count * h * w * c);
        for f in &self.frames[start..start + count] {
            data.extend_from_slice(&f.values);
        }
        Ok(Tensor::new(&[count, h, w, c], data)?)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        self.window(0, self.len())
    }

    fn to_trajectory(&self) -> Result<Trajectory> {
        let [h, w, c] = self.frames[0].shape();
        let fields = self.frames.iter().map(|z| Field::from_hwc(c, h, w, &z.values)).collect::<Result<Vec<_>>>()?;
        let names = (0..c).map(|i| format!("z{i}")).collect();
        Trajectory::new(fields, self.theta.clone(), self.stride, self.boundary, names)
    }

    fn from_trajectory(t: Trajectory) -> Result<Self> {
        let frames = t
            .frames
            .iter()
            .map(|f| LatentState::new(f.height(), f.width(), f.channels(), f.to_hwc()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, theta: t.theta, stride: t.stride, boundary: t.boundary })
    }
}

/// On-disk latents at `<root>/<dataset>/<ae-hash>/<traj-id>.lat`. A marker file
/// `<root>/<dataset>/<ae-name>.hash` remembers which checkpoint the latents of a
/// given autoencoder slot came from, so a retrained checkpoint invalidates them.
#[derive(Clone, Debug)]
pub struct LatentCache {
    root: PathBuf,
    dataset: String,
    ae_hash: String,
}

impl LatentCache {
    pub fn open(root: &Path, dataset: &str, ae_name: &str, ae_hash: &str) -> Result<Self> {
        let base = root.join(dataset);
        std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
        let marker = base.join(format!("{ae_name}.hash"));
        if let Ok(previous) = std::fs::read_to_string(&marker) {
            let previous = previous.trim();
            if previous != ae_hash {
                log::warn!("autoencoder `{ae_name}` changed ({previous} -> {ae_hash}); cached latents will be re-encoded");
                let stale = base.join(previous);
                if stale.is_dir() {
                    std::fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
                }
            }
        }
        std::fs::write(&marker, ae_hash).map_err(|e| Error::io(&marker, e))?;
        let cache = Self { root: root.to_path_buf(), dataset: dataset.to_string(), ae_hash: ae_hash.to_string() };
        std::fs::create_dir_all(cache.dir()).map_err(|e| Error::io(cache.dir(), e))?;
        Ok(cache)
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.dataset).join(&self.ae_hash)
    }

    pub fn ae_hash(&self) -> &str {
        &self.ae_hash
    }

    pub fn path(&self, traj_id: &str) -> PathBuf {
        self.dir().join(format!("{traj_id}.lat"))
    }

    pub fn contains(&self, traj_id: &str) -> bool {
        self.path(traj_id).exists()
    }

    pub fn store(&self, traj_id: &str, latents: &LatentTrajectory) -> Result<()> {
        let t = latents.to_trajectory()?;
        let meta = FileMeta { system: Some(format!("latents:{}", self.ae_hash)), ..FileMeta::describe(&t) };
        save_trajectory(&self.path(traj_id), &t, &meta)
    }

    pub fn load(&self, traj_id: &str) -> Result<LatentTrajectory> {
        LatentTrajectory::from_trajectory(load_trajectory(&self.path(traj_id))?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeReport {
    pub encoded: usize,
    pub skipped: usize,
}

/// Encodes every frame of every (normalized) trajectory not already cached.
pub fn encode_dataset(
    ae: &Autoencoder,
    trajectories: &[(String, Trajectory)],
    cache: &LatentCache,
    batch: usize,
) -> Result<EncodeReport> {
    let mut report = EncodeReport::default();
    for (id, traj) in trajectories {
        if cache.contains(id) {
            report.skipped += 1;
            continue;
        }
        let frames = ae.encode_fields(&traj.frames, batch)?;
        let lat = LatentTrajectory { frames, theta: traj.theta.clone(), stride: traj.stride, boundary: traj.boundary };
        cache.store(id, &lat)?;
        report.encoded += 1;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutKind {
    Diffusion,
    Solver,
    Persistence,
}

impl RolloutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RolloutKind::Diffusion => "diffusion",
            RolloutKind::Solver => "solver",
            RolloutKind::Persistence => "persistence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    /// Bundle size `n`: the emulator sees `n + 1` frames.
    pub bundle: usize,
    /// Context frames `c` carried into each step.
    pub context: usize,
    /// Ensemble size `K`.
    pub members: usize,
    /// Total trajectory length `L`, context included.
    pub frames: usize,
    pub kind: RolloutKind,
    pub sampler_steps: usize,
    pub solver: OdeSolver,
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<()> {
        if self.bundle == 0 || self.context == 0 || self.context > self.bundle {
            return Err(Error::Config(format!("need 1 <= c <= n, got c = {}, n = {}", self.context, self.bundle)));
        }
        if self.members == 0 || self.frames <= self.context {
            return Err(Error::Config(format!("need K >= 1 and L > c, got K = {}, L = {}", self.members, self.frames)));
        }
        if self.kind == RolloutKind::Diffusion && self.sampler_steps == 0 {
            return Err(Error::Config("diffusion rollout needs at least one sampler step".into()));
        }
        Ok(())
    }

    /// New frames per autoregressive step.
    pub fn stride(&self) -> usize {
        self.bundle + 1 - self.context
    }

    /// `ceil((L - c) / (n + 1 - c))`.
    pub fn steps(&self) -> usize {
        (self.frames - self.context).div_ceil(self.stride())
    }
}

pub enum Emulator<'a> {
    Network { net: &'a EmulatorNet, scaler: &'a LatentScaler },
    Persistence,
}

/// Initial condition of one trajectory: the first `c` latent frames `[c, h, w, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutInput {
    pub context: Tensor,
    pub theta: Vec<f32>,
}

/// `K` latent trajectories `[L, h, w, C]`; blown-up members hold NaN from the failing step on.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleRollout {
    pub members: Vec<Tensor>,
    pub blown: Vec<bool>,
}

impl EnsembleRollout {
    pub fn healthy(&self) -> impl Iterator<Item = &Tensor> {
        self.members.iter().zip(&self.blown).filter(|(_, &b)| !b).map(|(m, _)| m)
    }
}

fn member_rng(seed: u64, traj: usize, member: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(((traj as u64) << 20) | member as u64)))
}

/// Runs the plan for every input; diffusion members draw independent noise,
/// solver members are identical copies, persistence repeats the last context frame.
pub fn rollout(emulator: &Emulator, inputs: &[RolloutInput], plan: &RolloutPlan, seed: u64) -> Result<Vec<EnsembleRollout>> {
    plan.validate()?;
    let first = inputs.first().ok_or_else(|| Error::Invalid("rollout without inputs".into()))?;
    let fshape = first.context.shape()[1..].to_vec();
    let per_frame: usize = fshape.iter().product();
    for inp in inputs {
        if inp.context.shape()[0] != plan.context || inp.context.shape()[1..] != fshape[..] {
            return Err(Error::Invalid(format!(
                "rollout context shape {:?}, expected [{}, {:?}]",
                inp.context.shape(),
                plan.context,
                fshape
            )));
        }
    }
    let (net, scaler) = match (emulator, plan.kind) {
        (Emulator::Persistence, RolloutKind::Persistence) => (None, None),
        (Emulator::Network { net, scaler }, RolloutKind::Diffusion) if net.kind == EmulatorKind::Diffusion => {
            (Some(*net), Some(*scaler))
        }
        (Emulator::Network { net, scaler }, RolloutKind::Solver) if net.kind == EmulatorKind::Solver => {
            (Some(*net), Some(*scaler))
        }
        _ => return Err(Error::Invalid(format!("emulator does not match rollout kind {}", plan.kind.as_str()))),
    };
    if let Some(net) = net {
        let s = net.shape;
        if s.frames != plan.bundle + 1 || [s.height, s.width, s.channels] != fshape[..] {
            return Err(Error::Invalid(format!(
                "emulator bundle {}x{}x{}x{} does not fit plan n = {} on latents {:?}",
                s.frames, s.height, s.width, s.channels, plan.bundle, fshape
            )));
        }
    }
    // distinct rows that are actually integrated
    let rows_per_traj = if plan.kind == RolloutKind::Diffusion { plan.members } else { 1 };
    let rows = inputs.len() * rows_per_traj;
    let mut series: Vec<Vec<f32>> = Vec::with_capacity(rows);
    let mut theta_rows = Vec::new();
    let mut rngs = Vec::with_capacity(rows);
    for (ti, inp) in inputs.iter().enumerate() {
        for m in 0..rows_per_traj {
            let mut ctx = inp.context.data().to_vec();
            if let Some(sc) = scaler {
                sc.apply(&mut ctx);
            }
            series.push(ctx);
            theta_rows.extend_from_slice(&inp.theta);
            rngs.push(member_rng(seed, ti, m));
        }
    }
    let mut blown_at: Vec<Option<usize>> = vec![None; rows];
    let (n, c) = (plan.bundle, plan.context);
    let frames = n + 1;
    let mask = Mask::context(n, c)?;
    let masks = vec![mask; rows];
    let cond_dim = theta_rows.len() / rows;
    let theta = Tensor::new(&[rows, cond_dim], theta_rows)?;
    let mut bshape = vec![rows, frames];
    bshape.extend_from_slice(&fshape);
    for _ in 0..plan.steps() {
        let have = series[0].len() / per_frame;
        let new = plan.stride().min(plan.frames - have);
        let generated: Tensor = match net {
            None => {
                let mut data = Vec::with_capacity(rows * frames * per_frame);
                for s in &series {
                    let last = &s[(have - 1) * per_frame..have * per_frame];
                    for _ in 0..frames {
                        data.extend_from_slice(last);
                    }
                }
                Tensor::new(&bshape, data)?
            }
            Some(net) => {
                let mut known = Vec::with_capacity(rows * frames * per_frame);
                for (r, s) in series.iter().enumerate() {
                    if blown_at[r].is_some() {
                        known.extend(std::iter::repeat_n(0.0f32, c * per_frame));
                    } else {
                        known.extend_from_slice(&s[(have - c) * per_frame..have * per_frame]);
                    }
                    known.extend(std::iter::repeat_n(0.0f32, (frames - c) * per_frame));
                }
                let known = Tensor::new(&bshape, known)?;
                if plan.kind == RolloutKind::Solver {
                    net.predict(&known, &masks, &theta)?
                } else {
                    let mut noise = Vec::with_capacity(known.numel());
                    for rng in rngs.iter_mut() {
                        noise.extend((0..frames * per_frame).map(|_| Distribution::<f32>::sample(&StandardNormal, rng)));
                    }
                    let z1 = initial_state(&known, &Tensor::new(&bshape, noise)?, &masks)?;
                    let failed = RefCell::new(vec![false; rows]);
                    let row_len = frames * per_frame;
                    let rhs = |z: &Tensor, t: f64| {
                        let mut f = pf_ode_rhs(net, z, &masks, &theta, t)?;
                        let mut failed = failed.borrow_mut();
                        for (r, chunk) in f.data_mut().chunks_exact_mut(row_len).enumerate() {
                            if chunk.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD) {
                                failed[r] = true;
                                chunk.iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                        Ok(f)
                    };
                    let out = match plan.solver {
                        OdeSolver::Ab3 => crate::sampler::ab3_integrate(rhs, z1, 1.0, 0.0, plan.sampler_steps)?,
                        OdeSolver::Euler => crate::sampler::euler_integrate(rhs, z1, 1.0, 0.0, plan.sampler_steps)?,
                    };
                    let mut z = out.z;
                    for (r, bad) in failed.into_inner().into_iter().enumerate() {
                        if bad {
                            z.data_mut()[r * row_len..(r + 1) * row_len].iter_mut().for_each(|v| *v = f32::NAN);
                        }
                    }
                    z
                }
            }
        };
        for (r, s) in series.iter_mut().enumerate() {
            let row = &generated.data()[r * frames * per_frame..(r + 1) * frames * per_frame];
            let fresh = &row[c * per_frame..(c + new) * per_frame];
            if blown_at[r].is_none() && fresh.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD) {
                blown_at[r] = Some(have);
                log::warn!("rollout member {r} blew up at frame {have}");
            }
            if blown_at[r].is_some() {
                s.extend(std::iter::repeat_n(f32::NAN, new * per_frame));
            } else {
                s.extend_from_slice(fresh);
            }
        }
    }
    let mut lshape = vec![plan.frames];
    lshape.extend_from_slice(&fshape);
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut members = Vec::with_capacity(plan.members);
        let mut blown = Vec::with_capacity(plan.members);
        for m in 0..plan.members {
            let r = ti * rows_per_traj + m.min(rows_per_traj - 1);
            let mut data = series[r].clone();
            if let Some(sc) = scaler {
                sc.invert(&mut data);
            }
            // context frames are copied back verbatim so scaling round-off cannot touch them
            let ctx = inputs[ti].context.data();
            data[..ctx.len()].copy_from_slice(ctx);
            members.push(Tensor::new(&lshape, data)?);
            blown.push(blown_at[r].is_some());
        }
        out.push(EnsembleRollout { members, blown });
    }
    Ok(out)
}

/// Decodes `[L, h, w, C]` latents to pixel fields; the normalizer is inverted last.
pub fn decode_rollout(ae: &Autoencoder, normalizer: Option<&Normalizer>, latents: &Tensor, batch: usize) -> Result<Vec<Field>> {
    let s = latents.shape();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("decode_rollout expects [L, h, w, C], got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let states = latents
        .data()
        .chunks_exact(per)
        .map(|v| LatentState::new(s[1], s[2], s[3], v.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let fields = ae.decode_latents(&states, batch)?;
    match normalizer {
        Some(nz) => fields.iter().map(|f| nz.invert(f)).collect(),
        None => Ok(fields),
    }
}
