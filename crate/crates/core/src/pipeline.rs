//! The experiment stages: generate, train-ae, encode, train-emulator, rollout,
//! evaluate, and the sweep that runs them all.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{train,val,test}/NNNN.traj   ground truth (physical units) + sidecars
//! data/normalizer.json, data/manifest.json
//! ae/<name>/{model.ltck,log.csv,meta.json}
//! latents/<name>.json               pointer into the latent cache + scaler
//! emulator/<name>/<kind>/{model.ltck,log.csv,meta.json}
//! rollout/<name>/<kind>/{summary.json,test-NNNN/mK.traj}
//! report/{metrics.csv,*.svg}
//! ```
//!
//! Every stage writes its metadata last, so a present metadata file carrying the
//! current configuration hash marks the stage complete.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{train_autoencoder, AutoencoderConfig, Autoencoder, TrainOutputs};
use crate::config::{AeSpec, ExperimentConfig, SystemKind};
use crate::data::{
    gen_advection, gen_grayscott, load_meta, load_trajectory, save_trajectory, trajectory_seed, AdvectionParams,
    ChannelTransform, Field, FileMeta, GrayScottParams, Normalizer, Split, Trajectory,
};
use crate::diffusion::{train_emulator, BundleShape, EmulatorKind, EmulatorNet, LatentScaler, LatentSeries, NetConfig};
use crate::metrics::{aggregate, evaluate_frame, svg_plot, write_csv, FrameMetrics, MetricRow};
use crate::rollout::{
    decode_rollout, encode_dataset, file_hash, rollout, Emulator, LatentCache, LatentTrajectory, RolloutInput,
    RolloutKind, RolloutPlan,
};
use crate::{Error, Result};

/// Environment variable overriding the latent cache root.
pub const CACHE_ENV: &str = "LATEMU_CACHE";

/// Trajectories rolled out together in one batched call.
const ROLLOUT_CHUNK: usize = 4;
const CODEC_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub stage: String,
    pub skipped: bool,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataManifest {
    config: String,
    system: SystemKind,
    train: usize,
    val: usize,
    test: usize,
    channel_names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NormalizerFile {
    config: String,
    normalizer: Normalizer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AeMeta {
    config: String,
    name: String,
    model: AutoencoderConfig,
    compression: f64,
    checkpoint_hash: String,
    val_mae: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LatentMeta {
    config: String,
    ae: String,
    ae_hash: String,
    dataset_key: String,
    shape: [usize; 3],
    scaler: LatentScaler,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmulatorMeta {
    config: String,
    ae: String,
    ae_hash: String,
    kind: EmulatorKind,
    net: NetConfig,
    shape: BundleShape,
    final_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RolloutEntry {
    id: String,
    blown: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RolloutSummary {
    config: String,
    ae: String,
    kind: RolloutKind,
    seed: u64,
    plan: RolloutPlan,
    trajectories: Vec<RolloutEntry>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Prepends a `# config <hash>` line to a CSV log written by a training loop.
fn stamp_csv(path: &Path, hash: &str) -> Result<()> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, format!("# config {hash}\n{body}")).map_err(|e| Error::io(path, e))
}

fn config_of(path: &Path) -> Option<String> {
    let v: serde_json::Value = read_json(path).ok()?;
    v.get("config")?.as_str().map(str::to_string)
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Deterministic seed for a named sub-task.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn traj_id(split: Split, index: usize) -> String {
    format!("{}-{index:04}", split.as_str())
}

fn compression_label(rate: f64) -> String {
    if rate.fract() == 0.0 {
        format!("{rate:.0}")
    } else {
        format!("{rate:.3}")
    }
}

/// Index of `count` evenly spaced frames out of `len`.
fn spaced(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    if count == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..count).map(|j| j * (len - 1) / (count - 1)).collect();
    idx.dedup();
    idx
}

/// A configured experiment bound to an output directory and latent cache.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub cache_root: PathBuf,
    pub force: bool,
}

impl Pipeline {
    /// The cache root comes from `LATEMU_CACHE` when set, else `<output>/cache`.
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let out = config.output.clone();
        let cache_root = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out.join("cache"));
        Ok(Self { hash: config.hash(), config, out, cache_root, force })
    }

    pub fn with_cache_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.cache_root = root.into();
        self
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn traj_path(&self, split: Split, index: usize) -> PathBuf {
        self.data_dir().join(split.as_str()).join(format!("{index:04}.traj"))
    }

    fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    fn normalizer_path(&self) -> PathBuf {
        self.data_dir().join("normalizer.json")
    }

    fn ae_dir(&self, name: &str) -> PathBuf {
        self.out.join("ae").join(name)
    }

    fn latent_meta_path(&self, name: &str) -> PathBuf {
        self.out.join("latents").join(format!("{name}.json"))
    }

    fn emulator_dir(&self, name: &str, kind: EmulatorKind) -> PathBuf {
        self.out.join("emulator").join(name).join(kind.as_str())
    }

    fn rollout_dir(&self, name: &str, kind: RolloutKind) -> PathBuf {
        self.out.join("rollout").join(name).join(kind.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.report_dir().join("metrics.csv")
    }

    fn current(&self, meta: &Path) -> bool {
        config_of(meta).as_deref() == Some(self.hash.as_str())
    }

    fn skip(&self, stage: &str, meta: &Path, output: PathBuf) -> Option<Outcome> {
        if !self.force && self.current(meta) {
            log::info!("{stage}: up to date ({}), skipping", output.display());
            return Some(Outcome { stage: stage.into(), skipped: true, output });
        }
        None
    }

    /// Fails with a dependency error unless `meta` exists and carries the current hash.
    fn require(&self, stage: &str, meta: &Path, producer: &str) -> Result<()> {
        if !meta.exists() {
            return Err(Error::Dependency {
                stage: stage.into(),
                missing: meta.display().to_string(),
                producer: producer.into(),
            });
        }
        if !self.current(meta) {
            return Err(Error::Dependency {
                stage: stage.into(),
                missing: format!("{} for config {}", meta.display(), self.hash),
                producer: producer.into(),
            });
        }
        Ok(())
    }

    fn file_meta(&self, system: String) -> FileMeta {
        FileMeta {
            version: crate::data::TRAJ_VERSION,
            theta: Vec::new(),
            stride: 0,
            boundary: crate::data::Boundary::Periodic,
            channel_names: Vec::new(),
            normalizer: None,
            seed: None,
            system: Some(system),
            config: Some(self.hash.clone()),
        }
    }

    /// Key of the generated dataset in the shared latent cache.
    fn dataset_key(&self) -> String {
        let d = &self.config.dataset;
        format!("{}-{:016x}", d.system.as_str(), derive_seed(self.config.seed, &d.hash()))
    }

    fn split_count(&self, split: Split) -> usize {
        let d = &self.config.dataset;
        match split {
            Split::Train => d.train,
            Split::Val => d.val,
            Split::Test => d.test,
        }
    }

    fn generate_one(&self, split: Split, index: usize) -> Result<Trajectory> {
        let d = &self.config.dataset;
        let seed = trajectory_seed(self.config.seed, split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "theta"));
        let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        match d.system {
            SystemKind::Advection => {
                let params = AdvectionParams {
                    velocity: [draw(d.velocity), draw(d.velocity)],
                    diffusivity: draw(d.diffusivity),
                };
                gen_advection(&params, d.height, d.width, d.frames, d.stride, seed)
            }
            SystemKind::GrayScott => {
                let params = GrayScottParams::new(draw(d.feed), draw(d.kill));
                let boundary = d.boundaries[rng.random_range(0..d.boundaries.len())];
                gen_grayscott(&params, boundary, d.height, d.width, d.frames, d.stride, seed)
            }
        }
    }

    pub fn cmd_generate(&self) -> Result<Outcome> {
        let manifest = self.manifest_path();
        if let Some(o) = self.skip("generate", &manifest, self.data_dir()) {
            return Ok(o);
        }
        let d = &self.config.dataset;
        remove_dir(&self.data_dir())?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let count = self.split_count(split);
            log::info!("generate: {count} {} trajectories of {}", split.as_str(), d.system.as_str());
            (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
                let traj = self.generate_one(split, i)?;
                let meta = FileMeta {
                    normalizer: Some("normalizer.json".into()),
                    seed: Some(trajectory_seed(self.config.seed, split, i)),
                    ..self.file_meta(d.system.as_str().into())
                };
                save_trajectory(&self.traj_path(split, i), &traj, &meta)
            })?;
        }
        let names = d.channel_names();
        let transforms: Vec<ChannelTransform> = names
            .iter()
            .map(|n| if d.log1p.contains(n) { ChannelTransform::Log1p } else { ChannelTransform::Identity })
            .collect();
        let normalizer =
            Normalizer::fit_iter((0..d.train).map(|i| load_trajectory(&self.traj_path(Split::Train, i))), &transforms)?;
        write_json(&self.normalizer_path(), &NormalizerFile { config: self.hash.clone(), normalizer })?;
        write_json(
            &manifest,
            &DataManifest {
                config: self.hash.clone(),
                system: d.system,
                train: d.train,
                val: d.val,
                test: d.test,
                channel_names: names,
            },
        )?;
        Ok(Outcome { stage: "generate".into(), skipped: false, output: self.data_dir() })
    }

    fn normalizer(&self) -> Result<Normalizer> {
        let file: NormalizerFile = read_json(&self.normalizer_path())?;
        if file.config != self.hash {
            return Err(Error::Provenance(format!(
                "{} was fitted under config {}, current config is {}",
                self.normalizer_path().display(),
                file.config,
                self.hash
            )));
        }
        Ok(file.normalizer)
    }

    fn load_truth(&self, split: Split, index: usize) -> Result<Trajectory> {
        let path = self.traj_path(split, index);
        let meta = load_meta(&path)?;
        if meta.config.as_deref() != Some(self.hash.as_str()) {
            return Err(Error::Provenance(format!(
                "{} was produced by config {}, current config is {}",
                path.display(),
                meta.config.as_deref().unwrap_or("<none>"),
                self.hash
            )));
        }
        load_trajectory(&path)
    }

    fn training_frames(&self, spec: &AeSpec, split: Split, norm: &Normalizer) -> Result<Vec<Field>> {
        let mut out = Vec::new();
        for i in 0..self.split_count(split) {
            let traj = self.load_truth(split, i)?;
            for j in spaced(traj.len(), spec.frames_per_trajectory) {
                out.push(norm.apply(&traj.frames[j])?);
            }
        }
        Ok(out)
    }

    fn ae_checkpoint(&self, name: &str) -> PathBuf {
        self.ae_dir(name).join("model.ltck")
    }

    pub fn cmd_train_ae(&self, name: &str) -> Result<Outcome> {
        let spec = self.config.autoencoder(name)?;
        let dir = self.ae_dir(name);
        let meta_path = dir.join("meta.json");
        let stage = "train-ae";
        if let Some(o) = self.skip(stage, &meta_path, dir.clone()) {
            return Ok(o);
        }
        self.require(stage, &self.manifest_path(), "generate")?;
        remove_dir(&dir)?;
        let norm = self.normalizer()?;
        let train = self.training_frames(spec, Split::Train, &norm)?;
        let val = self.training_frames(spec, Split::Val, &norm)?;
        let model = spec.model(&self.config.dataset);
        let mut ae = Autoencoder::new(model.clone(), derive_seed(self.config.seed, &format!("ae/{name}")))?;
        log::info!(
            "train-ae `{name}`: compression {}, {} train / {} val frames",
            model.compression_rate(),
            train.len(),
            val.len()
        );
        let ckpt = self.ae_checkpoint(name);
        let log_path = dir.join("log.csv");
        let periodic = model.padding == crate::autoencoder::PaddingKind::Periodic;
        let outputs = TrainOutputs { checkpoint: Some(ckpt.clone()), log: Some(log_path.clone()) };
        let logs = train_autoencoder(&mut ae, &train, &val, &spec.train, periodic, &outputs)?;
        ae.save(&ckpt)?;
        stamp_csv(&log_path, &self.hash)?;
        write_json(
            &meta_path,
            &AeMeta {
                config: self.hash.clone(),
                name: name.into(),
                compression: model.compression_rate(),
                model,
                checkpoint_hash: file_hash(&ckpt)?,
                val_mae: logs.last().map(|l| l.val_mae).unwrap_or(f64::NAN),
            },
        )?;
        Ok(Outcome { stage: stage.into(), skipped: false, output: dir })
    }

    fn load_ae(&self, stage: &str, name: &str) -> Result<(Autoencoder, String)> {
        let spec = self.config.autoencoder(name)?;
        let ckpt = self.ae_checkpoint(name);
        if !ckpt.exists() {
            return Err(Error::Dependency {
                stage: stage.into(),
                missing: ckpt.display().to_string(),
                producer: "train-ae".into(),
            });
        }
        self.require(stage, &self.ae_dir(name).join("meta.json"), "train-ae")?;
        let ae = Autoencoder::load(spec.model(&self.config.dataset), &ckpt)?;
        Ok((ae, file_hash(&ckpt)?))
    }

    fn all_ids(&self) -> Vec<(Split, usize)> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(|s| (0..self.split_count(s)).map(move |i| (s, i)))
            .collect()
    }

    pub fn cmd_encode(&self, name: &str) -> Result<Outcome> {
        let stage = "encode";
        let meta_path = self.latent_meta_path(name);
        let (ae, ae_hash) = self.load_ae(stage, name)?;
        let cache = LatentCache::open(&self.cache_root, &self.dataset_key(), name, &ae_hash)?;
        let complete = self.all_ids().iter().all(|&(s, i)| cache.contains(&traj_id(s, i)));
        if complete {
            if let Some(o) = self.skip(stage, &meta_path, cache.dir()) {
                return Ok(o);
            }
        }
        self.require(stage, &self.manifest_path(), "generate")?;
        let norm = self.normalizer()?;
        let mut report = crate::rollout::EncodeReport::default();
        for (s, i) in self.all_ids() {
            let id = traj_id(s, i);
            if cache.contains(&id) && !self.force {
                report.skipped += 1;
                continue;
            }
            let traj = norm.apply_trajectory(&self.load_truth(s, i)?)?;
            let r = encode_dataset(&ae, &[(id, traj)], &cache, CODEC_BATCH)?;
            report.encoded += r.encoded;
        }
        log::info!("encode `{name}`: {} encoded, {} already cached", report.encoded, report.skipped);
        let train: Vec<LatentTrajectory> =
            (0..self.config.dataset.train).map(|i| cache.load(&traj_id(Split::Train, i))).collect::<Result<_>>()?;
        let shape = train[0].frames[0].shape();
        let scaler = LatentScaler::fit(train.iter().flat_map(|t| t.frames.iter().map(|f| f.values.as_slice())), shape[2])?;
        write_json(
            &meta_path,
            &LatentMeta {
                config: self.hash.clone(),
                ae: name.into(),
                ae_hash,
                dataset_key: self.dataset_key(),
                shape,
                scaler,
            },
        )?;
        Ok(Outcome { stage: stage.into(), skipped: false, output: cache.dir() })
    }

    fn latents(&self, stage: &str, name: &str) -> Result<(LatentMeta, LatentCache)> {
        let path = self.latent_meta_path(name);
        self.require(stage, &path, "encode")?;
        let meta: LatentMeta = read_json(&path)?;
        let cache = LatentCache::open(&self.cache_root, &meta.dataset_key, name, &meta.ae_hash)?;
        Ok((meta, cache))
    }

    fn bundle_shape(&self, latent: [usize; 3]) -> BundleShape {
        BundleShape {
            frames: self.config.emulator.bundle + 1,
            height: latent[0],
            width: latent[1],
            channels: latent[2],
            cond_dim: self.config.dataset.cond_dim(),
        }
    }

    pub fn cmd_train_emulator(&self, name: &str, kind: EmulatorKind) -> Result<Outcome> {
        let stage = "train-emulator";
        self.config.autoencoder(name)?;
        let dir = self.emulator_dir(name, kind);
        let meta_path = dir.join("meta.json");
        if let Some(o) = self.skip(stage, &meta_path, dir.clone()) {
            return Ok(o);
        }
        let (lat, cache) = self.latents(stage, name)?;
        remove_dir(&dir)?;
        let mut series = Vec::with_capacity(self.config.dataset.train);
        for i in 0..self.config.dataset.train {
            let t = cache.load(&traj_id(Split::Train, i))?;
            let mut frames = t.to_tensor()?;
            lat.scaler.apply(frames.data_mut());
            series.push(LatentSeries { frames, theta: t.conditioning() });
        }
        let e = &self.config.emulator;
        let shape = self.bundle_shape(lat.shape);
        let seed = derive_seed(self.config.seed, &format!("emulator/{name}/{}", kind.as_str()));
        let mut net = EmulatorNet::new(kind, e.net.clone(), shape, seed)?;
        let log_path = dir.join("log.csv");
        let logs = train_emulator(&mut net, &series, &e.train, Some(&log_path))?;
        let ckpt = dir.join("model.ltck");
        net.save(&ckpt)?;
        stamp_csv(&log_path, &self.hash)?;
        write_json(
            &meta_path,
            &EmulatorMeta {
                config: self.hash.clone(),
                ae: name.into(),
                ae_hash: lat.ae_hash,
                kind,
                net: e.net.clone(),
                shape,
                final_loss: logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
            },
        )?;
        Ok(Outcome { stage: stage.into(), skipped: false, output: dir })
    }

    fn plan(&self, kind: RolloutKind) -> RolloutPlan {
        RolloutPlan {
            bundle: self.config.emulator.bundle,
            context: self.config.emulator.context,
            members: if kind == RolloutKind::Diffusion { self.config.evaluation.members } else { 1 },
            frames: self.config.dataset.frames + 1,
            kind,
            sampler_steps: self.config.sampler.steps,
            solver: self.config.sampler.solver,
        }
    }

    pub fn cmd_rollout(&self, name: &str, kind: RolloutKind, seed: u64) -> Result<Outcome> {
        let stage = "rollout";
        self.config.autoencoder(name)?;
        let dir = self.rollout_dir(name, kind);
        let summary_path = dir.join("summary.json");
        if !self.force && self.current(&summary_path) {
            let prev: RolloutSummary = read_json(&summary_path)?;
            if prev.seed == seed {
                log::info!("rollout: up to date ({}), skipping", dir.display());
                return Ok(Outcome { stage: stage.into(), skipped: true, output: dir });
            }
        }
        let (lat, cache) = self.latents(stage, name)?;
        let net = match kind {
            RolloutKind::Persistence => None,
            RolloutKind::Diffusion | RolloutKind::Solver => {
                let ek = if kind == RolloutKind::Diffusion { EmulatorKind::Diffusion } else { EmulatorKind::Solver };
                let edir = self.emulator_dir(name, ek);
                self.require(stage, &edir.join("meta.json"), "train-emulator")?;
                let meta: EmulatorMeta = read_json(&edir.join("meta.json"))?;
                if meta.ae_hash != lat.ae_hash {
                    return Err(Error::Dependency {
                        stage: stage.into(),
                        missing: format!("{} emulator for autoencoder checkpoint {}", ek.as_str(), lat.ae_hash),
                        producer: "train-emulator".into(),
                    });
                }
                Some(EmulatorNet::load(ek, meta.net, meta.shape, &edir.join("model.ltck"))?)
            }
        };
        let emulator = match &net {
            Some(net) => Emulator::Network { net, scaler: &lat.scaler },
            None => Emulator::Persistence,
        };
        let plan = self.plan(kind);
        remove_dir(&dir)?;
        let count = self.config.evaluation.test_count;
        let mut entries = Vec::with_capacity(count);
        let ids: Vec<usize> = (0..count).collect();
        for (chunk_idx, chunk) in ids.chunks(ROLLOUT_CHUNK).enumerate() {
            let latents: Vec<LatentTrajectory> =
                chunk.iter().map(|&i| cache.load(&traj_id(Split::Test, i))).collect::<Result<_>>()?;
            let inputs = latents
                .iter()
                .map(|t| Ok(RolloutInput { context: t.window(0, plan.context)?, theta: t.conditioning() }))
                .collect::<Result<Vec<_>>>()?;
            let chunk_seed = derive_seed(seed, &format!("chunk/{chunk_idx}"));
            let results = rollout(&emulator, &inputs, &plan, chunk_seed)?;
            for ((&i, ens), src) in chunk.iter().zip(results).zip(&latents) {
                let id = traj_id(Split::Test, i);
                for (k, (member, &blown)) in ens.members.iter().zip(&ens.blown).enumerate() {
                    if blown {
                        continue;
                    }
                    let s = member.shape();
                    let frames = member
                        .data()
                        .chunks_exact(s[1] * s[2] * s[3])
                        .map(|v| Field::from_hwc(s[3], s[1], s[2], v))
                        .collect::<Result<Vec<_>>>()?;
                    let names = (0..s[3]).map(|c| format!("z{c}")).collect();
                    let traj = Trajectory::new(frames, src.theta.clone(), src.stride, src.boundary, names)?;
                    let meta = self.file_meta(format!("rollout:{}:{}", kind.as_str(), lat.ae_hash));
                    save_trajectory(&dir.join(&id).join(format!("m{k}.traj")), &traj, &meta)?;
                }
                if ens.blown.iter().any(|&b| b) {
                    log::warn!("rollout {name}/{}: {id} lost {} members", kind.as_str(), ens.blown.iter().filter(|&&b| b).count());
                }
                entries.push(RolloutEntry { id, blown: ens.blown });
            }
        }
        write_json(
            &summary_path,
            &RolloutSummary { config: self.hash.clone(), ae: name.into(), kind, seed, plan, trajectories: entries },
        )?;
        Ok(Outcome { stage: stage.into(), skipped: false, output: dir })
    }

    /// Rollout kinds scored for one autoencoder slot.
    pub fn rollout_kinds(&self, ae: &str) -> Vec<RolloutKind> {
        let emulated = if self.config.emulator.covers(ae) { self.config.emulator.kinds.as_slice() } else { &[] };
        let mut kinds: Vec<RolloutKind> = emulated
            .iter()
            .map(|k| match k {
                EmulatorKind::Diffusion => RolloutKind::Diffusion,
                EmulatorKind::Solver => RolloutKind::Solver,
            })
            .collect();
        if self.config.evaluation.persistence {
            kinds.push(RolloutKind::Persistence);
        }
        kinds
    }

    fn load_member(&self, path: &Path) -> Result<latemu_tensor::Tensor> {
        let meta = load_meta(path)?;
        if meta.config.as_deref() != Some(self.hash.as_str()) {
            return Err(Error::Provenance(format!(
                "{} was produced by config {}, current config is {}",
                path.display(),
                meta.config.as_deref().unwrap_or("<none>"),
                self.hash
            )));
        }
        let t = load_trajectory(path)?;
        let [c, h, w] = t.field_shape();
        let mut data = Vec::with_capacity(t.len() * c * h * w);
        for f in &t.frames {
            data.extend(f.to_hwc());
        }
        Ok(latemu_tensor::Tensor::new(&[t.len(), h, w, c], data)?)
    }

    /// Scores every rollout against the test truth and writes the report.
    /// Inputs stamped with a different configuration hash are refused.
    pub fn cmd_evaluate(&self) -> Result<Outcome> {
        let stage = "evaluate";
        self.require(stage, &self.manifest_path(), "generate")?;
        let norm = self.normalizer()?;
        let names = self.config.dataset.channel_names();
        let c = self.config.emulator.context;
        let horizons: Vec<(usize, usize)> = self.config.evaluation.horizons.iter().map(|h| (h[0], h[1])).collect();
        let count = self.config.evaluation.test_count;
        let truths: Vec<Trajectory> = (0..count).map(|i| self.load_truth(Split::Test, i)).collect::<Result<_>>()?;
        let mut rows: Vec<MetricRow> = Vec::new();
        for spec in &self.config.autoencoders {
            let name = spec.name.as_str();
            let (ae, ae_hash) = self.load_ae(stage, name)?;
            let (_, cache) = self.latents(stage, name)?;
            let compression = compression_label(spec.model(&self.config.dataset).compression_rate());

            let recon: Vec<Vec<FrameMetrics>> = (0..count)
                .into_par_iter()
                .map(|i| -> Result<Vec<FrameMetrics>> {
                    let z = cache.load(&traj_id(Split::Test, i))?.to_tensor()?;
                    let fields = decode_rollout(&ae, Some(&norm), &z, CODEC_BATCH)?;
                    let mut out = Vec::new();
                    for (j, f) in fields.iter().enumerate() {
                        out.extend(evaluate_frame(&truths[i].frames[j], &[f], &names, j)?);
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            rows.extend(aggregate("autoencoder", &compression, &recon.concat(), &horizons));

            for kind in self.rollout_kinds(name) {
                let dir = self.rollout_dir(name, kind);
                let summary_path = dir.join("summary.json");
                if !summary_path.exists() {
                    return Err(Error::Dependency {
                        stage: stage.into(),
                        missing: summary_path.display().to_string(),
                        producer: "rollout".into(),
                    });
                }
                let summary: RolloutSummary = read_json(&summary_path)?;
                if summary.config != self.hash {
                    return Err(Error::Provenance(format!(
                        "{} was produced by config {}, current config is {}",
                        summary_path.display(),
                        summary.config,
                        self.hash
                    )));
                }
                if summary.trajectories.len() != count {
                    return Err(Error::Dependency {
                        stage: stage.into(),
                        missing: format!("{count} rolled-out trajectories in {}", dir.display()),
                        producer: "rollout".into(),
                    });
                }
                let per_traj: Vec<Vec<FrameMetrics>> = summary
                    .trajectories
                    .par_iter()
                    .enumerate()
                    .map(|(i, entry)| -> Result<Vec<FrameMetrics>> {
                        let mut members = Vec::new();
                        for (k, &blown) in entry.blown.iter().enumerate() {
                            if !blown {
                                let z = self.load_member(&dir.join(&entry.id).join(format!("m{k}.traj")))?;
                                members.push(decode_rollout(&ae, Some(&norm), &z, CODEC_BATCH)?);
                            }
                        }
                        if members.is_empty() {
                            log::warn!("evaluate: every member of {} blew up; trajectory skipped", entry.id);
                            return Ok(Vec::new());
                        }
                        let truth = &truths[i];
                        let mut out = Vec::new();
                        for j in c..truth.len() {
                            let ens: Vec<&Field> = members.iter().map(|m| &m[j]).collect();
                            out.extend(evaluate_frame(&truth.frames[j], &ens, &names, j + 1 - c)?);
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                log::info!("evaluate: {name}/{} scored (autoencoder {ae_hash})", kind.as_str());
                rows.extend(aggregate(kind.as_str(), &compression, &per_traj.concat(), &horizons));
            }
        }
        let report = self.report_dir();
        write_csv(&self.metrics_path(), &rows, Some(&self.hash))?;
        if self.config.evaluation.plots {
            for metric in ["vrmse", "ps_high", "ssr"] {
                let svg = svg_plot(&rows, metric, "all")?.replacen('\n', &format!("\n<!-- config {} -->\n", self.hash), 1);
                let path = report.join(format!("{metric}.svg"));
                std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(Outcome { stage: stage.into(), skipped: false, output: self.metrics_path() })
    }

    /// Runs every stage for every autoencoder and emulator kind, then evaluates.
    pub fn cmd_sweep(&self) -> Result<Vec<Outcome>> {
        let mut done = vec![self.cmd_generate()?];
        for spec in &self.config.autoencoders {
            let name = spec.name.as_str();
            done.push(self.cmd_train_ae(name)?);
            done.push(self.cmd_encode(name)?);
            if self.config.emulator.covers(name) {
                for &kind in &self.config.emulator.kinds {
                    done.push(self.cmd_train_emulator(name, kind)?);
                }
            }
            for kind in self.rollout_kinds(name) {
                done.push(self.cmd_rollout(name, kind, self.config.evaluation.seed)?);
            }
        }
        done.push(self.cmd_evaluate()?);
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaced_frames_cover_both_ends() {
        assert_eq!(spaced(65, 3), vec![0, 32, 64]);
        assert_eq!(spaced(4, 8), vec![0, 1, 2, 3]);
        assert_eq!(spaced(10, 1), vec![0]);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn compression_labels() {
        assert_eq!(compression_label(8.0), "8");
        assert_eq!(compression_label(0.5), "0.500");
    }
}
