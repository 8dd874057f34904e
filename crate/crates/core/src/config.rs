//! Experiment configuration. Every field defaults to the desk preset, so an
//! empty TOML file is a valid configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeTrainOptions, AutoencoderConfig, PaddingKind};
use crate::data::Boundary;
use crate::diffusion::{EmulatorKind, EmulatorTrainOptions, NetConfig};
use crate::sampler::OdeSolver;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Advection,
    GrayScott,
}

impl SystemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Advection => "advection",
            SystemKind::GrayScott => "grayscott",
        }
    }

    /// Length of the physical parameter vector, before the boundary one-hot.
    pub fn theta_len(self) -> usize {
        match self {
            SystemKind::Advection => 3,
            SystemKind::GrayScott => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub system: SystemKind,
    pub height: usize,
    pub width: usize,
    /// Steps `L` per trajectory; each trajectory stores `L + 1` frames.
    pub frames: usize,
    /// Time units (advection) or solver substeps (Gray-Scott) between frames.
    pub stride: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Inclusive range each velocity component is drawn from.
    pub velocity: [f64; 2],
    pub diffusivity: [f64; 2],
    pub feed: [f64; 2],
    pub kill: [f64; 2],
    /// Gray-Scott boundary conditions, drawn uniformly per trajectory.
    pub boundaries: Vec<Boundary>,
    /// Channels that get a `log1p` pre-transform before standardization.
    pub log1p: Vec<String>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            system: SystemKind::Advection,
            height: 64,
            width: 64,
            frames: 64,
            stride: 1,
            train: 512,
            val: 64,
            test: 32,
            velocity: [-1.5, 1.5],
            diffusivity: [0.0, 0.02],
            feed: [0.025, 0.045],
            kill: [0.058, 0.064],
            boundaries: vec![Boundary::Periodic, Boundary::Open],
            log1p: Vec::new(),
        }
    }
}

impl DatasetSpec {
    pub fn channel_names(&self) -> Vec<String> {
        match self.system {
            SystemKind::Advection => vec!["u".into(), "vorticity".into()],
            SystemKind::GrayScott => vec!["u".into(), "v".into()],
        }
    }

    pub fn padding(&self) -> PaddingKind {
        match self.system {
            SystemKind::Advection => PaddingKind::Periodic,
            SystemKind::GrayScott if self.boundaries.iter().all(|&b| b == Boundary::Periodic) => PaddingKind::Periodic,
            SystemKind::GrayScott => PaddingKind::Zero,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.system.theta_len() + 2
    }

    /// Hash of the dataset section alone; keys the shared latent cache.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("dataset spec serializes"))
    }
}

/// One autoencoder of the sweep, i.e. one compression rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeSpec {
    pub name: String,
    pub latent_channels: usize,
    pub channels: Vec<usize>,
    pub attention: Vec<bool>,
    pub blocks_per_level: usize,
    pub heads: usize,
    pub dropout: f32,
    pub identity_init: bool,
    /// Evenly spaced frames taken from each trajectory for training.
    pub frames_per_trajectory: usize,
    pub train: AeTrainOptions,
}

impl Default for AeSpec {
    fn default() -> Self {
        let m = AutoencoderConfig::default();
        Self {
            name: "r8".into(),
            latent_channels: 16,
            channels: m.channels,
            attention: m.attention,
            blocks_per_level: m.blocks_per_level,
            heads: m.heads,
            dropout: m.dropout,
            identity_init: m.identity_init,
            frames_per_trajectory: 8,
            train: AeTrainOptions::default(),
        }
    }
}

impl AeSpec {
    pub fn with_latent(name: &str, latent_channels: usize) -> Self {
        Self { name: name.into(), latent_channels, ..Self::default() }
    }

    pub fn model(&self, dataset: &DatasetSpec) -> AutoencoderConfig {
        AutoencoderConfig {
            pixel_channels: dataset.channel_names().len(),
            latent_channels: self.latent_channels,
            channels: self.channels.clone(),
            blocks_per_level: self.blocks_per_level,
            attention: self.attention.clone(),
            heads: self.heads,
            dropout: self.dropout,
            padding: dataset.padding(),
            identity_init: self.identity_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorSpec {
    pub kinds: Vec<EmulatorKind>,
    /// Bundle size `n`.
    pub bundle: usize,
    /// Context frames `c`.
    pub context: usize,
    pub net: NetConfig,
    pub train: EmulatorTrainOptions,
    /// Autoencoder slots that get emulators; empty means all of them.
    pub autoencoders: Vec<String>,
}

impl EmulatorSpec {
    pub fn covers(&self, ae: &str) -> bool {
        self.autoencoders.is_empty() || self.autoencoders.iter().any(|a| a == ae)
    }
}

impl Default for EmulatorSpec {
    fn default() -> Self {
        Self {
            kinds: vec![EmulatorKind::Diffusion, EmulatorKind::Solver],
            bundle: 4,
            context: 1,
            net: NetConfig::default(),
            train: EmulatorTrainOptions::default(),
            autoencoders: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub steps: usize,
    pub solver: OdeSolver,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { steps: 16, solver: OdeSolver::Ab3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Ensemble size `K` of diffusion rollouts.
    pub members: usize,
    /// Test trajectories rolled out and scored.
    pub test_count: usize,
    /// Inclusive lead-time windows `[a, b]`.
    pub horizons: Vec<[usize; 2]>,
    pub persistence: bool,
    pub seed: u64,
    pub plots: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            members: 8,
            test_count: 32,
            horizons: vec![[1, 10], [11, 30], [31, 64]],
            persistence: true,
            seed: 0,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Output directory; not part of the configuration hash.
    pub output: PathBuf,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub autoencoders: Vec<AeSpec>,
    pub emulator: EmulatorSpec,
    pub sampler: SamplerSpec,
    pub evaluation: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            output: PathBuf::from("runs/desk"),
            seed: 0,
            dataset: DatasetSpec::default(),
            autoencoders: vec![AeSpec::with_latent("r8", 16), AeSpec::with_latent("r32", 4), AeSpec::with_latent("r128", 1)],
            emulator: EmulatorSpec::default(),
            sampler: SamplerSpec::default(),
            evaluation: EvalSpec::default(),
        }
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets a dotted key such as `dataset.train` in a TOML table. Array-of-table
/// entries are addressed by index, e.g. `autoencoders.0.train.epochs`.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let next = parts[i + 1];
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            toml::Value::Array(items) => {
                let idx: usize = next
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: `{part}` is a list, expected an index after it")))?;
                let defaults = default_array_entry(part)?;
                while items.len() <= idx {
                    items.push(toml::Value::Table(defaults.clone()));
                }
                if i + 2 == parts.len() {
                    items[idx] = value;
                    return Ok(());
                }
                return set_in_array_item(&mut items[idx], key, &parts[i + 2..], value);
            }
            _ => return Err(Error::Config(format!("`{key}`: `{part}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn set_in_array_item(item: &mut toml::Value, key: &str, rest: &[&str], value: toml::Value) -> Result<()> {
    match item {
        toml::Value::Table(t) => set_dotted(t, &rest.join("."), value),
        _ => Err(Error::Config(format!("`{key}` does not address a table"))),
    }
}

fn default_array_entry(name: &str) -> Result<toml::Table> {
    match name {
        "autoencoders" => Ok(toml::Table::new()),
        _ => Err(Error::Config(format!("cannot index into `{name}`"))),
    }
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in diagnostics.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        Self::from_toml_with(text, origin, &[])
    }

    /// Parses TOML text and applies `key=value` overrides before deserializing,
    /// so overridden values go through the same validation as file values.
    pub fn from_toml_with(text: &str, origin: &str, overrides: &[(String, String)]) -> Result<Self> {
        // Deserializing straight from text keeps line/column spans in diagnostics.
        let direct: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        if overrides.is_empty() {
            direct.validate()?;
            return Ok(direct);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        if !table.contains_key("autoencoders") && overrides.iter().any(|(k, _)| k.starts_with("autoencoders.")) {
            let defaults = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(v) = defaults.get("autoencoders") {
                table.insert("autoencoders".into(), v.clone());
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: Self = toml::Table::try_into(table).map_err(|e| Error::Config(format!("{origin} with overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, &path.display().to_string(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of everything that influences results (the output path is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        short_hash(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn autoencoder(&self, name: &str) -> Result<&AeSpec> {
        self.autoencoders
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("no autoencoder named `{name}` in the configuration")))
    }

    /// Latent grid `(h, w)` of an autoencoder.
    pub fn latent_extent(&self, ae: &AeSpec) -> (usize, usize) {
        let r = 1 << ae.channels.len().saturating_sub(1);
        (self.dataset.height / r, self.dataset.width / r)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let bad = |msg: String| Err(Error::Config(msg));
        if !d.height.is_power_of_two() || !d.width.is_power_of_two() {
            return bad(format!("dataset.height/width must be powers of two, got {}x{}", d.height, d.width));
        }
        if d.frames == 0 || d.stride == 0 {
            return bad("dataset.frames and dataset.stride must be positive".into());
        }
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return bad("dataset.train, dataset.val and dataset.test must be positive".into());
        }
        for (name, r) in [("velocity", d.velocity), ("diffusivity", d.diffusivity), ("feed", d.feed), ("kill", d.kill)] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("dataset.{name} = {r:?} is not a range [lo, hi]"));
            }
        }
        if d.diffusivity[0] < 0.0 {
            return bad("dataset.diffusivity must be non-negative".into());
        }
        if d.system == SystemKind::GrayScott && d.boundaries.is_empty() {
            return bad("dataset.boundaries must list at least one boundary condition".into());
        }
        let names = d.channel_names();
        if let Some(c) = d.log1p.iter().find(|c| !names.contains(c)) {
            return bad(format!("dataset.log1p names unknown channel `{c}` (channels: {})", names.join(", ")));
        }
        if self.autoencoders.is_empty() {
            return bad("at least one [[autoencoders]] entry is required".into());
        }
        for (i, a) in self.autoencoders.iter().enumerate() {
            if a.name.is_empty() || !a.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                return bad(format!("autoencoders[{i}].name `{}` must be non-empty [A-Za-z0-9_-]", a.name));
            }
            if self.autoencoders[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate autoencoder name `{}`", a.name));
            }
            a.model(d).validate().map_err(|e| Error::Config(format!("autoencoders[{i}]: {e}")))?;
            let r = 1usize << (a.channels.len() - 1);
            if d.height % r != 0 || d.width % r != 0 || d.height < r || d.width < r {
                return bad(format!("autoencoders[{i}]: reduction {r} does not divide {}x{}", d.height, d.width));
            }
            if a.frames_per_trajectory == 0 || a.train.batch_size == 0 {
                return bad(format!("autoencoders[{i}]: frames_per_trajectory and train.batch_size must be positive"));
            }
        }
        let e = &self.emulator;
        if e.kinds.is_empty() && !self.evaluation.persistence {
            return bad("emulator.kinds is empty and persistence is disabled; nothing to evaluate".into());
        }
        if let Some(a) = e.autoencoders.iter().find(|a| !self.autoencoders.iter().any(|s| &s.name == *a)) {
            return bad(format!("emulator.autoencoders names unknown autoencoder `{a}`"));
        }
        if e.context == 0 || e.context > e.bundle {
            return bad(format!("need 1 <= emulator.context <= emulator.bundle, got {} and {}", e.context, e.bundle));
        }
        if d.frames < e.bundle {
            return bad(format!("dataset.frames = {} is shorter than the bundle n + 1 = {}", d.frames, e.bundle + 1));
        }
        let n = &e.net;
        if n.embed_dim == 0 || n.heads == 0 || n.embed_dim % n.heads != 0 || n.blocks == 0 || n.patch == 0 {
            return bad(format!("emulator.net: embed_dim {} must be a positive multiple of heads {}", n.embed_dim, n.heads));
        }
        for a in &self.autoencoders {
            let (h, w) = self.latent_extent(a);
            if h % n.patch != 0 || w % n.patch != 0 {
                return bad(format!("emulator.net.patch {} does not divide latent grid {h}x{w} of `{}`", n.patch, a.name));
            }
        }
        if e.train.batch_size == 0 || !(e.train.t_min > 0.0 && e.train.t_min < 1.0) {
            return bad("emulator.train needs batch_size > 0 and 0 < t_min < 1".into());
        }
        if self.sampler.steps == 0 {
            return bad("sampler.steps must be positive".into());
        }
        let v = &self.evaluation;
        if v.members == 0 || v.test_count == 0 || v.test_count > d.test {
            return bad(format!(
                "evaluation needs members > 0 and 1 <= test_count <= dataset.test ({}), got {} and {}",
                d.test, v.members, v.test_count
            ));
        }
        let max_lead = d.frames + 1 - e.context;
        for h in &v.horizons {
            if h[0] == 0 || h[0] > h[1] || h[1] > max_lead {
                return bad(format!("evaluation.horizons entry {h:?} must satisfy 1 <= a <= b <= {max_lead}"));
            }
        }
        Ok(())
    }

    /// Small preset that runs the whole pipeline in well under a minute.
    pub fn smoke() -> Self {
        let mut c = Self { name: "smoke".into(), output: PathBuf::from("runs/smoke"), ..Self::default() };
        c.dataset = DatasetSpec { height: 16, width: 16, frames: 12, train: 6, val: 2, test: 2, ..DatasetSpec::default() };
        let ae = |name: &str, latent| AeSpec {
            name: name.into(),
            latent_channels: latent,
            channels: vec![4, 8],
            attention: vec![false, false],
            heads: 2,
            dropout: 0.0,
            frames_per_trajectory: 4,
            train: AeTrainOptions { epochs: 2, steps_per_epoch: 5, batch_size: 4, warmup: 2, val_frames: 8, ..AeTrainOptions::default() },
            ..AeSpec::default()
        };
        c.autoencoders = vec![ae("r2", 4), ae("r8", 1)];
        c.emulator.net = NetConfig { embed_dim: 12, blocks: 1, heads: 1, mlp_ratio: 2, ..NetConfig::default() };
        c.emulator.bundle = 2;
        c.emulator.train = EmulatorTrainOptions { steps: 10, batch_size: 4, warmup: 2, log_every: 5, ..EmulatorTrainOptions::default() };
        c.sampler.steps = 4;
        c.evaluation = EvalSpec { members: 2, test_count: 2, horizons: vec![[1, 4], [5, 12]], plots: false, ..EvalSpec::default() };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset `{other}` (known: desk, smoke)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let c = ExperimentConfig::from_toml("", "empty").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.dataset.height, c.dataset.width, c.dataset.frames, c.dataset.train), (64, 64, 64, 512));
        let rates: Vec<f64> = c.autoencoders.iter().map(|a| a.model(&c.dataset).compression_rate()).collect();
        assert_eq!(rates, vec![8.0, 32.0, 128.0]);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::smoke()] {
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml(), "roundtrip").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn unknown_field_reports_line_and_name() {
        let text = "name = \"x\"\n\n[dataset]\nheight = 32\nhieght = 32\n";
        let err = ExperimentConfig::from_toml(text, "bad.toml").unwrap_err().to_string();
        assert!(err.contains("hieght"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        assert!(err.contains("bad.toml"), "{err}");
    }

    #[test]
    fn type_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[sampler]\nsteps = \"many\"\n", "t").unwrap_err().to_string();
        assert!(err.contains("steps") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[dataset]\ntrain = 10\n";
        let ov = vec![
            ("dataset.train".to_string(), "20".to_string()),
            ("name".to_string(), "renamed".to_string()),
            ("autoencoders.1.latent_channels".to_string(), "2".to_string()),
        ];
        let c = ExperimentConfig::from_toml_with(text, "t", &ov).unwrap();
        assert_eq!(c.dataset.train, 20);
        assert_eq!(c.name, "renamed");
        assert_eq!(c.autoencoders.len(), 3);
        assert_eq!(c.autoencoders[1].latent_channels, 2);
        assert!(ExperimentConfig::from_toml_with("", "t", &[("dataset.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn hash_ignores_output_but_not_settings() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.sampler.steps = 8;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn semantic_checks() {
        let mut c = ExperimentConfig::default();
        c.evaluation.test_count = 100;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.emulator.context = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.evaluation.horizons = vec![[0, 3]];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.autoencoders.push(AeSpec::with_latent("r8", 2));
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.dataset.height = 48;
        assert!(c.validate().is_err());
    }
}
