//! `.traj` container: 24-byte header, little-endian f32 payload in `[L+1, C, H, W]`
//! order, plus a JSON sidecar at `<path>.json`.
//!
//! Header: magic `LTRJ`, then u32 LE version, frames, channels, height, width.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Boundary, Field, Trajectory};
use crate::{Error, Result};

pub const TRAJ_MAGIC: [u8; 4] = *b"LTRJ";
pub const TRAJ_VERSION: u32 = 1;
pub const TRAJ_HEADER_BYTES: usize = 24;

/// Sidecar metadata stored next to each `.traj` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    pub version: u32,
    pub theta: Vec<f32>,
    pub stride: u32,
    pub boundary: Boundary,
    pub channel_names: Vec<String>,
    /// Identifier of the normalizer that applies to this data, if any.
    pub normalizer: Option<String>,
    pub seed: Option<u64>,
    pub system: Option<String>,
    /// Hash of the experiment configuration that produced the file.
    #[serde(default)]
    pub config: Option<String>,
}

impl FileMeta {
    pub fn describe(traj: &Trajectory) -> Self {
        Self {
            version: TRAJ_VERSION,
            theta: traj.theta.clone(),
            stride: traj.stride,
            boundary: traj.boundary,
            channel_names: traj.channel_names.clone(),
            normalizer: None,
            seed: None,
            system: None,
            config: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary file and its sidecar. Trajectory-derived sidecar fields
/// (`theta`, `stride`, `boundary`, `channel_names`) are taken from `traj`.
pub fn save_trajectory(path: &Path, traj: &Trajectory, meta: &FileMeta) -> Result<()> {
    let [c, h, w] = traj.field_shape();
    let mut buf = Vec::with_capacity(TRAJ_HEADER_BYTES + traj.len() * c * h * w * 4);
    buf.extend_from_slice(&TRAJ_MAGIC);
    for v in [TRAJ_VERSION, traj.len() as u32, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for frame in &traj.frames {
        for v in frame.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;

    let meta = FileMeta { version: TRAJ_VERSION, ..FileMeta::describe(traj).with_extras(meta) };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&side, e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

impl FileMeta {
    fn with_extras(mut self, other: &FileMeta) -> Self {
        self.normalizer = other.normalizer.clone();
        self.seed = other.seed;
        self.system = other.system.clone();
        self.config = other.config.clone();
        self
    }
}

pub fn load_meta(path: &Path) -> Result<FileMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: FileMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.version != TRAJ_VERSION {
        return Err(Error::format(&side, format!("sidecar version {} (expected {TRAJ_VERSION})", meta.version)));
    }
    Ok(meta)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let meta = load_meta(path)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < TRAJ_HEADER_BYTES {
        return Err(Error::format(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != TRAJ_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != TRAJ_VERSION {
        return Err(Error::format(path, format!("version {version} (expected {TRAJ_VERSION})")));
    }
    let (frames, c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let per_frame = c * h * w;
    let expected = TRAJ_HEADER_BYTES + frames * per_frame * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let payload: Vec<f32> = bytes[TRAJ_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let fields = payload
        .chunks_exact(per_frame.max(1))
        .map(|chunk| Field::new(c, h, w, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(fields, meta.theta, meta.stride, meta.boundary, meta.channel_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_advection, AdvectionParams};

    fn sample(frames: usize) -> Trajectory {
        let p = AdvectionParams { velocity: [0.5, 0.25], diffusivity: 0.01 };
        gen_advection(&p, 8, 8, frames - 1, 2, 1).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.traj");
        let t = sample(5);
        let meta = FileMeta { seed: Some(7), normalizer: Some("abc".into()), ..FileMeta::describe(&t) };
        save_trajectory(&path, &t, &meta).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.frames.iter().zip(&t.frames) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(load_meta(&path).unwrap(), meta);
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.traj");
        let t = sample(100);
        save_trajectory(&path, &t, &FileMeta::describe(&t)).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 24 + 100 * 8 * 8 * 2 * 4);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.traj");
        let t = sample(2);
        save_trajectory(&path, &t, &FileMeta::describe(&t)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.traj");
        let t = sample(2);
        save_trajectory(&path, &t, &FileMeta::describe(&t)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_trajectory(&path), Err(Error::Format { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        std::fs::write(&path, &v2).unwrap();
        assert!(load_trajectory(&path).unwrap_err().to_string().contains("version"));
    }
}
