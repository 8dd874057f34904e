//! Synthetic ground-truth trajectories, normalization and the `.traj` container.

mod advection;
mod grayscott;
mod io;
mod normalize;

pub use advection::{advect_exact, gen_advection, random_smooth_field, AdvectionParams};
pub use grayscott::{gen_grayscott, gs_step, GrayScottParams};
pub use io::{load_meta, load_trajectory, save_trajectory, sidecar_path, FileMeta, TRAJ_HEADER_BYTES, TRAJ_MAGIC, TRAJ_VERSION};
pub use normalize::{ChannelTransform, Normalizer};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One physical state stored channel-major as `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Field {
    /// Builds a field; `height`/`width` must be powers of two and every value finite.
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if !height.is_power_of_two() || !width.is_power_of_two() {
            return Err(Error::Invalid(format!("field extent {height}x{width} is not a power of two")));
        }
        if channels == 0 || values.len() != channels * height * width {
            return Err(Error::Invalid(format!(
                "field {channels}x{height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("field", format!("non-finite value at flat index {i}")));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    /// Builds from a channels-last `[H, W, C]` buffer.
    pub fn from_hwc(channels: usize, height: usize, width: usize, hwc: &[f32]) -> Result<Self> {
        let plane = height * width;
        let mut values = vec![0.0f32; hwc.len()];
        for p in 0..plane.min(hwc.len() / channels.max(1)) {
            for c in 0..channels {
                values[c * plane + p] = hwc[p * channels + c];
            }
        }
        Self::new(channels, height, width, values)
    }

    /// Channels-last `[H, W, C]` copy.
    pub fn to_hwc(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; self.values.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.values[c * plane + p];
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.values[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.values[c * plane..(c + 1) * plane]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Open,
}

impl Boundary {
    pub fn one_hot(self) -> [f32; 2] {
        match self {
            Boundary::Periodic => [1.0, 0.0],
            Boundary::Open => [0.0, 1.0],
        }
    }
}

/// Time-ordered states `x^0..x^L` of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Field>,
    /// Physical parameters; at most four reals.
    pub theta: Vec<f32>,
    /// Solver steps between stored frames.
    pub stride: u32,
    pub boundary: Boundary,
    pub channel_names: Vec<String>,
}

impl Trajectory {
    pub fn new(
        frames: Vec<Field>,
        theta: Vec<f32>,
        stride: u32,
        boundary: Boundary,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Invalid("trajectory without frames".into()))?;
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::Invalid("trajectory frames differ in shape".into()));
        }
        if channel_names.len() != first.channels() {
            return Err(Error::Invalid(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                first.channels()
            )));
        }
        if theta.len() > 4 {
            return Err(Error::Invalid(format!("theta holds {} values, at most 4 allowed", theta.len())));
        }
        Ok(Self { frames, theta, stride, boundary, channel_names })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn field_shape(&self) -> [usize; 3] {
        self.frames[0].shape()
    }

    /// Lead time of frame `i` in solver steps.
    pub fn lead_time(&self, i: usize) -> u64 {
        i as u64 * self.stride as u64
    }

    /// Conditioning vector: physical parameters followed by the boundary one-hot.
    pub fn conditioning(&self) -> Vec<f32> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.boundary.one_hot());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th trajectory of a split. The split is recoverable from
/// the seed alone via [`split_of`], so no seed can land in two splits.
pub fn trajectory_seed(base: u64, split: Split, index: usize) -> u64 {
    let h = splitmix64(splitmix64(base ^ 0x5eed) ^ splitmix64(index as u64 + 1) ^ (split.code() << 60));
    (h & !3) | split.code()
}

pub fn split_of(seed: u64) -> Option<Split> {
    match seed & 3 {
        0 => Some(Split::Train),
        1 => Some(Split::Val),
        2 => Some(Split::Test),
        _ => None,
    }
}
