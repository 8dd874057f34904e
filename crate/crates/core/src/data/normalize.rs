//! Per-channel standardization fitted on the training split.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::{Field, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelTransform {
    Identity,
    /// `x -> ln(1 + x)` before standardization; for non-negative channels.
    Log1p,
}

impl ChannelTransform {
    fn forward(self, x: f64) -> f64 {
        match self {
            ChannelTransform::Identity => x,
            ChannelTransform::Log1p => x.ln_1p(),
        }
    }

    fn inverse(self, y: f64) -> f64 {
        match self {
            ChannelTransform::Identity => y,
            ChannelTransform::Log1p => y.exp_m1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub transforms: Vec<ChannelTransform>,
}

impl Normalizer {
    /// Fits mean and std over every frame of every training trajectory.
    pub fn fit(train: &[Trajectory], transforms: &[ChannelTransform]) -> Result<Self> {
        Self::fit_iter(train.iter().map(Ok), transforms)
    }

    /// Streaming variant of [`Normalizer::fit`]; trajectories are visited once
    /// and need not all be in memory.
    pub fn fit_iter<T: Borrow<Trajectory>>(
        train: impl IntoIterator<Item = Result<T>>,
        transforms: &[ChannelTransform],
    ) -> Result<Self> {
        let channels = transforms.len();
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for traj in train {
            let traj = traj?;
            let traj = traj.borrow();
            if traj.field_shape()[0] != channels {
                return Err(Error::Invalid(format!(
                    "{channels} transforms for {} channels",
                    traj.field_shape()[0]
                )));
            }
            for frame in &traj.frames {
                count += frame.height() * frame.width();
                for (c, tf) in transforms.iter().enumerate() {
                    for &x in frame.channel(c) {
                        if *tf == ChannelTransform::Log1p && x < 0.0 {
                            return Err(Error::Invalid(format!("log1p channel {c} holds negative value {x}")));
                        }
                        let y = tf.forward(x as f64);
                        sum[c] += y;
                        sq[c] += y * y;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Invalid("cannot fit a normalizer on an empty set".into()));
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let m = sum[c] / n;
            let var = (sq[c] / n - m * m).max(0.0);
            let s = var.sqrt();
            if !(s > 1e-12 * (1.0 + m.abs())) {
                return Err(Error::Invalid(format!("channel {c} has zero variance over the training set")));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std, transforms: transforms.to_vec() })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, field: &Field) -> Result<()> {
        if field.channels() != self.channels() {
            return Err(Error::Invalid(format!(
                "normalizer has {} channels, field has {}",
                self.channels(),
                field.channels()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, field: &Field) -> Result<Field> {
        self.check(field)?;
        let mut out = field.clone();
        for c in 0..self.channels() {
            let (m, s, tf) = (self.mean[c], self.std[c], self.transforms[c]);
            for x in out.channel_mut(c) {
                *x = ((tf.forward(*x as f64) - m) / s) as f32;
            }
        }
        Field::new(out.channels(), out.height(), out.width(), out.into_values())
    }

    pub fn invert(&self, field: &Field) -> Result<Field> {
        self.check(field)?;
        let mut out = field.clone();
        for c in 0..self.channels() {
            let (m, s, tf) = (self.mean[c], self.std[c], self.transforms[c]);
            for x in out.channel_mut(c) {
                *x = tf.inverse(*x as f64 * s + m) as f32;
            }
        }
        Field::new(out.channels(), out.height(), out.width(), out.into_values())
    }

    pub fn apply_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        let frames = traj.frames.iter().map(|f| self.apply(f)).collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { frames, ..traj.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Boundary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal, Normal};

    fn traj_from(channels: usize, values: Vec<f32>) -> Trajectory {
        let plane = values.len() / channels;
        let side = (plane as f64).sqrt() as usize;
        let f = Field::new(channels, side, side, values).unwrap();
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        Trajectory::new(vec![f], vec![], 1, Boundary::Periodic, names).unwrap()
    }

    fn skewness(x: &[f32]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        x.iter().map(|&v| (v as f64 - m).powi(3)).sum::<f64>() / n / var.powf(1.5)
    }

    #[test]
    fn constant_channel_is_rejected() {
        let t = traj_from(1, vec![3.0; 64]);
        assert!(Normalizer::fit(&[t], &[ChannelTransform::Identity]).is_err());
        assert!(Normalizer::fit(&[], &[ChannelTransform::Identity]).is_err());
    }

    #[test]
    fn standardized_data_stays_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.0, 1.0).unwrap();
        let t = traj_from(1, (0..4096).map(|_| d.sample(&mut rng)).collect());
        let n = Normalizer::fit(std::slice::from_ref(&t), &[ChannelTransform::Identity]).unwrap();
        let y = n.apply(&t.frames[0]).unwrap();
        let vals = y.values();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-5);
        assert!(n.mean[0].abs() < 0.1 && (n.std[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn log1p_reduces_skew_of_lognormal_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = LogNormal::new(0.0, 1.0).unwrap();
        let raw: Vec<f32> = (0..4096).map(|_| d.sample(&mut rng) as f32).collect();
        let t = traj_from(1, raw.clone());
        let n = Normalizer::fit(std::slice::from_ref(&t), &[ChannelTransform::Log1p]).unwrap();
        let y = n.apply(&t.frames[0]).unwrap();
        assert!(skewness(y.values()).abs() < 0.5 * skewness(&raw).abs());
    }

    #[test]
    fn log1p_rejects_negative_input() {
        let t = traj_from(1, (0..16).map(|i| i as f32 - 3.0).collect());
        assert!(Normalizer::fit(&[t], &[ChannelTransform::Log1p]).is_err());
    }

    #[test]
    fn round_trip_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = LogNormal::new(0.5, 0.7).unwrap();
        let vals: Vec<f32> = (0..512).map(|_| d.sample(&mut rng) as f32).collect();
        let t = traj_from(2, vals);
        let n = Normalizer::fit(std::slice::from_ref(&t), &[ChannelTransform::Identity, ChannelTransform::Log1p])
            .unwrap();
        let back = n.invert(&n.apply(&t.frames[0]).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(t.frames[0].values()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }
}
