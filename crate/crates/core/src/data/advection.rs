//! Periodic advection-diffusion solved exactly in Fourier space.
//!
//! On an `H x W` grid with unit spacing, mode `(my, mx)` carries wavenumber
//! `k = 2 pi (my / H, mx / W)` and evolves as
//! `u_k(t) = u_k(0) exp(-i k.v t - nu |k|^2 t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Boundary, Field, Trajectory};
use crate::spectral::{signed_freq, Fft2};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvectionParams {
    /// Grid cells per unit time along (x, y).
    pub velocity: [f64; 2],
    pub diffusivity: f64,
}

fn wavenumbers(h: usize, w: usize, my: usize, mx: usize) -> (f64, f64) {
    let tau = std::f64::consts::TAU;
    (
        tau * signed_freq(mx, w) as f64 / w as f64,
        tau * signed_freq(my, h) as f64 / h as f64,
    )
}

/// Random smooth periodic field with unit spatial standard deviation plus a random mean.
///
/// Fourier amplitudes follow a Gaussian envelope of width `max(H, W) / 8`;
/// Nyquist rows/columns are left empty so phase shifts keep the field real.
pub fn random_smooth_field<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let fft = Fft2::new(h, w);
    let noise: Vec<f32> = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let mut spec = fft.forward_real(&noise);
    let width = (h.max(w) as f64 / 8.0).max(1.0);
    for my in 0..h {
        for mx in 0..w {
            let (fy, fx) = (signed_freq(my, h), signed_freq(mx, w));
            let nyquist = (h > 1 && fy == -(h as i64) / 2) || (w > 1 && fx == -(w as i64) / 2);
            let r2 = (fy * fy + fx * fx) as f64;
            let env = if nyquist || r2 == 0.0 { 0.0 } else { (-0.5 * r2 / (width * width)).exp() };
            spec[my * w + mx] *= env;
        }
    }
    let u = fft.inverse_real(&spec);
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let std = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let offset = 0.5 * rng.sample::<f64, _>(StandardNormal);
    u.iter().map(|v| ((v - mean) / std + offset) as f32).collect()
}

/// Exact advection-diffusion of `u0` for time `t`. Returns `(u, -lap u)`.
pub fn advect_exact(u0: &[f32], h: usize, w: usize, params: &AdvectionParams, t: f64) -> (Vec<f32>, Vec<f32>) {
    let fft = Fft2::new(h, w);
    let spec0 = fft.forward_real(u0);
    let mut spec = spec0.clone();
    let mut lap = spec0;
    for my in 0..h {
        for mx in 0..w {
            let (kx, ky) = wavenumbers(h, w, my, mx);
            let k2 = kx * kx + ky * ky;
            let phase = -(kx * params.velocity[0] + ky * params.velocity[1]) * t;
            let decay = (-params.diffusivity * k2 * t).exp();
            let factor = Complex64::from_polar(decay, phase);
            let i = my * w + mx;
            spec[i] *= factor;
            lap[i] = spec[i] * k2;
        }
    }
    let u = fft.inverse_real(&spec).into_iter().map(|v| v as f32).collect();
    let vort = fft.inverse_real(&lap).into_iter().map(|v| v as f32).collect();
    (u, vort)
}

/// Advection trajectory with `steps + 1` frames spaced `stride` time units apart.
///
/// Channels: the transported scalar `u` and the vorticity-like `-lap u`.
pub fn gen_advection(
    params: &AdvectionParams,
    h: usize,
    w: usize,
    steps: usize,
    stride: u32,
    seed: u64,
) -> Result<Trajectory> {
    if params.diffusivity < 0.0 || !params.diffusivity.is_finite() {
        return Err(Error::Invalid(format!("diffusivity must be >= 0, got {}", params.diffusivity)));
    }
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Invalid(format!("grid {h}x{w} is not a power of two")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0 = random_smooth_field(h, w, &mut rng);
    let mut frames = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let (u, vort) = advect_exact(&u0, h, w, params, i as f64 * stride as f64);
        let mut values = u;
        values.extend_from_slice(&vort);
        frames.push(Field::new(2, h, w, values)?);
    }
    let theta = vec![params.velocity[0] as f32, params.velocity[1] as f32, params.diffusivity as f32];
    Trajectory::new(frames, theta, stride, Boundary::Periodic, vec!["u".into(), "vorticity".into()])
}
