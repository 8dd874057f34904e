//! Gray-Scott reaction-diffusion with explicit Euler and a 5-point Laplacian.
//!
//! `du = D_u lap u - u v^2 + F (1 - u)`, `dv = D_v lap v + u v^2 - (F + k) v`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Boundary, Field, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayScottParams {
    pub feed: f64,
    pub kill: f64,
    pub du: f64,
    pub dv: f64,
    pub dt: f64,
}

impl GrayScottParams {
    pub fn new(feed: f64, kill: f64) -> Self {
        Self { feed, kill, du: 0.16, dv: 0.08, dt: 1.0 }
    }

    fn check_stable(&self) -> Result<()> {
        let courant = self.dt * self.du.max(self.dv) * 4.0;
        if !(courant < 1.0) || self.du < 0.0 || self.dv < 0.0 || !(self.dt > 0.0) {
            return Err(Error::Invalid(format!(
                "unstable explicit step: dt * max(D) * 4 = {courant:.4} must be < 1 (dt={}, du={}, dv={})",
                self.dt, self.du, self.dv
            )));
        }
        Ok(())
    }
}

fn laplacian(src: &[f64], h: usize, w: usize, boundary: Boundary, out: &mut [f64]) {
    for y in 0..h {
        let (yn, ys) = match boundary {
            Boundary::Periodic => ((y + h - 1) % h, (y + 1) % h),
            Boundary::Open => (y.saturating_sub(1), (y + 1).min(h - 1)),
        };
        for x in 0..w {
            let (xw, xe) = match boundary {
                Boundary::Periodic => ((x + w - 1) % w, (x + 1) % w),
                Boundary::Open => (x.saturating_sub(1), (x + 1).min(w - 1)),
            };
            out[y * w + x] =
                src[yn * w + x] + src[ys * w + x] + src[y * w + xw] + src[y * w + xe] - 4.0 * src[y * w + x];
        }
    }
}

/// One explicit Euler step in place. `u` and `v` are row-major `[H, W]`.
pub fn gs_step(u: &mut [f64], v: &mut [f64], h: usize, w: usize, p: &GrayScottParams, boundary: Boundary) {
    let mut lu = vec![0.0; h * w];
    let mut lv = vec![0.0; h * w];
    laplacian(u, h, w, boundary, &mut lu);
    laplacian(v, h, w, boundary, &mut lv);
    for i in 0..h * w {
        let uvv = u[i] * v[i] * v[i];
        let du = p.du * lu[i] - uvv + p.feed * (1.0 - u[i]);
        let dv = p.dv * lv[i] + uvv - (p.feed + p.kill) * v[i];
        u[i] += p.dt * du;
        v[i] += p.dt * dv;
    }
}

fn seed_state(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![1.0; h * w];
    let mut v = vec![0.0; h * w];
    let side = (h.min(w) / 8).max(2);
    let squares = rng.random_range(1..=4);
    for _ in 0..squares {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        for dy in 0..side {
            for dx in 0..side {
                let i = ((y0 + dy) % h) * w + (x0 + dx) % w;
                u[i] = 0.5;
                v[i] = 0.25;
            }
        }
    }
    for i in 0..h * w {
        u[i] += 0.01 * (rng.random::<f64>() - 0.5);
        v[i] = (v[i] + 0.01 * (rng.random::<f64>() - 0.5)).max(0.0);
    }
    (u, v)
}

fn to_field(u: &[f64], v: &[f64], h: usize, w: usize) -> Result<Field> {
    let values = u.iter().chain(v).map(|&x| x as f32).collect();
    Field::new(2, h, w, values)
}

/// Gray-Scott trajectory with `steps + 1` frames and `substeps` solver steps between frames.
pub fn gen_grayscott(
    params: &GrayScottParams,
    boundary: Boundary,
    h: usize,
    w: usize,
    steps: usize,
    substeps: u32,
    seed: u64,
) -> Result<Trajectory> {
    params.check_stable()?;
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Invalid(format!("grid {h}x{w} is not a power of two")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut u, mut v) = seed_state(h, w, &mut rng);
    let mut frames = vec![to_field(&u, &v, h, w)?];
    for frame in 1..=steps {
        for sub in 0..substeps {
            gs_step(&mut u, &mut v, h, w, params, boundary);
            if let Some(i) = u.iter().chain(&v).position(|x| !x.is_finite()) {
                return Err(Error::numerical(
                    "gen_grayscott",
                    format!("non-finite state at frame {frame}, substep {sub}, flat index {i}"),
                ));
            }
        }
        frames.push(to_field(&u, &v, h, w)?);
    }
    let theta = vec![params.feed as f32, params.kill as f32];
    Trajectory::new(frames, theta, substeps, boundary, vec!["u".into(), "v".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rates_and_uniform_state_stay_constant() {
        let p = GrayScottParams { feed: 0.0, kill: 0.0, du: 0.0, dv: 0.0, dt: 1.0 };
        let mut u = vec![0.3; 64];
        let mut v = vec![0.0; 64];
        for _ in 0..10 {
            gs_step(&mut u, &mut v, 8, 8, &p, Boundary::Periodic);
        }
        assert!(u.iter().all(|&x| x == 0.3) && v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_feed_and_kill_conserve_u_plus_v() {
        let p = GrayScottParams { feed: 0.0, kill: 0.0, du: 0.0, dv: 0.0, dt: 1.0 };
        let mut u = vec![0.3; 64];
        let mut v = vec![0.2; 64];
        for _ in 0..10 {
            gs_step(&mut u, &mut v, 8, 8, &p, Boundary::Periodic);
        }
        for i in 0..64 {
            assert!((u[i] + v[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unreacted_state_is_fixed_point() {
        let p = GrayScottParams::new(0.035, 0.06);
        let mut u = vec![1.0; 256];
        let mut v = vec![0.0; 256];
        for _ in 0..20 {
            gs_step(&mut u, &mut v, 16, 16, &p, Boundary::Open);
        }
        assert!(u.iter().all(|&x| x == 1.0) && v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn halving_dt_agrees_to_first_order() {
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (u0, v0) = seed_state(h, w, &mut rng);
        let run = |dt: f64, n: usize| {
            let p = GrayScottParams { dt, ..GrayScottParams::new(0.04, 0.06) };
            let (mut u, mut v) = (u0.clone(), v0.clone());
            for _ in 0..n {
                gs_step(&mut u, &mut v, h, w, &p, Boundary::Periodic);
            }
            (u, v)
        };
        let (ua, _) = run(1.0, 10);
        let (ub, _) = run(0.5, 20);
        let (uc, _) = run(0.25, 40);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let e1 = diff(&ua, &ub);
        let e2 = diff(&ub, &uc);
        assert!(e1 < 0.1, "coarse/fine gap {e1}");
        // first-order scheme: gap halves with dt
        assert!(e2 < 0.7 * e1, "{e2} vs {e1}");
    }

    #[test]
    fn rejects_unstable_step() {
        let p = GrayScottParams { dt: 2.0, ..GrayScottParams::new(0.04, 0.06) };
        assert!(matches!(gen_grayscott(&p, Boundary::Periodic, 8, 8, 1, 1, 0), Err(Error::Invalid(_))));
    }

    #[test]
    fn stays_bounded_in_standard_box() {
        for (i, (f, k)) in [(0.01, 0.045), (0.06, 0.07), (0.035, 0.06), (0.025, 0.055)].into_iter().enumerate() {
            for boundary in [Boundary::Periodic, Boundary::Open] {
                let t = gen_grayscott(&GrayScottParams::new(f, k), boundary, 32, 32, 10, 40, i as u64).unwrap();
                for fr in &t.frames {
                    assert!(fr.values().iter().all(|&x| (0.0..=1.5).contains(&x)));
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let p = GrayScottParams::new(0.04, 0.06);
        let a = gen_grayscott(&p, Boundary::Periodic, 16, 16, 3, 5, 9).unwrap();
        let b = gen_grayscott(&p, Boundary::Periodic, 16, 16, 3, 5, 9).unwrap();
        assert_eq!(a, b);
    }
}
