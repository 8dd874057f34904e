//! Two-dimensional FFT helpers over row-major `[H, W]` grids.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transform(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        for row in data.chunks_exact_mut(w) {
            rows.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = data[y * w + x];
            }
            cols.process(&mut col);
            for y in 0..h {
                data[y * w + x] = col[y];
            }
        }
    }

    /// Unnormalized forward transform of a real grid.
    pub fn forward_real(&self, values: &[f32]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.transform(&mut data, &self.row_fwd, &self.col_fwd);
        data
    }

    /// Inverse transform scaled by `1/(H W)`; returns real parts.
    pub fn inverse_real(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        self.transform(&mut data, &self.row_inv, &self.col_inv);
        let n = (self.height * self.width) as f64;
        data.iter().map(|c| c.re / n).collect()
    }
}

/// Signed frequency index of FFT bin `i` for a transform of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
