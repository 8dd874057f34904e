//! Parameterized layers built on [`Graph`] primitives.

use rand::Rng;

use crate::{Graph, Padding, ParamId, ParamStore, Result, Tensor, Var};

/// Fully connected layer over the last axis: `y = x @ W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f32).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias, fan_in, fan_out }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape.iter().product::<usize>() / self.fan_in.max(1);
        let flat = g.reshape(x, &[rows, self.fan_in])?;
        let w = g.param(store, self.weight);
        let mut y = g.matmul(flat, w, false, false)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_trailing(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        g.reshape(y, &out_shape)
    }
}

/// Channels-last stride-1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl Conv2d {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        padding: Padding,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let std = gain / ((kernel * kernel * cin) as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[kernel, kernel, cin, cout], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, padding }
    }

    /// Wraps an explicit kernel `[k, k, cin, cout]`.
    pub fn from_kernel(store: &mut ParamStore, name: &str, kernel: Tensor, padding: Padding) -> Self {
        let cout = kernel.shape()[3];
        let weight = store.add(format!("{name}.weight"), kernel);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, self.padding)?;
        let b = g.param(store, self.bias);
        g.add_trailing(y, b)
    }
}

/// Layer normalization over the last axis with optional learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))),
                Some(store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))),
            )
        } else {
            (None, None)
        };
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = g.layer_norm(x, self.eps)?;
        if let Some(gamma) = self.gamma {
            let gv = g.param(store, gamma);
            y = g.mul_trailing(y, gv)?;
        }
        if let Some(beta) = self.beta {
            let bv = g.param(store, beta);
            y = g.add_trailing(y, bv)?;
        }
        Ok(y)
    }
}
