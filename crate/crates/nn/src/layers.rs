use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::init;
pub use crate::ops::ConvMode;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Affine map `x W^T + b`, weights and bias uniform in ±1/√fan_in.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), init::uniform(rng, &[out, inp], bound))?;
        let bias = store.register(format!("{name}.bias"), init::uniform(rng, &[out], bound))?;
        Ok(Self { weight, bias, inp, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let slope = store.register(format!("{name}.slope"), Tensor::full(&[channels], T::lit(0.25)))?;
        Ok(Self { slope })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.param(self.slope);
        g.prelu(x, s)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub mode: ConvMode,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        mode: ConvMode,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 || dilation == 0 {
            return Err(NnError::InvalidConfig(format!(
                "conv1d `{name}`: kernel must be odd and dilation >= 1 (k = {kernel}, d = {dilation})"
            )));
        }
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), init::uniform(rng, &[cout, cin, kernel], bound))?;
        let bias = store.register(format!("{name}.bias"), init::uniform(rng, &[cout], bound))?;
        Ok(Self {
            weight,
            bias,
            dilation,
            mode,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv1d(x, w, b, self.dilation, self.mode)
    }
}

#[derive(Debug, Clone)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

/// Stacked unidirectional GRU running forward in time over `[T, B, D]`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
    pub hidden: usize,
}

impl Gru {
    /// Input weights and biases uniform in ±1/√H; recurrent weights
    /// orthogonal per gate block.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || num_layers == 0 {
            return Err(NnError::InvalidConfig(format!("gru `{name}` needs hidden and layers >= 1")));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { inp } else { hidden };
            let w_ih = store.register(format!("{name}.l{l}.w_ih"), init::uniform(rng, &[3 * hidden, d], bound))?;
            let mut recurrent = Vec::with_capacity(3 * hidden * hidden);
            for _ in 0..3 {
                recurrent.extend(init::orthogonal(rng, hidden));
            }
            let w_hh = store.register(format!("{name}.l{l}.w_hh"), Tensor::from_f64(&[3 * hidden, hidden], &recurrent)?)?;
            let b_ih = store.register(format!("{name}.l{l}.b_ih"), init::uniform(rng, &[3 * hidden], bound))?;
            let b_hh = store.register(format!("{name}.l{l}.b_hh"), init::uniform(rng, &[3 * hidden], bound))?;
            layers.push(GruLayer { w_ih, w_hh, b_ih, b_hh });
        }
        Ok(Self { layers, hidden })
    }

    /// Output hidden states of the top layer, `[T, B, H]`, from zero state.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(NnError::Shape {
                op: "gru",
                detail: format!("expected [T, B, D], got {shape:?}"),
            });
        }
        let h0 = g.constant(Tensor::zeros(&[shape[1], self.hidden]));
        let mut h = x;
        for layer in &self.layers {
            let (wi, wh, bi, bh) = (
                g.param(layer.w_ih),
                g.param(layer.w_hh),
                g.param(layer.b_ih),
                g.param(layer.b_hh),
            );
            h = g.gru_layer(h, wi, wh, bi, bh, h0)?;
        }
        Ok(h)
    }
}
