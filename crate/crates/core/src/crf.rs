//! Complex ratio filters and the dilated-convolution network that predicts
//! them.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;
use rand::Rng;
use rnnbf_nn::{Conv1d, ConvMode, Graph, LayerNorm, Linear, PRelu, ParamStore, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Taps span `-κ..=κ` in time and frequency.
    pub crf_half_width: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            layers_per_block: 4,
            channels: 64,
            kernel: 3,
            crf_half_width: 1,
        }
    }
}

impl EstimatorConfig {
    /// Four blocks of eight 256-channel layers.
    pub fn full_scale() -> Self {
        Self {
            blocks: 4,
            layers_per_block: 8,
            channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 || self.channels == 0 || self.kernel == 0 {
            return Err(Error::Config("estimator sizes must be at least 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("estimator kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// `(2κ + 1)²`.
    pub fn taps(&self) -> usize {
        (2 * self.crf_half_width + 1).pow(2)
    }

    /// Real outputs of one head: taps × (re, im) × bins.
    pub fn head_dim(&self, bins: usize) -> usize {
        bins * self.taps() * 2
    }
}

/// One complex ratio filter per T-F bin, `[T, F, 2κ+1, 2κ+1]`, indexed
/// `[t, f, τ1 + κ, τ2 + κ]` with `τ1` the frame offset and `τ2` the bin
/// offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Crf {
    taps: Array4<Complex64>,
}

impl Crf {
    pub fn new(taps: Array4<Complex64>) -> Result<Self> {
        let (_, _, a, b) = taps.dim();
        if a != b || a % 2 == 0 {
            return Err(Error::Shape(format!("cRF taps must be square and odd, got {a}x{b}")));
        }
        if taps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Shape("non-finite cRF tap".into()));
        }
        Ok(Self { taps })
    }

    /// Identity filter: center tap 1.
    pub fn identity(frames: usize, bins: usize, half_width: usize) -> Self {
        let k = 2 * half_width + 1;
        let mut taps = Array4::zeros((frames, bins, k, k));
        for t in 0..frames {
            for f in 0..bins {
                taps[[t, f, half_width, half_width]] = Complex64::new(1.0, 0.0);
            }
        }
        Self { taps }
    }

    pub fn half_width(&self) -> usize {
        self.taps.dim().2 / 2
    }

    pub fn taps(&self) -> &Array4<Complex64> {
        &self.taps
    }

    /// Center units (the complex ratio mask), `[T, F]`.
    pub fn center(&self) -> Array2<Complex64> {
        let k = self.half_width();
        self.taps.slice(ndarray::s![.., .., k, k]).to_owned()
    }

    /// From a real `[T, F, taps, 2]` buffer as produced by an estimator head.
    pub fn from_real(frames: usize, bins: usize, half_width: usize, data: &[f64]) -> Result<Self> {
        let k = 2 * half_width + 1;
        if data.len() != frames * bins * k * k * 2 {
            return Err(Error::Shape(format!(
                "{} values for a [{frames}, {bins}, {k}, {k}] cRF",
                data.len()
            )));
        }
        let taps = Array4::from_shape_fn((frames, bins, k, k), |(t, f, a, b)| {
            let i = (((t * bins + f) * k + a) * k + b) * 2;
            Complex64::new(data[i], data[i + 1])
        });
        Self::new(taps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfPair {
    pub speech: Crf,
    pub noise: Crf,
}

/// `Ŝ_m(t,f) = Σ_{τ1,τ2} cRF(t+τ1, f+τ2)[τ1,τ2] · Y_m(t+τ1, f+τ2)`, zero
/// outside the grid; the same filter for every channel.
pub fn apply_crf(spec: &ComplexSpectrogram, crf: &Crf) -> Result<ComplexSpectrogram> {
    let (frames, bins, mics) = spec.data().dim();
    let (ct, cf, _, _) = crf.taps.dim();
    if (ct, cf) != (frames, bins) {
        return Err(Error::Shape(format!(
            "cRF grid {ct}x{cf} vs spectrogram {frames}x{bins}"
        )));
    }
    let kappa = crf.half_width() as isize;
    let y = spec.data();
    let mut out = Array3::<Complex64>::zeros((frames, bins, mics));
    for t in 0..frames {
        for f in 0..bins {
            for d1 in -kappa..=kappa {
                let u = t as isize + d1;
                if u < 0 || u >= frames as isize {
                    continue;
                }
                for d2 in -kappa..=kappa {
                    let v = f as isize + d2;
                    if v < 0 || v >= bins as isize {
                        continue;
                    }
                    let (u, v) = (u as usize, v as usize);
                    let c = crf.taps[[u, v, (d1 + kappa) as usize, (d2 + kappa) as usize]];
                    for m in 0..mics {
                        out[[t, f, m]] += c * y[[u, v, m]];
                    }
                }
            }
        }
    }
    spec.with_data(out)
}

/// Temporal convolution network over feature frames with a speech head and
/// a noise head.
///
/// Input layer norm and projection to `C` channels, then `B × L` residual
/// layers `x + LN(PReLU(conv_d(x)))` with dilation `2^l` inside each block,
/// then two affine heads with tanh.
#[derive(Debug, Clone)]
pub struct CrfEstimator {
    pub config: EstimatorConfig,
    pub bins: usize,
    in_norm: LayerNorm,
    in_proj: Linear,
    layers: Vec<(Conv1d, PRelu, LayerNorm)>,
    head_speech: Linear,
    head_noise: Linear,
}

impl CrfEstimator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: EstimatorConfig,
        feature_dim: usize,
        bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let in_norm = LayerNorm::new(store, "est.in_norm", feature_dim)?;
        let in_proj = Linear::new(store, "est.in_proj", feature_dim, c, rng)?;
        let mut layers = Vec::new();
        for b in 0..config.blocks {
            for l in 0..config.layers_per_block {
                let name = format!("est.b{b}.l{l}");
                let conv = Conv1d::new(
                    store,
                    &format!("{name}.conv"),
                    c,
                    c,
                    config.kernel,
                    1 << l,
                    ConvMode::Centered,
                    rng,
                )?;
                let act = PRelu::new(store, &format!("{name}.act"), c)?;
                let norm = LayerNorm::new(store, &format!("{name}.norm"), c)?;
                layers.push((conv, act, norm));
            }
        }
        let head_dim = config.head_dim(bins);
        let head_speech = Linear::new(store, "est.head_speech", c, head_dim, rng)?;
        let head_noise = Linear::new(store, "est.head_noise", c, head_dim, rng)?;
        Ok(Self {
            config,
            bins,
            in_norm,
            in_proj,
            layers,
            head_speech,
            head_noise,
        })
    }

    pub fn head_speech(&self) -> &Linear {
        &self.head_speech
    }

    pub fn head_noise(&self) -> &Linear {
        &self.head_noise
    }

    /// Features `[T, D]` to speech and noise filters, each `[T, F, taps, 2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<(Var, Var)> {
        let frames = g.shape(features)[0];
        let mut x = self.in_norm.forward(g, features)?;
        x = self.in_proj.forward(g, x)?;
        for (conv, act, norm) in &self.layers {
            let h = conv.forward(g, x)?;
            let h = act.forward(g, h)?;
            let h = norm.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let shape = [frames, self.bins, self.config.taps(), 2];
        let head = |g: &mut Graph<'_, T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, x)?;
            let y = g.tanh(y)?;
            Ok(g.reshape(y, &shape)?)
        };
        let s = head(g, &self.head_speech)?;
        let n = head(g, &self.head_noise)?;
        Ok((s, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_counts() {
        let cfg = EstimatorConfig::default();
        assert_eq!(cfg.taps(), 9);
        assert_eq!(cfg.head_dim(257), 257 * 18);
        assert!(EstimatorConfig { kernel: 2, ..cfg }.validate().is_err());
    }
}
