use rand::Rng;
use rnnbf_nn::{Graph, Gru, LayerNorm, Linear, PRelu, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{BeamWeights, BeamformerKind, CovarianceNorm, CovarianceSequence, NormMode, DEFAULT_LOADING};
use crate::error::{Error, Result};
use crate::graph_ops::{complex_matmul, mask_norm};

/// Layer norm epsilon inside the variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformerConfig {
    pub kind: BeamformerKind,
    pub normalization: NormMode,
    /// Relative diagonal loading for the closed-form solvers.
    pub loading: f64,
    pub hidden: usize,
    pub rnn_layers: usize,
    /// Width of the PReLU layer before the weight output.
    pub dnn_hidden: usize,
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        Self {
            kind: BeamformerKind::GrnnBf,
            normalization: NormMode::LayerNorm,
            loading: DEFAULT_LOADING,
            hidden: 64,
            rnn_layers: 2,
            dnn_hidden: 64,
        }
    }
}

impl BeamformerConfig {
    /// 500-unit GRUs and DNN layer.
    pub fn full_scale(kind: BeamformerKind, normalization: NormMode) -> Self {
        Self {
            kind,
            normalization,
            hidden: 500,
            dnn_hidden: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::Config(format!("diagonal loading {} must be finite and >= 0", self.loading)));
        }
        if self.kind.is_recurrent() && (self.hidden == 0 || self.rnn_layers == 0 || self.dnn_hidden == 0) {
            return Err(Error::Config("recurrent beamformer sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shrink the output layer and bias it toward selecting the reference mic.
fn selector_init<T: Real>(store: &mut ParamStore<T>, out: &Linear) -> Result<()> {
    let w: Vec<T> = store.value(out.weight).data().iter().map(|v| *v * T::lit(0.1)).collect();
    store.set(out.weight, &w)?;
    let mut b = vec![T::zero(); store.value(out.bias).len()];
    b[0] = T::one();
    store.set(out.bias, &b)?;
    Ok(())
}

/// Unified GRU-DNN mapping `[Φ_N, Φ_S]` to frame-level weights.
#[derive(Debug, Clone)]
pub struct GrnnBf {
    gru: Gru,
    dnn: Linear,
    act: PRelu,
    out: Linear,
}

impl GrnnBf {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BeamformerConfig,
        mics: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mm2 = 2 * mics * mics;
        let gru = Gru::new(store, "bf.gru", 2 * mm2, cfg.hidden, cfg.rnn_layers, rng)?;
        let dnn = Linear::new(store, "bf.dnn", cfg.hidden, cfg.dnn_hidden, rng)?;
        let act = PRelu::new(store, "bf.act", cfg.dnn_hidden)?;
        let out = Linear::new(store, "bf.out", cfg.dnn_hidden, 2 * mics, rng)?;
        selector_init(store, &out)?;
        Ok(Self { gru, dnn, act, out })
    }

    /// `[T, F, 2M²]` pair to `[T, F, 2M]`, frequency acting as the batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, phi_s: Var, phi_n: Var) -> Result<Var> {
        let x = g.concat_last(&[phi_n, phi_s])?;
        let h = self.gru.forward(g, x)?;
        let h = self.dnn.forward(g, h)?;
        let h = self.act.forward(g, h)?;
        Ok(self.out.forward(g, h)?)
    }
}

/// Two GRUs standing in for `Φ_N⁻¹` and `Φ_S`, their complex product, then
/// a DNN to weights.
#[derive(Debug, Clone)]
pub struct RnnGev {
    gru_n: Gru,
    proj_n: Linear,
    gru_s: Gru,
    proj_s: Linear,
    dnn: Linear,
    act: PRelu,
    out: Linear,
}

impl RnnGev {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BeamformerConfig,
        mics: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mm2 = 2 * mics * mics;
        let gru_n = Gru::new(store, "bf.gru_n", mm2, cfg.hidden, cfg.rnn_layers, rng)?;
        let proj_n = Linear::new(store, "bf.proj_n", cfg.hidden, mm2, rng)?;
        let gru_s = Gru::new(store, "bf.gru_s", mm2, cfg.hidden, cfg.rnn_layers, rng)?;
        let proj_s = Linear::new(store, "bf.proj_s", cfg.hidden, mm2, rng)?;
        let dnn = Linear::new(store, "bf.dnn", mm2, cfg.dnn_hidden, rng)?;
        let act = PRelu::new(store, "bf.act", cfg.dnn_hidden)?;
        let out = Linear::new(store, "bf.out", cfg.dnn_hidden, 2 * mics, rng)?;
        selector_init(store, &out)?;
        Ok(Self {
            gru_n,
            proj_n,
            gru_s,
            proj_s,
            dnn,
            act,
            out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, phi_s: Var, phi_n: Var) -> Result<Var> {
        let hn = self.gru_n.forward(g, phi_n)?;
        let inv_n = self.proj_n.forward(g, hn)?;
        let hs = self.gru_s.forward(g, phi_s)?;
        let s = self.proj_s.forward(g, hs)?;
        let prod = complex_matmul(g, inv_n, s)?;
        let h = self.dnn.forward(g, prod)?;
        let h = self.act.forward(g, h)?;
        Ok(self.out.forward(g, h)?)
    }
}

#[derive(Debug, Clone)]
enum Net {
    RnnGev(RnnGev),
    GrnnBf(GrnnBf),
}

/// Covariance normalization plus a recurrent weight predictor.
#[derive(Debug, Clone)]
pub struct RecurrentBeamformer {
    kind: BeamformerKind,
    norm: NormMode,
    mics: usize,
    layer_norms: Option<(LayerNorm, LayerNorm)>,
    net: Net,
}

impl RecurrentBeamformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BeamformerConfig,
        mics: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mm2 = 2 * mics * mics;
        let layer_norms = match cfg.normalization {
            NormMode::LayerNorm => {
                let mut s = LayerNorm::new(store, "bf.norm_s", mm2)?;
                let mut n = LayerNorm::new(store, "bf.norm_n", mm2)?;
                s.eps = LAYER_NORM_EPS;
                n.eps = LAYER_NORM_EPS;
                Some((s, n))
            }
            NormMode::MaskNorm => None,
        };
        let net = match cfg.kind {
            BeamformerKind::RnnGev => Net::RnnGev(RnnGev::new(store, cfg, mics, rng)?),
            BeamformerKind::GrnnBf => Net::GrnnBf(GrnnBf::new(store, cfg, mics, rng)?),
            other => {
                return Err(Error::Config(format!("{other} has no recurrent network")));
            }
        };
        Ok(Self {
            kind: cfg.kind,
            norm: cfg.normalization,
            mics,
            layer_norms,
            net,
        })
    }

    pub fn kind(&self) -> BeamformerKind {
        self.kind
    }

    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn mics(&self) -> usize {
        self.mics
    }

    /// Normalize raw `[T, F, 2M²]` covariances. Mask normalization divides by
    /// the center taps of the corresponding `[T, F, taps, 2]` filters.
    pub fn normalize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        raw_s: Var,
        raw_n: Var,
        crf_s: Var,
        crf_n: Var,
    ) -> Result<(Var, Var)> {
        match &self.layer_norms {
            Some((ls, ln)) => Ok((ls.forward(g, raw_s)?, ln.forward(g, raw_n)?)),
            None => Ok((mask_norm(g, raw_s, crf_s)?, mask_norm(g, raw_n, crf_n)?)),
        }
    }

    /// Normalized covariances to `[T, F, 2M]` weights (real block, imaginary block).
    pub fn weights<T: Real>(&self, g: &mut Graph<'_, T>, phi_s: Var, phi_n: Var) -> Result<Var> {
        match &self.net {
            Net::RnnGev(n) => n.forward(g, phi_s, phi_n),
            Net::GrnnBf(n) => n.forward(g, phi_s, phi_n),
        }
    }

    /// Weights from already normalized covariance sequences.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        phi_s: &CovarianceSequence,
        phi_n: &CovarianceSequence,
    ) -> Result<BeamWeights> {
        if phi_s.norm() != phi_n.norm() || phi_s.norm() == CovarianceNorm::Raw {
            return Err(Error::ModeMismatch(format!(
                "speech covariance is {:?}, noise covariance is {:?}",
                phi_s.norm(),
                phi_n.norm()
            )));
        }
        let expected = match self.norm {
            NormMode::LayerNorm => CovarianceNorm::LayerNormalized,
            NormMode::MaskNorm => CovarianceNorm::MaskNormalized,
        };
        if phi_s.norm() != expected {
            return Err(Error::ModeMismatch(format!(
                "{} network given {:?} covariances",
                self.norm,
                phi_s.norm()
            )));
        }
        if phi_s.data().dim() != phi_n.data().dim() || phi_s.mics() != self.mics {
            return Err(Error::Shape(format!(
                "covariances {:?}/{:?} for {} mics",
                phi_s.data().dim(),
                phi_n.data().dim(),
                self.mics
            )));
        }
        let (frames, bins) = (phi_s.frames(), phi_s.bins());
        let mut g = Graph::inference(store);
        let to_var = |g: &mut Graph<'_, T>, c: &CovarianceSequence| -> Result<Var> {
            let flat = c.flatten();
            let shape = flat.shape().to_vec();
            Ok(g.constant(Tensor::from_f64(&shape, flat.as_slice().expect("standard layout"))?))
        };
        let s = to_var(&mut g, phi_s)?;
        let n = to_var(&mut g, phi_n)?;
        let w = self.weights(&mut g, s, n)?;
        weights_from_tensor(g.value(w), frames, bins, self.mics, self.kind)
    }
}

/// `[T, F, 2M]` blocked real tensor to complex frame-level weights.
pub fn weights_from_tensor<T: Real>(
    w: &Tensor<T>,
    frames: usize,
    bins: usize,
    mics: usize,
    kind: BeamformerKind,
) -> Result<BeamWeights> {
    if w.shape() != [frames, bins, 2 * mics] {
        return Err(Error::Shape(format!("weight tensor {:?}", w.shape())));
    }
    let d = w.to_f64_vec();
    let data = ndarray::Array3::from_shape_fn((frames, bins, mics), |(t, f, m)| {
        let base = (t * bins + f) * 2 * mics;
        num_complex::Complex64::new(d[base + m], d[base + mics + m])
    });
    BeamWeights::frames(data, kind)
}
