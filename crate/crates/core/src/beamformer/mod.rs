//! Covariance estimation, closed-form and recurrent beamformers.

mod classic;
mod covariance;
mod recurrent;

pub use classic::{
    gev_weights, load_diagonal, mvdr_weights, mvdr_with_steering, pca_steering, reference_rescale, DEFAULT_LOADING,
};
pub use covariance::{
    chunk_covariance, crf_chunk_covariance, frame_covariance, layer_normalize_cov, mask_denominator,
    mask_normalize, CovarianceNorm, CovarianceSequence, MASK_FLOOR,
};
pub use recurrent::{weights_from_tensor, BeamformerConfig, GrnnBf, RecurrentBeamformer, RnnGev, LAYER_NORM_EPS};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamformerKind {
    Mvdr,
    Gev,
    RnnGev,
    GrnnBf,
}

impl BeamformerKind {
    pub const ALL: [BeamformerKind; 4] = [Self::Mvdr, Self::Gev, Self::RnnGev, Self::GrnnBf];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mvdr => "mvdr",
            Self::Gev => "gev",
            Self::RnnGev => "rnn-gev",
            Self::GrnnBf => "grnn-bf",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Self::RnnGev | Self::GrnnBf)
    }
}

impl fmt::Display for BeamformerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BeamformerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown beamformer kind '{s}' (valid: mvdr, gev, rnn-gev, grnn-bf)"
            ))
        })
    }
}

/// Covariance normalization feeding a recurrent beamformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    MaskNorm,
    LayerNorm,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::MaskNorm => "mask-norm",
            Self::LayerNorm => "layer-norm",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::MaskNorm => "MN",
            Self::LayerNorm => "LN",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-norm" => Ok(Self::MaskNorm),
            "layer-norm" => Ok(Self::LayerNorm),
            _ => Err(Error::Config(format!(
                "unknown normalization '{s}' (valid: mask-norm, layer-norm)"
            ))),
        }
    }
}

/// Complex weights, either one vector per bin (chunk level, stored with a
/// single frame) or one per frame and bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    data: Array3<Complex64>,
    chunk: bool,
    kind: BeamformerKind,
}

impl BeamWeights {
    /// `[F, M]` weights shared by all frames.
    pub fn chunk(w: Array2<Complex64>, kind: BeamformerKind) -> Result<Self> {
        let (f, m) = w.dim();
        Self::checked(w.into_shape_with_order((1, f, m)).expect("contiguous"), true, kind)
    }

    /// `[T, F, M]` frame-level weights.
    pub fn frames(w: Array3<Complex64>, kind: BeamformerKind) -> Result<Self> {
        Self::checked(w, false, kind)
    }

    fn checked(data: Array3<Complex64>, chunk: bool, kind: BeamformerKind) -> Result<Self> {
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Shape("non-finite beamforming weight".into()));
        }
        Ok(Self { data, chunk, kind })
    }

    pub fn is_chunk(&self) -> bool {
        self.chunk
    }

    pub fn kind(&self) -> BeamformerKind {
        self.kind
    }

    /// `[T or 1, F, M]`.
    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    /// Weight vector at frame `t`, bin `f`.
    pub fn at(&self, t: usize, f: usize) -> ndarray::ArrayView1<'_, Complex64> {
        let t = if self.chunk { 0 } else { t };
        self.data.slice(ndarray::s![t, f, ..])
    }
}

/// `Ŝ(t,f) = w(t,f)ᴴ Y(t,f)`, one output channel.
pub fn apply_beamformer(w: &BeamWeights, y: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let (t, f, m) = y.data().dim();
    let (wt, wf, wm) = w.data.dim();
    if wf != f || wm != m || (!w.chunk && wt != t) {
        return Err(Error::Shape(format!(
            "weights [{wt}, {wf}, {wm}] vs spectrogram [{t}, {f}, {m}]"
        )));
    }
    let out = Array3::from_shape_fn((t, f, 1), |(ti, fi, _)| {
        w.at(ti, fi)
            .iter()
            .zip(y.data().slice(ndarray::s![ti, fi, ..]))
            .map(|(a, b)| a.conj() * b)
            .sum()
    });
    y.with_data(out)
}
