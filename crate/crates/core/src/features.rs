//! Estimator inputs: log-power spectrum, inter-channel phase differences and
//! the directional feature for a known target direction.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::array_sim::SteeringVector;
use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

pub const LPS_EPS: f64 = 1e-8;
// below this magnitude a bin has no usable phase
const PHASE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub ref_channel: usize,
    /// Microphone pairs `(i, j)`; `None` means every mic against mic 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            ref_channel: 0,
            pairs: None,
        }
    }
}

impl FeatureConfig {
    pub fn resolve_pairs(&self, mics: usize) -> Result<Vec<(usize, usize)>> {
        let pairs = match &self.pairs {
            Some(p) => p.clone(),
            None => default_pairs(mics),
        };
        validate_pairs(&pairs, mics)?;
        if self.ref_channel >= mics {
            return Err(Error::Config(format!(
                "ref_channel {} with {mics} microphones",
                self.ref_channel
            )));
        }
        Ok(pairs)
    }
}

/// `(m, 0)` for every `m ≥ 1`.
pub fn default_pairs(mics: usize) -> Vec<(usize, usize)> {
    (1..mics).map(|m| (m, 0)).collect()
}

fn validate_pairs(pairs: &[(usize, usize)], mics: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("at least one microphone pair is required".into()));
    }
    for &(i, j) in pairs {
        if i == j || i >= mics || j >= mics {
            return Err(Error::Config(format!("invalid pair ({i}, {j}) for {mics} mics")));
        }
    }
    Ok(())
}

/// Named column span of a feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    pub offset: usize,
    pub width: usize,
}

/// Column layout `LPS | (cos, sin) per pair | DF`, stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub bins: usize,
    pub pairs: Vec<(usize, usize)>,
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureLayout {
    pub fn new(bins: usize, pairs: &[(usize, usize)]) -> Self {
        let mut blocks = Vec::with_capacity(2 + 2 * pairs.len());
        let mut push = |name: String| {
            let offset = blocks.len() * bins;
            blocks.push(FeatureBlock {
                name,
                offset,
                width: bins,
            });
        };
        push("lps".into());
        for (i, j) in pairs {
            push(format!("ipd_cos_{i}_{j}"));
            push(format!("ipd_sin_{i}_{j}"));
        }
        push("df".into());
        Self {
            bins,
            pairs: pairs.to_vec(),
            blocks,
        }
    }

    /// Total width `F (2 + 2P)`.
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn block(&self, name: &str) -> Option<&FeatureBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("layout serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Layout(format!("unreadable layout: {e}")))
    }

    pub fn check_matches(&self, other: &FeatureLayout) -> Result<()> {
        if self != other {
            return Err(Error::Layout(format!(
                "expected {} features over {} bins and pairs {:?}, got {} over {} bins and pairs {:?}",
                self.dim(),
                self.bins,
                self.pairs,
                other.dim(),
                other.bins,
                other.pairs
            )));
        }
        Ok(())
    }
}

/// `[T, D]` real features plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array2<f64>,
    pub layout: FeatureLayout,
}

/// `log(|Y_ref|² + 1e-8)`, `[T, F]`.
pub fn lps(spec: &ComplexSpectrogram, ref_channel: usize) -> Result<Array2<f64>> {
    if ref_channel >= spec.channels() {
        return Err(Error::Shape(format!(
            "reference channel {ref_channel} of {}",
            spec.channels()
        )));
    }
    let y = spec.data();
    Ok(Array2::from_shape_fn((spec.frames(), spec.bins()), |(t, f)| {
        (y[[t, f, ref_channel]].norm_sqr() + LPS_EPS).ln()
    }))
}

/// Raw phase differences `angle(Y_i) - angle(Y_j)`, `[T, F, P]`; bins
/// where both channels are silent get 0.
pub fn ipd_phase(spec: &ComplexSpectrogram, pairs: &[(usize, usize)]) -> Result<Array3<f64>> {
    validate_pairs(pairs, spec.channels()).map_err(|e| Error::Shape(e.to_string()))?;
    let y = spec.data();
    Ok(Array3::from_shape_fn(
        (spec.frames(), spec.bins(), pairs.len()),
        |(t, f, p)| {
            let (i, j) = pairs[p];
            let (a, b) = (y[[t, f, i]], y[[t, f, j]]);
            if a.norm() < PHASE_FLOOR && b.norm() < PHASE_FLOOR {
                0.0
            } else {
                a.arg() - b.arg()
            }
        },
    ))
}

/// `(cos Δφ, sin Δφ)` per pair, `[T, F, P, 2]`.
pub fn ipd(spec: &ComplexSpectrogram, pairs: &[(usize, usize)]) -> Result<Array4<f64>> {
    let phase = ipd_phase(spec, pairs)?;
    let (t, f, p) = phase.dim();
    Ok(Array4::from_shape_fn((t, f, p, 2), |(ti, fi, pi, c)| {
        let d = phase[[ti, fi, pi]];
        if c == 0 {
            d.cos()
        } else {
            d.sin()
        }
    }))
}

/// Mean over pairs of `cos(Δφ_p - Δψ_p)` with `Δψ_p` the target steering
/// phase difference, `[T, F]`.
pub fn directional_feature(
    phase: &Array3<f64>,
    steering: &SteeringVector,
    pairs: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let (frames, bins, p) = phase.dim();
    if p != pairs.len() || steering.bins() != bins {
        return Err(Error::Shape(format!(
            "phase [{frames}, {bins}, {p}] vs {} pairs and {} steering bins",
            pairs.len(),
            steering.bins()
        )));
    }
    validate_pairs(pairs, steering.mics()).map_err(|e| Error::Shape(e.to_string()))?;
    let v = steering.values();
    let psi: Vec<f64> = (0..bins)
        .flat_map(|f| pairs.iter().map(move |&(i, j)| v[[f, i]].arg() - v[[f, j]].arg()))
        .collect();
    Ok(Array2::from_shape_fn((frames, bins), |(t, f)| {
        (0..p)
            .map(|k| (phase[[t, f, k]] - psi[f * p + k]).cos())
            .sum::<f64>()
            / p as f64
    }))
}

/// Full feature matrix for one utterance and target direction.
pub fn extract_features(
    spec: &ComplexSpectrogram,
    steering: &SteeringVector,
    cfg: &FeatureConfig,
) -> Result<FeatureTensor> {
    let pairs = cfg.resolve_pairs(spec.channels())?;
    if steering.mics() != spec.channels() {
        return Err(Error::Shape(format!(
            "steering vector for {} mics, spectrogram has {}",
            steering.mics(),
            spec.channels()
        )));
    }
    let layout = FeatureLayout::new(spec.bins(), &pairs);
    let (frames, bins) = (spec.frames(), spec.bins());
    let lps = lps(spec, cfg.ref_channel)?;
    let phase = ipd_phase(spec, &pairs)?;
    let df = directional_feature(&phase, steering, &pairs)?;
    let mut data = Array2::zeros((frames, layout.dim()));
    for t in 0..frames {
        let mut row = data.row_mut(t);
        for f in 0..bins {
            row[f] = lps[[t, f]];
            for (k, _) in pairs.iter().enumerate() {
                let d = phase[[t, f, k]];
                row[(1 + 2 * k) * bins + f] = d.cos();
                row[(2 + 2 * k) * bins + f] = d.sin();
            }
            row[(1 + 2 * pairs.len()) * bins + f] = df[[t, f]];
        }
    }
    Ok(FeatureTensor { data, layout })
}
