use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

/// Denominators below this mean the mask has collapsed.
pub const MASK_FLOOR: f64 = 1e-10;

/// How a covariance sequence has been scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceNorm {
    Raw,
    MaskNormalized,
    /// Affine output of a layer norm; not Hermitian in general.
    LayerNormalized,
}

/// Per-frame, per-bin `M × M` matrices, `[T, F, M, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSequence {
    data: Array4<Complex64>,
    norm: CovarianceNorm,
}

impl CovarianceSequence {
    pub fn new(data: Array4<Complex64>, norm: CovarianceNorm) -> Result<Self> {
        let (_, _, a, b) = data.dim();
        if a != b {
            return Err(Error::Shape(format!("covariance blocks must be square, got {a}x{b}")));
        }
        Ok(Self { data, norm })
    }

    pub fn data(&self) -> &Array4<Complex64> {
        &self.data
    }

    pub fn norm(&self) -> CovarianceNorm {
        self.norm
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn mics(&self) -> usize {
        self.data.dim().2
    }

    /// `[T, F, 2M²]`: real parts of the row-major matrix, then imaginary parts.
    pub fn flatten(&self) -> Array3<f64> {
        let (t, f, m, _) = self.data.dim();
        let mm = m * m;
        Array3::from_shape_fn((t, f, 2 * mm), |(ti, fi, k)| {
            let z = self.data[[ti, fi, (k % mm) / m, k % m]];
            if k < mm {
                z.re
            } else {
                z.im
            }
        })
    }
}

/// `Φ(t,f) = Ŝ(t,f) Ŝ(t,f)ᴴ`.
pub fn frame_covariance(est: &ComplexSpectrogram) -> CovarianceSequence {
    let (t, f, m) = est.data().dim();
    let y = est.data();
    let data = Array4::from_shape_fn((t, f, m, m), |(ti, fi, i, j)| y[[ti, fi, i]] * y[[ti, fi, j]].conj());
    CovarianceSequence {
        data,
        norm: CovarianceNorm::Raw,
    }
}

/// `Σ_t |cRM(t,f)|²` per bin, failing on a collapsed mask.
pub fn mask_denominator(crm: &Array2<Complex64>) -> Result<Vec<f64>> {
    let (_, bins) = crm.dim();
    (0..bins)
        .map(|f| {
            let d: f64 = crm.column(f).iter().map(|z| z.norm_sqr()).sum();
            if d < MASK_FLOOR {
                Err(Error::DegenerateMask { f, sum: d })
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Divide every `Φ(t,f)` by `Σ_t |cRM(t,f)|²`.
pub fn mask_normalize(cov: &CovarianceSequence, crm: &Array2<Complex64>) -> Result<CovarianceSequence> {
    if cov.norm != CovarianceNorm::Raw {
        return Err(Error::ModeMismatch(format!("mask normalization of a {:?} covariance", cov.norm)));
    }
    if crm.dim() != (cov.frames(), cov.bins()) {
        return Err(Error::Shape(format!(
            "mask {:?} vs covariance grid {}x{}",
            crm.dim(),
            cov.frames(),
            cov.bins()
        )));
    }
    let d = mask_denominator(crm)?;
    let mut data = cov.data.clone();
    for ((_, f, _, _), z) in data.indexed_iter_mut() {
        *z /= d[f];
    }
    Ok(CovarianceSequence {
        data,
        norm: CovarianceNorm::MaskNormalized,
    })
}

/// Layer norm over each flattened `2M²` vector, then `γ ⊙ x̂ + β`.
pub fn layer_normalize_cov(cov: &CovarianceSequence, gamma: &[f64], beta: &[f64], eps: f64) -> Result<CovarianceSequence> {
    if cov.norm != CovarianceNorm::Raw {
        return Err(Error::ModeMismatch(format!("layer normalization of a {:?} covariance", cov.norm)));
    }
    let m = cov.mics();
    let mm = m * m;
    if gamma.len() != 2 * mm || beta.len() != 2 * mm {
        return Err(Error::Shape(format!(
            "layer norm parameters of length {}/{} for {} features",
            gamma.len(),
            beta.len(),
            2 * mm
        )));
    }
    let flat = cov.flatten();
    let (t, f, _) = flat.dim();
    let mut data = Array4::<Complex64>::zeros((t, f, m, m));
    for ti in 0..t {
        for fi in 0..f {
            let x = flat.slice(ndarray::s![ti, fi, ..]);
            let n = x.len() as f64;
            let mean = x.sum() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let y: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(k, v)| gamma[k] * (v - mean) * inv + beta[k])
                .collect();
            for k in 0..mm {
                data[[ti, fi, k / m, k % m]] = Complex64::new(y[k], y[mm + k]);
            }
        }
    }
    Ok(CovarianceSequence {
        data,
        norm: CovarianceNorm::LayerNormalized,
    })
}

/// `Φ(f) = Σ_t RM²(t,f) Y Yᴴ / Σ_t RM²(t,f)`, `[F, M, M]`.
pub fn chunk_covariance(spec: &ComplexSpectrogram, mask: &Array2<f64>) -> Result<Array3<Complex64>> {
    let (t, f, m) = spec.data().dim();
    if mask.dim() != (t, f) {
        return Err(Error::Shape(format!("mask {:?} vs spectrogram {t}x{f}", mask.dim())));
    }
    if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Shape("mask values must lie in [0, 1]".into()));
    }
    let y = spec.data();
    let mut out = Array3::<Complex64>::zeros((f, m, m));
    for fi in 0..f {
        let mut den = 0.0;
        for ti in 0..t {
            let w = mask[[ti, fi]].powi(2);
            if w == 0.0 {
                continue;
            }
            den += w;
            for i in 0..m {
                for j in 0..m {
                    out[[fi, i, j]] += y[[ti, fi, i]] * y[[ti, fi, j]].conj() * w;
                }
            }
        }
        if den < MASK_FLOOR {
            return Err(Error::DegenerateMask { f: fi, sum: den });
        }
        out.slice_mut(ndarray::s![fi, .., ..]).mapv_inplace(|z| z / den);
    }
    Ok(out)
}

/// Time-summed frame covariances of a filtered estimate over the summed
/// squared center units, `[F, M, M]`.
pub fn crf_chunk_covariance(est: &ComplexSpectrogram, crm: &Array2<Complex64>) -> Result<Array3<Complex64>> {
    let (t, f, m) = est.data().dim();
    if crm.dim() != (t, f) {
        return Err(Error::Shape(format!("mask {:?} vs estimate {t}x{f}", crm.dim())));
    }
    let d = mask_denominator(crm)?;
    let y = est.data();
    let mut out = Array3::<Complex64>::zeros((f, m, m));
    for fi in 0..f {
        for ti in 0..t {
            for i in 0..m {
                for j in 0..m {
                    out[[fi, i, j]] += y[[ti, fi, i]] * y[[ti, fi, j]].conj();
                }
            }
        }
        out.slice_mut(ndarray::s![fi, .., ..]).mapv_inplace(|z| z / d[fi]);
    }
    Ok(out)
}
