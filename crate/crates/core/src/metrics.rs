//! Time-domain separation metrics.

use crate::error::{Error, Result};

/// Added to the error energy in every ratio.
pub const SI_SNR_EPS: f64 = 1e-12;
/// Reported metric values are clamped to `±METRIC_CLAMP_DB`.
pub const METRIC_CLAMP_DB: f64 = 120.0;

fn check(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Scale-invariant SNR in dB after mean removal.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check(estimate, reference)?;
    let s = centered(reference);
    let x = centered(estimate);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::ZeroReference);
    }
    let alpha = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target = alpha * alpha * ss;
    let err: f64 = x.iter().zip(&s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    Ok((10.0 * (target / (err + SI_SNR_EPS)).log10()).clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB))
}

/// Plain energy-ratio SDR in dB (no distortion filter).
pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check(estimate, reference)?;
    let ss: f64 = reference.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::ZeroReference);
    }
    let err: f64 = estimate.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((10.0 * (ss / (err + SI_SNR_EPS)).log10()).clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB))
}
