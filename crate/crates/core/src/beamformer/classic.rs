use ndarray::{Array1, Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{BeamWeights, BeamformerKind};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, hermitian_eigen, hermitian_part, inner, normalize_phase, principal_eigenvector, solve_lower, solve_lower_adjoint, trace};

/// Relative diagonal loading applied to the noise covariance.
pub const DEFAULT_LOADING: f64 = 1e-5;

/// `Φ + δ·(tr Φ / M)·I`.
pub fn load_diagonal(phi: ArrayView2<'_, Complex64>, delta: f64) -> Array2<Complex64> {
    let m = phi.nrows();
    let mut out = hermitian_part(phi);
    let add = delta * trace(phi) / m as f64;
    for i in 0..m {
        out[[i, i]].re += add;
    }
    out
}

fn condition_estimate(a: ArrayView2<'_, Complex64>) -> f64 {
    let (w, _) = hermitian_eigen(a);
    let (hi, lo) = (w[0], *w.last().expect("non-empty"));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn factor(phi_n: ArrayView2<'_, Complex64>, delta: f64, f: usize) -> Result<Array2<Complex64>> {
    let loaded = load_diagonal(phi_n, delta);
    cholesky(loaded.view()).ok_or_else(|| Error::Solver {
        f,
        reason: "loaded noise covariance is not positive definite".into(),
        condition: condition_estimate(loaded.view()),
    })
}

fn check_pair(phi_s: &Array3<Complex64>, phi_n: &Array3<Complex64>) -> Result<()> {
    let (f, m, m2) = phi_s.dim();
    if m != m2 || phi_n.dim() != (f, m, m) {
        return Err(Error::Shape(format!(
            "speech covariance {:?} vs noise covariance {:?}",
            phi_s.dim(),
            phi_n.dim()
        )));
    }
    Ok(())
}

fn collect_rows(rows: Vec<Array1<Complex64>>, m: usize) -> Array2<Complex64> {
    let f = rows.len();
    Array2::from_shape_fn((f, m), |(i, j)| rows[i][j])
}

/// `w = Φ̃_N⁻¹ v / (vᴴ Φ̃_N⁻¹ v)` for a given steering matrix `v: [F, M]`.
pub fn mvdr_with_steering(v: &Array2<Complex64>, phi_n: &Array3<Complex64>, delta: f64) -> Result<BeamWeights> {
    let (f, m, _) = phi_n.dim();
    if v.dim() != (f, m) {
        return Err(Error::Shape(format!("steering {:?} vs noise covariance {:?}", v.dim(), phi_n.dim())));
    }
    let rows = (0..f)
        .into_par_iter()
        .map(|fi| {
            let l = factor(phi_n.slice(ndarray::s![fi, .., ..]), delta, fi)?;
            let vf = v.row(fi);
            let x = cholesky_solve(l.view(), vf);
            let den = inner(vf, x.view());
            if !(den.norm() > 0.0) || !den.re.is_finite() {
                return Err(Error::Solver {
                    f: fi,
                    reason: "vᴴ Φ⁻¹ v vanished".into(),
                    condition: f64::NAN,
                });
            }
            Ok(x.mapv(|z| z / den))
        })
        .collect::<Result<Vec<_>>>()?;
    BeamWeights::chunk(collect_rows(rows, m), BeamformerKind::Mvdr)
}

/// Principal eigenvectors of the speech covariances, `[F, M]`.
pub fn pca_steering(phi_s: &Array3<Complex64>) -> Array2<Complex64> {
    let (f, m, _) = phi_s.dim();
    let rows: Vec<_> = (0..f)
        .into_par_iter()
        .map(|fi| principal_eigenvector(phi_s.slice(ndarray::s![fi, .., ..])).1)
        .collect();
    collect_rows(rows, m)
}

/// MVDR with the steering vector taken as the principal eigenvector of `Φ_S`.
pub fn mvdr_weights(phi_s: &Array3<Complex64>, phi_n: &Array3<Complex64>, delta: f64) -> Result<BeamWeights> {
    check_pair(phi_s, phi_n)?;
    mvdr_with_steering(&pca_steering(phi_s), phi_n, delta)
}

/// Principal generalized eigenvector of `(Φ_S, Φ̃_N)` per bin, unit norm and
/// phase-fixed, with its eigenvalue.
pub fn gev_weights(phi_s: &Array3<Complex64>, phi_n: &Array3<Complex64>, delta: f64) -> Result<(BeamWeights, Vec<f64>)> {
    check_pair(phi_s, phi_n)?;
    let (f, m, _) = phi_s.dim();
    let solved = (0..f)
        .into_par_iter()
        .map(|fi| {
            let l = factor(phi_n.slice(ndarray::s![fi, .., ..]), delta, fi)?;
            let s = phi_s.slice(ndarray::s![fi, .., ..]);
            // C = L⁻¹ Φ_S L⁻ᴴ, built column by column
            let mut y = Array2::<Complex64>::zeros((m, m));
            for j in 0..m {
                y.column_mut(j).assign(&solve_lower(l.view(), s.column(j)));
            }
            let mut c = Array2::<Complex64>::zeros((m, m));
            let yh = y.t().mapv(|z| z.conj());
            for j in 0..m {
                let col = solve_lower(l.view(), yh.column(j));
                for i in 0..m {
                    c[[j, i]] = col[i].conj();
                }
            }
            let (lambda, u) = principal_eigenvector(c.view());
            let mut w = solve_lower_adjoint(l.view(), u.view());
            normalize_phase(&mut w);
            Ok((w, lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, lambdas): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    Ok((BeamWeights::chunk(collect_rows(rows, m), BeamformerKind::Gev)?, lambdas))
}

/// Rescale chunk weights so each bin passes the speech image at microphone
/// `reference` unchanged: `w ← w · (wᴴΦ_S e_ref) / (wᴴΦ_S w)`.
///
/// Unit-norm MVDR steering and GEV eigenvectors leave an arbitrary gain per
/// bin; for rank-one `Φ_S` this turns MVDR into its relative-transfer-function
/// form. Bins where `wᴴΦ_S w` vanishes are left alone.
pub fn reference_rescale(w: &BeamWeights, phi_s: &Array3<Complex64>, reference: usize) -> Result<BeamWeights> {
    let (f, m, _) = phi_s.dim();
    if !w.is_chunk() || w.data().dim() != (1, f, m) || reference >= m {
        return Err(Error::Shape(format!(
            "chunk weights {:?} vs covariance [{f}, {m}, {m}], reference mic {reference}",
            w.data().dim()
        )));
    }
    let mut out = Array2::<Complex64>::zeros((f, m));
    for fi in 0..f {
        let wv = w.at(0, fi);
        let s = phi_s.slice(ndarray::s![fi, .., ..]);
        let sw = s.dot(&wv);
        let power = inner(wv, sw.view()).re;
        // wᴴ Φ_S e_ref
        let cross: Complex64 = (0..m).map(|i| wv[i].conj() * s[[i, reference]]).sum();
        let c = if power > f64::MIN_POSITIVE { cross / power } else { Complex64::new(1.0, 0.0) };
        out.row_mut(fi).assign(&wv.mapv(|z| z * c));
    }
    BeamWeights::chunk(out, w.kind())
}
