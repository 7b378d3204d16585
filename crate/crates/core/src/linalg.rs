//! Dense complex routines for the small (M ≤ ~16) matrices of beamforming.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;

const JACOBI_MAX_SWEEPS: usize = 64;

/// Lower-triangular `L` with `A = L Lᴴ`, or `None` if `A` is not
/// numerically positive definite.
pub fn cholesky(a: ArrayView2<'_, Complex64>) -> Option<Array2<Complex64>> {
    let n = a.nrows();
    let mut l = Array2::<Complex64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = Complex64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<'_, Complex64>, b: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `Lᴴ x = b` for lower-triangular `L`.
pub fn solve_lower_adjoint(l: ArrayView2<'_, Complex64>, b: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[[k, i]].conj() * x[k];
        }
        x[i] = s / l[[i, i]].conj();
    }
    x
}

/// `A x = b` for Hermitian positive definite `A`.
pub fn cholesky_solve(l: ArrayView2<'_, Complex64>, b: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
    solve_lower_adjoint(l, solve_lower(l, b).view())
}

/// `(A + Aᴴ) / 2`.
pub fn hermitian_part(a: ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let n = a.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| (a[[i, j]] + a[[j, i]].conj()) * 0.5)
}

/// Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns.
pub fn hermitian_eigen(a: ArrayView2<'_, Complex64>) -> (Vec<f64>, Array2<Complex64>) {
    let n = a.nrows();
    let mut a = hermitian_part(a);
    let mut v = Array2::<Complex64>::eye(n);
    let scale: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                // unitary G = diag(1, e^{-iφ}) · [[c, s], [-s, c]] zeroes a_pq
                let phase = apq / mag;
                let theta = (a[[q, q]].re - a[[p, p]].re) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let gpp = Complex64::new(c, 0.0);
                let gpq = Complex64::new(s, 0.0);
                let gqp = -phase.conj() * s;
                let gqq = phase.conj() * c;

                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = akp * gpp + akq * gqp;
                    a[[k, q]] = akp * gpq + akq * gqq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = gpp.conj() * apk + gqp.conj() * aqk;
                    a[[q, k]] = gpq.conj() * apk + gqq.conj() * aqk;
                }
                a[[p, q]] = Complex64::new(0.0, 0.0);
                a[[q, p]] = Complex64::new(0.0, 0.0);
                a[[p, p]].im = 0.0;
                a[[q, q]].im = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = vkp * gpp + vkq * gqp;
                    v[[k, q]] = vkp * gpq + vkq * gqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].re.total_cmp(&a[[i, i]].re));
    let values = order.iter().map(|&i| a[[i, i]].re).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Scale to unit norm and rotate so the first entry with magnitude above
/// 1e-12 is real and positive.
pub fn normalize_phase(v: &mut Array1<Complex64>) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|z| z / norm);
    }
    if let Some(first) = v.iter().find(|z| z.norm() > 1e-12).copied() {
        let rot = first.conj() / first.norm();
        v.mapv_inplace(|z| z * rot);
    }
}

/// Eigenvector of the largest eigenvalue, phase-normalized.
pub fn principal_eigenvector(a: ArrayView2<'_, Complex64>) -> (f64, Array1<Complex64>) {
    let (values, vectors) = hermitian_eigen(a);
    let mut v = vectors.column(0).to_owned();
    normalize_phase(&mut v);
    (values[0], v)
}

pub fn trace(a: ArrayView2<'_, Complex64>) -> f64 {
    a.diag().iter().map(|z| z.re).sum()
}

/// `x^H y`.
pub fn inner(x: ArrayView1<'_, Complex64>, y: ArrayView1<'_, Complex64>) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}
