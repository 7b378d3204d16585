//! Domain operators recorded on the autodiff tape.
//!
//! Complex gradients follow the packed convention: for a complex entry `z`
//! the gradient slot holds `∂L/∂Re z + j ∂L/∂Im z`. Under that convention a
//! product `z = c·y` with `y` constant sends `G·conj(y)` back to `c`.
//!
//! Layouts: spectra and filter taps are interleaved `[.., 2]`, covariance
//! vectors are blocked (`M²` real parts then `M²` imaginary parts, row-major)
//! and weight vectors are blocked (`M` real parts then `M` imaginary parts).

use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use rnnbf_nn::{Function, Graph, Real, Tensor, Var};

use crate::beamformer::MASK_FLOOR;
use crate::error::{Error, Result};
use crate::metrics::SI_SNR_EPS;
use crate::signal::Synthesis;

fn to_t<T: Real>(v: impl IntoIterator<Item = f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

fn complex_at(x: &[f64], i: usize) -> Complex64 {
    Complex64::new(x[2 * i], x[2 * i + 1])
}

fn interleave(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn shape_check(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// Blocked `[2M²]` vector at `base` to a row-major complex matrix.
fn unblock(x: &[f64], base: usize, m: usize) -> Vec<Complex64> {
    let mm = m * m;
    (0..mm).map(|k| Complex64::new(x[base + k], x[base + mm + k])).collect()
}

fn block_into(out: &mut [f64], base: usize, z: &[Complex64]) {
    let mm = z.len();
    for (k, c) in z.iter().enumerate() {
        out[base + k] = c.re;
        out[base + mm + k] = c.im;
    }
}

fn side_from_cov_width(d: usize) -> Result<usize> {
    let m = ((d / 2) as f64).sqrt().round() as usize;
    if m == 0 || 2 * m * m != d {
        return Err(Error::Shape(format!("{d} is not a 2M² covariance width")));
    }
    Ok(m)
}

struct ApplyCrf {
    y: Arc<Array3<Complex64>>,
    kappa: usize,
}

impl ApplyCrf {
    /// Visit every (output bin, tap, source bin) triple.
    fn each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (frames, bins, _) = self.y.dim();
        let k = 2 * self.kappa + 1;
        let kap = self.kappa as isize;
        for t in 0..frames {
            for fr in 0..bins {
                for d1 in -kap..=kap {
                    let u = t as isize + d1;
                    if u < 0 || u >= frames as isize {
                        continue;
                    }
                    for d2 in -kap..=kap {
                        let v = fr as isize + d2;
                        if v < 0 || v >= bins as isize {
                            continue;
                        }
                        let src = u as usize * bins + v as usize;
                        let tap = src * k * k + (d1 + kap) as usize * k + (d2 + kap) as usize;
                        f(t * bins + fr, tap, src);
                    }
                }
            }
        }
    }
}

impl<T: Real> Function<T> for ApplyCrf {
    fn name(&self) -> &'static str {
        "apply_crf"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let m = self.y.dim().2;
        let y = self.y.as_slice().expect("standard layout");
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let k = 2 * self.kappa + 1;
        let mut gc = vec![Complex64::new(0.0, 0.0); self.y.dim().0 * self.y.dim().1 * k * k];
        self.each(|out, tap, src| {
            let mut acc = Complex64::new(0.0, 0.0);
            for mi in 0..m {
                acc += complex_at(&g, out * m + mi) * y[src * m + mi].conj();
            }
            gc[tap] += acc;
        });
        vec![Some(to_t(interleave(&gc)))]
    }
}

/// Filter every channel of `y` with the taps in `crf: [T, F, (2κ+1)², 2]`,
/// giving `[T, F, M, 2]`. `y` is treated as a constant.
pub fn apply_crf<T: Real>(g: &mut Graph<'_, T>, crf: Var, y: Arc<Array3<Complex64>>, half_width: usize) -> Result<Var> {
    let (frames, bins, m) = y.dim();
    let k = 2 * half_width + 1;
    shape_check("cRF taps", g.shape(crf), &[frames, bins, k * k, 2])?;
    let c = g.value(crf).to_f64_vec();
    let op = ApplyCrf { y, kappa: half_width };
    let ys = op.y.as_slice().expect("standard layout");
    let mut out = vec![Complex64::new(0.0, 0.0); frames * bins * m];
    op.each(|o, tap, src| {
        let ct = complex_at(&c, tap);
        for mi in 0..m {
            out[o * m + mi] += ct * ys[src * m + mi];
        }
    });
    let value = Tensor::new(&[frames, bins, m, 2], to_t(interleave(&out)))?;
    Ok(g.apply(&[crf], value, op)?)
}

struct FrameCov {
    m: usize,
}

impl<T: Real> Function<T> for FrameCov {
    fn name(&self) -> &'static str {
        "frame_cov"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let m = self.m;
        let mm = m * m;
        let s = inputs[0].to_f64_vec();
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let cells = s.len() / (2 * m);
        let mut out = vec![0.0; s.len()];
        for cell in 0..cells {
            let gm = unblock(&g, cell * 2 * mm, m);
            let sv: Vec<Complex64> = (0..m).map(|i| complex_at(&s, cell * m + i)).collect();
            for k in 0..m {
                // Gᴴ s + G s
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    acc += gm[i * m + k].conj() * sv[i] + gm[k * m + i] * sv[i];
                }
                out[2 * (cell * m + k)] = acc.re;
                out[2 * (cell * m + k) + 1] = acc.im;
            }
        }
        vec![Some(to_t(out))]
    }
}

/// `[T, F, M, 2]` to per-bin outer products `S Sᴴ`, `[T, F, 2M²]`.
pub fn frame_cov<T: Real>(g: &mut Graph<'_, T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::Shape(format!("frame_cov expects [T, F, M, 2], got {shape:?}")));
    }
    let (frames, bins, m) = (shape[0], shape[1], shape[2]);
    let mm = m * m;
    let x = g.value(s).to_f64_vec();
    let mut out = vec![0.0; frames * bins * 2 * mm];
    for cell in 0..frames * bins {
        let sv: Vec<Complex64> = (0..m).map(|i| complex_at(&x, cell * m + i)).collect();
        let phi: Vec<Complex64> = (0..mm).map(|k| sv[k / m] * sv[k % m].conj()).collect();
        block_into(&mut out, cell * 2 * mm, &phi);
    }
    let value = Tensor::new(&[frames, bins, 2 * mm], to_t(out))?;
    Ok(g.apply(&[s], value, FrameCov { m })?)
}

struct MaskNorm {
    center: usize,
    den: Vec<f64>,
}

impl<T: Real> Function<T> for MaskNorm {
    fn name(&self) -> &'static str {
        "mask_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let shape = inputs[0].shape();
        let (frames, bins, width) = (shape[0], shape[1], shape[2]);
        let taps = inputs[1].shape()[2];
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let gcov = needs[0].then(|| {
            to_t(g.iter().enumerate().map(|(i, v)| v / self.den[(i / width) % bins]))
        });
        let gcrf = needs[1].then(|| {
            let out = output.to_f64_vec();
            let mut dd = vec![0.0; bins];
            for (i, (gv, ov)) in g.iter().zip(&out).enumerate() {
                dd[(i / width) % bins] -= gv * ov;
            }
            for (f, d) in dd.iter_mut().enumerate() {
                *d /= self.den[f];
            }
            let c = inputs[1].to_f64_vec();
            let mut gc = vec![0.0; c.len()];
            for t in 0..frames {
                for f in 0..bins {
                    let i = ((t * bins + f) * taps + self.center) * 2;
                    gc[i] = 2.0 * dd[f] * c[i];
                    gc[i + 1] = 2.0 * dd[f] * c[i + 1];
                }
            }
            to_t(gc)
        });
        vec![gcov, gcrf]
    }
}

/// Divide `cov: [T, F, 2M²]` by `Σ_t |c(t,f)|²`, where `c` is the center tap
/// of `crf: [T, F, taps, 2]`.
pub fn mask_norm<T: Real>(g: &mut Graph<'_, T>, cov: Var, crf: Var) -> Result<Var> {
    let cs = g.shape(cov).to_vec();
    let ks = g.shape(crf).to_vec();
    if cs.len() != 3 || ks.len() != 4 || ks[3] != 2 || cs[..2] != ks[..2] {
        return Err(Error::Shape(format!("mask_norm of {cs:?} by cRF {ks:?}")));
    }
    let (frames, bins, width, taps) = (cs[0], cs[1], cs[2], ks[2]);
    let center = taps / 2;
    let c = g.value(crf).to_f64_vec();
    let mut den = vec![0.0; bins];
    for t in 0..frames {
        for (f, d) in den.iter_mut().enumerate() {
            let z = complex_at(&c, (t * bins + f) * taps + center);
            *d += z.norm_sqr();
        }
    }
    if let Some((f, &sum)) = den.iter().enumerate().find(|(_, d)| **d < MASK_FLOOR) {
        return Err(Error::DegenerateMask { f, sum });
    }
    let x = g.value(cov).to_f64_vec();
    let out = x.iter().enumerate().map(|(i, v)| v / den[(i / width) % bins]);
    let value = Tensor::new(&cs, to_t(out))?;
    Ok(g.apply(&[cov, crf], value, MaskNorm { center, den })?)
}

struct ComplexMatMul {
    m: usize,
}

fn matmul(a: &[Complex64], b: &[Complex64], m: usize, ah: bool, bh: bool) -> Vec<Complex64> {
    let at = |i: usize, j: usize| if ah { a[j * m + i].conj() } else { a[i * m + j] };
    let bt = |i: usize, j: usize| if bh { b[j * m + i].conj() } else { b[i * m + j] };
    (0..m * m)
        .map(|k| (0..m).map(|j| at(k / m, j) * bt(j, k % m)).sum())
        .collect()
}

impl<T: Real> Function<T> for ComplexMatMul {
    fn name(&self) -> &'static str {
        "complex_matmul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let m = self.m;
        let w = 2 * m * m;
        let a = inputs[0].to_f64_vec();
        let b = inputs[1].to_f64_vec();
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for base in (0..a.len()).step_by(w) {
            let gm = unblock(&g, base, m);
            if let Some(ga) = ga.as_mut() {
                let bm = unblock(&b, base, m);
                block_into(ga, base, &matmul(&gm, &bm, m, false, true));
            }
            if let Some(gb) = gb.as_mut() {
                let am = unblock(&a, base, m);
                block_into(gb, base, &matmul(&am, &gm, m, true, false));
            }
        }
        vec![ga.map(to_t), gb.map(to_t)]
    }
}

/// Per-cell complex matrix product of two blocked `[.., 2M²]` tensors.
pub fn complex_matmul<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if g.shape(b) != shape.as_slice() {
        return Err(Error::Shape(format!("complex_matmul of {shape:?} and {:?}", g.shape(b))));
    }
    let m = side_from_cov_width(*shape.last().unwrap_or(&0))?;
    let w = 2 * m * m;
    let x = g.value(a).to_f64_vec();
    let y = g.value(b).to_f64_vec();
    let mut out = vec![0.0; x.len()];
    for base in (0..x.len()).step_by(w) {
        let c = matmul(&unblock(&x, base, m), &unblock(&y, base, m), m, false, false);
        block_into(&mut out, base, &c);
    }
    let value = Tensor::new(&shape, to_t(out))?;
    Ok(g.apply(&[a, b], value, ComplexMatMul { m })?)
}

struct BeamApply {
    y: Arc<Array3<Complex64>>,
}

impl<T: Real> Function<T> for BeamApply {
    fn name(&self) -> &'static str {
        "beam_apply"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let (frames, bins, m) = self.y.dim();
        let y = self.y.as_slice().expect("standard layout");
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let mut out = vec![0.0; frames * bins * 2 * m];
        for cell in 0..frames * bins {
            let gc = complex_at(&g, cell).conj();
            for mi in 0..m {
                let z = gc * y[cell * m + mi];
                out[cell * 2 * m + mi] = z.re;
                out[cell * 2 * m + m + mi] = z.im;
            }
        }
        vec![Some(to_t(out))]
    }
}

/// `wᴴ Y` per bin with `w: [T, F, 2M]` blocked, giving `[T, F, 2]`.
pub fn beam_apply<T: Real>(g: &mut Graph<'_, T>, w: Var, y: Arc<Array3<Complex64>>) -> Result<Var> {
    let (frames, bins, m) = y.dim();
    shape_check("beamforming weights", g.shape(w), &[frames, bins, 2 * m])?;
    let wv = g.value(w).to_f64_vec();
    let ys = y.as_slice().expect("standard layout");
    let out: Vec<Complex64> = (0..frames * bins)
        .map(|cell| {
            (0..m)
                .map(|mi| Complex64::new(wv[cell * 2 * m + mi], -wv[cell * 2 * m + m + mi]) * ys[cell * m + mi])
                .sum()
        })
        .collect();
    let value = Tensor::new(&[frames, bins, 2], to_t(interleave(&out)))?;
    Ok(g.apply(&[w], value, BeamApply { y })?)
}

struct SelectChannel {
    m: usize,
    channel: usize,
}

impl<T: Real> Function<T> for SelectChannel {
    fn name(&self) -> &'static str {
        "select_channel"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut out = vec![T::zero(); inputs[0].len()];
        for (cell, pair) in grad.chunks_exact(2).enumerate() {
            let i = 2 * (cell * self.m + self.channel);
            out[i] = pair[0];
            out[i + 1] = pair[1];
        }
        vec![Some(out)]
    }
}

/// `[T, F, M, 2]` to channel `channel`, `[T, F, 2]`.
pub fn select_channel<T: Real>(g: &mut Graph<'_, T>, x: Var, channel: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != 2 || channel >= shape[2] {
        return Err(Error::Shape(format!("channel {channel} of {shape:?}")));
    }
    let m = shape[2];
    let data: Vec<T> = g
        .value(x)
        .data()
        .chunks_exact(2 * m)
        .flat_map(|c| [c[2 * channel], c[2 * channel + 1]])
        .collect();
    let value = Tensor::new(&[shape[0], shape[1], 2], data)?;
    Ok(g.apply(&[x], value, SelectChannel { m, channel })?)
}

struct Istft {
    synth: Arc<Synthesis>,
}

impl<T: Real> Function<T> for Istft {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        vec![Some(to_t(interleave(&self.synth.adjoint(&g))))]
    }
}

/// One-channel inverse STFT, `[T, F, 2]` to `[L]`.
pub fn istft<T: Real>(g: &mut Graph<'_, T>, x: Var, synth: Arc<Synthesis>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != 2 || shape[0] != synth.frames() {
        return Err(Error::Shape(format!(
            "istft of {shape:?} with {} synthesis frames",
            synth.frames()
        )));
    }
    let v = g.value(x).to_f64_vec();
    let plane: Vec<Complex64> = (0..v.len() / 2).map(|i| complex_at(&v, i)).collect();
    let samples = synth.synthesize(&plane);
    let value = Tensor::new(&[samples.len()], to_t(samples))?;
    Ok(g.apply(&[x], value, Istft { synth })?)
}

struct SiSnrLoss {
    /// `∂loss/∂estimate`, computed with the forward pass.
    grad: Vec<f64>,
}

impl<T: Real> Function<T> for SiSnrLoss {
    fn name(&self) -> &'static str {
        "si_snr_loss"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let up = grad[0].as_f64();
        vec![Some(to_t(self.grad.iter().map(|v| v * up)))]
    }
}

/// Negative Si-SNR in dB (no clamp) of `est: [L]` against a constant
/// reference, both mean-removed.
pub fn si_snr_loss<T: Real>(g: &mut Graph<'_, T>, est: Var, reference: &[f64]) -> Result<Var> {
    let n = reference.len();
    shape_check("Si-SNR estimate", g.shape(est), &[n])?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let rm = mean(reference);
    let s: Vec<f64> = reference.iter().map(|v| v - rm).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::ZeroReference);
    }
    let raw = g.value(est).to_f64_vec();
    let xm = mean(&raw);
    let x: Vec<f64> = raw.iter().map(|v| v - xm).collect();
    let alpha = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let e: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a - alpha * b).collect();
    let num = alpha * alpha * ss;
    let den = e.iter().map(|v| v * v).sum::<f64>() + SI_SNR_EPS;
    let k = 10.0 / std::f64::consts::LN_10;
    let loss = -k * (num.ln() - den.ln());
    // ∂num/∂x = 2αs, ∂den/∂x = 2e; the mean removal projects out the constant
    let mut grad: Vec<f64> = s
        .iter()
        .zip(&e)
        .map(|(sv, ev)| -k * (2.0 * alpha * sv / num - 2.0 * ev / den))
        .collect();
    let gm = mean(&grad);
    grad.iter_mut().for_each(|v| *v -= gm);
    let value = Tensor::scalar(T::lit(loss));
    Ok(g.apply(&[est], value, SiSnrLoss { grad })?)
}
