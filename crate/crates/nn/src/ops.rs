//! Built-in differentiable operators.

use crate::error::{shape_err, NnError, Result};
use crate::graph::{Function, Graph, Var};
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

fn need_grad<T: Real>(needs: &[bool], i: usize, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    needs[i].then(f)
}

fn col_sum<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
    }
    out
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------- elementwise

struct Add;
impl<T: Real> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || g.to_vec()), need_grad(needs, 1, || g.to_vec())]
    }
}

struct Sub;
impl<T: Real> Function<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            need_grad(needs, 0, || g.to_vec()),
            need_grad(needs, 1, || g.iter().map(|&x| -x).collect()),
        ]
    }
}

struct Mul;
impl<T: Real> Function<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (x[0].data(), x[1].data());
        vec![
            need_grad(needs, 0, || g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            need_grad(needs, 1, || g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct Scale<T>(T);
impl<T: Real> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || g.iter().map(|&x| x * self.0).collect())]
    }
}

struct Sigmoid;
impl<T: Real> Function<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || {
            g.iter().zip(y.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect()
        })]
    }
}

struct Tanh;
impl<T: Real> Function<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || {
            g.iter().zip(y.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect()
        })]
    }
}

struct PReluFn;
impl<T: Real> Function<T> for PReluFn {
    fn name(&self) -> &'static str {
        "prelu"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (xs, slope) = (x[0].data(), x[1].data());
        let c = slope.len();
        let dx = need_grad(needs, 0, || {
            xs.iter()
                .zip(g)
                .enumerate()
                .map(|(i, (&x, &g))| if x >= T::zero() { g } else { g * slope[i % c] })
                .collect()
        });
        let ds = need_grad(needs, 1, || {
            let mut ds = vec![T::zero(); c];
            for (i, (&x, &g)) in xs.iter().zip(g).enumerate() {
                if x < T::zero() {
                    ds[i % c] += g * x;
                }
            }
            ds
        });
        vec![dx, ds]
    }
}

struct Reshape;
impl<T: Real> Function<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || g.to_vec())]
    }
}

struct WeightedSum<T>(Vec<T>);
impl<T: Real> Function<T> for WeightedSum<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![need_grad(needs, 0, || self.0.iter().map(|&w| w * g[0]).collect())]
    }
}

struct ConcatLast {
    widths: Vec<usize>,
}
impl<T: Real> Function<T> for ConcatLast {
    fn name(&self) -> &'static str {
        "concat_last"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let rows = g.len() / total;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (i, &w) in self.widths.iter().enumerate() {
            out.push(need_grad(needs, i, || {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                d
            }));
            offset += w;
        }
        out
    }
}

// ------------------------------------------------------------------- affine

struct LinearFn {
    rows: usize,
    inp: usize,
    out: usize,
    bias: bool,
}
impl<T: Real> Function<T> for LinearFn {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, i, o) = (self.rows, self.inp, self.out);
        let (xs, w) = (x[0].data(), x[1].data());
        let dx = need_grad(needs, 0, || {
            let mut dx = vec![T::zero(); n * i];
            matmul(g, false, w, false, &mut dx, n, o, i, false);
            dx
        });
        let dw = need_grad(needs, 1, || {
            let mut dw = vec![T::zero(); o * i];
            matmul(g, true, xs, false, &mut dw, o, n, i, false);
            dw
        });
        let mut out = vec![dx, dw];
        if self.bias {
            out.push(need_grad(needs, 2, || col_sum(g, o)));
        }
        out
    }
}

// --------------------------------------------------------------- layer norm

struct LayerNormFn<T> {
    dim: usize,
    eps: T,
}

fn normalize_row<T: Real>(row: &[T], eps: T) -> (T, T) {
    let d = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / d;
    (mean, (var + eps).sqrt())
}

impl<T: Real> Function<T> for LayerNormFn<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let d = self.dim;
        let (xs, gamma) = (x[0].data(), x[1].data());
        let mut dx = needs[0].then(|| vec![T::zero(); xs.len()]);
        let mut dgamma = needs[1].then(|| vec![T::zero(); d]);
        let mut dbeta = needs[2].then(|| vec![T::zero(); d]);
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); d];
        let mut dxhat = vec![T::zero(); d];
        for (r, (row, grow)) in xs.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
            let (mean, std) = normalize_row(row, self.eps);
            for k in 0..d {
                xhat[k] = (row[k] - mean) / std;
                dxhat[k] = grow[k] * gamma[k];
            }
            if let Some(dg) = dgamma.as_mut() {
                for k in 0..d {
                    dg[k] += grow[k] * xhat[k];
                }
            }
            if let Some(db) = dbeta.as_mut() {
                for k in 0..d {
                    db[k] += grow[k];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                let out = &mut dx[r * d..(r + 1) * d];
                for k in 0..d {
                    out[k] = (dxhat[k] - m1 - xhat[k] * m2) / std;
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

// ------------------------------------------------------------------- conv1d

/// Tap placement of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Taps at offsets `(j - (k-1)/2) * dilation`.
    Centered,
    /// Taps at offsets `(j - (k-1)) * dilation`; output never sees the future.
    Causal,
}

struct Conv1dFn {
    len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    mode: ConvMode,
}

impl Conv1dFn {
    fn offset(&self, j: usize) -> isize {
        let anchor = match self.mode {
            ConvMode::Centered => (self.kernel - 1) / 2,
            ConvMode::Causal => self.kernel - 1,
        };
        (j as isize - anchor as isize) * self.dilation as isize
    }

    /// Output rows `[t0, t1)` read input rows shifted by `off`.
    fn valid_rows(&self, off: isize) -> Option<(usize, usize)> {
        let t = self.len as isize;
        let t0 = (-off).max(0);
        let t1 = (t - off).min(t);
        (t1 > t0).then(|| (t0 as usize, t1 as usize))
    }

    fn forward<T: Real>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let mut y = Vec::with_capacity(self.len * cout);
        for _ in 0..self.len {
            y.extend_from_slice(b);
        }
        for j in 0..k {
            let off = self.offset(j);
            let Some((t0, t1)) = self.valid_rows(off) else { continue };
            let src = (t0 as isize + off) as usize;
            T::gemm(
                t1 - t0,
                cin,
                cout,
                T::one(),
                &x[src * cin..],
                cin as isize,
                1,
                &w[j..],
                k as isize,
                (cin * k) as isize,
                T::one(),
                &mut y[t0 * cout..],
                cout as isize,
                1,
            );
        }
        y
    }
}

impl<T: Real> Function<T> for Conv1dFn {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let (xs, w) = (x[0].data(), x[1].data());
        let mut dx = needs[0].then(|| vec![T::zero(); xs.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        for j in 0..k {
            let off = self.offset(j);
            let Some((t0, t1)) = self.valid_rows(off) else { continue };
            let src = (t0 as isize + off) as usize;
            let rows = t1 - t0;
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    rows,
                    cout,
                    cin,
                    T::one(),
                    &g[t0 * cout..],
                    cout as isize,
                    1,
                    &w[j..],
                    (cin * k) as isize,
                    k as isize,
                    T::one(),
                    &mut dx[src * cin..],
                    cin as isize,
                    1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                T::gemm(
                    cout,
                    rows,
                    cin,
                    T::one(),
                    &g[t0 * cout..],
                    1,
                    cout as isize,
                    &xs[src * cin..],
                    cin as isize,
                    1,
                    T::one(),
                    &mut dw[j..],
                    (cin * k) as isize,
                    k as isize,
                );
            }
        }
        vec![dx, dw, need_grad(needs, 2, || col_sum(g, cout))]
    }
}

// ---------------------------------------------------------------------- GRU

/// One unidirectional GRU layer over a `[T, B, D]` sequence, gate order
/// (reset, update, candidate):
///
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ h + z ⊙ n
struct GruLayerFn {
    steps: usize,
    batch: usize,
    inp: usize,
    hidden: usize,
}

impl GruLayerFn {
    fn input_projection<T: Real>(&self, x: &[T], w_ih: &[T], b_ih: &[T]) -> Vec<T> {
        let rows = self.steps * self.batch;
        let h3 = 3 * self.hidden;
        let mut gi = Vec::with_capacity(rows * h3);
        for _ in 0..rows {
            gi.extend_from_slice(b_ih);
        }
        matmul(x, false, w_ih, true, &mut gi, rows, self.inp, h3, true);
        gi
    }

    fn hidden_projection<T: Real>(&self, h: &[T], w_hh: &[T], b_hh: &[T], gh: &mut Vec<T>) {
        gh.clear();
        for _ in 0..self.batch {
            gh.extend_from_slice(b_hh);
        }
        matmul(h, false, w_hh, true, gh, self.batch, self.hidden, 3 * self.hidden, true);
    }

    fn forward<T: Real>(&self, x: &[T], w_ih: &[T], w_hh: &[T], b_ih: &[T], b_hh: &[T], h0: &[T]) -> Vec<T> {
        let (b, hd) = (self.batch, self.hidden);
        let gi = self.input_projection(x, w_ih, b_ih);
        let mut out = vec![T::zero(); self.steps * b * hd];
        let mut h = h0.to_vec();
        let mut gh = Vec::with_capacity(b * 3 * hd);
        for t in 0..self.steps {
            self.hidden_projection(&h, w_hh, b_hh, &mut gh);
            let gi_t = &gi[t * b * 3 * hd..(t + 1) * b * 3 * hd];
            let h_next = &mut out[t * b * hd..(t + 1) * b * hd];
            for row in 0..b {
                let gi_r = &gi_t[row * 3 * hd..(row + 1) * 3 * hd];
                let gh_r = &gh[row * 3 * hd..(row + 1) * 3 * hd];
                for u in 0..hd {
                    let r = sigmoid(gi_r[u] + gh_r[u]);
                    let z = sigmoid(gi_r[hd + u] + gh_r[hd + u]);
                    let n = (gi_r[2 * hd + u] + r * gh_r[2 * hd + u]).tanh();
                    let hp = h[row * hd + u];
                    h_next[row * hd + u] = (T::one() - z) * hp + z * n;
                }
            }
            h.copy_from_slice(h_next);
        }
        out
    }
}

impl<T: Real> Function<T> for GruLayerFn {
    fn name(&self) -> &'static str {
        "gru"
    }
    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (b, hd, d) = (self.batch, self.hidden, self.inp);
        let h3 = 3 * hd;
        let (xs, w_ih, w_hh, b_ih, b_hh, h0) = (
            x[0].data(),
            x[1].data(),
            x[2].data(),
            x[3].data(),
            x[4].data(),
            x[5].data(),
        );
        let hs = y.data();
        let gi = self.input_projection(xs, w_ih, b_ih);
        let mut dgi = vec![T::zero(); self.steps * b * h3];
        let mut dw_hh = vec![T::zero(); h3 * hd];
        let mut db_hh = vec![T::zero(); h3];
        let mut dh_carry = vec![T::zero(); b * hd];
        let mut gh = Vec::with_capacity(b * h3);
        let mut dgh = vec![T::zero(); b * h3];

        for t in (0..self.steps).rev() {
            let h_prev = if t == 0 { h0 } else { &hs[(t - 1) * b * hd..t * b * hd] };
            self.hidden_projection(h_prev, w_hh, b_hh, &mut gh);
            let gi_t = &gi[t * b * h3..(t + 1) * b * h3];
            let g_t = &g[t * b * hd..(t + 1) * b * hd];
            let dgi_t = &mut dgi[t * b * h3..(t + 1) * b * h3];
            for row in 0..b {
                let gi_r = &gi_t[row * h3..(row + 1) * h3];
                let gh_r = &gh[row * h3..(row + 1) * h3];
                for u in 0..hd {
                    let r = sigmoid(gi_r[u] + gh_r[u]);
                    let z = sigmoid(gi_r[hd + u] + gh_r[hd + u]);
                    let n = (gi_r[2 * hd + u] + r * gh_r[2 * hd + u]).tanh();
                    let hp = h_prev[row * hd + u];
                    let dh = g_t[row * hd + u] + dh_carry[row * hd + u];

                    let dn = dh * z;
                    let dz = dh * (n - hp);
                    let dpre_n = dn * (T::one() - n * n);
                    let dr = dpre_n * gh_r[2 * hd + u];
                    let dpre_z = dz * z * (T::one() - z);
                    let dpre_r = dr * r * (T::one() - r);

                    let gi_row = &mut dgi_t[row * h3..(row + 1) * h3];
                    gi_row[u] = dpre_r;
                    gi_row[hd + u] = dpre_z;
                    gi_row[2 * hd + u] = dpre_n;
                    let gh_row = &mut dgh[row * h3..(row + 1) * h3];
                    gh_row[u] = dpre_r;
                    gh_row[hd + u] = dpre_z;
                    gh_row[2 * hd + u] = dpre_n * r;

                    dh_carry[row * hd + u] = dh * (T::one() - z);
                }
            }
            // carry through the recurrent projection
            matmul(&dgh, false, w_hh, false, &mut dh_carry, b, h3, hd, true);
            matmul(&dgh, true, h_prev, false, &mut dw_hh, h3, b, hd, true);
            for row in dgh.chunks_exact(h3) {
                db_hh.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
        }

        let rows = self.steps * b;
        let dx = need_grad(needs, 0, || {
            let mut dx = vec![T::zero(); rows * d];
            matmul(&dgi, false, w_ih, false, &mut dx, rows, h3, d, false);
            dx
        });
        let dw_ih = need_grad(needs, 1, || {
            let mut dw = vec![T::zero(); h3 * d];
            matmul(&dgi, true, xs, false, &mut dw, h3, rows, d, false);
            dw
        });
        let db_ih = need_grad(needs, 3, || col_sum(&dgi, h3));
        vec![
            dx,
            dw_ih,
            needs[2].then_some(dw_hh),
            db_ih,
            needs[4].then_some(db_hh),
            needs[5].then_some(dh_carry),
        ]
    }
}

// ------------------------------------------------------------ graph methods

impl<T: Real> Graph<'_, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn zip_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x + y);
        self.apply(&[a, b], out, Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x - y);
        self.apply(&[a, b], out, Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x * y);
        self.apply(&[a, b], out, Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let out = self.map_unary(a, |x| x * c);
        self.apply(&[a], out, Scale(c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, sigmoid);
        self.apply(&[a], out, Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, T::tanh);
        self.apply(&[a], out, Tanh)
    }

    /// Leaky rectifier with one learnable slope per last-axis channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let c = self.value(slope).len();
        if self.value(x).last_dim() != c {
            return shape_err("prelu", format!("{} slopes for {:?}", c, self.shape(x)));
        }
        let s = self.value(slope).data();
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if x >= T::zero() { x } else { x * s[i % c] })
            .collect();
        let out = Tensor::new(v.shape(), data)?;
        self.apply(&[x, slope], out, PReluFn)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.apply(&[a], out, Reshape)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let w = vec![T::one(); self.value(a).len()];
        self.weighted_sum(a, w)
    }

    /// Scalar `Σ w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let v = self.value(a);
        if v.len() != weights.len() {
            return shape_err("weighted_sum", format!("{} weights for {} values", weights.len(), v.len()));
        }
        let s = v.data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        self.apply(&[a], Tensor::scalar(s), WeightedSum(weights))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_last", "no inputs");
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return shape_err("concat_last", format!("{:?} vs leading {:?}", s, lead));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        self.apply(parts, out, ConcatLast { widths })
    }

    /// `y = x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.value(x).last_dim() != ws[1] {
            return shape_err("linear", format!("x {:?}, w {:?}", self.shape(x), ws));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != out_dim {
                return shape_err("linear", format!("bias {:?} for {} outputs", self.shape(b), out_dim));
            }
        }
        let rows = self.value(x).len() / in_dim;
        let mut y = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut y = Vec::with_capacity(rows * out_dim);
                for _ in 0..rows {
                    y.extend_from_slice(bias);
                }
                y
            }
            None => vec![T::zero(); rows * out_dim],
        };
        matmul(self.value(x).data(), false, self.value(w).data(), true, &mut y, rows, in_dim, out_dim, true);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let out = Tensor::new(&shape, y)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.apply(
            &inputs,
            out,
            LinearFn {
                rows,
                inp: in_dim,
                out: out_dim,
                bias: b.is_some(),
            },
        )
    }

    /// Normalize each last-axis vector to zero mean and unit variance
    /// (ε inside the square root), then apply `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            );
        }
        let eps = T::lit(eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks_exact(d) {
            let (mean, std) = normalize_row(row, eps);
            data.extend(row.iter().enumerate().map(|(k, &x)| g[k] * (x - mean) / std + b[k]));
        }
        let out = Tensor::new(v.shape(), data)?;
        self.apply(&[x, gamma, beta], out, LayerNormFn { dim: d, eps })
    }

    /// Zero-padded dilated convolution over time. `x` is `[T, C_in]`, `w` is
    /// `[C_out, C_in, k]`, `b` is `[C_out]`; the output keeps `T`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize, mode: ConvMode) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 3 || xs.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return shape_err("conv1d", format!("x {:?}, w {:?}, b {:?}", xs, ws, self.shape(b)));
        }
        if ws[2] % 2 == 0 || dilation == 0 {
            return Err(NnError::InvalidConfig(format!(
                "conv1d needs an odd kernel and dilation >= 1 (k = {}, d = {dilation})",
                ws[2]
            )));
        }
        let f = Conv1dFn {
            len: xs[0],
            cin: ws[1],
            cout: ws[0],
            kernel: ws[2],
            dilation,
            mode,
        };
        let y = f.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::new(&[xs[0], ws[0]], y)?;
        self.apply(&[x, w, b], out, f)
    }

    /// Run one GRU layer over `x: [T, B, D]` from initial state `h0: [B, H]`.
    /// `w_ih` is `[3H, D]`, `w_hh` is `[3H, H]`, biases `[3H]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_layer(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, h0: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        let ok = xs.len() == 3
            && wi.len() == 2
            && wh.len() == 2
            && wi[1] == xs[2]
            && wh[1] * 3 == wh[0]
            && wi[0] == wh[0]
            && self.value(b_ih).len() == wi[0]
            && self.value(b_hh).len() == wi[0]
            && self.value(h0).len() == xs[1] * wh[1];
        if !ok {
            return shape_err(
                "gru",
                format!("x {:?}, w_ih {:?}, w_hh {:?}, h0 {:?}", xs, wi, wh, self.shape(h0)),
            );
        }
        let f = GruLayerFn {
            steps: xs[0],
            batch: xs[1],
            inp: xs[2],
            hidden: wh[1],
        };
        let y = f.forward(
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b_ih).data(),
            self.value(b_hh).data(),
            self.value(h0).data(),
        );
        let out = Tensor::new(&[xs[0], xs[1], wh[1]], y)?;
        self.apply(&[x, w_ih, w_hh, b_ih, b_hh, h0], out, f)
    }
}
