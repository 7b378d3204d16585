//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Uniform in `[-bound, bound]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut degenerate = false;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            // two passes keep the basis orthogonal to working precision
            for _ in 0..2 {
                for u in &q {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if !degenerate {
            return q.into_iter().flatten().collect();
        }
    }
}
