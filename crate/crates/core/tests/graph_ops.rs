//! Finite-difference checks of the domain operators in 64-bit mode.

use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnbf::graph_ops::{apply_crf, beam_apply, complex_matmul, frame_cov, istft, mask_norm, select_channel, si_snr_loss};
use rnnbf::metrics::si_snr;
use rnnbf::signal::{StftConfig, Synthesis};
use rnnbf::Error;
use rnnbf_nn::gradcheck::{central_difference, max_relative_error};
use rnnbf_nn::{Graph, ParamStore, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_y(rng: &mut ChaCha8Rng, t: usize, f: usize, m: usize) -> Arc<Array3<Complex64>> {
    Arc::new(Array3::from_shape_fn((t, f, m), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
}

/// Max relative error between analytic and numeric gradients of
/// `Σ c ⊙ forward(inputs)` (or of `forward` itself when it is scalar).
fn check(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let out_len = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = forward(&mut g, &vars);
        g.value(y).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let y = forward(&mut g, &vars);
        let l = if out_len == 1 { y } else { g.weighted_sum(y, weights.clone()).unwrap() };
        (g, vars, l)
    };
    let (g, vars, l) = run(&inputs);
    let grads = g.backward(l).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let idx: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_difference(
        |x| {
            let mut pos = 0;
            let ins: Vec<Tensor<f64>> = inputs
                .iter()
                .map(|t| {
                    let out = Tensor::new(t.shape(), x[pos..pos + t.len()].to_vec()).unwrap();
                    pos += t.len();
                    out
                })
                .collect();
            let (g, _, l) = run(&ins);
            g.value(l).data()[0]
        },
        &flat,
        &idx,
        H,
    );
    max_relative_error(&analytic, &numeric, FLOOR)
}

#[test]
fn apply_crf_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(t, f, m, kappa) in &[(2, 3, 2, 1), (4, 3, 3, 1), (3, 5, 1, 2)] {
        let k = (2 * kappa + 1) * (2 * kappa + 1);
        let y = rand_y(&mut rng, t, f, m);
        let crf = Tensor::new(&[t, f, k, 2], rand_vec(&mut rng, t * f * k * 2)).unwrap();
        let err = check(vec![crf], |g, v| apply_crf(g, v[0], y.clone(), kappa).unwrap());
        assert!(err < TOL, "apply_crf {t}x{f}x{m}: {err:e}");
    }
}

#[test]
fn frame_cov_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in 1..4 {
        let s = Tensor::new(&[2, 3, m, 2], rand_vec(&mut rng, 12 * m)).unwrap();
        let err = check(vec![s], |g, v| frame_cov(g, v[0]).unwrap());
        assert!(err < TOL, "frame_cov m={m}: {err:e}");

        let w = 2 * m * m;
        let a = Tensor::new(&[2, 3, w], rand_vec(&mut rng, 6 * w)).unwrap();
        let b = Tensor::new(&[2, 3, w], rand_vec(&mut rng, 6 * w)).unwrap();
        let err = check(vec![a, b], |g, v| complex_matmul(g, v[0], v[1]).unwrap());
        assert!(err < TOL, "complex_matmul m={m}: {err:e}");
    }
}

#[test]
fn complex_matmul_forward_matches_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 3;
    let (a, b) = (rand_vec(&mut rng, 18), rand_vec(&mut rng, 18));
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let av = g.constant(Tensor::new(&[18], a.clone()).unwrap());
    let bv = g.constant(Tensor::new(&[18], b.clone()).unwrap());
    let c = complex_matmul(&mut g, av, bv).unwrap();
    let cz = g.value(c).data();
    let at = |x: &[f64], i: usize, j: usize| Complex64::new(x[i * m + j], x[9 + i * m + j]);
    for i in 0..m {
        for j in 0..m {
            let want: Complex64 = (0..m).map(|k| at(&a, i, k) * at(&b, k, j)).sum();
            assert!((Complex64::new(cz[i * m + j], cz[9 + i * m + j]) - want).norm() < 1e-14);
        }
    }
}

#[test]
fn mask_norm_gradient_and_degenerate_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, f, m) = (4, 3, 2);
    let cov = Tensor::new(&[t, f, 2 * m * m], rand_vec(&mut rng, t * f * 2 * m * m)).unwrap();
    let crf = Tensor::new(&[t, f, 9, 2], rand_vec(&mut rng, t * f * 18)).unwrap();
    let err = check(vec![cov.clone(), crf], |g, v| mask_norm(g, v[0], v[1]).unwrap());
    assert!(err < TOL, "mask_norm: {err:e}");

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let cv = g.input(cov);
    let zero = g.input(Tensor::zeros(&[t, f, 9, 2]));
    assert!(matches!(mask_norm(&mut g, cv, zero), Err(Error::DegenerateMask { f: 0, .. })));
}

#[test]
fn beam_apply_and_select_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, f, m) = (3, 4, 3);
    let y = rand_y(&mut rng, t, f, m);
    let w = Tensor::new(&[t, f, 2 * m], rand_vec(&mut rng, t * f * 2 * m)).unwrap();
    let err = check(vec![w], |g, v| beam_apply(g, v[0], y.clone()).unwrap());
    assert!(err < TOL, "beam_apply: {err:e}");

    let x = Tensor::new(&[t, f, m, 2], rand_vec(&mut rng, t * f * m * 2)).unwrap();
    let err = check(vec![x], |g, v| select_channel(g, v[0], 1).unwrap());
    assert!(err < TOL, "select_channel: {err:e}");
}

#[test]
fn istft_and_si_snr_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = StftConfig {
        fft_size: 16,
        window_length: 16,
        hop: 8,
        ..StftConfig::default()
    };
    let len = 40;
    let synth = Arc::new(Synthesis::new(&cfg, len).unwrap());
    let frames = synth.frames();
    let x = Tensor::new(&[frames, 9, 2], rand_vec(&mut rng, frames * 18)).unwrap();
    let err = check(vec![x.clone()], |g, v| istft(g, v[0], synth.clone()).unwrap());
    assert!(err < TOL, "istft: {err:e}");

    let reference = rand_vec(&mut rng, len);
    let err = check(vec![x], |g, v| {
        let s = istft(g, v[0], synth.clone()).unwrap();
        si_snr_loss(g, s, &reference).unwrap()
    });
    assert!(err < TOL, "istft + si_snr: {err:e}");
}

#[test]
fn si_snr_loss_is_negative_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = rand_vec(&mut rng, 200);
    let est: Vec<f64> = s.iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let e = g.input(Tensor::new(&[200], est.clone()).unwrap());
    let l = si_snr_loss(&mut g, e, &s).unwrap();
    assert!((g.value(l).data()[0] + si_snr(&est, &s).unwrap()).abs() < 1e-9);

    // invariant to reference scaling
    let scaled: Vec<f64> = s.iter().map(|v| v * 4.0).collect();
    let l2 = si_snr_loss(&mut g, e, &scaled).unwrap();
    assert!((g.value(l).data()[0] - g.value(l2).data()[0]).abs() < 1e-9);

    assert!(matches!(si_snr_loss(&mut g, e, &[0.0; 200]), Err(Error::ZeroReference)));
}
