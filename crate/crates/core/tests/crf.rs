use ndarray::{Array3, Array4};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnbf::crf::{apply_crf, Crf, CrfEstimator, EstimatorConfig};
use rnnbf::signal::ComplexSpectrogram;
use rnnbf_nn::{Graph, ParamStore, Tensor};

fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn rand_spec(rng: &mut ChaCha8Rng, t: usize, f: usize, m: usize) -> ComplexSpectrogram {
    ComplexSpectrogram::new(Array3::from_shape_fn((t, f, m), |_| rand_c(rng)), 256 * t, 16000).unwrap()
}

fn rand_crf(rng: &mut ChaCha8Rng, t: usize, f: usize, kappa: usize) -> Crf {
    let k = 2 * kappa + 1;
    Crf::new(Array4::from_shape_fn((t, f, k, k), |_| rand_c(rng))).unwrap()
}

/// Neighbourhood sum written directly from the definition, looping over the
/// source bins instead of the offsets.
fn brute_force(y: &Array3<Complex64>, taps: &Array4<Complex64>, kappa: i64) -> Array3<Complex64> {
    let (t, f, m) = y.dim();
    let mut out = Array3::zeros((t, f, m));
    for ti in 0..t as i64 {
        for fi in 0..f as i64 {
            for u in 0..t as i64 {
                for v in 0..f as i64 {
                    let (d1, d2) = (u - ti, v - fi);
                    if d1.abs() > kappa || d2.abs() > kappa {
                        continue;
                    }
                    let c = taps[[u as usize, v as usize, (d1 + kappa) as usize, (d2 + kappa) as usize]];
                    for mi in 0..m {
                        out[[ti as usize, fi as usize, mi]] += c * y[[u as usize, v as usize, mi]];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn identity_filter_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(t, f, m) in &[(1, 1, 1), (1, 5, 2), (4, 1, 3), (7, 9, 4), (3, 257, 2)] {
        for kappa in 0..3 {
            let y = rand_spec(&mut rng, t, f, m);
            let out = apply_crf(&y, &Crf::identity(t, f, kappa)).unwrap();
            assert_eq!(out.data(), y.data(), "T={t} F={f} M={m} κ={kappa}");
        }
    }
}

#[test]
fn zero_filter_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = rand_spec(&mut rng, 4, 6, 3);
    let zero = Crf::new(Array4::zeros((4, 6, 3, 3))).unwrap();
    assert!(apply_crf(&y, &zero).unwrap().data().iter().all(|z| z.norm() == 0.0));
}

#[test]
fn matches_brute_force_neighbourhood_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(t, f, m) in &[(2, 3, 3), (3, 3, 2), (5, 4, 1)] {
        for kappa in 1..3 {
            let y = rand_spec(&mut rng, t, f, m);
            let crf = rand_crf(&mut rng, t, f, kappa);
            let out = apply_crf(&y, &crf).unwrap();
            let want = brute_force(y.data(), crf.taps(), kappa as i64);
            for (a, b) in out.data().iter().zip(&want) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn bilinear_in_filter_and_spectrogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, f, m) = (4, 5, 2);
    for _ in 0..10 {
        let (y1, y2) = (rand_spec(&mut rng, t, f, m), rand_spec(&mut rng, t, f, m));
        let (c1, c2) = (rand_crf(&mut rng, t, f, 1), rand_crf(&mut rng, t, f, 1));
        let (a, b) = (rand_c(&mut rng), rand_c(&mut rng));

        let ymix = y1.with_data(y1.data().mapv(|z| z * a) + y2.data().mapv(|z| z * b)).unwrap();
        let lhs = apply_crf(&ymix, &c1).unwrap();
        let rhs = apply_crf(&y1, &c1).unwrap().data().mapv(|z| z * a) + apply_crf(&y2, &c1).unwrap().data().mapv(|z| z * b);
        for (p, q) in lhs.data().iter().zip(&rhs) {
            assert!((p - q).norm() < 1e-12);
        }

        let cmix = Crf::new(c1.taps().mapv(|z| z * a) + c2.taps().mapv(|z| z * b)).unwrap();
        let lhs = apply_crf(&y1, &cmix).unwrap();
        let rhs = apply_crf(&y1, &c1).unwrap().data().mapv(|z| z * a) + apply_crf(&y1, &c2).unwrap().data().mapv(|z| z * b);
        for (p, q) in lhs.data().iter().zip(&rhs) {
            assert!((p - q).norm() < 1e-12);
        }
    }
}

#[test]
fn grid_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = rand_spec(&mut rng, 3, 4, 2);
    assert!(apply_crf(&y, &Crf::identity(3, 5, 1)).is_err());
    assert!(Crf::new(Array4::zeros((1, 1, 2, 2))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn channel_permutation_commutes(seed in any::<u64>(), m in 2usize..5, shift in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, f) = (3, 4);
        let y = rand_spec(&mut rng, t, f, m);
        let crf = rand_crf(&mut rng, t, f, 1);
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let yp = y.with_data(Array3::from_shape_fn((t, f, m), |(a, b, c)| y.data()[[a, b, perm[c]]])).unwrap();
        let out = apply_crf(&y, &crf).unwrap();
        let outp = apply_crf(&yp, &crf).unwrap();
        for a in 0..t {
            for b in 0..f {
                for c in 0..m {
                    prop_assert_eq!(outp.data()[[a, b, c]], out.data()[[a, b, perm[c]]]);
                }
            }
        }
    }
}

#[test]
fn estimator_heads_are_bounded_and_shaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = EstimatorConfig::default();
    let (frames, bins, dim) = (5, 257, 40);
    let mut store = ParamStore::<f64>::new();
    let est = CrfEstimator::new(&mut store, cfg, dim, bins, &mut rng).unwrap();
    let x: Vec<f64> = (0..frames * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::new(&[frames, dim], x).unwrap());
    let (s, n) = est.forward(&mut g, xv).unwrap();
    for v in [s, n] {
        assert_eq!(g.shape(v), &[frames, bins, 9, 2]);
        assert!(g.value(v).data().iter().all(|z| z.abs() < 1.0));
    }
    let crf = Crf::from_real(frames, bins, 1, &g.value(s).to_f64_vec()).unwrap();
    assert_eq!(crf.taps().dim(), (frames, bins, 3, 3));
}

#[test]
fn zero_head_gives_zero_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = EstimatorConfig {
        blocks: 1,
        layers_per_block: 2,
        channels: 8,
        ..EstimatorConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let est = CrfEstimator::new(&mut store, cfg, 12, 6, &mut rng).unwrap();
    let head = est.head_speech().clone();
    let zeros_w = vec![0.0; store.value(head.weight).len()];
    store.set(head.weight, &zeros_w).unwrap();
    let zeros_b = vec![0.0; store.value(head.bias).len()];
    store.set(head.bias, &zeros_b).unwrap();
    let mut g = Graph::new(&store);
    let x: Vec<f64> = (0..3 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xv = g.input(Tensor::new(&[3, 12], x).unwrap());
    let (s, _) = est.forward(&mut g, xv).unwrap();
    let crf = Crf::from_real(3, 6, 1, &g.value(s).to_f64_vec()).unwrap();
    assert!(crf.center().iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    assert!(crf.taps().iter().all(|z| *z == Complex64::new(0.0, 0.0)));
}
