use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnnbf_nn::init::uniform;
use rnnbf_nn::{
    clip_grad_norm, Adam, AdamConfig, Conv1d, ConvMode, Graph, Gru, LayerNorm, Linear, NnError, PRelu, ParamStore,
    Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn affine_identity_passes_input_through() {
    let mut store = ParamStore::<f64>::new();
    let fc = Linear::new(&mut store, "fc", 3, 3, &mut rng(0)).unwrap();
    store.set(fc.weight, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    store.set(fc.bias, &[0.; 3]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 0., -7.]).unwrap());
    let y = fc.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn linear_rejects_shape_mismatch() {
    let mut store = ParamStore::<f64>::new();
    let fc = Linear::new(&mut store, "fc", 3, 2, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(fc.forward(&mut g, x), Err(NnError::Shape { .. })));
}

#[test]
fn prelu_is_identity_on_nonnegative_inputs() {
    let mut store = ParamStore::<f64>::new();
    let act = PRelu::new(&mut store, "act", 2).unwrap();
    store.set(act.slope, &[-3.0, 7.0]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(&[2, 2], vec![0., 1., 2.5, 1e-9]).unwrap());
    let y = act.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[0., 1., 2.5, 1e-9]);
    let x = g.constant(Tensor::new(&[1, 2], vec![-1., -1.]).unwrap());
    let y = act.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[3., -7.]);
}

#[test]
fn layer_norm_keeps_standardized_input_and_maps_constants_to_beta() {
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let mut g = Graph::new(&store);
    // mean 0, biased variance 1
    let s = 1.0f64;
    let x = g.constant(Tensor::new(&[1, 4], vec![-s, s, -s, s]).unwrap());
    let y = ln.forward(&mut g, x).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    drop(g);

    store.set(ln.beta, &[0.1, -0.2, 0.3, 0.4]).unwrap();
    let mut g = Graph::new(&store);
    let c = g.constant(Tensor::full(&[1, 4], 5.0));
    let y = ln.forward(&mut g, c).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, -0.2, 0.3, 0.4]);
}

#[test]
fn conv_with_unit_kernel_and_identity_weights_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv1d::new(&mut store, "c", 2, 2, 1, 1, ConvMode::Centered, &mut rng(1)).unwrap();
    store.set(conv.weight, &[1., 0., 0., 1.]).unwrap();
    store.set(conv.bias, &[0., 0.]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(uniform(&mut rng(2), &[5, 2], 1.0));
    let y = conv.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn dilated_impulse_response_has_taps_four_frames_apart() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv1d::new(&mut store, "c", 1, 1, 3, 4, ConvMode::Centered, &mut rng(1)).unwrap();
    store.set(conv.weight, &[1., 2., 3.]).unwrap();
    store.set(conv.bias, &[0.]).unwrap();
    let mut x = vec![0.0; 13];
    x[6] = 1.0;
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::new(&[13, 1], x).unwrap());
    let y = conv.forward(&mut g, xv).unwrap();
    let mut expect = vec![0.0; 13];
    // out[t] = Σ_j w_j x[t + (j-1)·4]: the impulse at 6 shows up at 6∓4
    expect[10] = 1.0;
    expect[6] = 2.0;
    expect[2] = 3.0;
    assert_eq!(g.value(y).data(), &expect[..]);
}

#[test]
fn conv_rejects_even_kernel() {
    let mut store = ParamStore::<f64>::new();
    let err = Conv1d::new(&mut store, "c", 1, 1, 2, 1, ConvMode::Centered, &mut rng(1));
    assert!(matches!(err, Err(NnError::InvalidConfig(_))));
}

#[test]
fn gru_with_zero_weights_stays_at_zero() {
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, "gru", 3, 4, 2, &mut rng(3)).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        store.set(id, &vec![0.0; n]).unwrap();
    }
    let mut g = Graph::new(&store);
    let x = g.constant(uniform(&mut rng(4), &[6, 2, 3], 1.0));
    let y = gru.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_output_ignores_future_inputs() {
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, "gru", 3, 4, 2, &mut rng(5)).unwrap();
    let x = uniform::<f64, _>(&mut rng(6), &[8, 2, 3], 1.0);
    let mut perturbed = x.clone();
    // change every input at t >= 5
    for v in &mut perturbed.data_mut()[5 * 6..] {
        *v += 0.5;
    }
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let y = gru.forward(&mut g, xv).unwrap();
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(x), run(perturbed));
    let per_step = 2 * 4;
    assert_eq!(a[..5 * per_step], b[..5 * per_step]);
    assert_ne!(a[5 * per_step..], b[5 * per_step..]);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(7);
        let gru = Gru::new(&mut store, "gru", 3, 8, 2, &mut r).unwrap();
        let fc = Linear::new(&mut store, "fc", 8, 2, &mut r).unwrap();
        let x = uniform::<f32, _>(&mut r, &[5, 3, 3], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let h = gru.forward(&mut g, xv).unwrap();
        let y = fc.forward(&mut g, h).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn every_reachable_parameter_gets_a_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(8);
    let gru = Gru::new(&mut store, "gru", 3, 4, 2, &mut r).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let fc = Linear::new(&mut store, "fc", 4, 2, &mut r).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(uniform(&mut r, &[4, 2, 3], 1.0));
    let h = gru.forward(&mut g, x).unwrap();
    let h = ln.forward(&mut g, h).unwrap();
    let y = fc.forward(&mut g, h).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    let mut reached: Vec<_> = grads.reached_params().collect();
    reached.sort();
    assert_eq!(reached, store.ids().collect::<Vec<_>>());
}

#[test]
fn duplicate_parameter_names_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.register("w", Tensor::zeros(&[1])).unwrap();
    assert!(matches!(store.register("w", Tensor::zeros(&[2])), Err(NnError::DuplicateParameter(_))));
}

#[test]
fn non_finite_forward_values_are_reported() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::scalar(1e300));
    assert!(matches!(g.mul(x, x), Err(NnError::NonFiniteValue { .. })));
}

#[test]
fn adam_leaves_parameters_alone_for_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.register("w", Tensor::new(&[3], vec![1., -2., 3.]).unwrap()).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..5 {
        opt.step(&mut store).unwrap();
    }
    assert_eq!(store.value(id).data(), &[1., -2., 3.]);
}

#[test]
fn adam_names_the_parameter_with_a_nan_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.register("ok", Tensor::zeros(&[2])).unwrap();
    let bad = store.register("estimator.head.weight", Tensor::zeros(&[2])).unwrap();
    store.grad_mut(bad).data_mut()[1] = f64::NAN;
    let mut opt = Adam::new(AdamConfig::default());
    match opt.step(&mut store) {
        Err(NnError::NonFiniteGradient { name }) => assert_eq!(name, "estimator.head.weight"),
        other => panic!("expected NaN error, got {other:?}"),
    }
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn clipping_halves_gradients_with_norm_twenty() {
    let mut store = ParamStore::<f64>::new();
    let a = store.register("a", Tensor::zeros(&[2])).unwrap();
    let b = store.register("b", Tensor::zeros(&[1])).unwrap();
    // global norm sqrt(12² + 16²) = 20
    store.grad_mut(a).data_mut().copy_from_slice(&[12.0, 0.0]);
    store.grad_mut(b).data_mut().copy_from_slice(&[-16.0]);
    let norm = clip_grad_norm(&mut store, 10.0);
    assert_eq!(norm, 20.0);
    assert_eq!(store.grad(a).data(), &[6.0, 0.0]);
    assert_eq!(store.grad(b).data(), &[-8.0]);
}

proptest! {
    #[test]
    fn clipping_never_increases_any_gradient(
        grads in prop::collection::vec(-100.0f64..100.0, 1..40),
        max_norm in 0.01f64..50.0,
    ) {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("p", Tensor::zeros(&[grads.len()])).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&grads);
        clip_grad_norm(&mut store, max_norm);
        let after = store.grad(id).data();
        for (a, b) in after.iter().zip(&grads) {
            prop_assert!(a.abs() <= b.abs());
        }
        let norm: f64 = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= max_norm * (1.0 + 1e-12) || norm <= grads.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
}
