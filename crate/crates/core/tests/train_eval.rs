use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnbf::array_sim::{generate_manifest, ManifestEntry};
use rnnbf::beamformer::{BeamformerKind, NormMode};
use rnnbf::config::RunConfig;
use rnnbf::eval::{evaluate, System};
use rnnbf::metrics::{sdr, si_snr, METRIC_CLAMP_DB};
use rnnbf::signal::StftConfig;
use rnnbf::train::{LoadedModel, Trainer};
use rnnbf::Error;

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn si_snr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = noise(&mut rng, 1000);
    assert_eq!(si_snr(&s, &s).unwrap(), METRIC_CLAMP_DB);
    let scaled: Vec<f64> = s.iter().map(|v| 3.7 * v).collect();
    assert_eq!(si_snr(&scaled, &s).unwrap(), METRIC_CLAMP_DB);

    // e ⟂ s with ‖e‖ = ‖s‖ after mean removal
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sc: Vec<f64> = s.iter().map(|v| v - mean(&s)).collect();
    let r = noise(&mut rng, 1000);
    let rc: Vec<f64> = r.iter().map(|v| v - mean(&r)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let proj = dot(&rc, &sc) / dot(&sc, &sc);
    let e: Vec<f64> = rc.iter().zip(&sc).map(|(a, b)| a - proj * b).collect();
    let k = (dot(&sc, &sc) / dot(&e, &e)).sqrt();
    let est: Vec<f64> = sc.iter().zip(&e).map(|(a, b)| a + k * b).collect();
    assert!(si_snr(&est, &sc).unwrap().abs() < 1e-9);

    assert!(matches!(si_snr(&s, &[0.0; 1000]), Err(Error::ZeroReference)));
    assert!(si_snr(&s[..10], &s).is_err());
}

#[test]
fn sdr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = noise(&mut rng, 500);
    assert_eq!(sdr(&s, &s).unwrap(), METRIC_CLAMP_DB);
    let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
    assert!(sdr(&doubled, &s).unwrap().abs() < 1e-9);
    assert!(sdr(&vec![0.0; 500], &s).unwrap().abs() < 1e-9);
    assert!(matches!(sdr(&s, &[0.0; 500]), Err(Error::ZeroReference)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_snr_scale_invariant_sdr_not(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = noise(&mut rng, 256);
        let e: Vec<f64> = s.iter().map(|v| v + 0.5 * rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
        let (a, b) = (si_snr(&e, &s).unwrap(), si_snr(&scaled, &s).unwrap());
        prop_assert!((a - b).abs() < 1e-8);
        if (alpha - 1.0).abs() > 0.05 {
            prop_assert!((sdr(&e, &s).unwrap() - sdr(&scaled, &s).unwrap()).abs() > 1e-6);
        }
    }
}

fn small_manifest(cfg: &RunConfig, n: usize, seed: u64) -> Vec<ManifestEntry> {
    generate_manifest(n, seed, &cfg.array).unwrap()
}

#[test]
fn identity_system_equals_mixture_row() {
    let mut cfg = RunConfig::default();
    cfg.array.scene_seconds = 0.25;
    let manifest = small_manifest(&cfg, 12, 3);
    let rep = evaluate(&System::Identity, &cfg, &manifest).unwrap();
    for r in &rep.scenes {
        assert_eq!(r.si_snr, r.mixture_si_snr);
        assert_eq!(r.sdr, r.mixture_sdr);
    }
    assert_eq!(rep.overall.si_snr, rep.overall.mixture_si_snr);
}

#[test]
fn oracle_mvdr_beats_mixture_and_buckets_recombine() {
    let mut cfg = RunConfig::default();
    cfg.array.scene_seconds = 0.5;
    let manifest = small_manifest(&cfg, 12, 4);
    let rep = evaluate(&System::Oracle(BeamformerKind::Mvdr), &cfg, &manifest).unwrap();
    assert_eq!(rep.system, "oracle-mvdr");
    for r in &rep.scenes {
        assert!(r.si_snr > r.mixture_si_snr, "{}: {} vs {}", r.scene_id, r.si_snr, r.mixture_si_snr);
    }
    for c in &rep.cells {
        assert_eq!(c.means.scenes, 1);
        assert!(c.means.si_snr > c.means.mixture_si_snr);
    }
    let n: usize = rep.cells.iter().map(|c| c.means.scenes).sum();
    let weighted: f64 = rep.cells.iter().map(|c| c.means.si_snr * c.means.scenes as f64).sum::<f64>() / n as f64;
    assert!((weighted - rep.overall.si_snr).abs() < 1e-9);
    let weighted: f64 = rep.by_angle.iter().map(|(_, m)| m.sdr * m.scenes as f64).sum::<f64>() / n as f64;
    assert!((weighted - rep.overall.sdr).abs() < 1e-9);

    let again = evaluate(&System::Oracle(BeamformerKind::Mvdr), &cfg, &manifest).unwrap();
    assert_eq!(rep.to_tsv(true), again.to_tsv(true));
    assert_eq!(rep.to_jsonl(), again.to_jsonl());
    assert!(rep.to_tsv(true).starts_with("# SDR is the plain energy ratio"));
    assert_eq!(rep.to_jsonl().lines().count(), 1 + 12 + 12 + 1);
}

#[test]
fn oracle_gev_runs() {
    let mut cfg = RunConfig::default();
    cfg.array.scene_seconds = 0.25;
    let manifest = small_manifest(&cfg, 12, 5);
    let rep = evaluate(&System::Oracle(BeamformerKind::Gev), &cfg, &manifest).unwrap();
    assert!(rep.scenes.iter().all(|r| r.si_snr.is_finite()));
    assert!(evaluate(&System::Oracle(BeamformerKind::GrnnBf), &cfg, &manifest).is_err());
}

fn tiny_train_config(kind: BeamformerKind, norm: NormMode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stft = StftConfig {
        fft_size: 128,
        window_length: 128,
        hop: 64,
        ..StftConfig::default()
    };
    cfg.array.scene_seconds = 0.2;
    cfg.estimator.blocks = 1;
    cfg.estimator.layers_per_block = 2;
    cfg.estimator.channels = 16;
    cfg.beamformer.kind = kind;
    cfg.beamformer.normalization = norm;
    cfg.beamformer.hidden = 16;
    cfg.beamformer.dnn_hidden = 16;
    cfg.training.chunk_seconds = 0.1;
    cfg.training.lr = 1e-3;
    cfg.training.seed = seed;
    cfg.training.batch_size = 2;
    cfg.training.checkpoint_every = 5;
    cfg
}

#[test]
fn training_is_deterministic_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config(BeamformerKind::GrnnBf, NormMode::LayerNorm, 9);
    cfg.training.steps = 12;
    let manifest = small_manifest(&cfg, 12, 6);

    let run = |path: &std::path::Path| {
        let mut tr = Trainer::new(LoadedModel::fresh(&cfg).unwrap(), &manifest).unwrap();
        tr.run(path, |_| {}).unwrap();
        tr.loaded.state.loss_history.clone()
    };
    let a = run(&dir.path().join("a.ckpt"));
    let b = run(&dir.path().join("b.ckpt"));
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );

    // stop after 5 steps, reload and continue to 12
    let mut half = cfg.clone();
    half.training.steps = 5;
    let path = dir.path().join("c.ckpt");
    let mut tr = Trainer::new(LoadedModel::fresh(&half).unwrap(), &manifest).unwrap();
    tr.run(&path, |_| {}).unwrap();
    let mut loaded = LoadedModel::load(&path).unwrap();
    assert_eq!(loaded.state.step, 5);
    loaded.config.training.steps = 12;
    let mut tr = Trainer::new(loaded, &manifest).unwrap();
    tr.run(&path, |_| {}).unwrap();
    assert_eq!(tr.loaded.state.loss_history, a);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("a.ckpt")).unwrap());
}

#[test]
fn classic_kinds_need_crf_training() {
    let mut cfg = tiny_train_config(BeamformerKind::Mvdr, NormMode::LayerNorm, 1);
    cfg.training.steps = 3;
    let manifest = small_manifest(&cfg, 12, 7);
    let err = Trainer::new(LoadedModel::fresh(&cfg).unwrap(), &manifest).err().unwrap();
    assert!(err.to_string().contains("no trainable beamformer parameters unless cRF training enabled"));

    cfg.training.train_crf = true;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crf.ckpt");
    let mut tr = Trainer::new(LoadedModel::fresh(&cfg).unwrap(), &manifest).unwrap();
    tr.run(&path, |_| {}).unwrap();
    let loaded = LoadedModel::load(&path).unwrap();
    let rep = evaluate(&System::Model(&loaded), &loaded.config, &manifest[..2]).unwrap();
    assert!(rep.scenes.iter().all(|r| r.si_snr.is_finite()));
    assert_eq!(rep.system, "crf-mvdr");
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    let mut cfg = tiny_train_config(BeamformerKind::GrnnBf, NormMode::MaskNorm, 2);
    cfg.training.steps = 50;
    cfg.training.lr = 1e30;
    let manifest = small_manifest(&cfg, 12, 8);
    let mut tr = Trainer::new(LoadedModel::fresh(&cfg).unwrap(), &manifest).unwrap();
    let err = tr.run(&path, |_| {}).unwrap_err();
    let Error::Diverged { step, .. } = err else {
        panic!("expected divergence, got {err}");
    };
    let kept = LoadedModel::load(&path).unwrap();
    assert!(kept.state.step < step);
    assert!(kept.state.loss_history.iter().all(|v| v.is_finite()));
}

#[test]
fn loss_decreases_over_100_steps() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let mut cfg = tiny_train_config(BeamformerKind::GrnnBf, NormMode::LayerNorm, seed);
        cfg.training.steps = 100;
        cfg.training.batch_size = 1;
        let manifest = small_manifest(&cfg, 12, 100 + seed);
        let mut tr = Trainer::new(LoadedModel::fresh(&cfg).unwrap(), &manifest).unwrap();
        // loss of a fixed probe batch before and after
        let probe = |lm: &LoadedModel| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut total = 0.0;
            for e in &manifest {
                let ex = rnnbf::train::draw_example(&lm.config, e, &mut rng).unwrap();
                let p = lm.model.prepare(&ex.mixture, ex.doa).unwrap();
                let mut g = rnnbf_nn::Graph::inference(&lm.store);
                let l = lm.model.loss(&mut g, &p, &ex.reference).unwrap();
                total += g.value(l).data()[0] as f64;
            }
            total / manifest.len() as f64
        };
        let before = probe(&tr.loaded);
        for _ in 0..100 {
            tr.step().unwrap();
        }
        drops.push(before - probe(&tr.loaded));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median loss change {drops:?}");
}

#[test]
fn config_round_trip_and_rejections() {
    let cfg = RunConfig::default();
    let (back, _) = RunConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let (partial, prov) = RunConfig::parse("[beamformer]\nkind = \"rnn-gev\"\n").unwrap();
    assert_eq!(partial.beamformer.kind, BeamformerKind::RnnGev);
    let echo = partial.echo(&prov);
    assert!(echo.contains("beamformer.kind = \"rnn-gev\"  # user"));
    assert!(echo.contains("training.lr = 0.0001  # default"));
    assert!(RunConfig::parse("[beamformer]\nbogus = 1\n").is_err());
    assert!(RunConfig::parse("[beamformer]\nkind = \"fancy\"\n").is_err());
    assert!(RunConfig::parse("schema_version = 9\n").is_err());
    assert!(RunConfig::parse("[training]\nchunk_seconds = 0.01\n").is_err());
}
