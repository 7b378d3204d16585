//! Chunked end-to-end training with Adam, gradient clipping and resumable
//! checkpoints.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnbf_nn::{clip_grad_norm, Adam, AdamConfig, Checkpoint, Graph, NnError, ParamStore};
use serde::{Deserialize, Serialize};

use crate::array_sim::{synthesize_scene, ManifestEntry};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::model::SeparationModel;
use crate::signal::WaveBuffer;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
/// Parameters are registered from this stream so initialization does not
/// depend on the data order.
const INIT_STREAM: u64 = 0x696e6974;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    /// Mean batch loss of every completed step.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    run: RunConfig,
    train_state: TrainState,
}

/// A model with its parameters and, for training checkpoints, optimizer state.
pub struct LoadedModel {
    pub config: RunConfig,
    pub state: TrainState,
    pub store: ParamStore<f32>,
    pub model: SeparationModel,
    pub adam: Adam<f32>,
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl LoadedModel {
    /// Freshly initialized parameters for `config`.
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = SeparationModel::new(&mut store, config, &mut init_rng(config.training.seed))?;
        Ok(Self {
            config: config.clone(),
            state: TrainState {
                seed: config.training.seed,
                ..TrainState::default()
            },
            store,
            model,
            adam: adam_for(config),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::default();
        ckpt.push_params(&self.store);
        let (m, v) = self.adam.moments();
        for (id, (mt, vt)) in self.store.ids().zip(m.iter().zip(v)) {
            let name = self.store.name(id);
            ckpt.push(format!("{ADAM_M}{name}"), mt);
            ckpt.push(format!("{ADAM_V}{name}"), vt);
        }
        let meta = Meta {
            run: self.config.clone(),
            train_state: self.state.clone(),
        };
        ckpt.config = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        ckpt.layout = String::from_utf8(self.model.layout().to_json()).expect("layout JSON is UTF-8");
        let path = path.as_ref();
        let tmp = tmp_path(path);
        ckpt.save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(path.as_ref())?;
        let meta: Meta = toml::from_str(&ckpt.config)
            .map_err(|e| Error::Config(format!("checkpoint configuration: {e}")))?;
        meta.run.validate()?;
        let mut loaded = Self::fresh(&meta.run)?;
        loaded.state = meta.train_state;
        let layout = FeatureLayout::from_json(ckpt.layout.as_bytes())?;
        layout.check_matches(loaded.model.layout())?;
        ckpt.load_params(&mut loaded.store)?;
        let names: Vec<String> = loaded.store.ids().map(|id| loaded.store.name(id).to_string()).collect();
        if names.iter().all(|n| ckpt.get(&format!("{ADAM_M}{n}")).is_some()) && loaded.state.step > 0 {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for n in &names {
                m.push(ckpt.tensor::<f32>(&format!("{ADAM_M}{n}"))?);
                v.push(ckpt.tensor::<f32>(&format!("{ADAM_V}{n}"))?);
            }
            loaded.adam.restore(loaded.state.step, m, v);
        }
        Ok(loaded)
    }
}

fn adam_for(config: &RunConfig) -> Adam<f32> {
    Adam::new(AdamConfig {
        lr: config.training.lr,
        ..AdamConfig::default()
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// One training example: mixture, reference and target direction.
pub struct Example {
    pub mixture: WaveBuffer,
    pub reference: Vec<f64>,
    pub doa: f64,
}

/// Regenerate a scene and cut a random chunk from it.
pub fn draw_example<R: Rng + ?Sized>(config: &RunConfig, entry: &ManifestEntry, rng: &mut R) -> Result<Example> {
    let spec = entry.scene_spec()?;
    let scene = synthesize_scene(&spec, entry.num_samples, &config.array, &config.stft)?;
    let chunk = config.training.chunk_samples(config.array.sample_rate);
    let len = scene.mixture.len();
    let full = scene.reference();
    let (mut start, mut n) = (0, len);
    if len > chunk {
        let s = rng.gen_range(0..=len - chunk);
        // a chunk falling entirely inside a pause has no usable reference
        if full[s..s + chunk].iter().any(|v| *v != 0.0) {
            (start, n) = (s, chunk);
        }
    }
    let mixture = scene.mixture.segment(start, n)?;
    let reference = full[start..start + n].to_vec();
    Ok(Example {
        mixture,
        reference,
        doa: spec.target_azimuth,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Mean training Si-SNR (negated loss), dB.
    pub si_snr: f64,
    pub grad_norm: f64,
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::Nn(NnError::NonFiniteValue { .. }) | Error::Nn(NnError::NonFiniteGradient { .. }) => Error::Diverged {
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

pub struct Trainer<'a> {
    pub loaded: LoadedModel,
    manifest: &'a [ManifestEntry],
}

impl<'a> Trainer<'a> {
    pub fn new(loaded: LoadedModel, manifest: &'a [ManifestEntry]) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Manifest("training manifest has no scenes".into()));
        }
        if loaded.config.training.steps > loaded.state.step && !loaded.model.is_trainable() {
            return Err(Error::Config(
                "no trainable beamformer parameters unless cRF training enabled".into(),
            ));
        }
        Ok(Self { loaded, manifest })
    }

    /// Run one optimizer step; the store is left untouched on failure.
    pub fn step(&mut self) -> Result<StepReport> {
        let lm = &mut self.loaded;
        let step = lm.state.step + 1;
        let cfg = &lm.config;
        let mut rng = step_rng(lm.state.seed, step);
        let batch = cfg.training.batch_size;
        let mut total = 0.0;
        let mut grads: Vec<Vec<f32>> = lm.store.ids().map(|id| vec![0.0; lm.store.value(id).len()]).collect();
        for _ in 0..batch {
            let entry = &self.manifest[rng.gen_range(0..self.manifest.len())];
            let ex = draw_example(cfg, entry, &mut rng)?;
            let p = lm.model.prepare(&ex.mixture, ex.doa)?;
            let mut g = Graph::new(&lm.store);
            let loss = lm.model.loss(&mut g, &p, &ex.reference).map_err(|e| diverged(step, e))?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {lv}"),
                });
            }
            total += lv;
            let scaled = g.scale(loss, 1.0 / batch as f64)?;
            let gr = g.backward(scaled)?;
            for (acc, id) in grads.iter_mut().zip(lm.store.ids()) {
                if let Some(d) = gr.param(id) {
                    acc.iter_mut().zip(d).for_each(|(a, b)| *a += *b);
                }
            }
        }
        lm.store.zero_grad();
        for (id, g) in lm.store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            lm.store.grad_mut(id).data_mut().copy_from_slice(&g);
        }
        lm.store.check_grads_finite().map_err(|e| diverged(step, e.into()))?;
        let grad_norm = clip_grad_norm(&mut lm.store, cfg.training.max_grad_norm);
        lm.adam.step(&mut lm.store).map_err(|e| diverged(step, e.into()))?;
        let loss = total / batch as f64;
        lm.state.step = step;
        lm.state.loss_history.push(loss);
        Ok(StepReport {
            step,
            loss,
            si_snr: -loss,
            grad_norm,
        })
    }

    /// Train up to `config.training.steps`, writing `out` at the start, every
    /// `checkpoint_every` steps and at the end. On divergence the last
    /// written checkpoint is kept.
    pub fn run(&mut self, out: &Path, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        if self.loaded.state.step == 0 {
            self.loaded.save(out)?;
        }
        let every = self.loaded.config.training.checkpoint_every;
        while self.loaded.state.step < self.loaded.config.training.steps {
            let report = self.step()?;
            on_step(&report);
            if report.step % every == 0 {
                self.loaded.save(out)?;
            }
        }
        self.loaded.save(out)
    }
}

