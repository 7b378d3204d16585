use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{pseudo_speech, render_source, ArrayGeometry};
use crate::error::{Error, Result};
use crate::signal::{StftConfig, WaveBuffer};

/// SIR and SNR are measured on this microphone.
pub const REFERENCE_MIC: usize = 0;

// RNG streams inside one scene seed
const NOISE_STREAM: u64 = 1000;

/// Array and scene-synthesis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub positions: Vec<f64>,
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    pub scene_seconds: f64,
    /// RMS of the dry target before rendering.
    pub target_rms: f64,
    pub sir_db: [f64; 2],
    pub snr_db: [f64; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            positions: ArrayGeometry::desk().positions().to_vec(),
            speed_of_sound: ArrayGeometry::DEFAULT_SPEED_OF_SOUND,
            sample_rate: WaveBuffer::DEFAULT_SAMPLE_RATE,
            scene_seconds: 1.0,
            target_rms: 0.05,
            sir_db: [-6.0, 6.0],
            snr_db: [18.0, 30.0],
        }
    }
}

impl SimConfig {
    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.positions.clone(), self.speed_of_sound)
    }

    pub fn num_samples(&self) -> usize {
        (self.scene_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.scene_seconds.is_finite() && self.scene_seconds > 0.0) {
            return Err(Error::Config(format!("scene_seconds {}", self.scene_seconds)));
        }
        if !(self.target_rms.is_finite() && self.target_rms > 0.0) {
            return Err(Error::Config(format!("target_rms {}", self.target_rms)));
        }
        for (name, r) in [("sir_db", self.sir_db), ("snr_db", self.snr_db)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} range {r:?}")));
            }
        }
        Ok(())
    }
}

/// What a scene contains; everything else is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub target_azimuth: f64,
    pub interferer_azimuths: Vec<f64>,
    /// Ignored when there are no interferers.
    pub sir_db: f64,
    pub snr_db: f64,
    pub num_speakers: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.num_speakers) {
            return Err(Error::Scene(format!("{} speakers", self.num_speakers)));
        }
        if self.num_speakers != 1 + self.interferer_azimuths.len() {
            return Err(Error::Scene(format!(
                "{} speakers but {} interferers",
                self.num_speakers,
                self.interferer_azimuths.len()
            )));
        }
        for &az in &self.interferer_azimuths {
            let gap = (az - self.target_azimuth).abs();
            if !(gap > 0.0 && gap <= 180.0) {
                return Err(Error::Scene(format!(
                    "interferer at {az} deg is {gap} deg from the target"
                )));
            }
        }
        if !self.sir_db.is_finite() || !self.snr_db.is_finite() {
            return Err(Error::Scene("non-finite SIR/SNR".into()));
        }
        Ok(())
    }

    /// Smallest angle between the target and any interferer.
    pub fn min_gap(&self) -> Option<f64> {
        self.interferer_azimuths
            .iter()
            .map(|az| (az - self.target_azimuth).abs())
            .min_by(f64::total_cmp)
    }
}

/// A rendered mixture with its components kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub mixture: WaveBuffer,
    pub target_clean: WaveBuffer,
    pub noise_plus_interference: WaveBuffer,
    pub spec: SceneSpec,
}

impl Scene {
    /// Clean target at the reference microphone.
    pub fn reference(&self) -> Vec<f64> {
        self.target_clean.channel(REFERENCE_MIC).to_vec()
    }
}

fn ref_energy(w: &WaveBuffer) -> f64 {
    w.energy(REFERENCE_MIC)
}

/// Spatially white Gaussian noise, unit variance per channel.
pub fn white_noise(rng: &mut ChaCha8Rng, channels: usize, len: usize, sample_rate: u32) -> Result<WaveBuffer> {
    let a = Array2::from_shape_fn((channels, len), |_| StandardNormal.sample(rng));
    WaveBuffer::new(a, sample_rate)
}

/// Render and mix: interferers are first equalized to the target's
/// reference-mic energy, then their sum is scaled to `sir_db`; `noise`
/// (already multichannel) is scaled to `snr_db` against the target.
pub fn mix_scene(
    spec: &SceneSpec,
    target: &WaveBuffer,
    interferers: &[WaveBuffer],
    noise: &WaveBuffer,
    geom: &ArrayGeometry,
    cfg: &StftConfig,
) -> Result<Scene> {
    spec.validate()?;
    if interferers.len() != spec.interferer_azimuths.len() {
        return Err(Error::Scene(format!(
            "{} interferer signals for {} azimuths",
            interferers.len(),
            spec.interferer_azimuths.len()
        )));
    }
    let sr = target.sample_rate();
    let len = target.len();
    for w in interferers {
        if w.sample_rate() != sr || w.len() != len || w.channels() != 1 {
            return Err(Error::Scene("interferers must be mono and match the target".into()));
        }
    }
    if noise.sample_rate() != sr || noise.len() != len || noise.channels() != geom.num_mics() {
        return Err(Error::Scene(format!(
            "noise must be {} channels of {len} samples",
            geom.num_mics()
        )));
    }

    let target_img = render_source(target, geom, spec.target_azimuth, cfg)?;
    let e_target = ref_energy(&target_img);
    if !(e_target > 0.0) {
        return Err(Error::Scene("target has zero energy".into()));
    }

    let mut npi = Array2::<f64>::zeros((geom.num_mics(), len));
    if !interferers.is_empty() {
        let mut sum = Array2::<f64>::zeros((geom.num_mics(), len));
        for (w, &az) in interferers.iter().zip(&spec.interferer_azimuths) {
            let img = render_source(w, geom, az, cfg)?;
            let e = ref_energy(&img);
            if !(e > 0.0) {
                return Err(Error::Scene(format!("interferer at {az} deg is silent")));
            }
            sum.scaled_add((e_target / e).sqrt(), img.samples());
        }
        let e_sum = sum.row(REFERENCE_MIC).iter().map(|x| x * x).sum::<f64>();
        let gain = (e_target / e_sum / 10f64.powf(spec.sir_db / 10.0)).sqrt();
        npi.scaled_add(gain, &sum);
    }

    let e_noise = ref_energy(noise);
    if e_noise > 0.0 {
        let gain = (e_target / e_noise / 10f64.powf(spec.snr_db / 10.0)).sqrt();
        npi.scaled_add(gain, noise.samples());
    }

    let mixture = target_img.samples() + &npi;
    Ok(Scene {
        mixture: WaveBuffer::new(mixture, sr)?,
        target_clean: target_img,
        noise_plus_interference: WaveBuffer::new(npi, sr)?,
        spec: spec.clone(),
    })
}

fn source_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Regenerate a scene of `len` samples from its spec: pseudo-speech sources
/// and white sensor noise all come from independent streams of `spec.seed`.
pub fn synthesize_scene(spec: &SceneSpec, len: usize, sim: &SimConfig, cfg: &StftConfig) -> Result<Scene> {
    sim.validate()?;
    let geom = sim.geometry()?;
    let sr = sim.sample_rate;
    let source = |stream: u64, rms: f64| -> Result<WaveBuffer> {
        let x = pseudo_speech(&mut source_rng(spec.seed, stream), len, sr);
        WaveBuffer::mono(x.into_iter().map(|v| v * rms).collect(), sr)
    };
    let target = source(0, sim.target_rms)?;
    let interferers = (0..spec.interferer_azimuths.len())
        .map(|k| source(1 + k as u64, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let noise = white_noise(&mut source_rng(spec.seed, NOISE_STREAM), geom.num_mics(), len, sr)?;
    mix_scene(spec, &target, &interferers, &noise, &geom, cfg)
}
