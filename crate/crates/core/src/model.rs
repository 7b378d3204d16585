//! The end-to-end separation pipeline: features, cRF estimation, covariance
//! construction, beamforming weights and synthesis.

use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use rand::Rng;
use rnnbf_nn::{Graph, ParamStore, Real, Tensor, Var};

use crate::array_sim::{steering_vector, ArrayGeometry};
use crate::beamformer::{
    apply_beamformer, crf_chunk_covariance, gev_weights, mvdr_weights, reference_rescale, BeamformerKind,
    RecurrentBeamformer,
};
use crate::config::RunConfig;
use crate::crf::{apply_crf as apply_crf_f64, Crf, CrfEstimator};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureLayout};
use crate::graph_ops::{apply_crf, beam_apply, frame_cov, istft, select_channel, si_snr_loss};
use crate::signal::{stft, ComplexSpectrogram, Synthesis, WaveBuffer};

/// Spectral input to the network, normalized to unit mean power.
#[derive(Clone)]
pub struct Prepared {
    pub spec: ComplexSpectrogram,
    pub y: Arc<Array3<Complex64>>,
    /// `sqrt(mean |Y|²)` of the unnormalized spectrogram.
    pub scale: f64,
    /// `[T, D]`.
    pub features: Tensor<f64>,
    pub synth: Arc<Synthesis>,
}

pub struct SeparationModel {
    config: RunConfig,
    geometry: ArrayGeometry,
    layout: FeatureLayout,
    estimator: CrfEstimator,
    recurrent: Option<RecurrentBeamformer>,
}

impl SeparationModel {
    /// Register every parameter of the configured model in `store`.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &RunConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let geometry = config.array.geometry()?;
        let mics = geometry.num_mics();
        let bins = config.stft.num_bins();
        let pairs = config.features.resolve_pairs(mics)?;
        let layout = FeatureLayout::new(bins, &pairs);
        let estimator = CrfEstimator::new(store, config.estimator, layout.dim(), bins, rng)?;
        let recurrent = if config.beamformer.kind.is_recurrent() {
            Some(RecurrentBeamformer::new(store, &config.beamformer, mics, rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            geometry,
            layout,
            estimator,
            recurrent,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn kind(&self) -> BeamformerKind {
        self.config.beamformer.kind
    }

    /// True when a loss can reach some parameter.
    pub fn is_trainable(&self) -> bool {
        self.recurrent.is_some() || self.config.training.train_crf
    }

    pub fn prepare(&self, mixture: &WaveBuffer, doa_deg: f64) -> Result<Prepared> {
        if mixture.channels() != self.geometry.num_mics() {
            return Err(Error::Shape(format!(
                "input has {} channels, the array has {}",
                mixture.channels(),
                self.geometry.num_mics()
            )));
        }
        if !doa_deg.is_finite() {
            return Err(Error::Config(format!("direction of arrival {doa_deg} is not finite")));
        }
        let raw = stft(mixture, &self.config.stft)?;
        let power = raw.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / raw.data().len() as f64;
        let scale = if power > 0.0 { power.sqrt() } else { 1.0 };
        let spec = raw.with_data(raw.data().mapv(|z| z / scale))?;
        let steer = steering_vector(&self.geometry, doa_deg, &self.config.stft, mixture.sample_rate());
        let feats = extract_features(&spec, &steer, &self.config.features)?;
        self.layout.check_matches(&feats.layout)?;
        let (t, d) = feats.data.dim();
        let features = Tensor::new(&[t, d], feats.data.into_raw_vec_and_offset().0)?;
        let synth = Arc::new(Synthesis::new(&self.config.stft, mixture.len())?);
        Ok(Prepared {
            y: Arc::new(spec.data().clone()),
            spec,
            scale,
            features,
            synth,
        })
    }

    /// Speech and noise filters, each `[T, F, taps, 2]`.
    pub fn estimate<T: Real>(&self, g: &mut Graph<'_, T>, p: &Prepared) -> Result<(Var, Var)> {
        let x = g.constant(p.features.cast());
        self.estimator.forward(g, x)
    }

    /// Single-channel output spectrum `[T, F, 2]` on the normalized scale.
    pub fn forward_spectrum<T: Real>(&self, g: &mut Graph<'_, T>, p: &Prepared) -> Result<Var> {
        let kappa = self.config.estimator.crf_half_width;
        let (cs, cn) = self.estimate(g, p)?;
        let s_hat = apply_crf(g, cs, p.y.clone(), kappa)?;
        match &self.recurrent {
            Some(rb) => {
                let n_hat = apply_crf(g, cn, p.y.clone(), kappa)?;
                let raw_s = frame_cov(g, s_hat)?;
                let raw_n = frame_cov(g, n_hat)?;
                let (phi_s, phi_n) = rb.normalize(g, raw_s, raw_n, cs, cn)?;
                let w = rb.weights(g, phi_s, phi_n)?;
                beam_apply(g, w, p.y.clone())
            }
            None if self.config.training.train_crf => select_channel(g, s_hat, self.config.features.ref_channel),
            None => Err(Error::Config(
                "no trainable beamformer parameters unless cRF training enabled".into(),
            )),
        }
    }

    /// Negative Si-SNR of the synthesized output against `reference`.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, p: &Prepared, reference: &[f64]) -> Result<Var> {
        let spec = self.forward_spectrum(g, p)?;
        let wave = istft(g, spec, p.synth.clone())?;
        si_snr_loss(g, wave, reference)
    }

    /// Separated single-channel waveform at the input's scale.
    pub fn separate<T: Real>(&self, store: &ParamStore<T>, mixture: &WaveBuffer, doa_deg: f64) -> Result<Vec<f64>> {
        let p = self.prepare(mixture, doa_deg)?;
        let mut g = Graph::inference(store);
        let out = if self.recurrent.is_some() {
            let v = self.forward_spectrum(&mut g, &p)?;
            let d = g.value(v).to_f64_vec();
            (0..d.len() / 2).map(|i| Complex64::new(d[2 * i], d[2 * i + 1])).collect::<Vec<_>>()
        } else {
            let (cs, cn) = self.estimate(&mut g, &p)?;
            let (t, f) = (p.spec.frames(), p.spec.bins());
            let kappa = self.config.estimator.crf_half_width;
            let crf_s = Crf::from_real(t, f, kappa, &g.value(cs).to_f64_vec())?;
            let crf_n = Crf::from_real(t, f, kappa, &g.value(cn).to_f64_vec())?;
            let phi_s = crf_chunk_covariance(&apply_crf_f64(&p.spec, &crf_s)?, &crf_s.center())?;
            let phi_n = crf_chunk_covariance(&apply_crf_f64(&p.spec, &crf_n)?, &crf_n.center())?;
            let loading = self.config.beamformer.loading;
            let w = match self.kind() {
                BeamformerKind::Mvdr => mvdr_weights(&phi_s, &phi_n, loading)?,
                _ => gev_weights(&phi_s, &phi_n, loading)?.0,
            };
            let w = reference_rescale(&w, &phi_s, self.config.features.ref_channel)?;
            apply_beamformer(&w, &p.spec)?.data().iter().copied().collect()
        };
        Ok(p.synth.synthesize(&out).into_iter().map(|v| v * p.scale).collect())
    }
}
