use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::WaveBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

/// Analysis/synthesis parameters. Defaults: 512-point FFT over a 512-sample
/// (32 ms at 16 kHz) Hann window with 50% overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            window_length: 512,
            hop: 256,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_length == 0 || self.fft_size == 0 {
            return Err(Error::Config("STFT sizes must be positive".into()));
        }
        if self.window_length % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} must divide window length {}",
                self.hop, self.window_length
            )));
        }
        if self.fft_size < self.window_length {
            return Err(Error::Config(format!(
                "fft size {} is smaller than window length {}",
                self.fft_size, self.window_length
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::Config(format!("fft size {} must be even", self.fft_size)));
        }
        Ok(())
    }

    /// One-sided bin count `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zeros prepended before the first frame.
    pub fn pad_front(&self) -> usize {
        self.window_length - self.hop
    }

    /// Frame count for a signal of `len` samples.
    ///
    /// The signal is zero-padded by `window_length - hop` samples at the
    /// front and by at least as many at the back (rounded up to the hop grid),
    /// so every original sample lies under two overlapping frames and
    /// reconstructs exactly. With `L_p` the padded length the count is
    /// `(L_p - window_length) / hop + 1`.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.window_length {
            return Err(Error::SignalTooShort {
                len,
                window: self.window_length,
            });
        }
        let span = len + 2 * self.pad_front() - self.window_length;
        Ok(span.div_ceil(self.hop) + 1)
    }

    fn padded_len(&self, frames: usize) -> usize {
        self.window_length + (frames - 1) * self.hop
    }

    /// Center frequency of bin `k` in Hz.
    pub fn bin_hz(&self, k: usize, sample_rate: u32) -> f64 {
        k as f64 * sample_rate as f64 / self.fft_size as f64
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, `[frames, bins, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array3<Complex64>,
    num_samples: usize,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(data: Array3<Complex64>, num_samples: usize, sample_rate: u32) -> Result<Self> {
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Shape("spectrogram has non-finite entries".into()));
        }
        Ok(Self {
            data,
            num_samples,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Length of the waveform this spectrogram synthesizes to.
    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    /// A spectrogram of the same frame grid with different contents.
    pub fn with_data(&self, data: Array3<Complex64>) -> Result<Self> {
        Self::new(data, self.num_samples, self.sample_rate)
    }

    /// Contiguous `[T, F, M]` view.
    pub fn as_slice(&self) -> &[Complex64] {
        self.data.as_slice().expect("standard layout")
    }

    /// Channel `m` as a contiguous `[T, F]` buffer.
    pub fn channel_plane(&self, m: usize) -> Vec<Complex64> {
        let (t, f, _) = self.data.dim();
        let mut out = Vec::with_capacity(t * f);
        for ti in 0..t {
            for fi in 0..f {
                out.push(self.data[[ti, fi, m]]);
            }
        }
        out
    }
}

/// Overlap-add synthesis for one signal length, with its exact adjoint.
///
/// Each frame is inverse transformed, multiplied by the synthesis window and
/// overlap-added; the sum is divided by `Σ_t w²(n - tH)` (window-power
/// normalization) and the padding is cropped.
pub struct Synthesis {
    cfg: StftConfig,
    window: Vec<f64>,
    frames: usize,
    num_samples: usize,
    inv_norm: Vec<f64>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    forward: Arc<dyn RealToComplex<f64>>,
}

impl Synthesis {
    pub fn new(cfg: &StftConfig, num_samples: usize) -> Result<Self> {
        cfg.validate()?;
        let frames = cfg.num_frames(num_samples)?;
        let window = hann(cfg.window_length);
        let mut norm = vec![0.0; cfg.padded_len(frames)];
        for t in 0..frames {
            for (n, w) in window.iter().enumerate() {
                norm[t * cfg.hop + n] += w * w;
            }
        }
        let inv_norm = norm
            .into_iter()
            .map(|d| if d > 1e-10 { 1.0 / d } else { 0.0 })
            .collect();
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            cfg: *cfg,
            window,
            frames,
            num_samples,
            inv_norm,
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            forward: planner.plan_fft_forward(cfg.fft_size),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    /// Waveform from one channel's `[T, F]` spectrum.
    pub fn synthesize(&self, plane: &[Complex64]) -> Vec<f64> {
        let (n_fft, bins, hop, win) = (
            self.cfg.fft_size,
            self.cfg.num_bins(),
            self.cfg.hop,
            self.cfg.window_length,
        );
        assert_eq!(plane.len(), self.frames * bins, "plane must be [T, F]");
        let mut padded = vec![0.0; self.inv_norm.len()];
        let mut spectrum = self.inverse.make_input_vec();
        let mut frame = self.inverse.make_output_vec();
        let scale = 1.0 / n_fft as f64;
        for t in 0..self.frames {
            spectrum.copy_from_slice(&plane[t * bins..(t + 1) * bins]);
            spectrum[0].im = 0.0;
            spectrum[bins - 1].im = 0.0;
            self.inverse
                .process(&mut spectrum, &mut frame)
                .expect("sizes match the plan");
            let out = &mut padded[t * hop..t * hop + win];
            for n in 0..win {
                out[n] += frame[n] * scale * self.window[n];
            }
        }
        let start = self.cfg.pad_front();
        (start..start + self.num_samples)
            .map(|p| padded[p] * self.inv_norm[p])
            .collect()
    }

    /// Gradient of `⟨g, synthesize(X)⟩` with respect to `X`, returned as
    /// `∂/∂Re X + j ∂/∂Im X` per bin.
    pub fn adjoint(&self, grad: &[f64]) -> Vec<Complex64> {
        let (n_fft, bins, hop, win) = (
            self.cfg.fft_size,
            self.cfg.num_bins(),
            self.cfg.hop,
            self.cfg.window_length,
        );
        assert_eq!(grad.len(), self.num_samples);
        let mut padded = vec![0.0; self.inv_norm.len()];
        let start = self.cfg.pad_front();
        for (i, g) in grad.iter().enumerate() {
            padded[start + i] = g * self.inv_norm[start + i];
        }
        let mut frame = self.forward.make_input_vec();
        let mut spectrum = self.forward.make_output_vec();
        let mut out = Vec::with_capacity(self.frames * bins);
        let scale = 1.0 / n_fft as f64;
        for t in 0..self.frames {
            frame.fill(0.0);
            for n in 0..win {
                frame[n] = padded[t * hop + n] * self.window[n];
            }
            self.forward
                .process(&mut frame, &mut spectrum)
                .expect("sizes match the plan");
            for (k, z) in spectrum.iter().enumerate() {
                if k == 0 || k == bins - 1 {
                    out.push(Complex64::new(z.re * scale, 0.0));
                } else {
                    out.push(z * (2.0 * scale));
                }
            }
        }
        out
    }
}

/// Per-channel one-sided DFT of Hann-windowed frames.
pub fn stft(wave: &WaveBuffer, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if wave.is_empty() {
        return Err(Error::SignalTooShort {
            len: 0,
            window: cfg.window_length,
        });
    }
    let len = wave.len();
    let frames = cfg.num_frames(len)?;
    let bins = cfg.num_bins();
    let channels = wave.channels();
    let window = hann(cfg.window_length);
    let plan = RealFftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = plan.make_input_vec();
    let mut spectrum = plan.make_output_vec();
    let mut data = Array3::<Complex64>::zeros((frames, bins, channels));
    let pad = cfg.pad_front() as isize;

    for m in 0..channels {
        let x = wave.channel(m);
        for t in 0..frames {
            buf.fill(0.0);
            let origin = (t * cfg.hop) as isize - pad;
            for (n, w) in window.iter().enumerate() {
                let i = origin + n as isize;
                if i >= 0 && (i as usize) < len {
                    buf[n] = x[i as usize] * w;
                }
            }
            plan.process(&mut buf, &mut spectrum).expect("sizes match the plan");
            for (k, z) in spectrum.iter().enumerate() {
                data[[t, k, m]] = *z;
            }
        }
    }
    ComplexSpectrogram::new(data, len, wave.sample_rate())
}

/// Weighted overlap-add inverse of [`stft`].
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<WaveBuffer> {
    cfg.validate()?;
    if spec.bins() != cfg.num_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins(),
            cfg.num_bins()
        )));
    }
    let synth = Synthesis::new(cfg, spec.num_samples())?;
    if synth.frames() != spec.frames() {
        return Err(Error::Shape(format!(
            "spectrogram has {} frames, {} samples need {}",
            spec.frames(),
            spec.num_samples(),
            synth.frames()
        )));
    }
    let mut out = ndarray::Array2::zeros((spec.channels(), spec.num_samples()));
    for m in 0..spec.channels() {
        let y = synth.synthesize(&spec.channel_plane(m));
        out.row_mut(m).assign(&ndarray::ArrayView1::from(&y));
    }
    WaveBuffer::new(out, spec.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(channels: usize, len: usize, seed: u64) -> WaveBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((channels, len), |_| rng.gen_range(-1.0..1.0));
        WaveBuffer::new(a, 16_000).unwrap()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn frame_count_follows_padding_policy() {
        let cfg = StftConfig::default();
        // 16000 + 2·256 - 512 = 16000 -> ceil(16000/256) = 63 hops -> 64 frames
        assert_eq!(cfg.num_frames(16_000).unwrap(), 64);
        assert_eq!(cfg.num_frames(512).unwrap(), 3);
        assert!(matches!(cfg.num_frames(511), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad_hop = StftConfig { hop: 200, ..Default::default() };
        assert!(bad_hop.validate().is_err());
        let small_fft = StftConfig { fft_size: 256, ..Default::default() };
        assert!(small_fft.validate().is_err());
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let spec = stft(&WaveBuffer::mono(x, 16_000).unwrap(), &cfg).unwrap();
        let t = spec.frames() / 2;
        let mag: Vec<f64> = (0..spec.bins()).map(|k| spec.data()[[t, k, 0]].norm()).collect();
        let peak = (0..mag.len()).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
        assert_eq!(peak, 32);
        // Hann main lobe spans ±1 bin; everything further is ≥ 40 dB down
        for (k, m) in mag.iter().enumerate() {
            if k.abs_diff(32) >= 2 {
                assert!(20.0 * (m / mag[32]).log10() <= -40.0, "bin {k}");
            }
        }
    }

    #[test]
    fn zeros_in_zeros_out() {
        let cfg = StftConfig::default();
        let z = WaveBuffer::zeros(2, 2000, 16_000).unwrap();
        let spec = stft(&z, &cfg).unwrap();
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec, &cfg).unwrap();
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_reconstructs_the_signal() {
        let cfg = StftConfig::default();
        let x = noise(2, 16_000, 1);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(y.len(), x.len());
        for m in 0..2 {
            let err = rel_l2(y.channel(m).as_slice().unwrap(), x.channel(m).as_slice().unwrap());
            assert!(err < 1e-6, "channel {m}: {err:e}");
        }
    }

    #[test]
    fn stft_of_istft_of_analysis_is_identity() {
        let cfg = StftConfig::default();
        let spec = stft(&noise(1, 4000, 2), &cfg).unwrap();
        let again = stft(&istft(&spec, &cfg).unwrap(), &cfg).unwrap();
        let num: f64 = spec.data().iter().zip(again.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = spec.data().iter().map(|a| a.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn single_dc_frame_synthesizes_a_windowed_constant() {
        let cfg = StftConfig::default();
        let len = 4096;
        let frames = cfg.num_frames(len).unwrap();
        let mut data = Array3::zeros((frames, cfg.num_bins(), 1));
        let t0 = 5;
        data[[t0, 0, 0]] = Complex64::new(512.0, 0.0);
        let spec = ComplexSpectrogram::new(data, len, 16_000).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        let w = hann(512);
        let origin = t0 * cfg.hop - cfg.pad_front();
        for (i, &v) in y.channel(0).iter().enumerate() {
            if i < origin || i >= origin + 512 {
                assert_eq!(v, 0.0, "sample {i} outside the frame");
            } else {
                let n = i - origin;
                // frame content is the constant 1, windowed, over Σ w² of the
                // two frames covering this sample
                let other = if n < 256 { w[n + 256] } else { w[n - 256] };
                let expect = w[n] / (w[n] * w[n] + other * other);
                assert!((v - expect).abs() < 1e-12, "sample {i}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn linearity() {
        let cfg = StftConfig::default();
        let (x, y) = (noise(1, 3000, 3), noise(1, 3000, 4));
        let (a, b) = (0.7, -2.5);
        let combo = WaveBuffer::new(x.samples() * a + y.samples() * b, 16_000).unwrap();
        let (sx, sy, sc) = (
            stft(&x, &cfg).unwrap(),
            stft(&y, &cfg).unwrap(),
            stft(&combo, &cfg).unwrap(),
        );
        for ((p, q), r) in sx.data().iter().zip(sy.data()).zip(sc.data()) {
            assert!((p * a + q * b - r).norm() < 1e-12 * (1.0 + r.norm()));
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(1, 3000, 5);
        let spec = stft(&x, &cfg).unwrap();
        let w = hann(512);
        let n = cfg.fft_size as f64;
        let pad = cfg.pad_front() as isize;
        for t in 0..spec.frames() {
            let mut time = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let i = (t * cfg.hop) as isize - pad + k as isize;
                if i >= 0 && (i as usize) < x.len() {
                    time += (x.channel(0)[i as usize] * wk).powi(2);
                }
            }
            let bins = cfg.num_bins();
            let mut freq = 0.0;
            for k in 0..bins {
                let e = spec.data()[[t, k, 0]].norm_sqr();
                freq += if k == 0 || k == bins - 1 { e } else { 2.0 * e };
            }
            freq /= n;
            assert!((time - freq).abs() <= 1e-9 * time.max(1e-300), "frame {t}");
        }
    }

    #[test]
    fn adjoint_matches_synthesis() {
        let cfg = StftConfig::default();
        let len = 2000;
        let synth = Synthesis::new(&cfg, len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bins = cfg.num_bins();
        let x: Vec<Complex64> = (0..synth.frames() * bins)
            .map(|i| {
                let k = i % bins;
                let im = if k == 0 || k == bins - 1 { 0.0 } else { rng.gen_range(-1.0..1.0) };
                Complex64::new(rng.gen_range(-1.0..1.0), im)
            })
            .collect();
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = synth.synthesize(&x);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = synth.adjoint(&g);
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn istft_rejects_mismatched_shapes() {
        let cfg = StftConfig::default();
        let spec = stft(&noise(1, 2000, 7), &cfg).unwrap();
        let other = StftConfig { fft_size: 1024, ..cfg };
        assert!(matches!(istft(&spec, &other), Err(Error::Shape(_))));
        let truncated = spec
            .with_data(spec.data().slice(ndarray::s![..3, .., ..]).to_owned())
            .unwrap();
        assert!(matches!(istft(&truncated, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn short_and_empty_signals_are_rejected() {
        let cfg = StftConfig::default();
        assert!(matches!(
            stft(&noise(1, 100, 8), &cfg),
            Err(Error::SignalTooShort { len: 100, .. })
        ));
        assert!(stft(&WaveBuffer::zeros(1, 0, 16_000).unwrap(), &cfg).is_err());
    }
}
