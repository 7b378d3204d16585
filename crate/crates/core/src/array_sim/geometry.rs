use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::{istft, stft, ComplexSpectrogram, StftConfig, WaveBuffer};

/// Microphone positions along a line, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<f64>,
    speed_of_sound: f64,
}

impl ArrayGeometry {
    pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

    pub fn new(positions: Vec<f64>, speed_of_sound: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Geometry(format!(
                "need at least 2 microphones, got {}",
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::Geometry("non-finite microphone position".into()));
        }
        if let Some(w) = positions.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Geometry(format!(
                "positions must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
            return Err(Error::Geometry(format!("speed of sound {speed_of_sound}")));
        }
        Ok(Self {
            positions,
            speed_of_sound,
        })
    }

    /// The 4-microphone desk array at {0, 4, 10, 18} cm.
    pub fn desk() -> Self {
        Self::new(vec![0.0, 0.04, 0.10, 0.18], Self::DEFAULT_SPEED_OF_SOUND).expect("valid")
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// Plane-wave arrival delay of mic `m` relative to mic 0, seconds.
    pub fn delay(&self, m: usize, azimuth_deg: f64) -> f64 {
        (self.positions[m] - self.positions[0]) * azimuth_deg.to_radians().cos() / self.speed_of_sound
    }
}

/// Far-field steering vectors, `[F, M]`, unit modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    values: Array2<Complex64>,
}

impl SteeringVector {
    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn mics(&self) -> usize {
        self.values.ncols()
    }

    pub fn at(&self, f: usize) -> ndarray::ArrayView1<'_, Complex64> {
        self.values.row(f)
    }
}

/// `v_m(f) = exp(-j 2π f τ_m)` with `τ_m` the delay of mic `m` behind mic 0.
pub fn steering_vector(
    geom: &ArrayGeometry,
    azimuth_deg: f64,
    cfg: &StftConfig,
    sample_rate: u32,
) -> SteeringVector {
    let bins = cfg.num_bins();
    let values = Array2::from_shape_fn((bins, geom.num_mics()), |(f, m)| {
        let hz = cfg.bin_hz(f, sample_rate);
        Complex64::from_polar(1.0, -2.0 * PI * hz * geom.delay(m, azimuth_deg))
    });
    SteeringVector { values }
}

/// Place a mono source at `azimuth_deg` by applying the steering vector to
/// its STFT and resynthesizing every channel.
pub fn render_source(
    signal: &WaveBuffer,
    geom: &ArrayGeometry,
    azimuth_deg: f64,
    cfg: &StftConfig,
) -> Result<WaveBuffer> {
    if signal.channels() != 1 {
        return Err(Error::Shape(format!(
            "render_source expects mono input, got {} channels",
            signal.channels()
        )));
    }
    let spec = stft(signal, cfg)?;
    let v = steering_vector(geom, azimuth_deg, cfg, signal.sample_rate());
    let (frames, bins, _) = spec.data().dim();
    let mics = geom.num_mics();
    let src = spec.data();
    let data = Array3::from_shape_fn((frames, bins, mics), |(t, f, m)| src[[t, f, 0]] * v.values[[f, m]]);
    istft(&ComplexSpectrogram::new(data, spec.num_samples(), spec.sample_rate())?, cfg)
}
