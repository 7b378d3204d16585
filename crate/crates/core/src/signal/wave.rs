use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Multichannel time-domain audio, `[channels, samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl WaveBuffer {
    pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.nrows() == 0 {
            return Err(Error::Shape("wave buffer needs at least one channel".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(Array2::from_shape_vec((1, n), samples).expect("1 x n"), sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(Array2::zeros((channels, len)), sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Array2<f64> {
        &mut self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, m: usize) -> ArrayView1<'_, f64> {
        self.samples.row(m)
    }

    /// Single channel as a mono buffer.
    pub fn select_channel(&self, m: usize) -> Result<Self> {
        if m >= self.channels() {
            return Err(Error::Shape(format!("channel {m} of {}", self.channels())));
        }
        Self::new(self.samples.select(Axis(0), &[m]), self.sample_rate)
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Shape(format!(
                "segment [{start}, {}) beyond {} samples",
                start + len,
                self.len()
            )));
        }
        Self::new(
            self.samples.slice(ndarray::s![.., start..start + len]).to_owned(),
            self.sample_rate,
        )
    }

    /// Energy `Σ x²` of one channel.
    pub fn energy(&self, m: usize) -> f64 {
        self.samples.row(m).iter().map(|x| x * x).sum()
    }
}
