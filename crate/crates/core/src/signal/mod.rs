//! Multichannel waveforms, STFT analysis/synthesis and WAV I/O.

mod stft;
mod wav;
mod wave;

pub use stft::{hann, istft, stft, ComplexSpectrogram, Synthesis, Window, StftConfig};
pub use wav::{load_wav, save_wav, WavFormat};
pub use wave::WaveBuffer;
