use std::path::Path;

use hound::{SampleFormat, WavSpec};
use ndarray::Array2;

use super::WaveBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| match source {
        hound::Error::Unsupported => Error::UnsupportedWav(format!("{}", path.display())),
        source => Error::Wav {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Read a PCM-16 or IEEE-float-32 RIFF/WAVE file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<WaveBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    if channels == 0 || interleaved.len() % channels != 0 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {} samples do not split into {channels} channels",
            path.display(),
            interleaved.len()
        )));
    }
    let len = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, len), |(m, n)| interleaved[n * channels + m]);
    WaveBuffer::new(samples, spec.sample_rate)
}

/// Write interleaved samples; PCM-16 rounds to the nearest step and clips.
pub fn save_wav(path: impl AsRef<Path>, wave: &WaveBuffer, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let channels = u16::try_from(wave.channels())
        .map_err(|_| Error::UnsupportedWav(format!("{} channels", wave.channels())))?;
    let spec = match format {
        WavFormat::Pcm16 => WavSpec {
            channels,
            sample_rate: wave.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavFormat::Float32 => WavSpec {
            channels,
            sample_rate: wave.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    let x = wave.samples();
    for n in 0..wave.len() {
        for m in 0..wave.channels() {
            let v = x[[m, n]];
            match format {
                WavFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)
                }
                WavFormat::Float32 => writer.write_sample(v as f32),
            }
            .map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(seed: u64) -> WaveBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((3, 999), |_| rng.gen_range(-1.0..1.0) as f32 as f64);
        WaveBuffer::new(a, 22_050).unwrap()
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = random_wave(1);
        save_wav(&path, &w, WavFormat::Float32).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.sample_rate(), 22_050);
    }

    #[test]
    fn pcm16_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = random_wave(2);
        save_wav(&path, &w, WavFormat::Pcm16).unwrap();
        let back = load_wav(&path).unwrap();
        let max_err = (back.samples() - w.samples())
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max_err <= 1.0 / 32768.0, "{max_err}");
    }

    #[test]
    fn empty_and_truncated_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        std::fs::write(&empty, b"").unwrap();
        assert!(load_wav(&empty).is_err());

        let full = dir.path().join("full.wav");
        save_wav(&full, &random_wave(3), WavFormat::Float32).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.wav");
        std::fs::write(&cut, &bytes[..30]).unwrap();
        assert!(load_wav(&cut).is_err());
    }

    #[test]
    fn unsupported_bit_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x24.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::UnsupportedWav(_))));
    }
}
