use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// formant bandwidths, Hz
const BANDWIDTHS: [f64; 3] = [90.0, 140.0, 220.0];
// harmonic amplitudes are refreshed once per block
const BLOCK: usize = 80;

enum Syllable {
    Voiced {
        f0: (f64, f64),
        formants: [f64; 3],
        gain: f64,
    },
    Fricative {
        gain: f64,
    },
    Pause,
}

/// Deterministic speech-like test signal of `len` samples with unit RMS.
///
/// A sequence of 120-280 ms syllables: voiced ones are harmonic series on a
/// gliding pitch (speaker base 90-250 Hz) shaped by three formant
/// resonances, fricatives are differenced white noise, and a few (never the first) are
/// silent.
/// Each syllable has a raised-cosine envelope.
pub fn pseudo_speech<R: Rng + ?Sized>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let base_f0 = rng.gen_range(90.0..250.0);
    let nyquist_cap = (0.45 * sr).min(7000.0);
    let mut out = vec![0.0; len];
    let mut phase = 0.0f64;
    let mut prev_noise = 0.0f64;
    let mut amps: Vec<f64> = Vec::new();
    let mut start = 0;

    while start < len {
        let dur = ((rng.gen_range(0.12..0.28) * sr) as usize).max(1);
        let end = (start + dur).min(len);
        let roll: f64 = rng.gen();
        // never open with a pause, so short excerpts are not silent
        let roll = if start == 0 { 0.88 * roll } else { roll };
        let syl = if roll < 0.72 {
            Syllable::Voiced {
                f0: (
                    base_f0 * rng.gen_range(0.85..1.15),
                    base_f0 * rng.gen_range(0.85..1.15),
                ),
                formants: [
                    rng.gen_range(300.0..850.0),
                    rng.gen_range(850.0..2400.0),
                    rng.gen_range(2400.0..3400.0),
                ],
                gain: rng.gen_range(0.5..1.0),
            }
        } else if roll < 0.88 {
            Syllable::Fricative {
                gain: rng.gen_range(0.2..0.5),
            }
        } else {
            Syllable::Pause
        };

        for n in start..end {
            let u = (n - start) as f64 / dur as f64;
            let env = 0.5 - 0.5 * (2.0 * PI * u).cos();
            match &syl {
                Syllable::Voiced { f0, formants, gain } => {
                    let pitch = f0.0 + (f0.1 - f0.0) * u;
                    if (n - start) % BLOCK == 0 {
                        let harmonics = (nyquist_cap / pitch).floor() as usize;
                        amps.clear();
                        amps.extend((1..=harmonics).map(|h| {
                            let hz = h as f64 * pitch;
                            let res: f64 = formants
                                .iter()
                                .zip(BANDWIDTHS)
                                .map(|(fk, bk)| 1.0 / (1.0 + ((hz - fk) / bk).powi(2)))
                                .sum();
                            res / (h as f64).sqrt()
                        }));
                    }
                    phase = (phase + 2.0 * PI * pitch / sr) % (2.0 * PI);
                    let s: f64 = amps
                        .iter()
                        .enumerate()
                        .map(|(i, a)| a * ((i + 1) as f64 * phase).sin())
                        .sum();
                    out[n] = gain * env * s;
                }
                Syllable::Fricative { gain } => {
                    let w: f64 = StandardNormal.sample(rng);
                    out[n] = gain * env * (w - prev_noise);
                    prev_noise = w;
                }
                Syllable::Pause => {}
            }
        }
        start = end;
    }

    let rms = (out.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x /= rms);
    }
    out
}
