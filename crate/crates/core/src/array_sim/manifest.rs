use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneSpec, SimConfig};
use crate::error::{Error, Result};

pub const SPEAKER_COUNTS: [usize; 3] = [1, 2, 3];

/// Smallest target-to-interferer angle, in half-open degree ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AngleBucket {
    #[serde(rename = "0-15")]
    UpTo15,
    #[serde(rename = "15-45")]
    UpTo45,
    #[serde(rename = "45-90")]
    UpTo90,
    #[serde(rename = "90-180")]
    UpTo180,
}

impl AngleBucket {
    pub const ALL: [AngleBucket; 4] = [Self::UpTo15, Self::UpTo45, Self::UpTo90, Self::UpTo180];

    /// `(lo, hi]` in degrees.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Self::UpTo15 => (0.0, 15.0),
            Self::UpTo45 => (15.0, 45.0),
            Self::UpTo90 => (45.0, 90.0),
            Self::UpTo180 => (90.0, 180.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpTo15 => "0-15",
            Self::UpTo45 => "15-45",
            Self::UpTo90 => "45-90",
            Self::UpTo180 => "90-180",
        }
    }

    pub fn from_gap(gap: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|b| {
            let (lo, hi) = b.bounds();
            gap > lo && gap <= hi
        })
    }
}

impl fmt::Display for AngleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// WAV files written next to the manifest, relative paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneWavs {
    pub mixture: String,
    pub target: String,
    pub noise: String,
}

/// One manifest line. `azimuths[0]` is the target.
///
/// Single-speaker scenes carry the angle bucket of the stratification cell
/// they were drawn for; it is a label only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub seed: u64,
    pub azimuths: Vec<f64>,
    pub sir_db: f64,
    pub snr_db: f64,
    pub angle_bucket: AngleBucket,
    pub speaker_count: usize,
    pub num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavs: Option<SceneWavs>,
}

impl ManifestEntry {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let (&target, others) = self
            .azimuths
            .split_first()
            .ok_or_else(|| Error::Manifest(format!("{}: no azimuths", self.scene_id)))?;
        let spec = SceneSpec {
            target_azimuth: target,
            interferer_azimuths: others.to_vec(),
            sir_db: self.sir_db,
            snr_db: self.snr_db,
            num_speakers: self.speaker_count,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

// nearest f64 to the two-decimal value, so manifests read cleanly
fn centi(x: f64) -> f64 {
    format!("{x:.2}").parse().expect("formatted float")
}

fn draw_azimuth(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..=1800) as f64 / 10.0
}

/// `n_scenes` scene descriptions stratified over the 4 angle buckets × 3
/// speaker counts. Scenes cycle through the 12 cells in order, so any
/// remainder lands in the first cells.
pub fn generate_manifest(n_scenes: usize, seed: u64, sim: &SimConfig) -> Result<Vec<ManifestEntry>> {
    sim.validate()?;
    let cells: Vec<(AngleBucket, usize)> = AngleBucket::ALL
        .into_iter()
        .flat_map(|b| SPEAKER_COUNTS.map(|k| (b, k)))
        .collect();
    if n_scenes < cells.len() {
        return Err(Error::Manifest(format!(
            "{n_scenes} scenes cannot cover {} buckets",
            cells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_samples = sim.num_samples();
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let (bucket, speakers) = cells[i % cells.len()];
        let azimuths = loop {
            let az: Vec<f64> = (0..speakers).map(|_| draw_azimuth(&mut rng)).collect();
            if speakers == 1 {
                break az;
            }
            let min_gap = az[1..]
                .iter()
                .map(|a| (a - az[0]).abs())
                .fold(f64::INFINITY, f64::min);
            if AngleBucket::from_gap(min_gap) == Some(bucket) {
                break az;
            }
        };
        let sir_db = centi(rng.gen_range(sim.sir_db[0]..=sim.sir_db[1]));
        let snr_db = centi(rng.gen_range(sim.snr_db[0]..=sim.snr_db[1]));
        entries.push(ManifestEntry {
            scene_id: format!("scene-{i:05}"),
            seed: rng.next_u64(),
            azimuths,
            sir_db,
            snr_db,
            angle_bucket: bucket,
            speaker_count: speakers,
            num_samples,
            wavs: None,
        });
    }
    Ok(entries)
}

/// One JSON object per line.
pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Manifest(format!("{} line {}: {err}", path.display(), i + 1)))?;
        e.scene_spec()?;
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(Error::Manifest(format!("{} has no scenes", path.display())));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(AngleBucket::from_gap(0.0), None);
        assert_eq!(AngleBucket::from_gap(15.0), Some(AngleBucket::UpTo15));
        assert_eq!(AngleBucket::from_gap(15.1), Some(AngleBucket::UpTo45));
        assert_eq!(AngleBucket::from_gap(90.0), Some(AngleBucket::UpTo90));
        assert_eq!(AngleBucket::from_gap(180.0), Some(AngleBucket::UpTo180));
        assert_eq!(AngleBucket::from_gap(180.5), None);
    }

    #[test]
    fn labels_serialize_as_ranges() {
        let s = serde_json::to_string(&AngleBucket::UpTo45).unwrap();
        assert_eq!(s, "\"15-45\"");
    }
}
