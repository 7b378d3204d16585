//! Bucketed evaluation over a scene manifest.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::array_sim::{synthesize_scene, AngleBucket, ManifestEntry, Scene, REFERENCE_MIC, SPEAKER_COUNTS};
use crate::beamformer::{
    apply_beamformer, chunk_covariance, gev_weights, mvdr_weights, reference_rescale, BeamformerKind,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{sdr, si_snr};
use crate::signal::{istft, stft};
use crate::train::LoadedModel;

pub const SDR_NOTE: &str = "SDR is the plain energy ratio 10*log10(|s|^2 / |s_hat - s|^2), without a distortion filter";

/// What produces the separated signal.
pub enum System<'a> {
    /// Channel 1 of the mixture.
    Identity,
    /// Closed-form beamformer on ground-truth ratio masks.
    Oracle(BeamformerKind),
    Model(&'a LoadedModel),
}

impl System<'_> {
    pub fn name(&self) -> String {
        match self {
            System::Identity => "identity".into(),
            System::Oracle(k) => format!("oracle-{k}"),
            System::Model(m) => {
                let bf = &m.config.beamformer;
                if bf.kind.is_recurrent() {
                    format!("{}-{}", bf.kind, bf.normalization.short())
                } else {
                    format!("crf-{}", bf.kind)
                }
            }
        }
    }
}

/// `|S| / (|S| + |N|)` at the reference mic, 0 where both vanish.
pub fn ideal_ratio_mask(scene: &Scene, cfg: &RunConfig) -> Result<Array2<f64>> {
    let s = stft(&scene.target_clean, &cfg.stft)?;
    let n = stft(&scene.noise_plus_interference, &cfg.stft)?;
    let (t, f, _) = s.data().dim();
    Ok(Array2::from_shape_fn((t, f), |(ti, fi)| {
        let a = s.data()[[ti, fi, REFERENCE_MIC]].norm();
        let b = n.data()[[ti, fi, REFERENCE_MIC]].norm();
        if a + b > 0.0 {
            a / (a + b)
        } else {
            0.0
        }
    }))
}

/// Oracle-mask MVDR or GEV output at the reference mic scale.
pub fn oracle_beamform(scene: &Scene, kind: BeamformerKind, cfg: &RunConfig) -> Result<Vec<f64>> {
    let y = stft(&scene.mixture, &cfg.stft)?;
    let rm_s = ideal_ratio_mask(scene, cfg)?;
    let rm_n = rm_s.mapv(|v| 1.0 - v);
    let phi_s = chunk_covariance(&y, &rm_s)?;
    let phi_n = chunk_covariance(&y, &rm_n)?;
    let w = match kind {
        BeamformerKind::Mvdr => mvdr_weights(&phi_s, &phi_n, cfg.beamformer.loading)?,
        BeamformerKind::Gev => gev_weights(&phi_s, &phi_n, cfg.beamformer.loading)?.0,
        other => return Err(Error::Config(format!("{other} has no oracle-mask form"))),
    };
    let w = reference_rescale(&w, &phi_s, REFERENCE_MIC)?;
    let out = apply_beamformer(&w, &y)?;
    Ok(istft(&out, &cfg.stft)?.channel(0).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneResult {
    pub scene_id: String,
    pub angle_bucket: AngleBucket,
    pub speaker_count: usize,
    pub mixture_si_snr: f64,
    pub si_snr: f64,
    pub mixture_sdr: f64,
    pub sdr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Means {
    pub scenes: usize,
    pub mixture_si_snr: f64,
    pub si_snr: f64,
    pub mixture_sdr: f64,
    pub sdr: f64,
}

impl Means {
    fn of<'a>(rows: impl Iterator<Item = &'a SceneResult>) -> Self {
        let mut m = Means::default();
        for r in rows {
            m.scenes += 1;
            m.mixture_si_snr += r.mixture_si_snr;
            m.si_snr += r.si_snr;
            m.mixture_sdr += r.mixture_sdr;
            m.sdr += r.sdr;
        }
        if m.scenes > 0 {
            let n = m.scenes as f64;
            m.mixture_si_snr /= n;
            m.si_snr /= n;
            m.mixture_sdr /= n;
            m.sdr /= n;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMeans {
    pub angle_bucket: AngleBucket,
    pub speaker_count: usize,
    #[serde(flatten)]
    pub means: Means,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub scenes: Vec<SceneResult>,
    /// Angle-major over the speaker counts; empty cells included.
    pub cells: Vec<CellMeans>,
    pub by_angle: Vec<(AngleBucket, Means)>,
    pub by_speakers: Vec<(usize, Means)>,
    pub overall: Means,
}

fn evaluate_scene(system: &System<'_>, cfg: &RunConfig, entry: &ManifestEntry) -> Result<SceneResult> {
    let spec = entry.scene_spec().map_err(|e| Error::MissingScene {
        id: entry.scene_id.clone(),
        detail: e.to_string(),
    })?;
    let scene = synthesize_scene(&spec, entry.num_samples, &cfg.array, &cfg.stft).map_err(|e| Error::MissingScene {
        id: entry.scene_id.clone(),
        detail: e.to_string(),
    })?;
    let reference = scene.reference();
    let mix = scene.mixture.channel(REFERENCE_MIC).to_vec();
    let est = match system {
        System::Identity => mix.clone(),
        System::Oracle(kind) => oracle_beamform(&scene, *kind, cfg)?,
        System::Model(m) => m.model.separate(&m.store, &scene.mixture, spec.target_azimuth)?,
    };
    Ok(SceneResult {
        scene_id: entry.scene_id.clone(),
        angle_bucket: entry.angle_bucket,
        speaker_count: entry.speaker_count,
        mixture_si_snr: si_snr(&mix, &reference)?,
        si_snr: si_snr(&est, &reference)?,
        mixture_sdr: sdr(&mix, &reference)?,
        sdr: sdr(&est, &reference)?,
    })
}

/// Scenes are processed in parallel; results keep manifest order.
pub fn evaluate(system: &System<'_>, cfg: &RunConfig, manifest: &[ManifestEntry]) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest("evaluation manifest has no scenes".into()));
    }
    let scenes = manifest
        .par_iter()
        .map(|e| evaluate_scene(system, cfg, e))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for b in AngleBucket::ALL {
        for &k in &SPEAKER_COUNTS {
            let means = Means::of(scenes.iter().filter(|r| r.angle_bucket == b && r.speaker_count == k));
            cells.push(CellMeans {
                angle_bucket: b,
                speaker_count: k,
                means,
            });
        }
    }
    let by_angle = AngleBucket::ALL
        .iter()
        .map(|&b| (b, Means::of(scenes.iter().filter(|r| r.angle_bucket == b))))
        .collect();
    let by_speakers = SPEAKER_COUNTS
        .iter()
        .map(|&k| (k, Means::of(scenes.iter().filter(|r| r.speaker_count == k))))
        .collect();
    let overall = Means::of(scenes.iter());
    Ok(EvalReport {
        system: system.name(),
        scenes,
        cells,
        by_angle,
        by_speakers,
        overall,
    })
}

fn fmt_cell(m: &Means, v: f64) -> String {
    if m.scenes == 0 {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// Tab-separated summary: one row per system and metric with the angle
    /// buckets, the speaker counts and the average as columns.
    pub fn to_tsv(&self, per_scene_rows: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {SDR_NOTE}");
        let mut header = vec!["system".to_string(), "metric".into()];
        header.extend(AngleBucket::ALL.iter().map(|b| b.label().to_string()));
        header.extend(SPEAKER_COUNTS.iter().map(|k| format!("{k}SPK")));
        header.push("avg".into());
        let _ = writeln!(out, "{}", header.join("\t"));
        type Pick = fn(&Means) -> f64;
        let rows: [(&str, &str, Pick); 4] = [
            ("mixture", "si_snr", |m| m.mixture_si_snr),
            ("mixture", "sdr", |m| m.mixture_sdr),
            (&self.system, "si_snr", |m| m.si_snr),
            (&self.system, "sdr", |m| m.sdr),
        ];
        for (system, metric, pick) in rows {
            let mut cols = vec![system.to_string(), metric.to_string()];
            cols.extend(self.by_angle.iter().map(|(_, m)| fmt_cell(m, pick(m))));
            cols.extend(self.by_speakers.iter().map(|(_, m)| fmt_cell(m, pick(m))));
            cols.push(fmt_cell(&self.overall, pick(&self.overall)));
            let _ = writeln!(out, "{}", cols.join("\t"));
        }
        let _ = writeln!(out, "\nangle\tspeakers\tscenes\tmixture_si_snr\tsi_snr\tmixture_sdr\tsdr");
        for c in &self.cells {
            let m = &c.means;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.angle_bucket,
                c.speaker_count,
                m.scenes,
                fmt_cell(m, m.mixture_si_snr),
                fmt_cell(m, m.si_snr),
                fmt_cell(m, m.mixture_sdr),
                fmt_cell(m, m.sdr)
            );
        }
        if per_scene_rows {
            let _ = writeln!(out, "\nscene_id\tangle\tspeakers\tmixture_si_snr\tsi_snr\tmixture_sdr\tsdr");
            for r in &self.scenes {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    r.scene_id, r.angle_bucket, r.speaker_count, r.mixture_si_snr, r.si_snr, r.mixture_sdr, r.sdr
                );
            }
        }
        out
    }

    /// One JSON object per line: scenes, then cells, then the overall means.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "snake_case")]
        enum Line<'a> {
            Header { system: &'a str, sdr: &'a str },
            Scene(&'a SceneResult),
            Cell(&'a CellMeans),
            Overall(&'a Means),
        }
        let mut lines = vec![Line::Header {
            system: &self.system,
            sdr: SDR_NOTE,
        }];
        lines.extend(self.scenes.iter().map(Line::Scene));
        lines.extend(self.cells.iter().map(Line::Cell));
        lines.push(Line::Overall(&self.overall));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report serializes"));
            out.push('\n');
        }
        out
    }
}
