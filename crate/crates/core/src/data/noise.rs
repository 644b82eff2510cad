//! Noise injection and the chunk-STD rule that selects noisy patients.

use std::fmt::Write as _;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::recording::LabeledRecording;
use crate::error::{config_err, data_err, Result};
use crate::modality::{Modality, PerModality};

fn std_dev(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Replaces the last `fraction` of the labelled span of `modality` with
/// zero-mean Gaussian noise of `factor ×` the clean standard deviation and
/// marks every window the span touches. Labels are left alone.
pub fn inject_noise(rec: &mut LabeledRecording, modality: Modality, fraction: f64, factor: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(data_err(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let windows = rec.labels.len();
    let spw = signal_of(rec, modality)?.samples_per_window();
    let span = windows * spw;
    let start = ((1.0 - fraction) * span as f64).round() as usize;
    corrupt_samples(rec, modality, start..span, factor, seed)
}

/// Replaces whole windows `range` of `modality` with noise of `factor ×`
/// the clean standard deviation and marks them.
pub fn corrupt_windows(rec: &mut LabeledRecording, modality: Modality, range: Range<usize>, factor: f64, seed: u64) -> Result<()> {
    if range.end > rec.labels.len() {
        return Err(data_err(format!("window range {range:?} exceeds {} windows", rec.labels.len())));
    }
    let spw = signal_of(rec, modality)?.samples_per_window();
    corrupt_samples(rec, modality, range.start * spw..range.end * spw, factor, seed)
}

fn signal_of(rec: &LabeledRecording, modality: Modality) -> Result<&crate::data::Signal> {
    rec.signals[modality]
        .as_ref()
        .ok_or_else(|| data_err(format!("recording {} has no {modality} signal", rec.patient)))
}

fn corrupt_samples(rec: &mut LabeledRecording, modality: Modality, range: Range<usize>, factor: f64, seed: u64) -> Result<()> {
    if !(factor >= 0.0) {
        return Err(data_err("noise factor must be non-negative"));
    }
    let windows = rec.labels.len();
    let sig = rec.signals[modality]
        .as_mut()
        .ok_or_else(|| data_err(format!("recording {} has no {modality} signal", rec.patient)))?;
    let spw = sig.samples_per_window();
    let span = windows * spw;
    if range.start >= range.end {
        return Ok(());
    }
    let clean = std_dev(&sig.samples[..span]);
    let dist = Normal::new(0.0, factor * clean).map_err(|e| data_err(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut sig.samples[range.clone()] {
        *v = dist.sample(&mut rng) as f32;
    }
    for w in range.start / spw..range.end.div_ceil(spw) {
        rec.noisy[w] = true;
    }
    Ok(())
}

/// Chunk-level STD rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseRule {
    pub chunk_seconds: f64,
    /// A chunk is flagged for a modality when its standardized STD exceeds
    /// the other modality's by this factor.
    pub factor: f64,
    /// A patient is selected when more than this fraction of chunks is flagged.
    pub patient_threshold: f64,
    /// Each modality's chunk STDs are divided by this quantile of themselves.
    pub baseline_quantile: f64,
}

impl Default for NoiseRule {
    fn default() -> Self {
        Self {
            chunk_seconds: 600.0,
            factor: 5.0,
            patient_threshold: 0.4,
            baseline_quantile: 0.2,
        }
    }
}

impl NoiseRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_seconds > 0.0 && self.factor > 0.0) {
            return Err(config_err("noise rule chunk length and factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.patient_threshold) || !(0.0..=1.0).contains(&self.baseline_quantile) {
            return Err(config_err("noise rule threshold and quantile must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientNoise {
    pub patient: String,
    pub chunk_flags: PerModality<Vec<bool>>,
    pub flagged_fraction: PerModality<f64>,
    pub selected: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseReport {
    pub patients: Vec<PatientNoise>,
    /// Patients skipped because a modality is missing.
    pub skipped: Vec<String>,
}

impl NoiseReport {
    pub fn selected(&self) -> Vec<&str> {
        self.patients.iter().filter(|p| p.selected).map(|p| p.patient.as_str()).collect()
    }

    /// One line per patient: `id, flagged_fraction_eeg, flagged_fraction_eog, selected`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.patients {
            let _ = writeln!(
                s,
                "{}, {:.4}, {:.4}, {}",
                p.patient,
                p.flagged_fraction.eeg,
                p.flagged_fraction.eog,
                u8::from(p.selected)
            );
        }
        s
    }
}

/// Per-chunk STDs; a recording shorter than one chunk is a single chunk.
fn chunk_stds(samples: &[f32], chunk: usize) -> Vec<f64> {
    if samples.len() < chunk || chunk == 0 {
        return vec![std_dev(samples)];
    }
    samples.chunks_exact(chunk).map(std_dev).collect()
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[((sorted.len() - 1) as f64 * q).floor() as usize]
}

pub fn patient_noise(rec: &LabeledRecording, rule: &NoiseRule) -> Result<PatientNoise> {
    let mut z = PerModality::<Vec<f64>>::default();
    for m in Modality::ALL {
        let sig = rec.signals[m]
            .as_ref()
            .ok_or_else(|| data_err(format!("noise detection needs {m} for {}", rec.patient)))?;
        let chunk = (rule.chunk_seconds * sig.hz).round() as usize;
        let stds = chunk_stds(&sig.samples, chunk);
        let base = quantile(&stds, rule.baseline_quantile);
        z[m] = stds.iter().map(|s| if base > 0.0 { s / base } else { 0.0 }).collect();
    }
    let chunks = z.eeg.len().min(z.eog.len());
    let chunk_flags = PerModality::from_fn(|m| (0..chunks).map(|c| z[m][c] > rule.factor * z[m.other()][c]).collect::<Vec<_>>());
    let flagged_fraction = chunk_flags.map(|_, f| f.iter().filter(|&&b| b).count() as f64 / chunks as f64);
    let selected = flagged_fraction.eeg > rule.patient_threshold || flagged_fraction.eog > rule.patient_threshold;
    Ok(PatientNoise {
        patient: rec.patient.clone(),
        chunk_flags,
        flagged_fraction,
        selected,
    })
}

/// Applies the rule to every recording with both modalities.
pub fn detect_noisy_patients(recordings: &[LabeledRecording], rule: &NoiseRule) -> Result<NoiseReport> {
    rule.validate()?;
    let mut report = NoiseReport::default();
    for rec in recordings {
        if rec.present().both() {
            report.patients.push(patient_noise(rec, rule)?);
        } else {
            log::warn!("noise detection skips {}: one modality missing", rec.patient);
            report.skipped.push(rec.patient.clone());
        }
    }
    Ok(report)
}
