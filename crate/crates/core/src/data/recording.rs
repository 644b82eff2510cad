use serde::{Deserialize, Serialize};

use super::dsp::{fir_bandpass_with, resample, Spectrogram, BINS, FRAMES, WINDOW_SAMPLES};
use super::labels::{has_all_labels, trim_wake_edges, SleepLabel};
use crate::autodiff::Tensor;
use crate::error::{data_err, Result};
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;

/// Seconds per labelled window.
pub const WINDOW_SECONDS: f64 = 30.0;

/// Raw samples of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub hz: f64,
    pub samples: Vec<f32>,
}

impl Signal {
    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.hz
    }

    pub fn samples_per_window(&self) -> usize {
        (self.hz * WINDOW_SECONDS).round() as usize
    }
}

/// One night of raw signals and 30 s labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecording {
    pub patient: String,
    pub signals: PerModality<Option<Signal>>,
    pub labels: Vec<SleepLabel>,
    /// Windows touched by injected noise.
    pub noisy: Vec<bool>,
}

impl LabeledRecording {
    pub fn new(patient: impl Into<String>, signals: PerModality<Option<Signal>>, labels: Vec<SleepLabel>) -> Result<Self> {
        let rec = Self {
            patient: patient.into(),
            noisy: vec![false; labels.len()],
            signals,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn present(&self) -> PerModality<bool> {
        self.signals.present()
    }

    /// Each present channel must cover every labelled window.
    pub fn validate(&self) -> Result<()> {
        if self.present().count() == 0 {
            return Err(data_err(format!("recording {} has no signals", self.patient)));
        }
        if self.noisy.len() != self.labels.len() {
            return Err(data_err(format!("recording {}: noisy flags do not match labels", self.patient)));
        }
        for (m, sig) in self.signals.iter() {
            let Some(sig) = sig else { continue };
            if !(sig.hz > 0.0) {
                return Err(data_err(format!("recording {}: {m} rate must be positive", self.patient)));
            }
            let needed = self.labels.len() * sig.samples_per_window();
            if sig.samples.len() < needed {
                return Err(data_err(format!(
                    "recording {}: {m} has {} samples, labels need {needed}",
                    self.patient,
                    sig.samples.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-window log-spectrogram features of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSequence {
    pub patient: String,
    /// `[W × 29 × 128]` row-major per present modality.
    pub features: PerModality<Option<Vec<f32>>>,
    pub labels: Vec<SleepLabel>,
    pub noisy: Vec<bool>,
    /// Index of the first kept window in the original recording; window
    /// `i` starts at `(first_window + i)·30` s.
    pub first_window: usize,
}

impl SpectralSequence {
    pub const FRAMES: usize = FRAMES;
    pub const BINS: usize = BINS;
    const WINDOW_LEN: usize = FRAMES * BINS;

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn present(&self) -> PerModality<bool> {
        self.features.present()
    }

    pub fn window_start_seconds(&self, i: usize) -> f64 {
        (self.first_window + i) as f64 * WINDOW_SECONDS
    }

    pub fn validate(&self) -> Result<()> {
        for (m, f) in self.features.iter() {
            if let Some(f) = f {
                if f.len() != self.len() * Self::WINDOW_LEN {
                    return Err(data_err(format!("{}: {m} features do not match {} windows", self.patient, self.len())));
                }
            }
        }
        if self.noisy.len() != self.len() {
            return Err(data_err(format!("{}: noisy flags do not match windows", self.patient)));
        }
        Ok(())
    }

    /// Windows `start..start+len` of one modality as a `[len, 29, 128]` tensor.
    pub fn window_tensor<T: Scalar>(&self, m: Modality, start: usize, len: usize) -> Option<Tensor<T>> {
        let f = self.features[m].as_ref()?;
        let data = f[start * Self::WINDOW_LEN..(start + len) * Self::WINDOW_LEN]
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        Some(Tensor::new(vec![len, FRAMES, BINS], data).expect("window slice shape"))
    }

    /// Drops one modality (to build modality-incomplete datasets).
    pub fn without(mut self, m: Modality) -> Self {
        self.features[m] = None;
        self
    }
}

/// Preprocessing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_hz: f64,
    pub eeg_band: [f64; 2],
    pub eog_band: [f64; 2],
    /// Band-pass length in seconds (taps = seconds·rate, made odd).
    pub filter_seconds: f64,
    pub log_eps: f64,
    pub trim_wake: bool,
    /// Discard recordings that do not contain every sleep stage.
    pub require_all_labels: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_hz: 100.0,
            eeg_band: [0.3, 40.0],
            eog_band: [0.3, 23.0],
            filter_seconds: 10.0,
            log_eps: 1e-6,
            trim_wake: true,
            require_all_labels: true,
        }
    }
}

impl PreprocessConfig {
    pub fn band(&self, m: Modality) -> [f64; 2] {
        match m {
            Modality::Eeg => self.eeg_band,
            Modality::Eog => self.eog_band,
        }
    }
}

/// Raw recording → spectral sequence. Returns `Ok(None)` when the
/// recording is discarded for lacking a sleep stage.
pub fn preprocess(rec: &LabeledRecording, cfg: &PreprocessConfig) -> Result<Option<SpectralSequence>> {
    rec.validate()?;
    if cfg.target_hz != 100.0 {
        return Err(data_err("features are defined for a 100 Hz working rate"));
    }
    if cfg.require_all_labels && !has_all_labels(&rec.labels) {
        return Ok(None);
    }
    let keep = if cfg.trim_wake {
        trim_wake_edges(&rec.labels)
    } else {
        0..rec.labels.len()
    };
    let spectrogram = Spectrogram::new(cfg.log_eps);
    let mut features = PerModality::default();
    for (m, sig) in rec.signals.iter() {
        let Some(sig) = sig else { continue };
        let raw: Vec<f64> = sig.samples[..rec.labels.len() * sig.samples_per_window()]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let resampled = resample(&raw, sig.hz, cfg.target_hz)?;
        let [low, high] = cfg.band(m);
        let taps = ((cfg.filter_seconds * cfg.target_hz).round() as usize) | 1;
        let filtered = fir_bandpass_with(&resampled, cfg.target_hz, low, high, taps)?;
        let mut out = Vec::with_capacity(keep.len() * FRAMES * BINS);
        for w in keep.clone() {
            out.extend(spectrogram.features(&filtered[w * WINDOW_SAMPLES..(w + 1) * WINDOW_SAMPLES])?);
        }
        features[m] = Some(out);
    }
    Ok(Some(SpectralSequence {
        patient: rec.patient.clone(),
        features,
        labels: rec.labels[keep.clone()].to_vec(),
        noisy: rec.noisy[keep.clone()].to_vec(),
        first_window: keep.start,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording(windows: usize) -> LabeledRecording {
        let labels: Vec<_> = (0..windows).map(|i| SleepLabel::ALL[i % 5]).collect();
        let eeg = Signal {
            hz: 125.0,
            samples: (0..windows * 3750).map(|i| ((i as f32) * 0.37).sin()).collect(),
        };
        let eog = Signal {
            hz: 50.0,
            samples: (0..windows * 1500).map(|i| ((i as f32) * 0.11).cos()).collect(),
        };
        LabeledRecording::new("p", PerModality::new(Some(eeg), Some(eog)), labels).unwrap()
    }

    #[test]
    fn thirty_seconds_become_29_by_128() {
        let seq = preprocess(&recording(6), &PreprocessConfig::default()).unwrap().unwrap();
        assert_eq!(seq.len(), 6);
        let t = seq.window_tensor::<f64>(Modality::Eeg, 0, 6).unwrap();
        assert_eq!(t.shape(), &[6, 29, 128]);
        assert_eq!(seq.window_tensor::<f32>(Modality::Eog, 2, 3).unwrap().shape(), &[3, 29, 128]);
    }

    #[test]
    fn recordings_missing_a_stage_are_discarded() {
        let mut rec = recording(6);
        rec.labels = vec![SleepLabel::N2; 6];
        assert!(preprocess(&rec, &PreprocessConfig::default()).unwrap().is_none());
    }

    #[test]
    fn short_signals_are_rejected() {
        let mut rec = recording(3);
        rec.signals.eeg.as_mut().unwrap().samples.truncate(100);
        assert!(rec.validate().is_err());
    }
}
