//! Seeded synthetic two-channel recordings with known stage structure.
//!
//! Each window is a sum of sinusoids in five frequency bands whose
//! amplitudes depend on the stage. The EEG profiles of N1 and REM are
//! identical and the EOG profiles of N2 and N3 are identical, so each
//! channel alone confuses one pair of stages. A coupling term leaks the EEG
//! delta activity into the EOG channel. Some patients carry a span of
//! high-amplitude noise in one channel, as real recordings do.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::SleepLabel;
use super::noise::corrupt_windows;
use super::recording::{preprocess, LabeledRecording, PreprocessConfig, Signal, SpectralSequence, WINDOW_SECONDS};
use crate::error::{config_err, Result};
use crate::modality::{Modality, PerModality};

/// Band edges in Hz: delta, theta, alpha, sigma, beta.
pub const BANDS: [[f64; 2]; 5] = [[0.5, 4.0], [4.0, 8.0], [8.0, 12.0], [12.0, 15.0], [15.0, 30.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Row-stochastic stage transition matrix.
    pub transition: [[f64; 5]; 5],
    /// Band amplitudes per stage, EEG channel.
    pub eeg_profile: [[f64; 5]; 5],
    /// Band amplitudes per stage, EOG channel.
    pub eog_profile: [[f64; 5]; 5],
    /// Fraction of the EEG delta component added to the EOG channel.
    pub coupling: f64,
    /// Standard deviation of the white noise added to every sample.
    pub noise_floor: f64,
    /// Log-normal sigma of per-window, per-band amplitude jitter.
    pub jitter: f64,
    /// Log-normal sigma of a per-patient, per-channel gain.
    pub patient_gain: f64,
    pub components_per_band: usize,
    pub eeg_hz: f64,
    pub eog_hz: f64,
    /// Probability that a patient carries one artifact span in a randomly
    /// chosen channel.
    pub artifact_probability: f64,
    /// Range of the artifact length as a fraction of the recording.
    pub artifact_span: [f64; 2],
    /// Range of the artifact amplitude relative to the clean signal
    /// (sampled log-uniformly).
    pub artifact_factor: [f64; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut transition = [[0.05; 5]; 5];
        for (i, row) in transition.iter_mut().enumerate() {
            row[i] = 0.8;
        }
        Self {
            seed: 0,
            transition,
            //              delta theta alpha sigma beta
            eeg_profile: [
                [0.3, 0.3, 1.2, 0.2, 0.8], // W
                [0.5, 1.0, 0.3, 0.2, 0.3], // N1
                [0.8, 0.5, 0.2, 1.0, 0.2], // N2
                [2.0, 0.5, 0.1, 0.2, 0.1], // N3
                [0.5, 1.0, 0.3, 0.2, 0.3], // REM
            ],
            eog_profile: [
                [1.0, 0.3, 0.3, 0.1, 0.6], // W
                [0.8, 0.3, 0.1, 0.1, 0.1], // N1
                [0.2, 0.2, 0.1, 0.1, 0.1], // N2
                [0.2, 0.2, 0.1, 0.1, 0.1], // N3
                [0.3, 1.2, 0.2, 0.1, 0.2], // REM
            ],
            coupling: 0.25,
            noise_floor: 0.1,
            jitter: 0.25,
            patient_gain: 0.2,
            components_per_band: 3,
            eeg_hz: 125.0,
            eog_hz: 50.0,
            artifact_probability: 0.2,
            artifact_span: [0.1, 0.6],
            artifact_factor: [5.0, 50.0],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(config_err(format!("transition row {i} is not a probability distribution")));
            }
        }
        let profiles = self.eeg_profile.iter().chain(&self.eog_profile).flatten();
        if profiles.chain([&self.coupling, &self.noise_floor, &self.jitter, &self.patient_gain]).any(|v| !(*v >= 0.0)) {
            return Err(config_err("synthetic amplitudes must be non-negative"));
        }
        let [s0, s1] = self.artifact_span;
        let [f0, f1] = self.artifact_factor;
        if !(0.0..=1.0).contains(&self.artifact_probability) || !(0.0 <= s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < f0 && f0 <= f1) {
            return Err(config_err("artifact probability, span or factor out of range"));
        }
        if self.components_per_band == 0 {
            return Err(config_err("components_per_band must be positive"));
        }
        if !(self.eeg_hz >= 2.0 * BANDS[4][0] && self.eog_hz >= 2.0 * BANDS[4][0]) {
            return Err(config_err("synthetic sampling rates are too low for the beta band"));
        }
        Ok(())
    }

    fn profile(&self, m: Modality) -> &[[f64; 5]; 5] {
        match m {
            Modality::Eeg => &self.eeg_profile,
            Modality::Eog => &self.eog_profile,
        }
    }

    fn hz(&self, m: Modality) -> f64 {
        match m {
            Modality::Eeg => self.eeg_hz,
            Modality::Eog => self.eog_hz,
        }
    }
}

/// Samples a label chain of length `n` starting from the uniform distribution.
pub fn markov_labels<R: Rng + ?Sized>(transition: &[[f64; 5]; 5], n: usize, rng: &mut R) -> Vec<SleepLabel> {
    let mut out = Vec::with_capacity(n);
    let mut state = rng.random_range(0..5);
    for _ in 0..n {
        out.push(SleepLabel::ALL[state]);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &transition[state];
        state = (0..5)
            .find(|&j| {
                acc += row[j];
                u < acc
            })
            .unwrap_or(4);
    }
    out
}

struct Tone {
    freq: f64,
    phase: f64,
    amp: f64,
}

/// Adds `Σ amp·sin(2π f t + φ)` over `out`, starting at time `t0`.
fn add_tones(out: &mut [f64], hz: f64, t0: f64, tones: &[Tone], scale: f64) {
    for tone in tones {
        let step = 2.0 * PI * tone.freq / hz;
        let start = 2.0 * PI * tone.freq * t0 + tone.phase;
        let (mut s, mut c) = start.sin_cos();
        let (ds, dc) = step.sin_cos();
        let a = tone.amp * scale;
        for v in out.iter_mut() {
            *v += a * s;
            (s, c) = (s * dc + c * ds, c * dc - s * ds);
        }
    }
}

fn band_tones<R: Rng + ?Sized>(rng: &mut R, band: [f64; 2], amp: f64, count: usize, limit_hz: f64) -> Vec<Tone> {
    let hi = band[1].min(0.45 * limit_hz);
    let per = amp / (count as f64).sqrt();
    (0..count)
        .map(|_| Tone {
            freq: rng.random_range(band[0]..hi),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: per,
        })
        .collect()
}

/// Patient `index` of the dataset defined by `spec`. Independent of how
/// many other patients are generated.
pub fn synth_patient(spec: &SynthSpec, index: usize, windows: usize) -> Result<LabeledRecording> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let labels = markov_labels(&spec.transition, windows, &mut rng);
    let jitter = Normal::new(0.0, spec.jitter).expect("validated sigma");
    let gain_dist = Normal::new(0.0, spec.patient_gain).expect("validated sigma");
    let gains = PerModality::from_fn(|_| gain_dist.sample(&mut rng).exp());
    let floor = Normal::new(0.0, spec.noise_floor.max(f64::MIN_POSITIVE)).expect("validated sigma");
    let spw = PerModality::from_fn(|m| (spec.hz(m) * WINDOW_SECONDS).round() as usize);
    let mut raw = PerModality::from_fn(|m| vec![0.0f64; windows * spw[m]]);
    for (w, label) in labels.iter().enumerate() {
        let t0 = w as f64 * WINDOW_SECONDS;
        let mut delta = Vec::new();
        for m in Modality::ALL {
            let hz = spec.hz(m);
            let out = &mut raw[m][w * spw[m]..(w + 1) * spw[m]];
            for (b, band) in BANDS.iter().enumerate() {
                let amp = spec.profile(m)[label.index()][b] * jitter.sample(&mut rng).exp();
                let tones = band_tones(&mut rng, *band, amp, spec.components_per_band, hz);
                add_tones(out, hz, t0, &tones, gains[m]);
                if m == Modality::Eeg && b == 0 {
                    delta = tones;
                }
            }
        }
        let eog = &mut raw.eog[w * spw.eog..(w + 1) * spw.eog];
        add_tones(eog, spec.eog_hz, t0, &delta, spec.coupling * gains.eeg);
    }
    let signals = PerModality::from_fn(|m| {
        let samples = raw[m].iter().map(|&v| (v + floor.sample(&mut rng)) as f32).collect();
        Some(Signal { hz: spec.hz(m), samples })
    });
    let mut rec = LabeledRecording::new(format!("synth-{index:04}"), signals, labels)?;
    if windows > 0 && rng.random_bool(spec.artifact_probability) {
        let m = Modality::ALL[rng.random_range(0..2)];
        let [s0, s1] = spec.artifact_span;
        let len = ((rng.random_range(s0..=s1) * windows as f64).round() as usize).clamp(1, windows);
        let start = rng.random_range(0..=windows - len);
        let [f0, f1] = spec.artifact_factor;
        let factor = rng.random_range(f0.ln()..=f1.ln()).exp();
        corrupt_windows(&mut rec, m, start..start + len, factor, rng.random())?;
    }
    Ok(rec)
}

pub fn synth_generate(spec: &SynthSpec, patients: usize, windows: usize) -> Result<Vec<LabeledRecording>> {
    (0..patients).map(|i| synth_patient(spec, i, windows)).collect()
}

/// Synthesizes and preprocesses patients one at a time so raw signals never
/// accumulate. Discarded recordings are skipped.
pub fn synth_features(
    spec: &SynthSpec,
    preprocess_cfg: &PreprocessConfig,
    indices: std::ops::Range<usize>,
    windows: usize,
) -> Result<Vec<SpectralSequence>> {
    let mut out = Vec::with_capacity(indices.len());
    for i in indices {
        if let Some(seq) = preprocess(&synth_patient(spec, i, windows)?, preprocess_cfg)? {
            out.push(seq);
        }
    }
    Ok(out)
}
