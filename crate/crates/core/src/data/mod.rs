//! Signal ingestion, preprocessing, synthetic data, noise handling, splits
//! and batching.

pub mod batch;
pub mod dsp;
pub mod io;
pub mod labels;
pub mod noise;
pub mod recording;
pub mod split;
pub mod synth;

pub use batch::{assemble_batches, batches_from_spans, spans, Item, Span};
pub use dsp::{fir_bandpass, resample, stft_features, Spectrogram};
pub use labels::{has_all_labels, trim_wake_edges, windowize, SleepLabel};
pub use noise::{detect_noisy_patients, inject_noise, NoiseReport, NoiseRule, PatientNoise};
pub use recording::{preprocess, LabeledRecording, PreprocessConfig, Signal, SpectralSequence};
pub use split::{split_patients, SplitSpec};
pub use synth::{synth_features, synth_generate, synth_patient, SynthSpec};
