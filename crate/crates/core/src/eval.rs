//! Condition-matrix evaluation, reports and hypnogram export.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::config::NUM_CLASSES;
use crate::data::{SleepLabel, SpectralSequence};
use crate::error::{data_err, Error, Result};
use crate::fusion::{infer_with_missing, Model};
use crate::metrics::ConfusionMatrix;
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;

/// Logits `[W, C]` for a whole sequence, computed span by span.
pub fn sequence_logits<T: Scalar>(
    model: &Model<T>,
    seq: &SpectralSequence,
    available: PerModality<bool>,
    span_len: usize,
) -> Result<Vec<T>> {
    let span_len = span_len.min(model.config.max_windows).max(1);
    let mut out = Vec::with_capacity(seq.len() * model.config.classes);
    let mut start = 0;
    while start < seq.len() {
        let len = span_len.min(seq.len() - start);
        let inputs = PerModality::from_fn(|m| {
            if available[m] {
                seq.window_tensor::<T>(m, start, len)
            } else {
                None
            }
        });
        if inputs.present() != available {
            return Err(data_err(format!("{} lacks a requested modality", seq.patient)));
        }
        let logits = infer_with_missing(model, inputs.as_ref())?;
        out.extend_from_slice(logits.data());
        start += len;
    }
    Ok(out)
}

/// Arg-max predictions for a whole sequence.
pub fn predict_sequence<T: Scalar>(
    model: &Model<T>,
    seq: &SpectralSequence,
    available: PerModality<bool>,
    span_len: usize,
) -> Result<Vec<usize>> {
    let logits = sequence_logits(model, seq, available, span_len)?;
    Ok(logits
        .chunks(model.config.classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Both,
    EegOnly,
    EogOnly,
    /// Patients selected by the noise rule, both modalities as recorded.
    NoisySubset,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Both, Condition::EegOnly, Condition::EogOnly, Condition::NoisySubset];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Both => "both",
            Condition::EegOnly => "eeg_only",
            Condition::EogOnly => "eog_only",
            Condition::NoisySubset => "noisy_subset",
        }
    }

    pub fn available(self) -> PerModality<bool> {
        match self {
            Condition::Both | Condition::NoisySubset => PerModality::new(true, true),
            Condition::EegOnly => PerModality::new(true, false),
            Condition::EogOnly => PerModality::new(false, true),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| data_err(format!("unknown condition `{s}` (expected both, eeg_only, eog_only, noisy_subset)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub condition: Condition,
    pub patients: usize,
    pub confusion: ConfusionMatrix,
    /// Set when nothing could be scored.
    pub note: Option<String>,
}

impl ConditionReport {
    pub fn windows(&self) -> u64 {
        self.confusion.total()
    }

    pub fn is_empty(&self) -> bool {
        self.windows() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub conditions: Vec<ConditionReport>,
    /// Hash of the run manifest this report belongs to.
    pub manifest: Option<String>,
}

impl EvalReport {
    pub fn get(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.manifest {
            let _ = writeln!(s, "manifest {h}");
        }
        let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>9} {:>7} {:>8}", "condition", "patients", "windows", "accuracy", "kappa", "macroF1");
        for r in &self.conditions {
            if r.is_empty() {
                let _ = writeln!(s, "{:<14} {:>8} {:>8}  {}", r.condition, r.patients, 0, r.note.as_deref().unwrap_or("no windows"));
                continue;
            }
            let cm = &r.confusion;
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:>8} {:>9.2} {:>7.3} {:>8.2}",
                r.condition,
                r.patients,
                r.windows(),
                cm.accuracy().unwrap_or(f64::NAN),
                cm.cohen_kappa().unwrap_or(f64::NAN),
                cm.macro_f1().unwrap_or(f64::NAN)
            );
            let f1 = cm.per_label_f1();
            let per: Vec<String> = SleepLabel::ALL.iter().map(|l| format!("{l} {:.2}", 100.0 * f1[l.index()])).collect();
            let _ = writeln!(s, "  per-label F1: {}", per.join(", "));
        }
        s
    }

    /// Flat `key = value` lines; confusion matrices are included so every
    /// metric can be recomputed.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.manifest {
            let _ = writeln!(s, "manifest = {h}");
        }
        for r in &self.conditions {
            let c = r.condition;
            let _ = writeln!(s, "{c}.patients = {}", r.patients);
            let _ = writeln!(s, "{c}.windows = {}", r.windows());
            if let Some(note) = &r.note {
                let _ = writeln!(s, "{c}.note = {note}");
            }
            if r.is_empty() {
                continue;
            }
            let cm = &r.confusion;
            let _ = writeln!(s, "{c}.accuracy = {:.6}", cm.accuracy().unwrap_or(f64::NAN));
            let _ = writeln!(s, "{c}.kappa = {:.6}", cm.cohen_kappa().unwrap_or(f64::NAN));
            let _ = writeln!(s, "{c}.macro_f1 = {:.6}", cm.macro_f1().unwrap_or(f64::NAN));
            for (l, f1) in SleepLabel::ALL.iter().zip(cm.per_label_f1()) {
                let _ = writeln!(s, "{c}.f1.{l} = {:.6}", 100.0 * f1);
            }
            for (i, row) in cm.counts.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                let _ = writeln!(s, "{c}.confusion.{} = {}", SleepLabel::ALL[i], cells.join(" "));
            }
        }
        s
    }
}

/// Scores every requested condition. Conditions whose modalities a
/// sequence lacks skip that sequence; `noisy_patients` restricts the
/// noisy-subset condition.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    sequences: &[SpectralSequence],
    conditions: &[Condition],
    noisy_patients: &[String],
    span_len: usize,
) -> Result<EvalReport> {
    let noisy: HashSet<&str> = noisy_patients.iter().map(String::as_str).collect();
    let mut report = EvalReport::default();
    for &c in conditions {
        let want = c.available();
        let mut cm = ConfusionMatrix::new();
        let mut patients = 0;
        let mut skipped = 0;
        for seq in sequences {
            if c == Condition::NoisySubset && !noisy.contains(seq.patient.as_str()) {
                continue;
            }
            let p = seq.present();
            if (want.eeg && !p.eeg) || (want.eog && !p.eog) {
                skipped += 1;
                continue;
            }
            let pred = predict_sequence(model, seq, want, model.config.max_windows.min(span_len))?;
            for (l, &p) in seq.labels.iter().zip(&pred) {
                cm.add(l.index(), p)?;
            }
            patients += 1;
        }
        if skipped > 0 {
            log::warn!("{c}: skipped {skipped} recordings lacking a required modality");
        }
        let note = match (c, patients) {
            (Condition::NoisySubset, 0) => Some("no patients selected".to_string()),
            (_, 0) => Some("no recordings with the required modalities".to_string()),
            _ => None,
        };
        report.conditions.push(ConditionReport {
            condition: c,
            patients,
            confusion: cm,
            note,
        });
    }
    Ok(report)
}

/// Per-window predictions of the multimodal and both unimodal paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypnogram {
    pub truth: Vec<SleepLabel>,
    pub multimodal: Option<Vec<usize>>,
    pub unimodal: PerModality<Option<Vec<usize>>>,
}

pub fn hypnogram<T: Scalar>(model: &Model<T>, seq: &SpectralSequence, span_len: usize) -> Result<Hypnogram> {
    let p = seq.present();
    let multimodal = if p.both() && model.variant().is_multimodal() {
        Some(predict_sequence(model, seq, p, span_len)?)
    } else {
        None
    };
    let mut unimodal = PerModality::default();
    for m in Modality::ALL {
        let only = PerModality::from_fn(|x| x == m);
        if !p[m] || !model_accepts(model, m) {
            continue;
        }
        unimodal[m] = Some(predict_sequence(model, seq, only, span_len)?);
    }
    Ok(Hypnogram {
        truth: seq.labels.clone(),
        multimodal,
        unimodal,
    })
}

fn model_accepts<T: Scalar>(model: &Model<T>, m: Modality) -> bool {
    match model.variant() {
        crate::config::FusionVariant::Unimodal(u) => u == m,
        _ => true,
    }
}

impl Hypnogram {
    /// Text table `index, true, pred_mm, pred_eeg, pred_eog`; `-` marks an
    /// unavailable path.
    pub fn to_text(&self, manifest: Option<&str>) -> String {
        let name = |v: &Option<Vec<usize>>, i: usize| {
            v.as_ref()
                .and_then(|p| SleepLabel::from_index(p[i]).ok())
                .map_or("-".to_string(), |l| l.to_string())
        };
        let mut s = String::new();
        if let Some(h) = manifest {
            let _ = writeln!(s, "# manifest {h}");
        }
        let _ = writeln!(s, "index, true, pred_mm, pred_eeg, pred_eog");
        for (i, t) in self.truth.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i}, {t}, {}, {}, {}",
                name(&self.multimodal, i),
                name(&self.unimodal.eeg, i),
                name(&self.unimodal.eog, i)
            );
        }
        s
    }
}

/// Fraction of windows in `mask` where two prediction tracks agree.
pub fn agreement(a: &[usize], b: &[usize], mask: &[bool]) -> f64 {
    let (mut same, mut n) = (0usize, 0usize);
    for ((x, y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            n += 1;
            same += usize::from(x == y);
        }
    }
    if n == 0 {
        0.0
    } else {
        same as f64 / n as f64
    }
}

/// Writes a hypnogram table to `path`.
pub fn export_hypnogram<T: Scalar>(
    model: &Model<T>,
    seq: &SpectralSequence,
    span_len: usize,
    path: &std::path::Path,
    manifest: Option<&str>,
) -> Result<Hypnogram> {
    let h = hypnogram(model, seq, span_len)?;
    crate::data::io::write_atomic(path, h.to_text(manifest).as_bytes())?;
    Ok(h)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const _: () = assert!(NUM_CLASSES == SleepLabel::ALL.len());
