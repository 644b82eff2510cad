use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::recording::SpectralSequence;
use crate::autodiff::Tensor;
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;

/// Consecutive windows `start..start+len` of sequence `sequence`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
}

/// Splits every sequence into consecutive spans of `max_len` windows; the
/// last span of a sequence may be shorter. Spans never cross sequences.
pub fn spans(sequences: &[SpectralSequence], max_len: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let mut start = 0;
        while start < seq.len() {
            let len = max_len.min(seq.len() - start);
            out.push(Span { sequence: i, start, len });
            start += len;
        }
    }
    out
}

/// Batches of `batch` spans in an order fixed by `(seed, epoch)`.
pub fn assemble_batches(sequences: &[SpectralSequence], batch: usize, max_len: usize, seed: u64, epoch: u64) -> Vec<Vec<Span>> {
    batches_from_spans(spans(sequences, max_len), batch, seed, epoch)
}

/// Shuffles `all` with the `(seed, epoch)` stream and chunks it.
pub fn batches_from_spans(mut all: Vec<Span>, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<Span>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    all.shuffle(&mut rng);
    all.chunks(batch.max(1)).map(<[Span]>::to_vec).collect()
}

/// Model inputs and labels of one span.
#[derive(Clone, Debug)]
pub struct Item<T> {
    pub inputs: PerModality<Option<Tensor<T>>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Item<T> {
    pub fn from_span(sequences: &[SpectralSequence], span: Span) -> Self {
        let seq = &sequences[span.sequence];
        Self {
            inputs: PerModality::from_fn(|m| seq.window_tensor(m, span.start, span.len)),
            labels: seq.labels[span.start..span.start + span.len].iter().map(|l| l.index()).collect(),
        }
    }

    pub fn present(&self) -> PerModality<bool> {
        self.inputs.present()
    }

    /// Same item with one modality removed.
    pub fn restricted(&self, keep: PerModality<bool>) -> Self {
        Self {
            inputs: PerModality::from_fn(|m| if keep[m] { self.inputs[m].clone() } else { None }),
            labels: self.labels.clone(),
        }
    }

    pub fn input(&self, m: Modality) -> Option<&Tensor<T>> {
        self.inputs[m].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels::SleepLabel;

    fn seq(n: usize) -> SpectralSequence {
        SpectralSequence {
            patient: format!("p{n}"),
            features: PerModality::new(Some(vec![0.0; n * 29 * 128]), None),
            labels: vec![SleepLabel::N2; n],
            noisy: vec![false; n],
            first_window: 0,
        }
    }

    #[test]
    fn full_batch_has_336_labels() {
        let data: Vec<_> = (0..16).map(|_| seq(21)).collect();
        let batches = assemble_batches(&data, 16, 21, 0, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].iter().map(|s| s.len).sum::<usize>(), 336);
    }

    #[test]
    fn spans_stay_inside_their_sequence() {
        let data = vec![seq(50), seq(7), seq(21)];
        let all = spans(&data, 21);
        assert_eq!(all.iter().map(|s| s.len).collect::<Vec<_>>(), vec![21, 21, 8, 7, 21]);
        for s in &all {
            assert!(s.start + s.len <= data[s.sequence].len());
        }
        assert_eq!(assemble_batches(&data, 2, 21, 9, 3), assemble_batches(&data, 2, 21, 9, 3));
        assert_ne!(assemble_batches(&data, 2, 21, 9, 3), assemble_batches(&data, 2, 21, 9, 4));
    }

    #[test]
    fn items_carry_presence() {
        let data = vec![seq(5)];
        let item = Item::<f64>::from_span(&data, Span { sequence: 0, start: 1, len: 3 });
        assert_eq!(item.present(), PerModality::new(true, false));
        assert_eq!(item.input(Modality::Eeg).unwrap().shape(), &[3, 29, 128]);
        assert_eq!(item.labels, vec![2, 2, 2]);
    }
}
