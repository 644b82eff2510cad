//! Training objective: multimodal cross-entropy, the multi-supervised
//! unimodal terms (MS) and the cross-modal alignment term (AL).

use crate::autodiff::{Tape, Targets, Var};
use crate::config::{AlignmentSource, LossConfig};
use crate::error::{data_err, Error, Result};
use crate::fusion::ModelOutputs;
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;

/// Loss values of one batch (means over items).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_multimodal: f64,
    pub ce_per_modality: PerModality<f64>,
    pub al_value: f64,
}

/// Loss nodes of one item, before batch averaging.
#[derive(Clone, Copy, Debug)]
pub struct ItemLoss {
    pub total: Var,
    pub ce_multimodal: Option<Var>,
    pub ce: PerModality<Option<Var>>,
    pub al: Option<Var>,
}

/// Sum over modalities of the mean cross-entropy of each unimodal predictor.
pub fn multi_supervised_loss<T: Scalar>(tape: &mut Tape<T>, logits: PerModality<Option<Var>>, labels: &[usize]) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for m in Modality::ALL {
        let l = logits[m].ok_or_else(|| data_err(format!("multi-supervised loss needs {m} logits")))?;
        terms.push(tape.cross_entropy(l, Targets::Labels(labels))?);
    }
    tape.sum_of(&terms)
}

/// `λ·[CE(A·Bᵀ, I) + CE(B·Aᵀ, I)]` over the `L` windows of one item: each
/// window of one modality must pick out its own window in the other.
pub fn alignment_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, lambda: f64, normalize: bool) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "alignment_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let (a, b) = if normalize {
        (tape.l2_normalize_rows(a)?, tape.l2_normalize_rows(b)?)
    } else {
        (a, b)
    };
    let targets: Vec<usize> = (0..sa[0]).collect();
    let ab = tape.matmul_t(a, b)?;
    let ba = tape.matmul_t(b, a)?;
    let forward = tape.cross_entropy(ab, Targets::Labels(&targets))?;
    let backward = tape.cross_entropy(ba, Targets::Labels(&targets))?;
    let sum = tape.add(forward, backward)?;
    tape.scale(sum, T::lit(lambda))
}

fn alignment_inputs(outputs: &ModelOutputs, source: AlignmentSource) -> Result<(Var, Var)> {
    let states = match source {
        AlignmentSource::OuterStates => outputs.outer,
        AlignmentSource::InnerCls => outputs.cls,
    };
    match (states.eeg, states.eog) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(data_err("alignment loss needs unimodal states for both modalities")),
    }
}

/// Loss of one batch item. Items with both modalities get the multimodal CE
/// plus the enabled MS and AL terms; items with one modality get only that
/// modality's unimodal CE. A unimodal model's output counts as its
/// multimodal term.
pub fn item_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &ModelOutputs,
    labels: &[usize],
    present: PerModality<bool>,
    cfg: &LossConfig,
) -> Result<ItemLoss> {
    let mut ce_multimodal = None;
    let mut ce_terms: PerModality<Option<Var>> = PerModality::default();
    let mut al_term = None;
    let mut terms = Vec::with_capacity(4);
    match (present.both(), outputs.logits_mm) {
        (true, Some(mm)) => {
            let ce = tape.cross_entropy(mm, Targets::Labels(labels))?;
            ce_multimodal = Some(ce);
            terms.push(ce);
            if cfg.ms {
                for m in Modality::ALL {
                    let l = outputs.logits[m].ok_or_else(|| data_err(format!("multi-supervised loss needs {m} logits")))?;
                    let ce = tape.cross_entropy(l, Targets::Labels(labels))?;
                    ce_terms[m] = Some(ce);
                    terms.push(ce);
                }
            }
            if cfg.al {
                let (a, b) = alignment_inputs(outputs, cfg.al_source)?;
                let al = alignment_loss(tape, a, b, cfg.lambda_a, cfg.al_normalize)?;
                al_term = Some(al);
                terms.push(al);
            }
        }
        (true, None) => {
            // Unimodal architecture fed from a complete item.
            let (m, l) = single_logits(outputs)?;
            let ce = tape.cross_entropy(l, Targets::Labels(labels))?;
            ce_terms[m] = Some(ce);
            ce_multimodal = Some(ce);
            terms.push(ce);
        }
        (false, _) => {
            let m = present.only().ok_or_else(|| data_err("batch item has no modality"))?;
            let l = outputs.logits[m].ok_or_else(|| data_err(format!("no {m} logits for a {m}-only item")))?;
            let ce = tape.cross_entropy(l, Targets::Labels(labels))?;
            ce_terms[m] = Some(ce);
            terms.push(ce);
        }
    }
    Ok(ItemLoss {
        total: tape.sum_of(&terms)?,
        ce_multimodal,
        ce: ce_terms,
        al: al_term,
    })
}

fn single_logits(outputs: &ModelOutputs) -> Result<(Modality, Var)> {
    let found: Vec<_> = Modality::ALL.into_iter().filter_map(|m| outputs.logits[m].map(|l| (m, l))).collect();
    match found.as_slice() {
        [one] => Ok(*one),
        _ => Err(data_err("model produced neither multimodal nor single unimodal logits")),
    }
}

/// Mean of the item losses, plus the component values averaged the same way.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, items: &[ItemLoss]) -> Result<(Var, LossBreakdown)> {
    if items.is_empty() {
        return Err(data_err("empty batch"));
    }
    let n = items.len() as f64;
    let totals: Vec<Var> = items.iter().map(|i| i.total).collect();
    let sum = tape.sum_of(&totals)?;
    let total = tape.scale(sum, T::lit(1.0 / n))?;
    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let mut breakdown = LossBreakdown {
        total: tape.value(total).item().as_f64(),
        ..Default::default()
    };
    for item in items {
        breakdown.ce_multimodal += value(tape, item.ce_multimodal) / n;
        breakdown.al_value += value(tape, item.al) / n;
        for m in Modality::ALL {
            breakdown.ce_per_modality[m] += value(tape, item.ce[m]) / n;
        }
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ce_oracle(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
        let c = logits.last_dim();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / labels.len() as f64
    }

    #[test]
    fn uniform_logits_give_two_ln5() {
        let mut tape = Tape::<f64>::new();
        let labels = [0, 1, 2, 3, 4, 0];
        let a = tape.constant(Tensor::zeros(&[6, 5])).unwrap();
        let b = tape.constant(Tensor::zeros(&[6, 5])).unwrap();
        let ms = multi_supervised_loss(&mut tape, PerModality::new(Some(a), Some(b)), &labels).unwrap();
        assert!((tape.value(ms).item() - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ms_matches_independent_ce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [4, 2, 2, 0, 1, 3, 3];
        let la = Tensor::<f64>::randn(&[7, 5], 2.0, &mut rng);
        let lb = Tensor::<f64>::randn(&[7, 5], 2.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(la.clone()).unwrap();
        let b = tape.constant(lb.clone()).unwrap();
        let ms = multi_supervised_loss(&mut tape, PerModality::new(Some(a), Some(b)), &labels).unwrap();
        let expected = ce_oracle(&la, &labels) + ce_oracle(&lb, &labels);
        assert!((tape.value(ms).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn ms_without_one_modality_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert!(multi_supervised_loss(&mut tape, PerModality::new(Some(a), None), &[0, 1]).is_err());
    }

    #[test]
    fn single_window_alignment_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng)).unwrap();
        let b = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng)).unwrap();
        let al = alignment_loss(&mut tape, a, b, 0.1, true).unwrap();
        assert_eq!(tape.value(al).item(), 0.0);
    }

    #[test]
    fn alignment_rejects_mismatched_lengths() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[3, 4])).unwrap();
        let b = tape.constant(Tensor::ones(&[2, 4])).unwrap();
        assert!(alignment_loss(&mut tape, a, b, 0.1, true).is_err());
    }

    #[test]
    fn alignment_decreases_as_diagonal_dominates() {
        let mut last = f64::INFINITY;
        for step in 0..6 {
            let w = step as f64 / 5.0;
            // rows of b drift from a shared direction towards a's own rows
            let a = Tensor::<f64>::identity(4);
            let b = Tensor::from_fn(&[4, 4], |i| {
                let (r, c) = (i / 4, i % 4);
                w * if r == c { 1.0 } else { 0.0 } + (1.0 - w) * 0.5
            });
            let mut tape = Tape::new();
            let va = tape.constant(a).unwrap();
            let vb = tape.constant(b).unwrap();
            let al = tape_value(&mut tape, va, vb);
            assert!(al < last, "step {step}: {al} !< {last}");
            last = al;
        }
        assert!(last > 0.0);
    }

    fn tape_value(tape: &mut Tape<f64>, a: Var, b: Var) -> f64 {
        let v = alignment_loss(tape, a, b, 0.1, true).unwrap();
        tape.value(v).item()
    }
}
