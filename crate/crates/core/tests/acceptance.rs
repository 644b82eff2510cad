//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coresleep::autodiff::{finite_diff_check, Targets};
use coresleep::backbone::{Block, CrossLayer, EncoderLayer, Init, Session};
use coresleep::data::{
    assemble_batches, detect_noisy_patients, inject_noise, preprocess, spans, split_patients, stft_features, synth_features, synth_patient,
    Item, NoiseRule, PreprocessConfig, SpectralSequence, SynthSpec,
};
use coresleep::eval::{evaluate, hypnogram, Condition};
use coresleep::fusion::Architecture;
use coresleep::metrics::ConfusionMatrix;
use coresleep::objectives::{alignment_loss, item_loss, total_loss};
use coresleep::training::{TrainConfig, Trainer};
use coresleep::{infer_with_missing, FusionVariant, LossConfig, Modality, Model, ModelConfig, ParamStore, PerModality, RunConfig, Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..5)).collect()
}

fn gradients() -> Outcome {
    let cfg = ModelConfig::reduced();
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = Vec::new();

    // (a) one encoder layer, read out through a fixed projection and CE.
    let mut store = ParamStore::<f64>::new();
    let (layer, rel) = {
        let mut init = Init::new(&mut store, 3);
        let block = Block::init(&mut init, "enc", &cfg, 1, cfg.frames + 1);
        (block.layers[0].clone(), block.rel_table)
    };
    let x = Tensor::<f64>::randn(&[2, cfg.frames + 1, cfg.d_model], 1.0, &mut rng);
    let proj = Tensor::<f64>::randn(&[cfg.d_model, 5], 0.5, &mut rng);
    let labels = random_labels(&mut rng, 2 * (cfg.frames + 1));
    let layer_loss = |layer: &EncoderLayer| {
        let (x, proj, labels, cfg) = (x.clone(), proj.clone(), labels.clone(), cfg.clone());
        let layer = layer.clone();
        move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let mut s = Session::eval(store, &cfg);
            std::mem::swap(&mut s.tape, tape);
            let xin = s.input(x.clone())?;
            let table = s.param(rel);
            let h = layer.forward(&mut s, xin, table)?;
            let flat = s.tape.reshape(h, &[labels.len(), cfg.d_model])?;
            let p = s.tape.constant(proj.clone())?;
            let logits = s.tape.matmul(flat, p)?;
            let l = s.tape.cross_entropy(logits, Targets::Labels(&labels))?;
            std::mem::swap(&mut s.tape, tape);
            Ok(l)
        }
    };
    let r = finite_diff_check(&mut store, layer_loss(&layer), 400, 1e-6, 7).map_err(err)?;
    worst.push(("encoder layer", r.max_rel_error, r.worst.clone()));

    // (b) cross-attention sublayer.
    let mut store = ParamStore::<f64>::new();
    let ca = {
        let mut init = Init::new(&mut store, 4);
        CrossLayer::init(&mut init, "ca", &cfg)
    };
    let z = Tensor::<f64>::randn(&[2, 4, cfg.d_model], 1.0, &mut rng);
    let other = Tensor::<f64>::randn(&[2, 6, cfg.d_model], 1.0, &mut rng);
    let labels_ca = random_labels(&mut rng, 8);
    let cfg_ca = cfg.clone();
    let ca_loss = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut s = Session::eval(store, &cfg_ca);
        std::mem::swap(&mut s.tape, tape);
        let zin = s.input(z.clone())?;
        let oin = s.input(other.clone())?;
        let h = ca.forward(&mut s, zin, oin)?;
        let flat = s.tape.reshape(h, &[8, cfg_ca.d_model])?;
        let p = s.tape.constant(proj.clone())?;
        let logits = s.tape.matmul(flat, p)?;
        let l = s.tape.cross_entropy(logits, Targets::Labels(&labels_ca))?;
        std::mem::swap(&mut s.tape, tape);
        Ok(l)
    };
    let r = finite_diff_check(&mut store, ca_loss, 400, 1e-6, 8).map_err(err)?;
    worst.push(("cross-attention", r.max_rel_error, r.worst.clone()));

    // (c) full CoRe loss with MS and AL.
    let mut model = Model::<f64>::new(cfg.clone(), 5).map_err(err)?;
    let l = cfg.max_windows;
    let eeg = Tensor::<f64>::randn(&[l, cfg.frames, cfg.features], 1.0, &mut rng);
    let eog = Tensor::<f64>::randn(&[l, cfg.frames, cfg.features], 1.0, &mut rng);
    let labels_m = random_labels(&mut rng, l);
    let loss_cfg = LossConfig::default();
    let arch = model.clone();
    let core_loss = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut s = Session::eval(store, &arch.config);
        std::mem::swap(&mut s.tape, tape);
        let out = arch.forward_tensors(&mut s, PerModality::new(Some(&eeg), Some(&eog)), true)?;
        let item = item_loss(&mut s.tape, &out, &labels_m, PerModality::new(true, true), &loss_cfg)?;
        let (total, _) = total_loss(&mut s.tape, &[item])?;
        std::mem::swap(&mut s.tape, tape);
        Ok(total)
    };
    let r = finite_diff_check(&mut model.store, core_loss, 1500, 1e-6, 9).map_err(err)?;
    worst.push(("CoRe total loss", r.max_rel_error, r.worst.clone()));

    let summary = worst.iter().map(|(n, e, _)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    for (name, e, at) in &worst {
        ensure(*e < tol, format!("{name}: max rel error {e:.3e} at {at:?} (tolerance {tol:e})"))?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 2

fn shapes() -> Outcome {
    let window: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.07).sin()).collect();
    let features = stft_features(&window, 1e-6).map_err(err)?;
    ensure(features.len() == 29 * 128, format!("window features {} != 29·128", features.len()))?;

    let spec = SynthSpec::default();
    let untrimmed = PreprocessConfig {
        trim_wake: false,
        ..PreprocessConfig::default()
    };
    let seqs = synth_features(&spec, &untrimmed, 0..4, 126).map_err(err)?;
    let t: Tensor<f32> = seqs[0].window_tensor(Modality::Eeg, 0, 21).ok_or("missing EEG")?;
    ensure(t.shape() == [21, 29, 128], format!("span tensor shape {:?}", t.shape()))?;
    let batches = assemble_batches(&seqs, 16, 21, 0, 0);
    let first = batches.first().ok_or("no batches")?;
    ensure(first.len() == 16, format!("batch of {} spans", first.len()))?;
    let labels: usize = first.iter().map(|&s| Item::<f32>::from_span(&seqs, s).labels.len()).sum();
    ensure(labels == 336, format!("{labels} labels per batch"))?;
    Ok("[29, 128] per window, 336 labels per batch".into())
}

// ---------------------------------------------------------------- 3

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..5) })
            .collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &pred).map_err(err)?;

        let nf = n as f64;
        let agree = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64;
        let acc = 100.0 * agree / nf;
        let po = agree / nf;
        let pe: f64 = (0..5)
            .map(|k| {
                let t = truth.iter().filter(|&&x| x == k).count() as f64 / nf;
                let p = pred.iter().filter(|&&x| x == k).count() as f64 / nf;
                t * p
            })
            .sum();
        let kappa = if pe >= 1.0 { f64::from(u8::from(po >= 1.0)) } else { (po - pe) / (1.0 - pe) };
        let f1: f64 = (0..5)
            .map(|k| {
                let tp = truth.iter().zip(&pred).filter(|(&a, &b)| a == k && b == k).count() as f64;
                let predicted = pred.iter().filter(|&&x| x == k).count() as f64;
                let actual = truth.iter().filter(|&&x| x == k).count() as f64;
                let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
                let recall = if actual > 0.0 { tp / actual } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            * 100.0
            / 5.0;
        for (got, want) in [
            (cm.accuracy().map_err(err)?, acc),
            (cm.cohen_kappa().map_err(err)?, kappa),
            (cm.macro_f1().map_err(err)?, f1),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst < 1e-12, format!("max deviation {worst:e}"))?;

    let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let perfect = ConfusionMatrix::from_pairs(&truth, &truth).map_err(err)?;
    ensure(perfect.cohen_kappa().map_err(err)? == 1.0, "kappa of perfect agreement != 1")?;
    let constant = ConfusionMatrix::from_pairs(&truth, &[2; 50]).map_err(err)?;
    ensure(constant.cohen_kappa().map_err(err)? == 0.0, "kappa of a constant predictor != 0")?;
    Ok(format!("1000 matrices, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn alignment_sanity() -> Outcome {
    let (l, d, lambda) = (21, 128, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sum = 0.0;
    let mut asym: f64 = 0.0;
    for _ in 0..1000 {
        let a = Tensor::<f64>::randn(&[l, d], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[l, d], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.constant(a).map_err(err)?, tape.constant(b).map_err(err)?);
        let ab = alignment_loss(&mut tape, va, vb, lambda, true).map_err(err)?;
        let ba = alignment_loss(&mut tape, vb, va, lambda, true).map_err(err)?;
        let (x, y) = (tape.value(ab).item(), tape.value(ba).item());
        asym = asym.max((x - y).abs());
        sum += x;
    }
    let mean = sum / 1000.0;
    let expected = lambda * 2.0 * (l as f64).ln();
    ensure((mean - expected).abs() <= 0.1 * expected, format!("mean AL {mean:.4} vs {expected:.4}"))?;
    ensure(asym <= 1e-12, format!("asymmetry {asym:e}"))?;

    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::randn(&[1, d], 1.0, &mut rng)).map_err(err)?;
    let b = tape.constant(Tensor::randn(&[1, d], 1.0, &mut rng)).map_err(err)?;
    let single = alignment_loss(&mut tape, a, b, lambda, true).map_err(err)?;
    ensure(tape.value(single).item() == 0.0, "AL with one window is not 0")?;
    Ok(format!("mean {mean:.4} (expected {expected:.4}), asymmetry {asym:.1e}, L=1 → 0"))
}

// ---------------------------------------------------------------- 5

fn missing_modality() -> Outcome {
    let cfg = ModelConfig::reduced();
    let core = Model::<f64>::new(cfg.clone(), 11).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for m in Modality::ALL {
        let mut uni = Model::<f64>::new(cfg.clone().with_fusion(FusionVariant::Unimodal(m)), 99).map_err(err)?;
        let values = uni
            .store
            .ids()
            .map(|id| {
                let name = uni.store.name(id);
                let src = core.store.id(name).ok_or_else(|| format!("CoRe has no parameter {name}"))?;
                Ok(core.store.value(src).clone())
            })
            .collect::<Result<Vec<_>, String>>()?;
        uni.store.set_values(values).map_err(err)?;
        for _ in 0..50 {
            let l = rng.random_range(1..=cfg.max_windows);
            let x = Tensor::<f64>::randn(&[l, cfg.frames, cfg.features], 1.0, &mut rng);
            let inputs = PerModality::from_fn(|k| (k == m).then_some(&x));
            let a = infer_with_missing(&core, inputs).map_err(err)?;
            let b = infer_with_missing(&uni, inputs).map_err(err)?;
            let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, format!("{m}-only output differs from the standalone model"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} inputs bitwise identical"))
}

// ---------------------------------------------------------------- 6

fn weight_sharing() -> Outcome {
    let cfg = ModelConfig::reduced();
    let model = Model::<f64>::new(cfg.clone(), 21).map_err(err)?;
    let Architecture::CoRe(core) = &model.arch else {
        return Err("not a CoRe model".into());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let l = cfg.max_windows;
    let eeg = Tensor::<f64>::randn(&[l, cfg.frames, cfg.features], 1.0, &mut rng);
    let eog = Tensor::<f64>::randn(&[l, cfg.frames, cfg.features], 1.0, &mut rng);
    let run = |store: &ParamStore<f64>| -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>), String> {
        let mut s = Session::eval(store, &cfg);
        let out = model
            .forward_tensors(&mut s, PerModality::new(Some(&eeg), Some(&eog)), true)
            .map_err(err)?;
        let get = |v: Option<coresleep::Var>| v.map(|v| s.value(v).clone()).ok_or("missing output");
        Ok((get(out.grounded.eeg)?, get(out.grounded.eog)?, get(out.logits.eeg)?))
    };
    let (g_eeg, g_eog, u_eeg) = run(&model.store)?;

    let sa = core.encoders.eeg.inner.layers[0].attention.query[0];
    let mut perturbed = model.store.clone();
    perturbed.value_mut(sa).data_mut().iter_mut().for_each(|v| *v += 0.05);
    let (p_eeg, _, p_uni) = run(&perturbed)?;
    ensure(p_eeg != g_eeg, "unimodal SA perturbation left the EEG multimodal branch unchanged")?;
    ensure(p_uni != u_eeg, "unimodal SA perturbation left the EEG unimodal output unchanged")?;

    let ca_eeg: HashSet<_> = core.branches.eeg.cross_ids().into_iter().collect();
    let ca_eog: HashSet<_> = core.branches.eog.cross_ids().into_iter().collect();
    ensure(!ca_eeg.is_empty() && ca_eeg.is_disjoint(&ca_eog), "CA weights shared between branches")?;
    let encoder_ids: HashSet<_> = Modality::ALL.iter().flat_map(|&m| core.encoders[m].ids()).collect();
    ensure(ca_eeg.is_disjoint(&encoder_ids) && ca_eog.is_disjoint(&encoder_ids), "CA weights overlap encoder weights")?;

    let ca = *ca_eeg.iter().next().expect("non-empty");
    let mut perturbed = model.store.clone();
    perturbed.value_mut(ca).data_mut().iter_mut().for_each(|v| *v += 0.05);
    let (_, q_eog, q_uni) = run(&perturbed)?;
    ensure(q_uni == u_eeg, "EEG CA perturbation changed the unimodal output")?;
    ensure(q_eog == g_eog, "EEG CA perturbation changed the EOG branch")?;
    Ok(format!("SA shared, {} + {} CA parameters disjoint", ca_eeg.len(), ca_eog.len()))
}

// ---------------------------------------------------------------- shared synthetic experiments

const PATIENTS: usize = 200;
const WINDOWS: usize = 100;
const SEEDS: [u64; 3] = [0, 1, 2];

fn dataset() -> &'static Vec<SpectralSequence> {
    static DATA: OnceLock<Vec<SpectralSequence>> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = RunConfig::desk();
        let t = Instant::now();
        let seqs = synth_features(&cfg.data.synth, &cfg.data.preprocess, 0..PATIENTS, WINDOWS).expect("synthetic dataset");
        eprintln!("  synthetic dataset: {} patients in {:.0?}", seqs.len(), t.elapsed());
        seqs
    })
}

struct Split {
    train: Vec<SpectralSequence>,
    validation: Vec<SpectralSequence>,
    test: Vec<SpectralSequence>,
}

fn split(seqs: &[SpectralSequence], seed: u64) -> Split {
    let ids: Vec<String> = seqs.iter().map(|s| s.patient.clone()).collect();
    let s = split_patients(&ids, seed).expect("split");
    let pick = |ids: &[String]| -> Vec<SpectralSequence> {
        let set: HashSet<&str> = ids.iter().map(String::as_str).collect();
        seqs.iter().filter(|x| set.contains(x.patient.as_str())).cloned().collect()
    };
    Split {
        train: pick(&s.train),
        validation: pick(&s.validation),
        test: pick(&s.test),
    }
}

fn train_model(
    fusion: FusionVariant,
    loss: LossConfig,
    seed: u64,
    train: &[SpectralSequence],
    validation: &[SpectralSequence],
) -> Result<Model<f32>, String> {
    let cfg = RunConfig::desk();
    let training = TrainConfig { seed, ..cfg.training };
    let model = Model::<f32>::new(cfg.model.with_fusion(fusion), seed).map_err(err)?;
    let t = Instant::now();
    let mut trainer = Trainer::new(model, loss, training, train, validation).map_err(err)?;
    let outcome = trainer.run().map_err(err)?;
    eprintln!(
        "  trained {fusion:?} seed {seed}: {} steps, best validation {:?}, {:.0?}",
        outcome.steps,
        outcome.best,
        t.elapsed()
    );
    Ok(trainer.into_best_model())
}

fn accuracy(model: &Model<f32>, seqs: &[SpectralSequence], c: Condition) -> Result<f64, String> {
    let report = evaluate(model, seqs, &[c], &[], 21).map_err(err)?;
    report.conditions[0].confusion.accuracy().map_err(err)
}

struct CoreRun {
    split: Split,
    full: Model<f32>,
    plain: Model<f32>,
}

/// CoRe with MS+AL and plain CoRe (multimodal CE only), one per seed, each
/// seed with its own patient split.
fn core_runs() -> &'static Result<Vec<CoreRun>, String> {
    static RUNS: OnceLock<Result<Vec<CoreRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let split = split(dataset(), seed);
                let full = train_model(FusionVariant::CoRe, LossConfig::default(), seed, &split.train, &split.validation)?;
                let plain = train_model(FusionVariant::CoRe, LossConfig::plain(), seed, &split.train, &split.validation)?;
                Ok(CoreRun { split, full, plain })
            })
            .collect()
    })
}

// ---------------------------------------------------------------- 7

fn learnability() -> Outcome {
    let runs = core_runs().as_ref()?;
    let run = &runs[0];
    let acc = accuracy(&run.full, &run.split.test, Condition::Both)?;
    ensure(acc >= 90.0, format!("multimodal test accuracy {acc:.2}% < 90%"))?;
    Ok(format!("multimodal test accuracy {acc:.2}%"))
}

// ---------------------------------------------------------------- 8

fn ms_benefit() -> Outcome {
    let runs = core_runs().as_ref()?;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for run in runs {
        with.push(accuracy(&run.full, &run.split.test, Condition::EegOnly)?);
        without.push(accuracy(&run.plain, &run.split.test, Condition::EegOnly)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let detail = format!("EEG-only {a:.2}% with MS vs {b:.2}% plain (per seed {with:.1?} vs {without:.1?})");
    ensure(a - b >= 10.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn patient_index(id: &str) -> Result<usize, String> {
    id.strip_prefix("synth-").and_then(|n| n.parse().ok()).ok_or(format!("unexpected patient id {id}"))
}

fn noise_robustness() -> Outcome {
    let runs = core_runs().as_ref()?;
    let run = &runs[0];
    let cfg = RunConfig::desk();
    let eeg_model = train_model(FusionVariant::Unimodal(Modality::Eeg), LossConfig::default(), 0, &run.split.train, &run.split.validation)?;

    let mut corrupted = Vec::new();
    for seq in &run.split.test {
        let index = patient_index(&seq.patient)?;
        let mut rec = synth_patient(&cfg.data.synth, index, WINDOWS).map_err(err)?;
        let before = rec.noisy.clone();
        inject_noise(&mut rec, Modality::Eeg, 0.5, 50.0, 1000 + index as u64).map_err(err)?;
        rec.noisy = rec.noisy.iter().zip(&before).map(|(&after, &was)| after && !was).collect();
        corrupted.push(preprocess(&rec, &cfg.data.preprocess).map_err(err)?.ok_or("test patient discarded")?);
    }
    let mm = accuracy(&run.full, &corrupted, Condition::Both)?;
    let eeg = accuracy(&eeg_model, &corrupted, Condition::EegOnly)?;

    let (mut with_eog, mut with_eeg, mut windows) = (0usize, 0usize, 0usize);
    for seq in &corrupted {
        let h = hypnogram(&run.full, seq, 21).map_err(err)?;
        let (m, e, o) = (
            h.multimodal.ok_or("no multimodal track")?,
            h.unimodal.eeg.ok_or("no EEG track")?,
            h.unimodal.eog.ok_or("no EOG track")?,
        );
        for i in (0..seq.len()).filter(|&i| seq.noisy[i]) {
            windows += 1;
            with_eog += usize::from(m[i] == o[i]);
            with_eeg += usize::from(m[i] == e[i]);
        }
    }
    ensure(windows > 0, "no corrupted windows")?;
    let (ag_eog, ag_eeg) = (with_eog as f64 / windows as f64, with_eeg as f64 / windows as f64);
    let detail = format!(
        "corrupted: multimodal {mm:.2}% vs unimodal EEG {eeg:.2}%; noisy-span agreement mm/EOG {ag_eog:.3} vs mm/EEG {ag_eeg:.3}"
    );
    ensure(mm - eeg >= 10.0, detail.clone())?;
    ensure(ag_eog > ag_eeg, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn noisy_selection() -> Outcome {
    let spec = SynthSpec {
        artifact_probability: 0.0,
        ..SynthSpec::default()
    };
    let rule = NoiseRule::default();
    let mut recordings = Vec::new();
    let mut expected = Vec::new();
    for i in 0..12 {
        let mut rec = synth_patient(&spec, i, 200).map_err(err)?;
        let m = Modality::ALL[i % 2];
        let (fraction, selected) = match i % 3 {
            0 => (0.5, true),
            1 => (0.3, false),
            _ => (0.0, false),
        };
        inject_noise(&mut rec, m, fraction, 50.0, i as u64).map_err(err)?;
        recordings.push(rec);
        expected.push(selected);
    }
    let report = detect_noisy_patients(&recordings, &rule).map_err(err)?;
    for (p, want) in report.patients.iter().zip(&expected) {
        ensure(
            p.selected == *want,
            format!("{}: selected {} (flagged {:?})", p.patient, p.selected, p.flagged_fraction),
        )?;
    }
    Ok(format!("{} of 12 constructed patients selected as expected", report.selected().len()))
}

// ---------------------------------------------------------------- 11

fn incomplete_data() -> Outcome {
    let cfg = RunConfig::desk();
    let base = dataset();
    let mm: Vec<SpectralSequence> = base.iter().filter(|s| patient_index(&s.patient).is_ok_and(|i| i < 100)).cloned().collect();
    let eeg_only: Vec<SpectralSequence> = base
        .iter()
        .filter(|s| patient_index(&s.patient).is_ok_and(|i| (100..200).contains(&i)))
        .map(|s| s.clone().without(Modality::Eog))
        .collect();
    let held_out = synth_features(&cfg.data.synth, &cfg.data.preprocess, PATIENTS..PATIENTS + 70, WINDOWS).map_err(err)?;
    let (validation, test) = held_out.split_at(10);
    let mut mixed = mm.clone();
    mixed.extend(eeg_only.iter().cloned());

    // EOG-side gradients on a batch made only of EEG-only spans.
    let model = Model::<f32>::new(cfg.model.clone(), 0).map_err(err)?;
    let Architecture::CoRe(core) = &model.arch else {
        return Err("not a CoRe model".into());
    };
    let mut eog_side = model.modality_param_ids(Modality::Eog);
    eog_side.extend(core.branches.eog.cross_ids());
    let mut trainer = Trainer::new(model.clone(), LossConfig::default(), cfg.training.clone(), &eeg_only, validation).map_err(err)?;
    let batch: Vec<_> = spans(&eeg_only, 21).into_iter().take(8).collect();
    let (_, grads) = trainer.batch_gradients(&batch).map_err(err)?;
    for id in &eog_side {
        if let Some(g) = grads.get(*id) {
            ensure(g.data().iter().all(|&v| v == 0.0), format!("non-zero gradient on {}", model.store.name(*id)))?;
        }
    }
    ensure(grads.get(core.encoders.eeg.input_weight).is_some(), "no EEG gradient on an EEG-only batch")?;

    let mut base_acc = Vec::new();
    let mut mixed_acc = Vec::new();
    for seed in SEEDS {
        let a = train_model(FusionVariant::CoRe, LossConfig::default(), seed, &mm, validation)?;
        base_acc.push(accuracy(&a, test, Condition::Both)?);
        let b = train_model(FusionVariant::CoRe, LossConfig::default(), seed, &mixed, validation)?;
        mixed_acc.push(accuracy(&b, test, Condition::Both)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&base_acc), mean(&mixed_acc));
    let detail = format!(
        "EOG gradients zero on {} parameters; multimodal {a:.2}% (100 mm) vs {b:.2}% (+100 EEG-only), per seed {base_acc:.1?} vs {mixed_acc:.1?}",
        eog_side.len()
    );
    ensure(a - b <= 2.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 12

fn determinism() -> Outcome {
    let cfg = RunConfig::desk();
    let seqs = synth_features(&cfg.data.synth, &cfg.data.preprocess, 0..6, 40).map_err(err)?;
    let (train, validation) = seqs.split_at(5);
    let training = TrainConfig {
        max_steps: 30,
        validate_every: 10,
        seed: 3,
        ..cfg.training
    };
    let fresh = || {
        let model = Model::<f32>::new(cfg.model.clone(), 3).map_err(err)?;
        Trainer::new(model, LossConfig::default(), training.clone(), train, validation).map_err(err)
    };
    let mut a = fresh()?;
    a.run().map_err(err)?;
    let mut b = fresh()?;
    b.run().map_err(err)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.state.losses) == bits(&b.state.losses), "same seed gave different loss traces")?;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.crsc");
    let mut first = fresh()?;
    first.run_until(17).map_err(err)?;
    first.save_checkpoint(&path).map_err(err)?;
    drop(first);
    let mut resumed = fresh()?;
    resumed.resume(&path).map_err(err)?;
    resumed.run().map_err(err)?;
    ensure(bits(&resumed.state.losses) == bits(&a.state.losses), "resumed trace differs from the uninterrupted one")?;
    ensure(resumed.model.store.values() == a.model.store.values(), "resumed parameters differ")?;
    ensure(resumed.state.validations == a.state.validations, "resumed validation history differs")?;
    Ok(format!("{} steps identical across runs and across a checkpoint at step 17", a.state.losses.len()))
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradients),
        ("shape and pipeline fidelity", shapes),
        ("metric oracles", metric_oracles),
        ("alignment loss sanity", alignment_sanity),
        ("missing-modality equivalence", missing_modality),
        ("weight sharing", weight_sharing),
        ("synthetic learnability", learnability),
        ("multi-supervision benefit", ms_benefit),
        ("noise robustness", noise_robustness),
        ("noisy-subset selection", noisy_selection),
        ("incomplete-data training", incomplete_data),
        ("determinism and resumability", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{:.1?}]", t.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{:.1?}]", t.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
