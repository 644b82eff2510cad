use proptest::prelude::*;

use coresleep::data::io::{decode_features, encode_features, read_feature_dir, read_recording, write_features, write_recording};
use coresleep::data::{
    detect_noisy_patients, inject_noise, preprocess, spans, synth_features, synth_patient, windowize, NoiseRule, PreprocessConfig, SleepLabel,
    SynthSpec,
};
use coresleep::Modality;

fn clean_spec() -> SynthSpec {
    SynthSpec {
        artifact_probability: 0.0,
        ..SynthSpec::default()
    }
}

#[test]
fn raw_recordings_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = synth_patient(&SynthSpec::default(), 3, 12).unwrap();
    inject_noise(&mut rec, Modality::Eog, 0.25, 4.0, 1).unwrap();
    let path = write_recording(dir.path(), &rec).unwrap();
    assert_eq!(read_recording(&path).unwrap(), rec);
}

#[test]
fn feature_cache_round_trips_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = synth_features(&SynthSpec::default(), &PreprocessConfig::default(), 0..2, 60).unwrap();
    let eeg_only = seqs[1].clone().without(Modality::Eog);
    for seq in [&seqs[0], &eeg_only] {
        write_features(dir.path(), seq).unwrap();
        let bytes = encode_features(seq).unwrap();
        assert_eq!(&decode_features(&seq.patient, &bytes).unwrap(), seq);
        assert!(decode_features(&seq.patient, &bytes[..bytes.len() - 3]).is_err());
    }
    let loaded = read_feature_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(loaded.iter().any(|s| !s.present().eog));
}

#[test]
fn preprocessing_trims_wake_edges_and_keeps_alignment() {
    let rec = synth_patient(&clean_spec(), 7, 120).unwrap();
    let seq = preprocess(&rec, &PreprocessConfig::default()).unwrap().unwrap();
    let keep = seq.first_window..seq.first_window + seq.len();
    assert_eq!(&rec.labels[keep], &seq.labels[..]);
    for m in Modality::ALL {
        assert_eq!(seq.features[m].as_ref().unwrap().len(), seq.len() * 29 * 128);
    }
}

#[test]
fn recordings_missing_a_stage_are_discarded() {
    let mut spec = clean_spec();
    spec.transition = [[1.0, 0.0, 0.0, 0.0, 0.0]; 5];
    let rec = synth_patient(&spec, 0, 10).unwrap();
    assert!(preprocess(&rec, &PreprocessConfig::default()).unwrap().is_none());
}

#[test]
fn noise_rule_separates_half_from_clean_patients() {
    let mut recs: Vec<_> = (0..4).map(|i| synth_patient(&clean_spec(), i, 200).unwrap()).collect();
    inject_noise(&mut recs[0], Modality::Eeg, 0.5, 20.0, 0).unwrap();
    inject_noise(&mut recs[1], Modality::Eog, 0.8, 20.0, 1).unwrap();
    let report = detect_noisy_patients(&recs, &NoiseRule::default()).unwrap();
    assert_eq!(report.selected(), ["synth-0000", "synth-0001"]);
    assert_eq!(report.to_text().lines().count(), 4);

    let short = synth_patient(&clean_spec(), 9, 5).unwrap();
    let one = detect_noisy_patients(&[short], &NoiseRule::default()).unwrap();
    assert_eq!(one.patients[0].chunk_flags.eeg.len(), 1);
}

#[test]
fn windowize_takes_majorities_and_drops_partial_windows() {
    let mut per_second = vec![SleepLabel::N2; 75];
    per_second[..10].fill(SleepLabel::Wake);
    assert_eq!(windowize(&per_second, 30), vec![SleepLabel::N2; 2]);
}

proptest! {
    #[test]
    fn spans_tile_each_recording(lengths in prop::collection::vec(1usize..60, 1..5), max_len in 1usize..25) {
        let fake: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| coresleep::data::SpectralSequence {
                patient: format!("p{i}"),
                features: coresleep::PerModality::new(Some(vec![0.0; n * 29 * 128]), None),
                labels: vec![SleepLabel::N1; n],
                noisy: vec![false; n],
                first_window: 0,
            })
            .collect();
        let all = spans(&fake, max_len);
        for (i, &n) in lengths.iter().enumerate() {
            let mut covered = vec![0u8; n];
            for s in all.iter().filter(|s| s.sequence == i) {
                prop_assert!(s.len >= 1 && s.len <= max_len);
                for c in &mut covered[s.start..s.start + s.len] {
                    *c += 1;
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }
    }
}
