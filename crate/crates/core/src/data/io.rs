//! Raw dataset directories and the binary feature cache.
//!
//! Raw layout, one directory per patient:
//! - `meta`: `key = value` lines (`patient`, `modalities`, `<modality>_hz`)
//! - `signal.<modality>`: little-endian `f32` samples
//! - `labels`: one integer 0–4 per line
//! - `noisy` (optional): one 0/1 per line marking injected-noise windows
//!
//! Feature cache `<patient>.crsf`: magic `CRSF`, version `u16`, `W u32`,
//! `T u16`, `D u16`, modality count `u8`; then per modality a tag byte and
//! `W·T·D` little-endian `f32`; then `W` label bytes, `W` noisy bytes and
//! the first-window index as `u32`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::labels::SleepLabel;
use super::recording::{LabeledRecording, Signal, SpectralSequence};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

const CACHE_MAGIC: &[u8; 4] = b"CRSF";
const CACHE_VERSION: u16 = 1;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| format_err(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_recording(root: &Path, rec: &LabeledRecording) -> Result<PathBuf> {
    let dir = root.join(&rec.patient);
    fs::create_dir_all(&dir)?;
    let mut meta = format!("patient = {}\n", rec.patient);
    let present: Vec<&str> = Modality::ALL.iter().filter(|m| rec.signals[**m].is_some()).map(|m| m.name()).collect();
    meta.push_str(&format!("modalities = {}\n", present.join(" ")));
    for (m, sig) in rec.signals.iter() {
        let Some(sig) = sig else { continue };
        meta.push_str(&format!("{m}_hz = {}\n", sig.hz));
        let bytes: Vec<u8> = sig.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&dir.join(format!("signal.{m}")), &bytes)?;
    }
    let labels: String = rec.labels.iter().map(|l| format!("{}\n", l.index())).collect();
    write_atomic(&dir.join("labels"), labels.as_bytes())?;
    if rec.noisy.iter().any(|&b| b) {
        let noisy: String = rec.noisy.iter().map(|&b| format!("{}\n", u8::from(b))).collect();
        write_atomic(&dir.join("noisy"), noisy.as_bytes())?;
    }
    write_atomic(&dir.join("meta"), meta.as_bytes())?;
    Ok(dir)
}

fn parse_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| format_err(path, format!("bad line `{l}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse(l.trim()).map_err(|e| format_err(path, e)))
        .collect()
}

pub fn read_recording(dir: &Path) -> Result<LabeledRecording> {
    let meta_path = dir.join("meta");
    let meta = parse_meta(&meta_path)?;
    let get = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let patient = get("patient").ok_or_else(|| format_err(&meta_path, "missing `patient`"))?.to_string();
    let modalities = get("modalities").ok_or_else(|| format_err(&meta_path, "missing `modalities`"))?;
    let mut signals = PerModality::default();
    for name in modalities.split_whitespace() {
        let m: Modality = name.parse()?;
        let hz: f64 = get(&format!("{m}_hz"))
            .ok_or_else(|| format_err(&meta_path, format!("missing `{m}_hz`")))?
            .parse()
            .map_err(|e| format_err(&meta_path, e))?;
        let path = dir.join(format!("signal.{m}"));
        let bytes = fs::read(&path)?;
        if bytes.len() % 4 != 0 {
            return Err(format_err(&path, "length is not a multiple of 4"));
        }
        let samples = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        signals[m] = Some(Signal { hz, samples });
    }
    let labels = read_lines(&dir.join("labels"), |l| l.parse::<usize>().map_err(|e| Error::Data(e.to_string())).and_then(SleepLabel::from_index))?;
    let noisy_path = dir.join("noisy");
    let mut rec = LabeledRecording::new(patient, signals, labels)?;
    if noisy_path.exists() {
        rec.noisy = read_lines(&noisy_path, |l| Ok(l == "1"))?;
        rec.validate()?;
    }
    Ok(rec)
}

/// Patient directories under `root` (those containing a `meta` file), sorted.
pub fn list_recordings(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn encode_features(seq: &SpectralSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let w = seq.len();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(SpectralSequence::FRAMES as u16).to_le_bytes());
    out.extend_from_slice(&(SpectralSequence::BINS as u16).to_le_bytes());
    out.push(seq.present().count() as u8);
    for (m, f) in seq.features.iter() {
        let Some(f) = f else { continue };
        out.push(m.tag());
        out.extend(f.iter().flat_map(|v| v.to_le_bytes()));
    }
    out.extend(seq.labels.iter().map(|l| l.index() as u8));
    out.extend(seq.noisy.iter().map(|&b| u8::from(b)));
    out.extend_from_slice(&(seq.first_window as u32).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> io::Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_features(patient: &str, bytes: &[u8]) -> Result<SpectralSequence> {
    let path = Path::new(patient);
    let mut c = Cursor { bytes, pos: 0 };
    let fail = |e: io::Error| format_err(path, e);
    if c.take(4).map_err(fail)? != CACHE_MAGIC {
        return Err(format_err(path, "not a feature cache"));
    }
    let version = c.u16().map_err(fail)?;
    if version != CACHE_VERSION {
        return Err(format_err(path, format!("unsupported cache version {version}")));
    }
    let w = c.u32().map_err(fail)? as usize;
    let (t, d) = (c.u16().map_err(fail)? as usize, c.u16().map_err(fail)? as usize);
    if (t, d) != (SpectralSequence::FRAMES, SpectralSequence::BINS) {
        return Err(format_err(path, format!("feature shape {t}×{d}, expected 29×128")));
    }
    let count = c.u8().map_err(fail)?;
    let mut features = PerModality::default();
    for _ in 0..count {
        let tag = c.u8().map_err(fail)?;
        let m = Modality::from_tag(tag).ok_or_else(|| format_err(path, format!("unknown modality tag {tag}")))?;
        let raw = c.take(w * t * d * 4).map_err(fail)?;
        features[m] = Some(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect());
    }
    let labels = c
        .take(w)
        .map_err(fail)?
        .iter()
        .map(|&b| SleepLabel::from_index(b as usize))
        .collect::<Result<Vec<_>>>()?;
    let noisy = c.take(w).map_err(fail)?.iter().map(|&b| b != 0).collect();
    let first_window = c.u32().map_err(fail)? as usize;
    if c.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes"));
    }
    let seq = SpectralSequence {
        patient: patient.to_string(),
        features,
        labels,
        noisy,
        first_window,
    };
    seq.validate()?;
    Ok(seq)
}

pub fn write_features(dir: &Path, seq: &SpectralSequence) -> Result<PathBuf> {
    let path = dir.join(format!("{}.crsf", seq.patient));
    write_atomic(&path, &encode_features(seq)?)?;
    Ok(path)
}

pub fn read_features(path: &Path) -> Result<SpectralSequence> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let patient = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| format_err(path, "no file name"))?;
    decode_features(&patient, &bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Every `*.crsf` file in `dir`, sorted by patient.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<SpectralSequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "crsf"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_features(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::noise::inject_noise;
    use crate::data::synth::{synth_patient, SynthSpec};

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = synth_patient(&SynthSpec::default(), 0, 3).unwrap();
        inject_noise(&mut rec, Modality::Eog, 0.4, 10.0, 1).unwrap();
        rec.signals.eeg = None;
        write_recording(dir.path(), &rec).unwrap();
        let dirs = list_recordings(dir.path()).unwrap();
        assert_eq!(dirs.len(), 1);
        assert_eq!(read_recording(&dirs[0]).unwrap(), rec);
    }

    fn sequence() -> SpectralSequence {
        SpectralSequence {
            patient: "p1".into(),
            features: PerModality::new(None, Some((0..2 * 29 * 128).map(|i| i as f32 * 0.5).collect())),
            labels: vec![SleepLabel::Rem, SleepLabel::Wake],
            noisy: vec![true, false],
            first_window: 7,
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_features(dir.path(), &sequence()).unwrap();
        assert_eq!(read_features(&path).unwrap(), sequence());
        assert_eq!(read_feature_dir(dir.path()).unwrap(), vec![sequence()]);
    }

    #[test]
    fn truncated_or_foreign_caches_are_rejected() {
        let bytes = encode_features(&sequence()).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_features("p", &bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features("p", &bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode_features("p", &longer).is_err());
    }
}
