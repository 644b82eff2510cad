//! Run manifests tying outputs to configuration, data and code.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SpectralSequence;

/// Content hash of the library sources this binary was built from.
pub const SOURCE_HASH: &str = env!("CORESLEEP_SOURCE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub code_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, dataset_digest: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            dataset_digest,
            code_hash: SOURCE_HASH.to_string(),
            seed,
            outputs: Vec::new(),
        }
    }

    /// Hash of everything except the output list, so outputs can quote it
    /// before they are written.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.command, &self.config_digest, &self.dataset_digest, &self.code_hash] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_toml(&self) -> String {
        let mut text = format!("hash = \"{}\"\n", self.hash());
        text.push_str(&toml::to_string(self).expect("manifest serializes"));
        text
    }
}

/// Hash over patient ids, labels and features of a dataset.
pub fn dataset_digest(sequences: &[SpectralSequence]) -> String {
    let mut h = Sha256::new();
    for seq in sequences {
        h.update(seq.patient.as_bytes());
        h.update([0]);
        h.update(seq.labels.iter().map(|l| l.index() as u8).collect::<Vec<_>>());
        for (m, f) in seq.features.iter() {
            if let Some(f) = f {
                h.update([m.tag()]);
                for v in f {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_outputs_but_not_seed() {
        let a = RunManifest::new("eval", "c".into(), "d".into(), 1);
        let mut b = a.clone();
        b.outputs.push("report.txt".into());
        assert_eq!(a.hash(), b.hash());
        let c = RunManifest::new("eval", "c".into(), "d".into(), 2);
        assert_ne!(a.hash(), c.hash());
        assert_eq!(SOURCE_HASH.len(), 64);
        assert!(a.to_toml().starts_with(&format!("hash = \"{}\"", a.hash())));
    }
}
