use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error};

/// The two physiological channels the models fuse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Eog,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Eeg, Modality::Eog];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Eog => "eog",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Eeg => Modality::Eog,
            Modality::Eog => Modality::Eeg,
        }
    }

    /// Stable one-byte tag used by binary formats.
    pub fn tag(self) -> u8 {
        match self {
            Modality::Eeg => 0,
            Modality::Eog => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Modality> {
        match tag {
            0 => Some(Modality::Eeg),
            1 => Some(Modality::Eog),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "eog" => Ok(Modality::Eog),
            other => Err(data_err(format!("unknown modality `{other}`"))),
        }
    }
}

/// One value per modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerModality<V> {
    pub eeg: V,
    pub eog: V,
}

impl<V> PerModality<V> {
    pub fn new(eeg: V, eog: V) -> Self {
        Self { eeg, eog }
    }

    pub fn from_fn(mut f: impl FnMut(Modality) -> V) -> Self {
        Self {
            eeg: f(Modality::Eeg),
            eog: f(Modality::Eog),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &V) -> U) -> PerModality<U> {
        PerModality {
            eeg: f(Modality::Eeg, &self.eeg),
            eog: f(Modality::Eog, &self.eog),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &V)> {
        [(Modality::Eeg, &self.eeg), (Modality::Eog, &self.eog)].into_iter()
    }
}

impl<V> PerModality<Option<V>> {
    pub fn present(&self) -> PerModality<bool> {
        PerModality::new(self.eeg.is_some(), self.eog.is_some())
    }

    pub fn as_ref(&self) -> PerModality<Option<&V>> {
        PerModality::new(self.eeg.as_ref(), self.eog.as_ref())
    }
}

impl PerModality<bool> {
    pub fn count(&self) -> usize {
        usize::from(self.eeg) + usize::from(self.eog)
    }

    pub fn both(&self) -> bool {
        self.eeg && self.eog
    }

    /// The single present modality, if exactly one is present.
    pub fn only(&self) -> Option<Modality> {
        match (self.eeg, self.eog) {
            (true, false) => Some(Modality::Eeg),
            (false, true) => Some(Modality::Eog),
            _ => None,
        }
    }
}

impl<V> Index<Modality> for PerModality<V> {
    type Output = V;

    fn index(&self, m: Modality) -> &V {
        match m {
            Modality::Eeg => &self.eeg,
            Modality::Eog => &self.eog,
        }
    }
}

impl<V> IndexMut<Modality> for PerModality<V> {
    fn index_mut(&mut self, m: Modality) -> &mut V {
        match m {
            Modality::Eeg => &mut self.eeg,
            Modality::Eog => &mut self.eog,
        }
    }
}
