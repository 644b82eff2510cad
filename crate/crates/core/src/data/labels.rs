use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{data_err, Error, Result};

/// Sleep stage of one 30 s window. N3 and N4 are merged into `N3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SleepLabel {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl SleepLabel {
    pub const ALL: [SleepLabel; 5] = [SleepLabel::Wake, SleepLabel::N1, SleepLabel::N2, SleepLabel::N3, SleepLabel::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| data_err(format!("label {i} outside 0..=4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepLabel::Wake => "W",
            SleepLabel::N1 => "N1",
            SleepLabel::N2 => "N2",
            SleepLabel::N3 => "N3",
            SleepLabel::Rem => "REM",
        }
    }
}

impl fmt::Display for SleepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SleepLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "W" | "WAKE" => Ok(SleepLabel::Wake),
            "N1" => Ok(SleepLabel::N1),
            "N2" => Ok(SleepLabel::N2),
            "N3" | "N4" => Ok(SleepLabel::N3),
            "REM" | "R" => Ok(SleepLabel::Rem),
            other => match other.parse::<usize>() {
                Ok(i) => Self::from_index(i),
                Err(_) => Err(data_err(format!("unknown sleep label `{other}`"))),
            },
        }
    }
}

/// Collapses `per_window` consecutive sub-window labels into one label per
/// window by majority; ties go to the label seen first. A trailing partial
/// group is dropped.
pub fn windowize(labels: &[SleepLabel], per_window: usize) -> Vec<SleepLabel> {
    if per_window <= 1 {
        return labels.to_vec();
    }
    labels
        .chunks_exact(per_window)
        .map(|group| {
            let mut counts = [0usize; 5];
            for l in group {
                counts[l.index()] += 1;
            }
            let best = *counts.iter().max().unwrap();
            *group.iter().find(|l| counts[l.index()] == best).unwrap()
        })
        .collect()
}

/// Window range kept after trimming excess wake at the recording edges.
///
/// When wake outnumbers the second most frequent label, `(wake − second)/2`
/// windows (rounded down) are cut from each end, whatever their labels.
pub fn trim_wake_edges(labels: &[SleepLabel]) -> Range<usize> {
    let mut counts = [0usize; 5];
    for l in labels {
        counts[l.index()] += 1;
    }
    let wake = counts[SleepLabel::Wake.index()];
    let second = counts[1..].iter().copied().max().unwrap_or(0);
    if wake <= second {
        return 0..labels.len();
    }
    let cut = ((wake - second) / 2).min(labels.len() / 2);
    cut..labels.len() - cut
}

pub fn has_all_labels(labels: &[SleepLabel]) -> bool {
    SleepLabel::ALL.iter().all(|l| labels.contains(l))
}
