use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Binary liveness label. Class index 0 is live, 1 is fake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Live,
    Fake,
}

impl Label {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Label::Live => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Live),
            1 => Ok(Label::Fake),
            other => Err(Error::Data(format!("label {other} is out of range (0 = live, 1 = fake)"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Live => Label::Fake,
            Label::Fake => Label::Live,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" | "live" => Ok(Label::Live),
            "1" | "fake" => Ok(Label::Fake),
            other => Err(Error::Data(format!("cannot parse label {other:?}"))),
        }
    }
}

/// Number of samples per class, indexed by [`Label::index`].
pub fn class_counts(labels: &[Label]) -> [usize; 2] {
    let mut counts = [0; 2];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}
