//! Class labels in the open-set prediction space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Either one of the `K` known classes or the single unknown class.
///
/// On the wire and in text files a known class is its integer id and the
/// unknown class is the literal token `unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Unknown,
    Known(usize),
}

pub const UNKNOWN_TOKEN: &str = "unknown";

impl Label {
    /// Row/column in a `(K+1)`-way confusion matrix: unknown is 0, class `c` is `c + 1`.
    pub fn index(self) -> usize {
        match self {
            Label::Unknown => 0,
            Label::Known(c) => c + 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        match index {
            0 => Label::Unknown,
            i => Label::Known(i - 1),
        }
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, Label::Unknown)
    }
}

impl From<usize> for Label {
    fn from(c: usize) -> Self {
        Label::Known(c)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Unknown => f.write_str(UNKNOWN_TOKEN),
            Label::Known(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == UNKNOWN_TOKEN {
            return Ok(Label::Unknown);
        }
        s.parse::<usize>()
            .map(Label::Known)
            .map_err(|_| format!("invalid label `{s}` (expected a class id or `{UNKNOWN_TOKEN}`)"))
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::Unknown => serializer.serialize_str(UNKNOWN_TOKEN),
            Label::Known(c) => serializer.serialize_u64(*c as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Token(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Id(c) => Ok(Label::Known(c)),
            Raw::Token(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
