use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the eight emotion categories. The discriminant is the emotion id
/// used to index mask tokens in multi-mask mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Emotion {
    Amusement = 0,
    Awe = 1,
    Contentment = 2,
    Excitement = 3,
    Anger = 4,
    Disgust = 5,
    Fear = 6,
    Sadness = 7,
}

pub const NUM_EMOTIONS: usize = 8;

impl Emotion {
    pub const ALL: [Emotion; NUM_EMOTIONS] = [
        Emotion::Amusement,
        Emotion::Awe,
        Emotion::Contentment,
        Emotion::Excitement,
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Sadness,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Index(format!("emotion id {id} outside 0..{NUM_EMOTIONS}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Amusement => "amusement",
            Emotion::Awe => "awe",
            Emotion::Contentment => "contentment",
            Emotion::Excitement => "excitement",
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Sadness => "sadness",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::from_name(&s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown emotion {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_names_are_bijective() {
        for (i, e) in Emotion::ALL.iter().enumerate() {
            assert_eq!(e.id(), i);
            assert_eq!(Emotion::from_id(i).unwrap(), *e);
            assert_eq!(Emotion::from_name(e.name()), Some(*e));
        }
        assert!(Emotion::from_id(8).is_err());
        assert!(Emotion::from_name("joy").is_none());
    }

    #[test]
    fn canonical_order() {
        let names: Vec<_> = Emotion::ALL.iter().map(|e| e.name()).collect();
        assert_eq!(
            names,
            ["amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness"]
        );
    }
}
