use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The five emotion classes, with ids 0..4 in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Cheerful,
    Fearful,
    Angry,
    Sad,
    Neutral,
}

pub const NUM_EMOTIONS: usize = 5;

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_EMOTIONS] = [
        EmotionLabel::Cheerful,
        EmotionLabel::Fearful,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
    ];

    /// Corpus shares: cheerful 38%, fearful 11%, angry 17%, sad 20%, neutral 14%.
    pub const SHARES: [f64; NUM_EMOTIONS] = [0.38, 0.11, 0.17, 0.20, 0.14];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Cheerful => "cheerful",
            EmotionLabel::Fearful => "fearful",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Neutral => "neutral",
        }
    }

    /// First word of every response to a question in this emotion.
    pub fn keyword(self) -> &'static str {
        match self {
            EmotionLabel::Cheerful => "yay",
            EmotionLabel::Fearful => "calm",
            EmotionLabel::Angry => "easy",
            EmotionLabel::Sad => "there",
            EmotionLabel::Neutral => "okay",
        }
    }

    /// Single-character textual cue for the emotion (its initial), used
    /// when the decoder LM is pretrained on text-only dialogue.
    pub fn cue_char(self) -> char {
        self.name().chars().next().expect("non-empty name")
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown emotion {s:?}; expected one of cheerful, fearful, angry, sad, neutral"
                ))
            })
    }
}
