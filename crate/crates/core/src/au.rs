use std::fmt;

use serde::{Deserialize, Serialize};

/// The facial action units annotated and predicted per face crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ActionUnit {
    /// Brow lowerer
    Au4,
    /// Cheek raiser
    Au6,
    /// Lid tightener
    Au7,
    /// Nose wrinkler
    Au9,
    /// Upper lip raiser
    Au10,
    /// Lip corner puller
    Au12,
    /// Lip stretcher
    Au20,
    /// Lip pressor
    Au24,
    /// Lips part
    Au25,
    /// Jaw drop
    Au26,
    /// Mouth stretch
    Au27,
    /// Eyes closed
    Au43,
}

impl ActionUnit {
    pub const ALL: [ActionUnit; 12] = [
        ActionUnit::Au4,
        ActionUnit::Au6,
        ActionUnit::Au7,
        ActionUnit::Au9,
        ActionUnit::Au10,
        ActionUnit::Au12,
        ActionUnit::Au20,
        ActionUnit::Au24,
        ActionUnit::Au25,
        ActionUnit::Au26,
        ActionUnit::Au27,
        ActionUnit::Au43,
    ];

    pub fn number(self) -> u8 {
        match self {
            ActionUnit::Au4 => 4,
            ActionUnit::Au6 => 6,
            ActionUnit::Au7 => 7,
            ActionUnit::Au9 => 9,
            ActionUnit::Au10 => 10,
            ActionUnit::Au12 => 12,
            ActionUnit::Au20 => 20,
            ActionUnit::Au24 => 24,
            ActionUnit::Au25 => 25,
            ActionUnit::Au26 => 26,
            ActionUnit::Au27 => 27,
            ActionUnit::Au43 => 43,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|au| au.number() == n)
    }

    pub fn description(self) -> &'static str {
        match self {
            ActionUnit::Au4 => "Brow Lowerer",
            ActionUnit::Au6 => "Cheek Raiser",
            ActionUnit::Au7 => "Lid Tightener",
            ActionUnit::Au9 => "Nose Wrinkler",
            ActionUnit::Au10 => "Upper Lip Raiser",
            ActionUnit::Au12 => "Lip Corner Puller",
            ActionUnit::Au20 => "Lip Stretcher",
            ActionUnit::Au24 => "Lip Pressor",
            ActionUnit::Au25 => "Lips Part",
            ActionUnit::Au26 => "Jaw Drop",
            ActionUnit::Au27 => "Mouth Stretch",
            ActionUnit::Au43 => "Eyes Closed",
        }
    }
}

impl From<ActionUnit> for u8 {
    fn from(au: ActionUnit) -> u8 {
        au.number()
    }
}

impl TryFrom<u8> for ActionUnit {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        ActionUnit::from_number(n).ok_or_else(|| format!("AU{n} is not in the annotated set"))
    }
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.number())
    }
}
