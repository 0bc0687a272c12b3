//! Shared domain types.

use serde::{Deserialize, Serialize};

/// Conditioning input for a noise prediction: a concept id or the null
/// (unconditional) token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Concept(usize),
    Null,
}

impl Condition {
    pub fn concept(self) -> Option<usize> {
        match self {
            Condition::Concept(k) => Some(k),
            Condition::Null => None,
        }
    }

    pub fn is_null(self) -> bool {
        matches!(self, Condition::Null)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Concept(k) => write!(f, "concept-{k}"),
            Condition::Null => write!(f, "null"),
        }
    }
}

/// A latent vector together with its noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Vec<f64>, t: usize) -> Self {
        LatentState { z, t }
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}
