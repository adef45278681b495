use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompts::Polarity;
use crate::error::{invalid, Error, Result};

/// Event labels of one clip. Frame indices are 0-based; accident-free clips
/// carry `None` for both event frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub t_ai: Option<usize>,
    pub t_co: Option<usize>,
    pub label: u8,
    pub prompt_id: Option<usize>,
    pub rng_seed: u64,
}

impl EventAnnotation {
    pub fn accident(t_ai: usize, t_co: usize, prompt_id: Option<usize>, seed: u64) -> Result<Self> {
        if t_ai > t_co {
            return Err(invalid(format!("t_ai {t_ai} after t_co {t_co}")));
        }
        Ok(Self {
            t_ai: Some(t_ai),
            t_co: Some(t_co),
            label: 1,
            prompt_id,
            rng_seed: seed,
        })
    }

    pub fn normal(prompt_id: Option<usize>, seed: u64) -> Self {
        Self {
            t_ai: None,
            t_co: None,
            label: 0,
            prompt_id,
            rng_seed: seed,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn with_prompt(mut self, prompt_id: usize) -> Self {
        self.prompt_id = Some(prompt_id);
        self
    }

    pub fn polarity(&self) -> Polarity {
        if self.is_positive() {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    /// Checks the frame bounds against a clip of `n_frames`.
    pub fn check(&self, n_frames: usize) -> Result<()> {
        match (self.label, self.t_ai, self.t_co) {
            (1, Some(a), Some(c)) if a <= c && c < n_frames => Ok(()),
            (0, None, None) => Ok(()),
            _ => Err(invalid(format!("inconsistent annotation {self:?} for {n_frames} frames"))),
        }
    }
}

/// JSON sidecar stored next to each clip container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub t_ai: Option<usize>,
    pub t_co: Option<usize>,
    pub label: u8,
    pub prompt_id: Option<usize>,
    pub polarity: Polarity,
    pub seed: u64,
}

impl From<&EventAnnotation> for Sidecar {
    fn from(a: &EventAnnotation) -> Self {
        Self {
            t_ai: a.t_ai,
            t_co: a.t_co,
            label: a.label,
            prompt_id: a.prompt_id,
            polarity: a.polarity(),
            seed: a.rng_seed,
        }
    }
}

impl From<&Sidecar> for EventAnnotation {
    fn from(s: &Sidecar) -> Self {
        Self {
            t_ai: s.t_ai,
            t_co: s.t_co,
            label: s.label,
            prompt_id: s.prompt_id,
            rng_seed: s.seed,
        }
    }
}

impl Sidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
