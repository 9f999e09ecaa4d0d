use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::state::{GeneralizedState, STATE_DIM};
use crate::dataset::window::SampleWindow;
use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant slots.
pub const CONSTANT_STD: f64 = 1e-12;

/// Per-slot z-scoring fitted on the combined training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; STATE_DIM],
            std: vec![1.0; STATE_DIM],
        }
    }

    /// Two-pass mean / population standard deviation.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a GeneralizedState> + Clone) -> Result<Self> {
        let mut sum = [0.0f64; STATE_DIM];
        let mut n = 0usize;
        for s in states.clone() {
            for (acc, v) in sum.iter_mut().zip(&s.0) {
                *acc += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::data("cannot fit a normalizer on an empty training set"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = [0.0f64; STATE_DIM];
        for s in states {
            for ((acc, v), m) in sq.iter_mut().zip(&s.0).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < CONSTANT_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, s: &GeneralizedState) -> GeneralizedState {
        let mut out = *s;
        for ((v, m), sd) in out.0.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / sd;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != STATE_DIM || self.std.len() != STATE_DIM {
            return Err(Error::data(format!(
                "normalizer must have {STATE_DIM} means and stds"
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::data("normalizer std must be finite and positive"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let n: Normalizer = serde_json::from_str(&text)?;
        n.validate()?;
        Ok(n)
    }
}

/// Fits over every state of every window.
pub fn fit_normalizer(windows: &[SampleWindow]) -> Result<Normalizer> {
    Normalizer::fit(windows.iter().flat_map(|w| w.states.iter()))
}

pub fn apply_normalizer(n: &Normalizer, s: &GeneralizedState) -> GeneralizedState {
    n.apply(s)
}
