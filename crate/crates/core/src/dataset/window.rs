//! Clips and the fixed-length training windows cut from them.

use std::sync::Arc;

use crate::dataset::image::UnitImage;
use crate::dataset::manifest::ClipTags;
use crate::dataset::state::GeneralizedState;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Frames per training window.
pub const WINDOW_LEN: usize = 5;

#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub image: Arc<UnitImage>,
}

/// A harmonized recording: preprocessed frames, generalized states and
/// calibrated force labels aligned one-to-one with the states.
#[derive(Debug, Clone)]
pub struct Clip {
    /// Globally unique `dataset/clip` identifier.
    pub id: Arc<str>,
    pub dataset: String,
    pub tags: ClipTags,
    pub video_rate: f64,
    pub frames: Vec<Frame>,
    pub state_times: Vec<f64>,
    pub states: Vec<GeneralizedState>,
    pub forces: Vec<Vec3>,
}

impl Clip {
    pub fn validate(&self) -> Result<()> {
        let strictly_increasing = |ts: &mut dyn Iterator<Item = f64>, what: &str| -> Result<()> {
            let mut prev = f64::NEG_INFINITY;
            for t in ts {
                if !(t > prev) {
                    return Err(Error::data(format!(
                        "{}: {what} timestamps not strictly increasing at t = {t}",
                        self.id
                    )));
                }
                prev = t;
            }
            Ok(())
        };
        strictly_increasing(&mut self.frames.iter().map(|f| f.timestamp), "frame")?;
        strictly_increasing(&mut self.state_times.iter().copied(), "state")?;
        if self.states.len() != self.state_times.len() || self.forces.len() != self.states.len() {
            return Err(Error::data(format!(
                "{}: {} states, {} state timestamps and {} force labels",
                self.id,
                self.states.len(),
                self.state_times.len(),
                self.forces.len()
            )));
        }
        Ok(())
    }

    /// Index of the state closest in time to `t`.
    pub fn nearest_state(&self, t: f64) -> Option<usize> {
        if self.state_times.is_empty() {
            return None;
        }
        let i = self.state_times.partition_point(|&s| s < t);
        match i {
            0 => Some(0),
            n if n == self.state_times.len() => Some(n - 1),
            _ => {
                let (a, b) = (self.state_times[i - 1], self.state_times[i]);
                Some(if t - a <= b - t { i - 1 } else { i })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleWindow {
    pub clip: Arc<str>,
    /// Index of the first frame in the source clip.
    pub start: usize,
    pub frames: [Arc<UnitImage>; WINDOW_LEN],
    pub frame_times: [f64; WINDOW_LEN],
    pub states: [GeneralizedState; WINDOW_LEN],
    pub state_times: [f64; WINDOW_LEN],
    /// Calibrated force at the last frame.
    pub target: Vec3,
    /// Set when an augmentation could not be made kinematically consistent.
    pub flagged: bool,
}

impl SampleWindow {
    pub fn last_state(&self) -> &GeneralizedState {
        &self.states[WINDOW_LEN - 1]
    }

    pub fn image_size(&self) -> usize {
        self.frames[0].size
    }
}

/// Stride-1 windows of five consecutive frames, each paired with its nearest
/// state. Windows with a frame more than half a frame period from its state,
/// or with a frame-to-frame spacing above 1.5 periods, are dropped.
pub fn build_windows(clip: &Clip) -> Result<Vec<SampleWindow>> {
    if clip.frames.len() < WINDOW_LEN {
        return Err(Error::data(format!(
            "{}: {} frames, need at least {WINDOW_LEN}",
            clip.id,
            clip.frames.len()
        )));
    }
    if clip.states.is_empty() {
        return Err(Error::data(format!("{}: no states", clip.id)));
    }
    let period = 1.0 / clip.video_rate;
    let gate = 0.5 * period + 1e-9;
    let spacing = 1.5 * period;

    let pairing: Vec<Option<usize>> = clip
        .frames
        .iter()
        .map(|f| {
            clip.nearest_state(f.timestamp)
                .filter(|&i| (clip.state_times[i] - f.timestamp).abs() <= gate)
        })
        .collect();

    let mut windows = Vec::new();
    'outer: for start in 0..=clip.frames.len() - WINDOW_LEN {
        let mut idx = [0usize; WINDOW_LEN];
        for k in 0..WINDOW_LEN {
            let Some(s) = pairing[start + k] else {
                continue 'outer;
            };
            if k > 0 && clip.frames[start + k].timestamp - clip.frames[start + k - 1].timestamp > spacing
            {
                continue 'outer;
            }
            idx[k] = s;
        }
        windows.push(SampleWindow {
            clip: clip.id.clone(),
            start,
            frames: std::array::from_fn(|k| clip.frames[start + k].image.clone()),
            frame_times: std::array::from_fn(|k| clip.frames[start + k].timestamp),
            states: std::array::from_fn(|k| clip.states[idx[k]]),
            state_times: std::array::from_fn(|k| clip.state_times[idx[k]]),
            target: clip.forces[idx[WINDOW_LEN - 1]],
            flagged: false,
        });
    }
    Ok(windows)
}
