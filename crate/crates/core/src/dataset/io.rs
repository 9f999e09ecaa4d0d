//! On-disk clip layout: `frames/%06d.png`, `states.csv`, `forces.csv`.
//!
//! Both tables have a header row with the timestamp first. Frame `n` is
//! taken at `n / video_rate` seconds, so missing frame numbers are time gaps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;

use crate::calibration::calibrate_force;
use crate::dataset::image::{preprocess_unit, UnitImage};
use crate::dataset::manifest::{ClipEntry, DatasetManifest};
use crate::dataset::mixing::LoadedDataset;
use crate::dataset::state::{generalize_sequence, GeneralizedState, RawState, StateField, StateLayout};
use crate::dataset::window::{Clip, Frame};
use crate::error::{Error, Result};
use crate::geometry::{Quaternion, Vec3};

pub const FRAMES_DIR: &str = "frames";
pub const STATES_FILE: &str = "states.csv";
pub const FORCES_FILE: &str = "forces.csv";
pub const FORCE_COLUMNS: [&str; 4] = ["timestamp", "fx", "fy", "fz"];

pub fn frame_path(clip_dir: &Path, index: usize) -> PathBuf {
    clip_dir.join(FRAMES_DIR).join(format!("{index:06}.png"))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Values of the raw state for one layout entry, in column order.
fn field_values(raw: &RawState, field: StateField) -> Option<Vec<f64>> {
    Some(match field {
        StateField::PE => raw.p_e.to_vec(),
        StateField::OE => raw.o_e.to_array().to_vec(),
        StateField::JRobot => raw.j_robot.clone(),
        StateField::PH => raw.p_h.to_vec(),
        StateField::OH => raw.o_h.to_array().to_vec(),
        StateField::JH => raw.j_h.clone(),
        StateField::Wrench => raw.wrench?.to_vec(),
        StateField::Gripper => vec![raw.gripper?],
        _ => return None,
    })
}

pub fn write_states(path: &Path, raw: &[RawState], layout: &StateLayout) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let source: Vec<_> = layout.entries.iter().filter(|e| !e.columns.is_empty()).collect();
    let mut header = vec!["timestamp".to_string()];
    for e in &source {
        header.extend(e.columns.iter().cloned());
    }
    w.write_record(&header)?;
    for s in raw {
        let mut row = vec![fmt(s.timestamp)];
        for e in &source {
            let values = field_values(s, e.field)
                .ok_or_else(|| Error::shape(format!("raw state lacks {:?}", e.field)))?;
            if values.len() != e.columns.len() {
                return Err(Error::shape(format!(
                    "{:?} has {} values but {} columns",
                    e.field,
                    values.len(),
                    e.columns.len()
                )));
            }
            row.extend(values.into_iter().map(fmt));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_states(path: &Path, layout: &StateLayout) -> Result<Vec<RawState>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("{}: missing column `{name}`", path.display())))
    };
    if headers.get(0) != Some("timestamp") {
        return Err(Error::data(format!(
            "{}: first column must be `timestamp`",
            path.display()
        )));
    }
    let mut plan = Vec::new();
    for e in layout.entries.iter().filter(|e| !e.columns.is_empty()) {
        let idx = e.columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
        plan.push((e.field, idx));
    }

    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::data(format!(
                        "{}: row {}: column {} is not a finite number",
                        path.display(),
                        line + 2,
                        headers.get(i).unwrap_or("?")
                    ))
                })
        };
        let mut s = RawState {
            timestamp: num(0)?,
            ..Default::default()
        };
        for (field, idx) in &plan {
            let v = idx.iter().map(|&i| num(i)).collect::<Result<Vec<f64>>>()?;
            let quat = |v: &[f64]| {
                Quaternion::from_unit(v[0], v[1], v[2], v[3]).map_err(|e| {
                    Error::data(format!("{}: row {}: {e}", path.display(), line + 2))
                })
            };
            match field {
                StateField::PE => s.p_e = [v[0], v[1], v[2]],
                StateField::OE => s.o_e = quat(&v)?,
                StateField::JRobot => s.j_robot = v,
                StateField::PH => s.p_h = [v[0], v[1], v[2]],
                StateField::OH => s.o_h = quat(&v)?,
                StateField::JH => s.j_h = v,
                StateField::Wrench => s.wrench = Some([v[0], v[1], v[2], v[3], v[4], v[5]]),
                StateField::Gripper => s.gripper = Some(v[0]),
                _ => {}
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_forces(path: &Path, forces: &[(f64, Vec3)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FORCE_COLUMNS)?;
    for (t, f) in forces {
        w.write_record([fmt(*t), fmt(f.x), fmt(f.y), fmt(f.z)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_forces(path: &Path) -> Result<Vec<(f64, Vec3)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = FORCE_COLUMNS
        .iter()
        .map(|c| {
            headers.iter().position(|h| h == *c).ok_or_else(|| {
                Error::data(format!("{}: missing column `{c}`", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = idx
            .iter()
            .map(|&i| {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::data(format!("{}: row {}: bad number", path.display(), line + 2))
                    })
            })
            .collect::<Result<_>>()?;
        out.push((v[0], Vec3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}

/// Numbered frame files with their timestamps, in order.
pub fn list_frames(clip_dir: &Path, video_rate: f64) -> Result<Vec<(f64, PathBuf)>> {
    let dir = clip_dir.join(FRAMES_DIR);
    let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut frames = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(n) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        frames.push((n, path));
    }
    frames.sort();
    Ok(frames
        .into_iter()
        .map(|(n, p)| (n as f64 / video_rate, p))
        .collect())
}

/// Calibrated labels aligned with the state stream; forces must share the state timestamps.
pub fn harmonize_forces(
    manifest: &DatasetManifest,
    raw: &[RawState],
    forces: &[(f64, Vec3)],
) -> Result<Vec<Vec3>> {
    if forces.len() != raw.len() {
        return Err(Error::data(format!(
            "{}: {} force rows for {} states",
            manifest.name,
            forces.len(),
            raw.len()
        )));
    }
    raw.iter()
        .zip(forces)
        .map(|(s, (t, f))| {
            if (s.timestamp - t).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "{}: force label at t = {t} has no matching state (state t = {})",
                    manifest.name, s.timestamp
                )));
            }
            Ok(if manifest.forces_calibrated {
                *f
            } else {
                let t = s.robot_pose().to_transform().compose(&manifest.sensor_mount);
                calibrate_force(f, &t, &manifest.calibration)
            })
        })
        .collect()
}

/// Generalized states plus calibrated labels for a raw stream.
pub fn harmonize_stream(
    manifest: &DatasetManifest,
    raw: &[RawState],
    forces: &[(f64, Vec3)],
) -> Result<(Vec<f64>, Vec<GeneralizedState>, Vec<Vec3>)> {
    let states = generalize_sequence(raw, &manifest.layout)?;
    let labels = harmonize_forces(manifest, raw, forces)?;
    Ok((raw.iter().map(|s| s.timestamp).collect(), states, labels))
}

pub fn clip_id(manifest: &DatasetManifest, entry: &ClipEntry) -> Arc<str> {
    format!("{}/{}", manifest.name, entry.path).into()
}

fn load_frame(path: &Path, zoom: f64, image_size: usize) -> Result<UnitImage> {
    let img: RgbImage = image::open(path)?.to_rgb8();
    preprocess_unit(&img, zoom, image_size)
}

/// Preprocessed frames of a clip, in timestamp order.
pub fn load_frames(manifest: &DatasetManifest, entry: &ClipEntry, image_size: usize) -> Result<Vec<Frame>> {
    let listed = list_frames(&manifest.clip_dir(entry), manifest.video_rate)?;
    let images = listed
        .par_iter()
        .map(|(_, p)| load_frame(p, manifest.zoom, image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(listed
        .iter()
        .zip(images)
        .map(|((t, _), img)| Frame {
            timestamp: *t,
            image: Arc::new(img),
        })
        .collect())
}

pub fn load_clip(manifest: &DatasetManifest, entry: &ClipEntry, image_size: usize) -> Result<Clip> {
    let dir = manifest.clip_dir(entry);
    let raw = read_states(&dir.join(STATES_FILE), &manifest.layout)?;
    let forces = read_forces(&dir.join(FORCES_FILE))?;
    let (state_times, states, labels) = harmonize_stream(manifest, &raw, &forces)?;
    let frames = load_frames(manifest, entry, image_size)?;
    let clip = Clip {
        id: clip_id(manifest, entry),
        dataset: manifest.name.clone(),
        tags: entry.tags.clone(),
        video_rate: manifest.video_rate,
        frames,
        state_times,
        states,
        forces: labels,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn load_dataset(manifest: &DatasetManifest, image_size: usize) -> Result<LoadedDataset> {
    let clips = manifest
        .clips
        .iter()
        .map(|c| load_clip(manifest, c, image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        name: manifest.name.clone(),
        clips,
    })
}
