//! Synthetic palpation clips with exact ground truth: a spline tool path,
//! Kelvin–Voigt contact forces, a raw sensor channel that calibrates back to
//! the true force, and procedurally rendered frames.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{raw_from_calibrated, CalibrationParams, GravityFrame};
use crate::dataset::io::{frame_path, harmonize_stream, write_forces, write_states, FORCES_FILE, FRAMES_DIR, STATES_FILE};
use crate::dataset::manifest::{save_manifest, CameraModel, ClipEntry, ClipTags, DatasetManifest};
use crate::dataset::mixing::{LoadedDataset, DOUBLE_LAYER, SINGLE_LAYER};
use crate::dataset::state::{RawState, StateField, StateLayout};
use crate::dataset::window::{Clip, Frame};
use crate::dataset::{preprocess_unit, CROP_SIZE};
use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_z, Mat3, Pose, Quaternion, RigidTransform, Vec3};
use crate::kinematics::{inverse_multistart, seven_dof_arm, six_dof_arm, JointVector, KinematicChain};
use crate::rng;

pub const DEFAULT_FRICTION: f64 = 0.3;
/// Tangential speed below which friction ramps linearly to zero.
const FRICTION_SPEED: f64 = 1e-3;
/// Penetration giving full tool brightness.
const FULL_BRIGHTNESS_DEPTH: f64 = 0.015;
/// Depth at which a double-layer phantom's stiffer base layer engages.
const LAYER_DEPTH: f64 = 0.006;
const IK_RESTARTS: usize = 24;
/// Largest joint change between consecutive states, rad.
const MAX_JOINT_STEP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// Spring constant, N/m.
    pub stiffness: f64,
    /// Damping, N·s/m.
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f32; 3],
    pub accent: [f32; 3],
    /// Stripe frequency in cycles per image width.
    pub frequency: f32,
}

/// Uniform Catmull–Rom spline through `points`, traversed over `duration` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct CatmullRom {
    pub points: Vec<Vec3>,
    pub duration: f64,
}

impl CatmullRom {
    pub fn new(points: Vec<Vec3>, duration: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("control_points", "need at least 2 points"));
        }
        if !(duration > 0.0) {
            return Err(Error::config("duration", "must be > 0"));
        }
        Ok(Self { points, duration })
    }

    /// Position and velocity at time `t`, clamped to the path ends.
    pub fn eval(&self, t: f64) -> (Vec3, Vec3) {
        let n = self.points.len();
        let segs = (n - 1) as f64;
        let u = (t / self.duration).clamp(0.0, 1.0) * segs;
        let i = (u.floor() as usize).min(n - 2);
        let s = u - i as f64;
        let p = |k: isize| self.points[k.clamp(0, n as isize - 1) as usize];
        let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
        let a = 2.0 * p1;
        let b = p2 - p0;
        let c = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3;
        let d = 3.0 * p1 - p0 - 3.0 * p2 + p3;
        let pos = 0.5 * (a + b * s + c * s * s + d * s * s * s);
        let dpos = 0.5 * (b + 2.0 * c * s + 3.0 * d * s * s);
        (pos, dpos * segs / self.duration)
    }
}

/// Contact force on the tool tip from a horizontal phantom surface at `plane`.
pub fn contact_force(tip: &Vec3, vel: &Vec3, plane: f64, m: &Material, double_layer: bool, friction: f64) -> Vec3 {
    let depth = plane - tip.z;
    if depth <= 0.0 {
        return Vec3::zeros();
    }
    let mut fz = m.stiffness * depth + m.damping * (-vel.z);
    if double_layer && depth > LAYER_DEPTH {
        fz += m.stiffness * (depth - LAYER_DEPTH);
    }
    let fz = fz.max(0.0);
    let vt = Vec3::new(vel.x, vel.y, 0.0);
    let speed = vt.norm();
    let lateral = if speed > 0.0 {
        -friction * fz * vt / speed.max(FRICTION_SPEED)
    } else {
        Vec3::zeros()
    };
    Vec3::new(lateral.x, lateral.y, fz)
}

fn penetration(tip: &Vec3, plane: f64) -> f64 {
    (plane - tip.z).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration: f64,
    pub video_rate: f64,
    pub state_rate: f64,
    /// Height of the phantom surface in the base frame, m.
    pub plane_height: f64,
    pub material: Material,
    pub structure: String,
    pub control_points: Vec<[f64; 3]>,
    /// Tool yaw about the vertical, rad; the tool points straight down.
    pub yaw: f64,
    pub camera: CameraModel,
    /// Physical radius of the rendered tool marker, m.
    pub tool_radius: f64,
    pub texture: Texture,
    /// Gaussian noise on the raw sensor channel, N.
    pub noise_sigma: f64,
    pub friction: f64,
    pub calibration: CalibrationParams,
    pub sensor_mount: RigidTransform,
    pub chain: KinematicChain,
    /// Leader-to-follower motion scaling.
    pub haptic_scale: f64,
    pub sensor_in_state: bool,
    pub gripper_in_state: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.material.stiffness > 0.0) {
            return Err(Error::config("material.stiffness", "must be > 0"));
        }
        if !(self.material.damping >= 0.0) {
            return Err(Error::config("material.damping", "must be >= 0"));
        }
        for (name, rate) in [("video_rate", self.video_rate), ("state_rate", self.state_rate)] {
            let count = self.duration * rate;
            if !(count >= 1.0) || (count - count.round()).abs() > 1e-6 {
                return Err(Error::config(name, format!("duration x rate = {count} is not a whole count")));
            }
        }
        if self.camera.width < CROP_SIZE || self.camera.height < CROP_SIZE {
            return Err(Error::config(
                "camera",
                format!("images must be at least {CROP_SIZE}x{CROP_SIZE}"),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        if !(self.tool_radius > 0.0) {
            return Err(Error::config("tool_radius", "must be > 0"));
        }
        self.calibration.validate()?;
        self.chain.validate()
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.video_rate).round() as usize
    }

    pub fn state_count(&self) -> usize {
        (self.duration * self.state_rate).round() as usize
    }

    pub fn path(&self) -> Result<CatmullRom> {
        CatmullRom::new(self.control_points.iter().map(|p| Vec3::from(*p)).collect(), self.duration)
    }

    pub fn tool_rotation(&self) -> Mat3 {
        rot_z(self.yaw) * Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))
    }

    pub fn double_layer(&self) -> bool {
        self.structure == DOUBLE_LAYER
    }

    pub fn force_at(&self, path: &CatmullRom, t: f64) -> Vec3 {
        let (p, v) = path.eval(t);
        contact_force(&p, &v, self.plane_height, &self.material, self.double_layer(), self.friction)
    }

    pub fn layout(&self) -> StateLayout {
        let cols = |prefix: &str, names: &[&str]| names.iter().map(|n| format!("{prefix}_{n}")).collect::<Vec<_>>();
        let joints = |prefix: &str| (0..self.chain.dof()).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        let mut fields = vec![
            (StateField::PE, cols("pe", &["x", "y", "z"])),
            (StateField::OE, cols("oe", &["w", "x", "y", "z"])),
            (StateField::JRobot, joints("q")),
            (StateField::PH, cols("ph", &["x", "y", "z"])),
            (StateField::OH, cols("oh", &["w", "x", "y", "z"])),
            (StateField::JH, joints("qh")),
        ];
        if self.sensor_in_state {
            fields.push((StateField::Wrench, cols("ft", &["fx", "fy", "fz", "tx", "ty", "tz"])));
        }
        if self.gripper_in_state {
            fields.push((StateField::Gripper, vec!["gripper".into()]));
        }
        StateLayout::canonical(&fields)
    }
}

/// A generated clip; frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub config: SynthConfig,
    pub raw_states: Vec<RawState>,
    /// Sensor readings, timestamped like the states.
    pub raw_forces: Vec<(f64, Vec3)>,
    /// Ground-truth contact forces at the state timestamps.
    pub forces: Vec<Vec3>,
    pub frame_times: Vec<f64>,
}

impl GeneratedClip {
    pub fn render_frame(&self, index: usize) -> Result<RgbImage> {
        let t = self.frame_times[index];
        let path = self.config.path()?;
        let (tip, _) = path.eval(t);
        render_scene(&self.config, &tip)
    }
}

fn lerp(a: [f32; 3], b: [f32; 3], s: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * s)
}

/// Background shading at pixel `(x, y)`.
fn background(tex: &Texture, x: f32, y: f32, w: f32) -> [f32; 3] {
    let f = tex.frequency * std::f32::consts::TAU / w;
    let s = 0.5 + 0.25 * (f * x).sin() + 0.25 * (0.7 * f * y + 0.5).cos();
    lerp(tex.base, tex.accent, s)
}

pub fn render_background(cfg: &SynthConfig) -> RgbImage {
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    RgbImage::from_fn(w, h, |x, y| {
        let c = background(&cfg.texture, x as f32, y as f32, w as f32);
        image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Textured background with the tool marker drawn at the tip's projection.
pub fn render_scene(cfg: &SynthConfig, tip: &Vec3) -> Result<RgbImage> {
    let (u, v, depth) = project_inside(cfg, tip)?;
    let radius = (cfg.tool_radius * cfg.camera.focal / depth) as f32;
    let glow = (penetration(tip, cfg.plane_height) / FULL_BRIGHTNESS_DEPTH).min(1.0) as f32;
    let tool = lerp([0.15, 0.2, 0.25], [0.95, 0.95, 0.7], glow);
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let (u, v) = (u as f32, v as f32);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let bg = background(&cfg.texture, x as f32, y as f32, w as f32);
        let d = ((x as f32 - u).powi(2) + (y as f32 - v).powi(2)).sqrt();
        let cover = (radius - d + 0.5).clamp(0.0, 1.0);
        let c = lerp(bg, tool, cover);
        image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

fn project_inside(cfg: &SynthConfig, tip: &Vec3) -> Result<(f64, f64, f64)> {
    let cam = &cfg.camera;
    match cam.project(tip) {
        Some((u, v, d)) if u >= 0.0 && v >= 0.0 && u <= (cam.width - 1) as f64 && v <= (cam.height - 1) as f64 => {
            Ok((u, v, d))
        }
        _ => Err(Error::config(
            "control_points",
            format!("tool tip {:?} leaves the camera frustum", tip.as_slice()),
        )),
    }
}

pub fn generate_clip(cfg: &SynthConfig) -> Result<GeneratedClip> {
    cfg.validate()?;
    let path = cfg.path()?;
    let n = cfg.state_count();
    let rot = cfg.tool_rotation();
    let orientation = Quaternion::from_matrix(&rot)?;
    let mut noise_rng = rng::stream(cfg.seed, &[rng::label("sensor-noise")]);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::config("noise_sigma", e.to_string()))?;

    let (start, _) = path.eval(0.0);
    let haptic_origin = Vec3::new(0.0, 0.0, 0.1);
    let mut q = start_joints(cfg, &Pose::new(start, orientation))?;

    let mut raw_states = Vec::with_capacity(n);
    let mut raw_forces = Vec::with_capacity(n);
    let mut forces = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / cfg.state_rate;
        let (tip, _) = path.eval(t);
        let pose = Pose::new(tip, orientation);
        let next = solve_joints(cfg, &pose, Some(&q))?;
        let jump = next.angles.iter().zip(&q.angles).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if jump > MAX_JOINT_STEP {
            return Err(Error::config(
                "control_points",
                format!("joint trajectory jumps {jump:.2} rad at t = {t:.3} s"),
            ));
        }
        q = next;
        let force = cfg.force_at(&path, t);
        let sensor_pose = pose.to_transform().compose(&cfg.sensor_mount);
        let mut raw = raw_from_calibrated(&force, &sensor_pose, &cfg.calibration);
        if cfg.noise_sigma > 0.0 {
            raw += Vec3::new(noise.sample(&mut noise_rng), noise.sample(&mut noise_rng), noise.sample(&mut noise_rng));
        }
        let ph = (tip - start) / cfg.haptic_scale + haptic_origin;
        let j_h: Vec<f64> = q.angles.iter().map(|a| 0.5 * a).collect();
        // Torque from a 4 cm lever along the sensor z axis.
        let torque = Vec3::new(0.0, 0.0, 0.04).cross(&raw);
        raw_states.push(RawState {
            timestamp: t,
            p_e: tip.into(),
            o_e: orientation,
            j_robot: q.angles.clone(),
            p_h: ph.into(),
            o_h: orientation,
            j_h,
            wrench: cfg
                .sensor_in_state
                .then(|| [raw.x, raw.y, raw.z, torque.x, torque.y, torque.z]),
            gripper: cfg.gripper_in_state.then(|| 0.3 + 0.1 * (0.5 * t).sin()),
        });
        raw_forces.push((t, raw));
        forces.push(force);
    }
    let frame_times: Vec<f64> = (0..cfg.frame_count()).map(|k| k as f64 / cfg.video_rate).collect();
    for &t in &frame_times {
        project_inside(cfg, &path.eval(t).0)?;
    }
    Ok(GeneratedClip {
        config: cfg.clone(),
        raw_states,
        raw_forces,
        forces,
        frame_times,
    })
}

fn solve_joints(cfg: &SynthConfig, pose: &Pose, seed: Option<&JointVector>) -> Result<JointVector> {
    let fallback = JointVector::new(default_seed(cfg.chain.dof()));
    let seeds: Vec<JointVector> = seed.cloned().into_iter().chain(std::iter::once(fallback)).collect();
    inverse_multistart(&cfg.chain, pose, &seeds, IK_RESTARTS)?.ok_or_else(|| {
        Error::config(
            "control_points",
            format!("tool pose at {:?} is outside the arm's workspace", pose.position.as_slice()),
        )
    })
}

/// Among the IK solutions from the default and random seeds, the one farthest
/// from any joint limit, so that the follow-up continuation stays smooth.
fn start_joints(cfg: &SynthConfig, pose: &Pose) -> Result<JointVector> {
    let chain = &cfg.chain;
    let mut r = rng::stream(0, &[rng::label("ik-start")]);
    let mut seeds = vec![JointVector::new(default_seed(chain.dof()))];
    seeds.extend((0..IK_RESTARTS).map(|_| JointVector::new(chain.joints.iter().map(|j| r.random_range(j.min..=j.max)).collect())));
    let margin = |q: &JointVector| {
        q.angles
            .iter()
            .zip(&chain.joints)
            .map(|(a, j)| (a - j.min).min(j.max - a))
            .fold(f64::INFINITY, f64::min)
    };
    let mut best: Option<(f64, JointVector)> = None;
    for seed in &seeds {
        let Some(q) = inverse_multistart(chain, pose, std::slice::from_ref(seed), 0)? else {
            continue;
        };
        let m = margin(&q);
        if best.as_ref().is_none_or(|(b, _)| m > *b) {
            best = Some((m, q));
        }
    }
    best.map(|(_, q)| q).ok_or_else(|| {
        Error::config(
            "control_points",
            format!("tool pose at {:?} is outside the arm's workspace", pose.position.as_slice()),
        )
    })
}

/// Elbow-up, wrist-down posture used to start IK.
fn default_seed(dof: usize) -> Vec<f64> {
    if dof == 6 {
        vec![0.0, 0.3, 0.6, 0.0, 0.6, 0.0]
    } else {
        vec![0.0, 0.5, 0.0, -1.2, 0.0, 0.8, 0.0]
    }
}

/// Palpation path: hover, press to a random depth, slide, release, repeated.
pub fn palpation_points(rng: &mut rng::Rng, center: Vec3, plane: f64, presses: usize, max_depth: f64) -> Vec<[f64; 3]> {
    let hover = plane + 0.02;
    let mut pts = vec![[center.x, center.y, hover]];
    for _ in 0..presses {
        let x = center.x + rng.random_range(-0.06..0.06);
        let y = center.y + rng.random_range(-0.06..0.06);
        let depth = rng.random_range(0.3 * max_depth..max_depth);
        let (dx, dy) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        pts.push([x, y, hover]);
        pts.push([x, y, plane - 0.5 * depth]);
        pts.push([x + 0.5 * dx, y + 0.5 * dy, plane - depth]);
        pts.push([x + dx, y + dy, plane - 0.4 * depth]);
        pts.push([x + dx, y + dy, hover]);
    }
    pts.push([center.x, center.y, hover]);
    pts
}

/// Parameters shared by all clips of a generated suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Seconds per clip.
    pub duration: f64,
    /// Presses per clip.
    pub presses: usize,
    pub image_px: u32,
    pub noise_sigma: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            duration: 20.0,
            presses: 4,
            image_px: CROP_SIZE,
            noise_sigma: 0.01,
        }
    }
}

/// Manifests plus the configs of their clips, not yet generated.
#[derive(Debug, Clone)]
pub struct SuitePlan {
    pub datasets: Vec<(DatasetManifest, Vec<SynthConfig>)>,
}

fn camera(px: u32, position: Vec3, tilt: f64, focal: f64) -> Result<CameraModel> {
    let rotation = rot_x(tilt) * Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
    Ok(CameraModel {
        extrinsic: RigidTransform::new(rotation, position)?,
        focal: focal * px as f64 / CROP_SIZE as f64,
        principal: [(px as f64 - 1.0) / 2.0; 2],
        width: px,
        height: px,
    })
}

struct DatasetSpec {
    name: &'static str,
    chain: KinematicChain,
    camera: CameraModel,
    center: Vec3,
    plane: f64,
    texture_a: Texture,
    texture_b: Texture,
    materials: [Material; 2],
    clips: &'static [(usize, &'static str)],
    calibration: CalibrationParams,
    sensor_mount: RigidTransform,
    sensor: bool,
    video_rate: f64,
}

fn dataset_specs(opts: &SuiteOptions) -> Result<Vec<DatasetSpec>> {
    let px = opts.image_px;
    Ok(vec![
        DatasetSpec {
            name: "dataset_a",
            chain: six_dof_arm(),
            camera: camera(px, Vec3::new(0.40, 0.0, 1.0), 0.0, 300.0)?,
            center: Vec3::new(0.40, 0.0, 0.0),
            plane: 0.12,
            texture_a: Texture {
                base: [0.75, 0.45, 0.45],
                accent: [0.55, 0.25, 0.3],
                frequency: 3.0,
            },
            texture_b: Texture {
                base: [0.8, 0.55, 0.4],
                accent: [0.6, 0.35, 0.25],
                frequency: 3.0,
            },
            materials: [
                Material {
                    name: "soft".into(),
                    stiffness: 150.0,
                    damping: 4.0,
                },
                Material {
                    name: "stiff".into(),
                    stiffness: 350.0,
                    damping: 8.0,
                },
            ],
            clips: &[(0, SINGLE_LAYER), (1, DOUBLE_LAYER), (0, DOUBLE_LAYER), (1, SINGLE_LAYER)],
            calibration: CalibrationParams {
                attenuation: 1.0,
                gravity_comp: [0.0, 0.0, -1.2],
                tool_bias: [0.05, -0.03, 0.1],
                gravity_frame: GravityFrame::Inverse,
            },
            sensor_mount: RigidTransform::identity(),
            sensor: false,
            video_rate: 30.0,
        },
        DatasetSpec {
            name: "dataset_b",
            chain: seven_dof_arm(),
            camera: camera(px, Vec3::new(0.36, 0.1, 0.95), 0.12, 320.0)?,
            center: Vec3::new(0.36, 0.05, 0.0),
            plane: 0.10,
            texture_a: Texture {
                base: [0.55, 0.6, 0.7],
                accent: [0.35, 0.35, 0.5],
                frequency: 6.0,
            },
            texture_b: Texture {
                base: [0.5, 0.7, 0.55],
                accent: [0.3, 0.45, 0.35],
                frequency: 6.0,
            },
            materials: [
                Material {
                    name: "gel".into(),
                    stiffness: 200.0,
                    damping: 5.0,
                },
                Material {
                    name: "sponge".into(),
                    stiffness: 90.0,
                    damping: 2.0,
                },
            ],
            clips: &[(0, DOUBLE_LAYER), (1, DOUBLE_LAYER), (0, SINGLE_LAYER)],
            calibration: CalibrationParams {
                attenuation: 0.8,
                gravity_comp: [0.0, 0.0, -0.6],
                tool_bias: [-0.02, 0.04, 0.0],
                gravity_frame: GravityFrame::Inverse,
            },
            sensor_mount: RigidTransform::new(rot_z(0.5), Vec3::new(0.0, 0.0, 0.02))?,
            sensor: true,
            video_rate: 30.0,
        },
    ])
}

/// The two-dataset benchmark suite: a 6-joint arm with 26-value states, and a
/// 7-joint arm whose states also carry the sensor wrench and gripper.
pub fn benchmark_plan(seed: u64, opts: &SuiteOptions) -> Result<SuitePlan> {
    let mut datasets = Vec::new();
    for (di, spec) in dataset_specs(opts)?.into_iter().enumerate() {
        let mut configs = Vec::new();
        let mut entries = Vec::new();
        for (ci, &(mi, structure)) in spec.clips.iter().enumerate() {
            let material = spec.materials[mi].clone();
            let mut r = rng::stream(seed, &[rng::label("suite"), di as u64, ci as u64]);
            let cfg = SynthConfig {
                seed: rng::derive_seed(seed, &[rng::label("clip"), di as u64, ci as u64]),
                duration: opts.duration,
                video_rate: spec.video_rate,
                state_rate: 200.0,
                plane_height: spec.plane,
                material: material.clone(),
                structure: structure.to_string(),
                control_points: palpation_points(&mut r, spec.center, spec.plane, opts.presses, 0.014),
                yaw: r.random_range(-0.4..0.4),
                camera: spec.camera,
                tool_radius: 0.03,
                texture: if mi == 0 { spec.texture_a } else { spec.texture_b },
                noise_sigma: opts.noise_sigma,
                friction: DEFAULT_FRICTION,
                calibration: spec.calibration,
                sensor_mount: spec.sensor_mount,
                chain: spec.chain.clone(),
                haptic_scale: 3.0,
                sensor_in_state: spec.sensor,
                gripper_in_state: spec.sensor,
            };
            entries.push(ClipEntry {
                path: format!("clip_{ci:02}"),
                tags: ClipTags {
                    material: material.name.clone(),
                    structure: structure.to_string(),
                    position: format!("p{ci}"),
                },
            });
            configs.push(cfg);
        }
        let manifest = DatasetManifest {
            name: spec.name.to_string(),
            clips: entries,
            video_rate: spec.video_rate,
            state_rate: 200.0,
            layout: configs[0].layout(),
            chain: Some(spec.chain),
            calibration: spec.calibration,
            zoom: 1.0,
            camera: Some(spec.camera),
            sensor_mount: spec.sensor_mount,
            forces_calibrated: false,
            quaternion_order: crate::dataset::manifest::QUATERNION_ORDER.to_string(),
            root: PathBuf::new(),
        };
        manifest.validate()?;
        datasets.push((manifest, configs));
    }
    Ok(SuitePlan { datasets })
}

/// Writes `frames/`, `states.csv` and `forces.csv` for one clip.
pub fn write_clip(dir: &Path, clip: &GeneratedClip) -> Result<()> {
    let frames = dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    write_states(&dir.join(STATES_FILE), &clip.raw_states, &clip.config.layout())?;
    write_forces(&dir.join(FORCES_FILE), &clip.raw_forces)?;
    (0..clip.frame_times.len()).into_par_iter().try_for_each(|k| {
        let img = clip.render_frame(k)?;
        let p = frame_path(dir, k);
        img.save(&p)?;
        Ok(())
    })
}

impl SuitePlan {
    /// Generates every clip under `root/<dataset>/` and returns the manifest paths.
    pub fn write(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (manifest, configs) in &self.datasets {
            let dir = root.join(&manifest.name);
            for (entry, cfg) in manifest.clips.iter().zip(configs) {
                let clip = generate_clip(cfg)?;
                write_clip(&dir.join(&entry.path), &clip)?;
            }
            let path = dir.join("manifest.json");
            save_manifest(manifest, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Generates and harmonizes every clip in memory, bypassing the file formats.
    pub fn load(&self, image_size: usize) -> Result<Vec<LoadedDataset>> {
        self.datasets
            .iter()
            .map(|(manifest, configs)| {
                let clips = manifest
                    .clips
                    .iter()
                    .zip(configs)
                    .map(|(entry, cfg)| harmonize_generated(manifest, entry, &generate_clip(cfg)?, image_size))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LoadedDataset {
                    name: manifest.name.clone(),
                    clips,
                })
            })
            .collect()
    }
}

/// The clip [`crate::dataset::io::load_clip`] would produce from the written files.
pub fn harmonize_generated(manifest: &DatasetManifest, entry: &ClipEntry, clip: &GeneratedClip, image_size: usize) -> Result<Clip> {
    let (state_times, states, labels) = harmonize_stream(manifest, &clip.raw_states, &clip.raw_forces)?;
    let frames = (0..clip.frame_times.len())
        .into_par_iter()
        .map(|k| {
            let img = clip.render_frame(k)?;
            Ok(Frame {
                timestamp: clip.frame_times[k],
                image: Arc::new(preprocess_unit(&img, manifest.zoom, image_size)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Clip {
        id: crate::dataset::io::clip_id(manifest, entry),
        dataset: manifest.name.clone(),
        tags: entry.tags.clone(),
        video_rate: manifest.video_rate,
        frames,
        state_times,
        states,
        forces: labels,
    };
    out.validate()?;
    Ok(out)
}

pub fn make_benchmark_suite(root: &Path, seed: u64, opts: &SuiteOptions) -> Result<Vec<PathBuf>> {
    benchmark_plan(seed, opts)?.write(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate_force;

    fn plan_config(ds: usize, clip: usize) -> SynthConfig {
        let opts = SuiteOptions {
            duration: 3.0,
            presses: 1,
            ..Default::default()
        };
        benchmark_plan(5, &opts).unwrap().datasets[ds].1[clip].clone()
    }

    #[test]
    fn hooke_closed_form() {
        let m = Material {
            name: "m".into(),
            stiffness: 100.0,
            damping: 7.0,
        };
        let f = contact_force(&Vec3::new(0.0, 0.0, 0.09), &Vec3::zeros(), 0.1, &m, false, 0.3);
        assert!((f.z - 1.0).abs() < 1e-12);
        assert_eq!((f.x, f.y), (0.0, 0.0));
        let above = contact_force(&Vec3::new(0.0, 0.0, 0.2), &Vec3::new(1.0, 0.0, -1.0), 0.1, &m, false, 0.3);
        assert_eq!(above, Vec3::zeros());
        let sliding = contact_force(&Vec3::new(0.0, 0.0, 0.09), &Vec3::new(0.1, 0.0, 0.0), 0.1, &m, false, 0.3);
        assert!((sliding.x + 0.3).abs() < 1e-12);
    }

    #[test]
    fn spline_interpolates_and_differentiates() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 0.0), Vec3::new(3.0, 1.0, -1.0), Vec3::new(4.0, 0.0, 0.0)];
        let s = CatmullRom::new(pts.clone(), 3.0).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert!((s.eval(k as f64).0 - p).norm() < 1e-12);
        }
        let h = 1e-6;
        for t in [0.3, 1.2, 2.7] {
            let fd = (s.eval(t + h).0 - s.eval(t - h).0) / (2.0 * h);
            assert!((fd - s.eval(t).1).norm() < 1e-6);
        }
    }

    #[test]
    fn no_contact_means_zero_force() {
        let mut cfg = plan_config(0, 0);
        cfg.control_points.iter_mut().for_each(|p| p[2] = cfg.plane_height + 0.03);
        let clip = generate_clip(&cfg).unwrap();
        assert!(clip.forces.iter().all(|f| *f == Vec3::zeros()));
    }

    #[test]
    fn noiseless_sensor_calibrates_to_ground_truth() {
        for ds in 0..2 {
            let mut cfg = plan_config(ds, 0);
            cfg.noise_sigma = 0.0;
            let clip = generate_clip(&cfg).unwrap();
            assert!(clip.forces.iter().any(|f| f.z > 0.5));
            for ((s, (_, raw)), f) in clip.raw_states.iter().zip(&clip.raw_forces).zip(&clip.forces) {
                let t = s.robot_pose().to_transform().compose(&cfg.sensor_mount);
                assert!((calibrate_force(raw, &t, &cfg.calibration) - f).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn force_is_continuous() {
        let cfg = plan_config(0, 1);
        let clip = generate_clip(&cfg).unwrap();
        let path = cfg.path().unwrap();
        let dt = 1.0 / cfg.state_rate;
        let max_zdot = (0..clip.forces.len())
            .map(|i| path.eval(i as f64 * dt).1.z.abs())
            .fold(0.0, f64::max);
        let k = cfg.material.stiffness * if cfg.double_layer() { 2.0 } else { 1.0 };
        // The damper switches on at first contact; allow for that and friction.
        let tol = (1.0 + cfg.friction) * (cfg.material.damping * max_zdot + 1e-3);
        for w in clip.forces.windows(2) {
            assert!((w[1] - w[0]).norm() <= k * max_zdot * dt * (1.0 + cfg.friction) + tol);
        }
    }

    #[test]
    fn rendered_marker_projects_within_a_pixel() {
        let cfg = plan_config(1, 0);
        let clip = generate_clip(&cfg).unwrap();
        let bg = render_background(&cfg);
        let path = cfg.path().unwrap();
        for k in [0, 20, 45, 80] {
            let img = clip.render_frame(k).unwrap();
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for (x, y, p) in img.enumerate_pixels() {
                let b = bg.get_pixel(x, y);
                let d: f64 = (0..3).map(|c| (p[c] as f64 - b[c] as f64).abs()).sum();
                if d > 30.0 {
                    sx += x as f64;
                    sy += y as f64;
                    sw += 1.0;
                }
            }
            let (u, v, _) = cfg.camera.project(&path.eval(clip.frame_times[k]).0).unwrap();
            assert!(sw > 0.0);
            assert!((sx / sw - u).abs() <= 1.0 && (sy / sw - v).abs() <= 1.0, "{} {} vs {u} {v}", sx / sw, sy / sw);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = plan_config(0, 2);
        let a = generate_clip(&cfg).unwrap();
        let b = generate_clip(&cfg).unwrap();
        assert_eq!(a.raw_states, b.raw_states);
        assert_eq!(a.raw_forces, b.raw_forces);
        assert_eq!(a.render_frame(7).unwrap(), b.render_frame(7).unwrap());
    }

    #[test]
    fn frustum_and_rate_validation() {
        let mut cfg = plan_config(0, 0);
        cfg.control_points[1] = [3.0, 0.0, 0.2];
        assert!(matches!(generate_clip(&cfg), Err(Error::Config { .. })));
        let mut cfg = plan_config(0, 0);
        cfg.duration = 1.01;
        assert!(generate_clip(&cfg).is_err());
    }

    #[test]
    fn suite_layouts() {
        let plan = benchmark_plan(1, &SuiteOptions::default()).unwrap();
        let (a, ca) = &plan.datasets[0];
        let (b, cb) = &plan.datasets[1];
        assert!(ca.len() >= 3 && cb.len() >= 3);
        assert_eq!(a.chain.as_ref().unwrap().dof(), 6);
        assert_eq!(b.chain.as_ref().unwrap().dof(), 7);
        let cols_a: usize = a.layout.entries.iter().map(|e| e.columns.len()).sum();
        assert_eq!(cols_a, 26);
        assert!(b.layout.has(StateField::Wrench) && b.layout.has(StateField::Gripper));
        assert_ne!(ca[0].texture, cb[0].texture);
        assert_ne!(a.camera, b.camera);
    }
}
