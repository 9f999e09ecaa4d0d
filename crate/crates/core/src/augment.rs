//! Kinematic-aware augmentations (a 2-D image map paired with its 3-D
//! equivalent on the robot state) and state-invariant photometric changes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::image::{sample_clamped, sample_zero_fill};
use crate::dataset::{GeneralizedState, SampleWindow, StateField, UnitImage, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::geometry::{rot_z, Mat3, Pose, Quaternion, RigidTransform, Vec3};
use crate::kinematics::{forward, inverse_multistart, JointVector, KinematicChain};
use crate::rng::Rng;

pub const MAX_ROTATION_DEG: f64 = 20.0;
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.7, 1.3);
pub const CONTRAST_RANGE: (f64, f64) = (0.7, 1.3);
pub const ZOOM_RANGE: (f64, f64) = (1.0, 1.2);

const JOINT_VELOCITY_DAMPING: f64 = 1e-3;
const IK_RESTARTS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "degrees")]
pub enum AugmentKind {
    /// Left-right image mirror.
    HorizontalFlip,
    /// Top-bottom image mirror.
    VerticalFlip,
    /// Image rotation about its center, in degrees.
    Rotation(f64),
}

/// A kinematic augmentation bound to the camera that saw the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicAugmentation {
    pub kind: AugmentKind,
    /// Camera pose in the robot base frame.
    pub camera: RigidTransform,
}

impl KinematicAugmentation {
    pub fn new(kind: AugmentKind, camera: RigidTransform) -> Result<Self> {
        if let AugmentKind::Rotation(deg) = kind {
            if !(deg.is_finite() && deg.abs() <= MAX_ROTATION_DEG) {
                return Err(Error::config(
                    "augment.rotation",
                    format!("{deg} degrees is outside ±{MAX_ROTATION_DEG}"),
                ));
            }
        }
        Ok(Self { kind, camera })
    }

    /// The augmentation that undoes this one.
    pub fn inverse(&self) -> Self {
        let kind = match self.kind {
            AugmentKind::Rotation(d) => AugmentKind::Rotation(-d),
            k => k,
        };
        Self { kind, ..*self }
    }

    pub fn is_mirror(&self) -> bool {
        !matches!(self.kind, AugmentKind::Rotation(_))
    }

    fn is_identity(&self) -> bool {
        self.kind == AugmentKind::Rotation(0.0)
    }

    /// Linear part of the map in camera coordinates.
    pub fn camera_map(&self) -> Mat3 {
        match self.kind {
            AugmentKind::HorizontalFlip => Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0)),
            AugmentKind::VerticalFlip => Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0)),
            AugmentKind::Rotation(deg) => rot_z(deg.to_radians()),
        }
    }

    /// Linear part of the map in the base frame.
    pub fn world_map(&self) -> Mat3 {
        let c = self.camera.rotation;
        c * self.camera_map() * c.transpose()
    }

    pub fn map_point(&self, p: &Vec3) -> Vec3 {
        let c = &self.camera;
        self.world_map() * (p - c.translation) + c.translation
    }

    pub fn map_vector(&self, v: &Vec3) -> Vec3 {
        self.world_map() * v
    }

    /// Mirrors flip the tool x axis so the mapped frame stays right-handed.
    pub fn map_orientation(&self, q: &Quaternion) -> Result<Quaternion> {
        let r = q.to_matrix();
        let m = self.world_map() * r;
        let m = if self.is_mirror() {
            m * Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0))
        } else {
            m
        };
        Quaternion::from_matrix(&m)
    }

    pub fn map_pose(&self, p: &Pose) -> Result<Pose> {
        Ok(Pose::new(self.map_point(&p.position), self.map_orientation(&p.orientation)?))
    }

    /// Body-frame angular velocity: unchanged by rotations, `(x, -y, -z)` under mirrors.
    pub fn map_body_rate(&self, w: &Vec3) -> Vec3 {
        if self.is_mirror() {
            Vec3::new(w.x, -w.y, -w.z)
        } else {
            *w
        }
    }

    pub fn apply_image(&self, img: &UnitImage) -> UnitImage {
        match self.kind {
            AugmentKind::HorizontalFlip => flip(img, true),
            AugmentKind::VerticalFlip => flip(img, false),
            AugmentKind::Rotation(deg) => rotate(img, deg.to_radians()),
        }
    }
}

fn flip(img: &UnitImage, horizontal: bool) -> UnitImage {
    let n = img.size;
    let mut out = UnitImage::zeros(n);
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = if horizontal { (y, n - 1 - x) } else { (n - 1 - y, x) };
                out.data[img.index(c, y, x)] = img.get(c, sy, sx);
            }
        }
    }
    out
}

/// Rotates pixel offsets from the center by `theta` (x right, y down),
/// bilinear with black outside the source.
fn rotate(img: &UnitImage, theta: f64) -> UnitImage {
    let n = img.size;
    let ctr = (n as f64 - 1.0) / 2.0;
    let (s, c) = theta.sin_cos();
    let mut out = UnitImage::zeros(n);
    for ch in 0..3 {
        let plane = img.channel(ch);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - ctr, y as f64 - ctr);
                let sx = ctr + c * dx + s * dy;
                let sy = ctr - s * dx + c * dy;
                out.data[img.index(ch, y, x)] = sample_zero_fill(plane, n, sx, sy);
            }
        }
    }
    out
}

fn joint_slots(s: &GeneralizedState, dof: usize) -> Vec<f64> {
    s.field(StateField::JRobot)[..dof].to_vec()
}

/// Joint rates realising a base-frame twist, by damped least squares.
fn joint_rates(chain: &KinematicChain, q: &JointVector, v: &Vec3, w_world: &Vec3) -> Result<Vec<f64>> {
    let j = chain.jacobian(q)?;
    let twist = DVector::from_column_slice(&[v.x, v.y, v.z, w_world.x, w_world.y, w_world.z]);
    let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * JOINT_VELOCITY_DAMPING.powi(2);
    let y = jjt
        .cholesky()
        .ok_or_else(|| Error::data("singular Jacobian while mapping joint velocities"))?
        .solve(&twist);
    Ok((j.transpose() * y).iter().copied().collect())
}

/// Transforms one state; the flag is false when IK found no joints.
fn transform_state(
    aug: &KinematicAugmentation,
    s: &GeneralizedState,
    chain: &KinematicChain,
    prev: Option<&JointVector>,
) -> Result<(GeneralizedState, bool)> {
    let mut out = *s;
    let robot = aug.map_pose(&s.robot_pose()?)?;
    out.set_vec3(StateField::PE, &robot.position);
    out.set_quaternion(StateField::OE, &robot.orientation);
    let v = aug.map_vector(&s.vec3(StateField::VE));
    let w = aug.map_body_rate(&s.vec3(StateField::WE));
    out.set_vec3(StateField::VE, &v);
    out.set_vec3(StateField::WE, &w);

    let haptic = aug.map_pose(&s.haptic_pose()?)?;
    out.set_vec3(StateField::PH, &haptic.position);
    out.set_quaternion(StateField::OH, &haptic.orientation);
    out.set_vec3(StateField::VH, &aug.map_vector(&s.vec3(StateField::VH)));
    out.set_vec3(StateField::WH, &aug.map_body_rate(&s.vec3(StateField::WH)));

    let dof = chain.dof();
    let mut seeds = vec![JointVector::new(joint_slots(s, dof))];
    seeds.extend(prev.cloned());
    match inverse_multistart(chain, &robot, &seeds, IK_RESTARTS)? {
        Some(q) => {
            let w_world = robot.orientation.to_matrix() * w;
            let rates = joint_rates(chain, &q, &v, &w_world)?;
            out.field_mut(StateField::JRobot)[..dof].copy_from_slice(&q.angles);
            out.field_mut(StateField::JRobotVel)[..dof].copy_from_slice(&rates);
            Ok((out, true))
        }
        None => Ok((out, false)),
    }
}

/// Applies a kinematic augmentation to every frame and state of a window.
/// Windows whose transformed poses have no IK solution come back flagged.
pub fn apply_kinematic(aug: &KinematicAugmentation, window: &SampleWindow, chain: &KinematicChain) -> Result<SampleWindow> {
    if aug.is_identity() {
        return Ok(window.clone());
    }
    let mut out = window.clone();
    let mut prev: Option<JointVector> = None;
    for k in 0..WINDOW_LEN {
        out.frames[k] = Arc::new(aug.apply_image(&window.frames[k]));
        let (s, ok) = transform_state(aug, &window.states[k], chain, prev.as_ref())?;
        out.states[k] = s;
        out.flagged |= !ok;
        prev = ok.then(|| JointVector::new(joint_slots(&s, chain.dof())));
    }
    out.target = aug.map_vector(&window.target);
    Ok(out)
}

/// FK of the joints stored in a state, against its stored pose.
pub fn joint_pose_residual(s: &GeneralizedState, chain: &KinematicChain) -> Result<(f64, f64)> {
    let q = JointVector::new(joint_slots(s, chain.dof()));
    Ok(forward(chain, &q)?.residual(&s.robot_pose()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub zoom: f64,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            zoom: 1.0,
        }
    }
}

impl PhotometricParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is outside [{lo}, {hi}]")))
            }
        };
        check("augment.brightness", self.brightness, BRIGHTNESS_RANGE)?;
        check("augment.contrast", self.contrast, CONTRAST_RANGE)?;
        check("augment.zoom", self.zoom, ZOOM_RANGE)
    }

    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            brightness: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
            contrast: rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            zoom: rng.random_range(ZOOM_RANGE.0..=ZOOM_RANGE.1),
        }
    }
}

/// Center zoom, then `clamp(contrast·(x − 0.5) + 0.5 + brightness − 1)`.
pub fn apply_photometric(img: &UnitImage, p: &PhotometricParams) -> Result<UnitImage> {
    p.validate()?;
    let n = img.size;
    let mut out = if p.zoom == 1.0 {
        img.clone()
    } else {
        let ctr = (n as f64 - 1.0) / 2.0;
        let lim = (0.0, n as f64 - 1.0);
        let mut z = UnitImage::zeros(n);
        for c in 0..3 {
            let plane = img.channel(c);
            for y in 0..n {
                for x in 0..n {
                    let sx = ctr + (x as f64 - ctr) / p.zoom;
                    let sy = ctr + (y as f64 - ctr) / p.zoom;
                    z.data[img.index(c, y, x)] = sample_clamped(plane, n, sx, sy, lim, lim);
                }
            }
        }
        z
    };
    if p.brightness != 1.0 || p.contrast != 1.0 {
        let (c, b) = (p.contrast as f32, (p.brightness - 1.0) as f32);
        for v in &mut out.data {
            *v = (c * (*v - 0.5) + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Per-window augmentation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub kinematic: f64,
    pub photometric: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kinematic: 0.5,
            photometric: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            kinematic: 0.0,
            photometric: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("augment.kinematic", self.kinematic), ("augment.photometric", self.photometric)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("probability {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Camera and chain of the dataset a window came from.
#[derive(Debug, Clone)]
pub struct AugmentContext {
    pub camera: RigidTransform,
    pub chain: KinematicChain,
}

/// Sampled parameters of one window, constant over its frames and states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub kinematic: Option<AugmentKind>,
    pub photometric: Option<PhotometricParams>,
    pub flagged: bool,
}

pub fn sample_kind(rng: &mut Rng) -> AugmentKind {
    match rng.random_range(0..3) {
        0 => AugmentKind::HorizontalFlip,
        1 => AugmentKind::VerticalFlip,
        _ => AugmentKind::Rotation(rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
    }
}

/// Draws and applies augmentations to one window.
pub fn augment_window(
    window: &SampleWindow,
    ctx: Option<&AugmentContext>,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(SampleWindow, AugmentRecord)> {
    let mut record = AugmentRecord {
        kinematic: None,
        photometric: None,
        flagged: false,
    };
    let do_kin = rng.random_bool(cfg.kinematic);
    let kind = sample_kind(rng);
    let do_photo = rng.random_bool(cfg.photometric);
    let photo = PhotometricParams::sample(rng);

    let mut out = window.clone();
    if let (true, Some(ctx)) = (do_kin, ctx) {
        let aug = KinematicAugmentation::new(kind, ctx.camera)?;
        out = apply_kinematic(&aug, window, &ctx.chain)?;
        record.kinematic = Some(kind);
        record.flagged = out.flagged;
    }
    if do_photo {
        for f in out.frames.iter_mut() {
            *f = Arc::new(apply_photometric(f, &photo)?);
        }
        record.photometric = Some(photo);
    }
    Ok((out, record))
}
