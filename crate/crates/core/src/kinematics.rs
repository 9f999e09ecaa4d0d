//! Forward and inverse kinematics for revolute serial chains described by
//! standard Denavit–Hartenberg tables.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_z, rotation_vector, Pose, Quaternion, RigidTransform, Vec3};

/// One revolute joint: `T = Rz(theta + offset) · Tz(d) · Tx(a) · Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub min: f64,
    pub max: f64,
}

impl DhJoint {
    pub fn transform(&self, theta: f64) -> RigidTransform {
        let th = theta + self.theta_offset;
        let (s, c) = th.sin_cos();
        RigidTransform {
            rotation: rot_z(th) * rot_x(self.alpha),
            translation: Vec3::new(self.a * c, self.a * s, self.d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub joints: Vec<DhJoint>,
    #[serde(default)]
    pub base: RigidTransform,
}

impl KinematicChain {
    pub fn new(joints: Vec<DhJoint>, base: RigidTransform) -> Result<Self> {
        let chain = Self { joints, base };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if !(6..=7).contains(&n) {
            return Err(Error::config(
                "chain.joints",
                format!("expected 6 or 7 joints, found {n}"),
            ));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let finite = [j.a, j.alpha, j.d, j.theta_offset, j.min, j.max]
                .iter()
                .all(|v| v.is_finite());
            if !finite || j.min >= j.max {
                return Err(Error::config(
                    format!("chain.joints[{i}]"),
                    format!("limits must satisfy min < max (got [{}, {}])", j.min, j.max),
                ));
            }
        }
        crate::geometry::check_rotation(&self.base.rotation, crate::geometry::INPUT_TOLERANCE)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Upper bound on the distance from the base origin to the end effector.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| (j.a * j.a + j.d * j.d).sqrt())
            .sum()
    }

    fn check(&self, q: &JointVector) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::JointCount {
                expected: self.dof(),
                got: q.len(),
            });
        }
        for (i, (&angle, j)) in q.angles.iter().zip(&self.joints).enumerate() {
            if !(angle >= j.min && angle <= j.max) {
                return Err(Error::JointLimit {
                    index: i,
                    angle,
                    min: j.min,
                    max: j.max,
                });
            }
        }
        Ok(())
    }

    /// Frame of every joint axis (base, then after each joint), end effector last.
    fn frames(&self, q: &[f64]) -> Vec<RigidTransform> {
        let mut frames = Vec::with_capacity(q.len() + 1);
        let mut t = self.base;
        frames.push(t);
        for (j, &theta) in self.joints.iter().zip(q) {
            t = t.compose(&j.transform(theta));
            frames.push(t);
        }
        frames
    }

    fn end_effector(&self, q: &[f64]) -> RigidTransform {
        *self.frames(q).last().unwrap()
    }

    /// Geometric Jacobian in the base frame: rows are (linear; angular).
    pub fn jacobian(&self, q: &JointVector) -> Result<DMatrix<f64>> {
        if q.len() != self.dof() {
            return Err(Error::JointCount {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(self.jacobian_unchecked(&q.angles))
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        let frames = self.frames(q);
        let pe = frames.last().unwrap().translation;
        let mut jac = DMatrix::zeros(6, q.len());
        for i in 0..q.len() {
            let z = frames[i].rotation.column(2).into_owned();
            let lin = z.cross(&(pe - frames[i].translation));
            for r in 0..3 {
                jac[(r, i)] = lin[r];
                jac[(r + 3, i)] = z[r];
            }
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    pub angles: Vec<f64>,
}

impl JointVector {
    pub fn new(angles: Vec<f64>) -> Self {
        Self { angles }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(angles: Vec<f64>) -> Self {
        Self { angles }
    }
}

/// End-effector pose in the base frame.
pub fn forward(chain: &KinematicChain, q: &JointVector) -> Result<Pose> {
    chain.check(q)?;
    chain.end_effector(&q.angles).to_pose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkOptions {
    pub damping: f64,
    pub max_iterations: usize,
    pub max_step: f64,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    /// Targets farther than `reach + workspace_margin` from the base are rejected outright.
    pub workspace_margin: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iterations: 200,
            max_step: 0.2,
            position_tolerance: 1e-3,
            orientation_tolerance: 1e-3,
            workspace_margin: 0.05,
        }
    }
}

/// Iterations stop once both residuals fall under these; acceptance uses the looser options tolerances.
const CONVERGED_POSITION: f64 = 1e-9;
const CONVERGED_ORIENTATION: f64 = 1e-9;

fn pose_error(current: &RigidTransform, target: &RigidTransform) -> Vector6<f64> {
    let ep = target.translation - current.translation;
    let rel = target.rotation * current.rotation.transpose();
    // `rel` is orthonormal up to round-off; fall back to zero on pathological drift.
    let eo = rotation_vector(&rel).unwrap_or_else(|_| Vec3::zeros());
    Vector6::new(ep.x, ep.y, ep.z, eo.x, eo.y, eo.z)
}

/// Damped-least-squares IK seeded at `seed`; joint limits are enforced every step.
pub fn inverse(chain: &KinematicChain, target: &Pose, seed: &JointVector) -> Result<JointVector> {
    inverse_with(chain, target, seed, &IkOptions::default())
}

/// IK from the given seeds in order, then from `restarts` fixed pseudo-random
/// seeds inside the joint limits. `None` when every attempt fails.
pub fn inverse_multistart(
    chain: &KinematicChain,
    target: &Pose,
    seeds: &[JointVector],
    restarts: usize,
) -> Result<Option<JointVector>> {
    let mut rng = crate::rng::stream(0, &[crate::rng::label("ik-restart")]);
    let restarts: Vec<JointVector> = (0..restarts)
        .map(|_| JointVector::new(chain.joints.iter().map(|j| rng.random_range(j.min..=j.max)).collect()))
        .collect();
    for seed in seeds.iter().chain(&restarts) {
        match inverse(chain, target, seed) {
            Ok(q) => return Ok(Some(q)),
            Err(Error::UnreachablePose { position, .. }) if position.is_finite() => continue,
            Err(Error::UnreachablePose { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

pub fn inverse_with(
    chain: &KinematicChain,
    target: &Pose,
    seed: &JointVector,
    opts: &IkOptions,
) -> Result<JointVector> {
    chain.check(seed)?;
    let target_t = target.to_transform();

    let distance = (target.position - chain.base.translation).norm();
    if distance > chain.reach() + opts.workspace_margin {
        return Err(Error::UnreachablePose {
            position: distance - chain.reach(),
            orientation: f64::NAN,
        });
    }

    let n = chain.dof();
    let lambda2 = opts.damping * opts.damping;
    let mut q = seed.angles.clone();
    let mut best = (f64::INFINITY, f64::INFINITY, q.clone());

    for iteration in 0..=opts.max_iterations {
        let current = chain.end_effector(&q);
        let err = pose_error(&current, &target_t);
        let ep = err.fixed_rows::<3>(0).norm();
        let eo = err.fixed_rows::<3>(3).norm();
        if ep + eo < best.0 + best.1 {
            best = (ep, eo, q.clone());
        }
        if (ep < CONVERGED_POSITION && eo < CONVERGED_ORIENTATION) || iteration == opts.max_iterations
        {
            break;
        }

        let jac = chain.jacobian_unchecked(&q);
        let jjt: Matrix6<f64> = {
            let m = &jac * jac.transpose();
            Matrix6::from_fn(|r, c| m[(r, c)]) + Matrix6::identity() * lambda2
        };
        let Some(y) = jjt.cholesky().map(|ch| ch.solve(&err)) else {
            break;
        };
        let y = DVector::from_column_slice(y.as_slice());
        let mut dq = jac.transpose() * y;
        let largest = dq.amax();
        if largest > opts.max_step {
            dq *= opts.max_step / largest;
        }
        for i in 0..n {
            let j = &chain.joints[i];
            q[i] = (q[i] + dq[i]).clamp(j.min, j.max);
        }
    }

    let (ep, eo, q) = best;
    if ep < opts.position_tolerance && eo < opts.orientation_tolerance {
        Ok(JointVector::new(q))
    } else {
        Err(Error::UnreachablePose {
            position: ep,
            orientation: eo,
        })
    }
}

/// A 6-DoF articulated arm with a spherical wrist, used by the synthetic suite.
pub fn six_dof_arm() -> KinematicChain {
    use std::f64::consts::{FRAC_PI_2, PI};
    let lim = |min: f64, max: f64| (min, max);
    let rows = [
        (0.0, FRAC_PI_2, 0.30, 0.0, lim(-PI, PI)),
        (0.35, 0.0, 0.0, FRAC_PI_2, lim(-PI, PI)),
        (0.0, FRAC_PI_2, 0.0, 0.0, lim(-2.8, 2.8)),
        (0.0, -FRAC_PI_2, 0.32, 0.0, lim(-PI, PI)),
        (0.0, FRAC_PI_2, 0.0, 0.0, lim(-2.5, 2.5)),
        (0.0, 0.0, 0.12, 0.0, lim(-PI, PI)),
    ];
    let joints = rows
        .iter()
        .map(|&(a, alpha, d, theta_offset, (min, max))| DhJoint {
            a,
            alpha,
            d,
            theta_offset,
            min,
            max,
        })
        .collect();
    KinematicChain::new(joints, RigidTransform::identity()).expect("valid built-in chain")
}

/// A 7-DoF arm (extra wrist roll) mounted on a shifted, yawed base.
pub fn seven_dof_arm() -> KinematicChain {
    use std::f64::consts::{FRAC_PI_2, PI};
    let rows = [
        (0.0, FRAC_PI_2, 0.28, 0.0, (-PI, PI)),
        (0.0, -FRAC_PI_2, 0.0, 0.0, (-2.2, 2.2)),
        (0.0, FRAC_PI_2, 0.30, 0.0, (-PI, PI)),
        (0.0, -FRAC_PI_2, 0.0, 0.0, (-2.6, 2.6)),
        (0.0, FRAC_PI_2, 0.28, 0.0, (-PI, PI)),
        (0.0, -FRAC_PI_2, 0.0, 0.0, (-2.2, 2.2)),
        (0.0, 0.0, 0.10, 0.0, (-PI, PI)),
    ];
    let joints = rows
        .iter()
        .map(|&(a, alpha, d, theta_offset, (min, max))| DhJoint {
            a,
            alpha,
            d,
            theta_offset,
            min,
            max,
        })
        .collect();
    let base = RigidTransform {
        rotation: rot_z(0.3),
        translation: Vec3::new(-0.05, 0.02, 0.0),
    };
    KinematicChain::new(joints, base).expect("valid built-in chain")
}

/// Orientation helper: residual angle between two orientations.
pub fn orientation_error(a: &Quaternion, b: &Quaternion) -> f64 {
    a.angle_to(*b)
}
