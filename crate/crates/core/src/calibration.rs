//! Force-sensor calibration: frame alignment, gravity / tool compensation and
//! rod attenuation scaling.
//!
//! `F_ee = s · (R·F_fs − (G(R)·g0 + t0))` where `R` is the rotation part of the
//! sensor-to-tool transform and `G(R)` is `Rᵀ` (default) or `R`, selected by
//! [`GravityFrame`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};

/// Which rotation maps the gravity term into the tool frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GravityFrame {
    /// Apply the inverse transform to `g0`.
    #[default]
    Inverse,
    /// Apply the forward transform to `g0`.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    #[serde(default = "default_attenuation")]
    pub attenuation: f64,
    #[serde(default)]
    pub gravity_comp: [f64; 3],
    #[serde(default)]
    pub tool_bias: [f64; 3],
    #[serde(default)]
    pub gravity_frame: GravityFrame,
}

fn default_attenuation() -> f64 {
    1.0
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            attenuation: 1.0,
            gravity_comp: [0.0; 3],
            tool_bias: [0.0; 3],
            gravity_frame: GravityFrame::Inverse,
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation.is_finite() && self.attenuation > 0.0) {
            return Err(Error::config(
                "calibration.attenuation",
                format!("must be finite and > 0, got {}", self.attenuation),
            ));
        }
        if self
            .gravity_comp
            .iter()
            .chain(&self.tool_bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("calibration", "non-finite compensation term"));
        }
        Ok(())
    }

    fn g0(&self) -> Vec3 {
        Vec3::from(self.gravity_comp)
    }

    fn t0(&self) -> Vec3 {
        Vec3::from(self.tool_bias)
    }

    fn gravity_rotation(&self, r: &Mat3) -> Mat3 {
        match self.gravity_frame {
            GravityFrame::Inverse => r.transpose(),
            GravityFrame::Forward => *r,
        }
    }

    /// Offset subtracted from the rotated reading, before scaling.
    fn compensation(&self, r: &Mat3) -> Vec3 {
        self.gravity_rotation(r) * self.g0() + self.t0()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub timestamp: f64,
    pub raw: [f64; 3],
    pub calibrated: Option<[f64; 3]>,
}

pub fn calibrate_force(raw: &Vec3, t: &RigidTransform, params: &CalibrationParams) -> Vec3 {
    let r = &t.rotation;
    params.attenuation * (r * raw - params.compensation(r))
}

/// Sensor reading that calibrates to `force`; exact algebraic inverse of [`calibrate_force`].
pub fn raw_from_calibrated(force: &Vec3, t: &RigidTransform, params: &CalibrationParams) -> Vec3 {
    let r = &t.rotation;
    r.transpose() * (force / params.attenuation + params.compensation(r))
}

/// Calibrates a whole series in place; `transforms` pairs one-to-one with samples.
pub fn calibrate_series(
    samples: &mut [ForceSample],
    transforms: &[RigidTransform],
    params: &CalibrationParams,
) -> Result<()> {
    if samples.len() != transforms.len() {
        return Err(Error::data(format!(
            "{} force samples but {} transforms",
            samples.len(),
            transforms.len()
        )));
    }
    for w in samples.windows(2) {
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::data(format!(
                "force timestamps decrease at t = {}",
                w[1].timestamp
            )));
        }
    }
    for (s, t) in samples.iter_mut().zip(transforms) {
        s.calibrated = Some(calibrate_force(&Vec3::from(s.raw), t, params).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasEstimate {
    pub gravity_comp: Vec3,
    pub tool_bias: Vec3,
    pub residual_rms: f64,
}

impl BiasEstimate {
    /// Merges the estimate into existing params, keeping attenuation and gravity frame.
    pub fn apply_to(&self, params: &CalibrationParams) -> CalibrationParams {
        CalibrationParams {
            gravity_comp: self.gravity_comp.into(),
            tool_bias: self.tool_bias.into(),
            ..*params
        }
    }
}

/// Least-squares `(g0, t0)` from no-load readings, minimizing
/// `Σ ‖R·F − (G(R)·g0 + t0)‖²`.
pub fn estimate_bias(
    noload: &[(RigidTransform, Vec3)],
    gravity_frame: GravityFrame,
) -> Result<BiasEstimate> {
    if noload.len() < 6 {
        return Err(Error::UnderdeterminedCalibration(format!(
            "need at least 6 no-load samples, got {}",
            noload.len()
        )));
    }
    let params = CalibrationParams {
        gravity_frame,
        ..Default::default()
    };
    let rows = 3 * noload.len();
    let mut a = DMatrix::<f64>::zeros(rows, 6);
    let mut b = DVector::<f64>::zeros(rows);
    for (k, (t, f)) in noload.iter().enumerate() {
        let g = params.gravity_rotation(&t.rotation);
        let rf = t.rotation * f;
        for r in 0..3 {
            for c in 0..3 {
                a[(3 * k + r, c)] = g[(r, c)];
            }
            a[(3 * k + r, 3 + r)] = 1.0;
            b[3 * k + r] = rf[r];
        }
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-8 * smax.max(1.0) {
        return Err(Error::UnderdeterminedCalibration(format!(
            "orientation set is rank deficient (singular values {smax:e} .. {smin:e}); \
             use at least three non-coplanar orientations"
        )));
    }
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::UnderdeterminedCalibration(e.to_string()))?;
    let residual = &a * &x - &b;
    Ok(BiasEstimate {
        gravity_comp: Vec3::new(x[0], x[1], x[2]),
        tool_bias: Vec3::new(x[3], x[4], x[5]),
        residual_rms: (residual.norm_squared() / rows as f64).sqrt(),
    })
}
