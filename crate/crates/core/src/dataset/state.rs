//! Raw robot states, the canonical 54-slot generalized state, and the
//! finite-difference velocities that fill its derived slots.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion, Vec3};

pub const STATE_DIM: usize = 54;

/// Named groups of the canonical state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateField {
    PE,
    OE,
    VE,
    WE,
    JRobot,
    JRobotVel,
    PH,
    OH,
    VH,
    WH,
    JH,
    Wrench,
    Gripper,
}

impl StateField {
    pub const ALL: [StateField; 13] = [
        StateField::PE,
        StateField::OE,
        StateField::VE,
        StateField::WE,
        StateField::JRobot,
        StateField::JRobotVel,
        StateField::PH,
        StateField::OH,
        StateField::VH,
        StateField::WH,
        StateField::JH,
        StateField::Wrench,
        StateField::Gripper,
    ];

    /// Slot range in the canonical layout.
    pub const fn canonical_range(self) -> Range<usize> {
        match self {
            StateField::PE => 0..3,
            StateField::OE => 3..7,
            StateField::VE => 7..10,
            StateField::WE => 10..13,
            StateField::JRobot => 13..20,
            StateField::JRobotVel => 20..27,
            StateField::PH => 27..30,
            StateField::OH => 30..34,
            StateField::VH => 34..37,
            StateField::WH => 37..40,
            StateField::JH => 40..47,
            StateField::Wrench => 47..53,
            StateField::Gripper => 53..54,
        }
    }

    pub const fn width(self) -> usize {
        let r = self.canonical_range();
        r.end - r.start
    }

    /// Velocity fields are computed from the pose/joint streams, never read.
    pub const fn derived_from(self) -> Option<StateField> {
        match self {
            StateField::VE | StateField::WE => Some(StateField::PE),
            StateField::JRobotVel => Some(StateField::JRobot),
            StateField::VH | StateField::WH => Some(StateField::PH),
            _ => None,
        }
    }
}

/// One source field of a dataset, read from `columns` and written at `slot..slot + width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub field: StateField,
    #[serde(default)]
    pub columns: Vec<String>,
    pub slot: usize,
}

impl LayoutEntry {
    pub fn range(&self) -> Range<usize> {
        self.slot..self.slot + self.field.width()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateLayout {
    pub entries: Vec<LayoutEntry>,
}

impl StateLayout {
    /// Canonical layout for the listed source fields, with `columns` per field.
    pub fn canonical(fields: &[(StateField, Vec<String>)]) -> Self {
        let mut entries: Vec<LayoutEntry> = fields
            .iter()
            .map(|(f, cols)| LayoutEntry {
                field: *f,
                columns: cols.clone(),
                slot: f.canonical_range().start,
            })
            .collect();
        for derived in StateField::ALL {
            if let Some(src) = derived.derived_from() {
                if fields.iter().any(|(f, _)| *f == src) {
                    entries.push(LayoutEntry {
                        field: derived,
                        columns: Vec::new(),
                        slot: derived.canonical_range().start,
                    });
                }
            }
        }
        entries.sort_by_key(|e| e.slot);
        Self { entries }
    }

    pub fn entry(&self, field: StateField) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.field == field)
    }

    pub fn has(&self, field: StateField) -> bool {
        self.entry(field).is_some()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let r = e.range();
            if r.end > STATE_DIM {
                return Err(Error::config(
                    format!("layout[{i}]"),
                    format!("{:?} slots {:?} exceed the {STATE_DIM}-slot vector", e.field, r),
                ));
            }
            if e.field.derived_from().is_some() {
                if !e.columns.is_empty() {
                    return Err(Error::config(
                        format!("layout[{i}]"),
                        format!("{:?} is computed and cannot be read from columns", e.field),
                    ));
                }
            } else {
                let max = e.field.width();
                let ok = match e.field {
                    StateField::JRobot | StateField::JH => {
                        !e.columns.is_empty() && e.columns.len() <= max
                    }
                    _ => e.columns.len() == max,
                };
                if !ok {
                    return Err(Error::config(
                        format!("layout[{i}].columns"),
                        format!(
                            "{:?} takes {} columns, found {}",
                            e.field,
                            max,
                            e.columns.len()
                        ),
                    ));
                }
            }
            for (j, other) in self.entries.iter().enumerate().skip(i + 1) {
                if other.field == e.field {
                    return Err(Error::config(
                        format!("layout[{j}]"),
                        format!("{:?} mapped twice", e.field),
                    ));
                }
                let o = other.range();
                if r.start < o.end && o.start < r.end {
                    return Err(Error::config(
                        format!("layout[{j}]"),
                        format!(
                            "{:?} slots {:?} overlap {:?} slots {:?}",
                            other.field, o, e.field, r
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-timestep robot state as recorded by a dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawState {
    pub timestamp: f64,
    pub p_e: [f64; 3],
    pub o_e: Quaternion,
    pub j_robot: Vec<f64>,
    pub p_h: [f64; 3],
    pub o_h: Quaternion,
    pub j_h: Vec<f64>,
    pub wrench: Option<[f64; 6]>,
    pub gripper: Option<f64>,
}

impl RawState {
    pub fn robot_pose(&self) -> Pose {
        Pose::new(Vec3::from(self.p_e), self.o_e)
    }

    pub fn haptic_pose(&self) -> Pose {
        Pose::new(Vec3::from(self.p_h), self.o_h)
    }

    /// Number of scalar values carried (26 for the six-joint form).
    pub fn element_count(&self) -> usize {
        3 + 4
            + self.j_robot.len()
            + 3
            + 4
            + self.j_h.len()
            + self.wrench.map_or(0, |_| 6)
            + self.gripper.map_or(0, |_| 1)
    }
}

/// Finite-difference rates for one timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateVelocities {
    pub v_e: Vec3,
    pub w_e: Vec3,
    pub j_robot: Vec<f64>,
    pub v_h: Vec3,
    pub w_h: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedState(pub [f64; STATE_DIM]);

impl Default for GeneralizedState {
    fn default() -> Self {
        Self([0.0; STATE_DIM])
    }
}

impl GeneralizedState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn field(&self, field: StateField) -> &[f64] {
        &self.0[field.canonical_range()]
    }

    pub fn field_mut(&mut self, field: StateField) -> &mut [f64] {
        &mut self.0[field.canonical_range()]
    }

    pub fn vec3(&self, field: StateField) -> Vec3 {
        let s = self.field(field);
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn set_vec3(&mut self, field: StateField, v: &Vec3) {
        self.field_mut(field)[..3].copy_from_slice(v.as_slice());
    }

    /// Orientation from a canonical quaternion slot group (`OE` or `OH`).
    pub fn quaternion(&self, field: StateField) -> Result<Quaternion> {
        let s = self.field(field);
        Quaternion::from_unit(s[0], s[1], s[2], s[3])
    }

    pub fn set_quaternion(&mut self, field: StateField, q: &Quaternion) {
        self.field_mut(field).copy_from_slice(&q.to_array());
    }

    pub fn robot_pose(&self) -> Result<Pose> {
        Ok(Pose::new(
            self.vec3(StateField::PE),
            self.quaternion(StateField::OE)?,
        ))
    }

    pub fn haptic_pose(&self) -> Result<Pose> {
        Ok(Pose::new(
            self.vec3(StateField::PH),
            self.quaternion(StateField::OH)?,
        ))
    }
}

fn write(out: &mut [f64; STATE_DIM], layout: &StateLayout, field: StateField, values: &[f64]) -> Result<()> {
    let Some(entry) = layout.entry(field) else {
        return Err(Error::shape(format!(
            "raw state carries {field:?} but the layout has no slot for it"
        )));
    };
    if values.len() > field.width() {
        return Err(Error::shape(format!(
            "{field:?} has {} values but only {} slots",
            values.len(),
            field.width()
        )));
    }
    out[entry.slot..entry.slot + values.len()].copy_from_slice(values);
    Ok(())
}

/// Writes a raw state and its rates into the unified vector; unmapped slots stay 0.
pub fn generalize_state(
    raw: &RawState,
    vel: &StateVelocities,
    layout: &StateLayout,
) -> Result<GeneralizedState> {
    let mut out = [0.0; STATE_DIM];
    write(&mut out, layout, StateField::PE, &raw.p_e)?;
    write(&mut out, layout, StateField::OE, &raw.o_e.to_array())?;
    write(&mut out, layout, StateField::JRobot, &raw.j_robot)?;
    write(&mut out, layout, StateField::PH, &raw.p_h)?;
    write(&mut out, layout, StateField::OH, &raw.o_h.to_array())?;
    write(&mut out, layout, StateField::JH, &raw.j_h)?;
    if let Some(w) = &raw.wrench {
        write(&mut out, layout, StateField::Wrench, w)?;
    }
    if let Some(g) = raw.gripper {
        write(&mut out, layout, StateField::Gripper, &[g])?;
    }
    for (field, values) in [
        (StateField::VE, vel.v_e.as_slice()),
        (StateField::WE, vel.w_e.as_slice()),
        (StateField::JRobotVel, vel.j_robot.as_slice()),
        (StateField::VH, vel.v_h.as_slice()),
        (StateField::WH, vel.w_h.as_slice()),
    ] {
        if layout.has(field) {
            write(&mut out, layout, field, values)?;
        }
    }
    Ok(GeneralizedState(out))
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::data(format!(
            "velocity estimation needs at least 2 timestamps, got {}",
            times.len()
        )));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::data(format!(
                "timestamps must strictly increase (t = {} then {})",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Backward differences; the first sample copies the second.
pub fn compute_velocities(times: &[f64], poses: &[Pose]) -> Result<Vec<(Vec3, Vec3)>> {
    if times.len() != poses.len() {
        return Err(Error::shape(format!(
            "{} timestamps for {} poses",
            times.len(),
            poses.len()
        )));
    }
    check_times(times)?;
    let mut out = Vec::with_capacity(poses.len());
    out.push((Vec3::zeros(), Vec3::zeros()));
    for i in 1..poses.len() {
        let dt = times[i] - times[i - 1];
        let v = (poses[i].position - poses[i - 1].position) / dt;
        let (a, b) = (poses[i - 1].orientation, poses[i].orientation);
        let w = if a == b {
            Vec3::zeros()
        } else {
            a.conjugate().mul(b).to_rotation_vector() / dt
        };
        out.push((v, w));
    }
    out[0] = out[1];
    Ok(out)
}

/// Backward differences of joint vectors, first sample copying the second.
pub fn joint_velocities(times: &[f64], joints: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    let mut out = Vec::with_capacity(joints.len());
    out.push(Vec::new());
    for i in 1..joints.len() {
        let dt = times[i] - times[i - 1];
        if joints[i].len() != joints[i - 1].len() {
            return Err(Error::shape("joint vector length changes within a clip"));
        }
        out.push(
            joints[i]
                .iter()
                .zip(&joints[i - 1])
                .map(|(a, b)| (a - b) / dt)
                .collect(),
        );
    }
    out[0] = out[1].clone();
    Ok(out)
}

/// Generalizes a whole time-ordered state stream.
pub fn generalize_sequence(raw: &[RawState], layout: &StateLayout) -> Result<Vec<GeneralizedState>> {
    let times: Vec<f64> = raw.iter().map(|s| s.timestamp).collect();
    let robot: Vec<Pose> = raw.iter().map(RawState::robot_pose).collect();
    let haptic: Vec<Pose> = raw.iter().map(RawState::haptic_pose).collect();
    let joints: Vec<Vec<f64>> = raw.iter().map(|s| s.j_robot.clone()).collect();
    let rv = compute_velocities(&times, &robot)?;
    let hv = compute_velocities(&times, &haptic)?;
    let jv = joint_velocities(&times, &joints)?;
    raw.iter()
        .enumerate()
        .map(|(i, s)| {
            let vel = StateVelocities {
                v_e: rv[i].0,
                w_e: rv[i].1,
                j_robot: jv[i].clone(),
                v_h: hv[i].0,
                w_h: hv[i].1,
            };
            generalize_state(s, &vel, layout)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::testing::random_quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cols(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn six_joint_layout() -> StateLayout {
        StateLayout::canonical(&[
            (StateField::PE, cols("pe", 3)),
            (StateField::OE, cols("oe", 4)),
            (StateField::JRobot, cols("jr", 6)),
            (StateField::PH, cols("ph", 3)),
            (StateField::OH, cols("oh", 4)),
            (StateField::JH, cols("jh", 6)),
        ])
    }

    #[test]
    fn canonical_ranges_tile_the_vector() {
        let mut covered = [0u8; STATE_DIM];
        for f in StateField::ALL {
            for s in f.canonical_range() {
                covered[s] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn six_joint_raw_state_leaves_sensor_slots_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = RawState {
            timestamp: 0.0,
            p_e: [0.1, 0.2, 0.3],
            o_e: random_quaternion(&mut rng),
            j_robot: (0..6).map(|i| 0.1 * i as f64 + 0.05).collect(),
            p_h: [0.4, 0.5, 0.6],
            o_h: random_quaternion(&mut rng),
            j_h: vec![0.3; 6],
            wrench: None,
            gripper: None,
        };
        assert_eq!(raw.element_count(), 26);
        let vel = StateVelocities {
            v_e: Vec3::new(1.0, 1.0, 1.0),
            w_e: Vec3::new(1.0, 1.0, 1.0),
            j_robot: vec![1.0; 6],
            v_h: Vec3::new(1.0, 1.0, 1.0),
            w_h: Vec3::new(1.0, 1.0, 1.0),
        };
        let g = generalize_state(&raw, &vel, &six_joint_layout()).unwrap();
        assert!(g.0[47..54].iter().all(|&v| v == 0.0));
        // Seventh joint slots stay zero.
        assert_eq!(g.0[19], 0.0);
        assert_eq!(g.0[26], 0.0);
        assert_eq!(g.0[46], 0.0);
    }

    #[test]
    fn zero_raw_state_keeps_identity_orientations() {
        let raw = RawState {
            j_robot: vec![0.0; 6],
            j_h: vec![0.0; 6],
            ..Default::default()
        };
        let g = generalize_state(&raw, &StateVelocities::default(), &six_joint_layout()).unwrap();
        for (i, v) in g.0.iter().enumerate() {
            let expected = if i == 3 || i == 30 { 1.0 } else { 0.0 };
            assert_eq!(*v, expected, "slot {i}");
        }
    }

    #[test]
    fn every_value_lands_on_its_mapped_slot() {
        // Non-canonical but disjoint placement, to audit the bookkeeping.
        let layout = StateLayout {
            entries: vec![
                LayoutEntry { field: StateField::Gripper, columns: cols("g", 1), slot: 0 },
                LayoutEntry { field: StateField::PE, columns: cols("pe", 3), slot: 1 },
                LayoutEntry { field: StateField::OE, columns: cols("oe", 4), slot: 40 },
                LayoutEntry { field: StateField::JRobot, columns: cols("jr", 7), slot: 4 },
                LayoutEntry { field: StateField::PH, columns: cols("ph", 3), slot: 11 },
                LayoutEntry { field: StateField::OH, columns: cols("oh", 4), slot: 14 },
                LayoutEntry { field: StateField::JH, columns: cols("jh", 7), slot: 18 },
                LayoutEntry { field: StateField::Wrench, columns: cols("w", 6), slot: 25 },
                LayoutEntry { field: StateField::VE, columns: vec![], slot: 31 },
            ],
        };
        layout.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let raw = RawState {
                timestamp: 0.0,
                p_e: std::array::from_fn(|_| rng.random_range(1.0..2.0)),
                o_e: random_quaternion(&mut rng),
                j_robot: (0..7).map(|_| rng.random_range(1.0..2.0)).collect(),
                p_h: std::array::from_fn(|_| rng.random_range(1.0..2.0)),
                o_h: random_quaternion(&mut rng),
                j_h: (0..7).map(|_| rng.random_range(1.0..2.0)).collect(),
                wrench: Some(std::array::from_fn(|_| rng.random_range(1.0..2.0))),
                gripper: Some(rng.random_range(1.0..2.0)),
            };
            let vel = StateVelocities {
                v_e: Vec3::new(7.0, 8.0, 9.0),
                ..Default::default()
            };
            let g = generalize_state(&raw, &vel, &layout).unwrap();
            let mut expected = [0.0; STATE_DIM];
            expected[0] = raw.gripper.unwrap();
            expected[1..4].copy_from_slice(&raw.p_e);
            expected[40..44].copy_from_slice(&raw.o_e.to_array());
            expected[4..11].copy_from_slice(&raw.j_robot);
            expected[11..14].copy_from_slice(&raw.p_h);
            expected[14..18].copy_from_slice(&raw.o_h.to_array());
            expected[18..25].copy_from_slice(&raw.j_h);
            expected[25..31].copy_from_slice(&raw.wrench.unwrap());
            expected[31..34].copy_from_slice(&[7.0, 8.0, 9.0]);
            assert_eq!(g.0, expected);
        }
    }

    #[test]
    fn layout_overlap_and_shape_errors() {
        let layout = StateLayout {
            entries: vec![
                LayoutEntry { field: StateField::PE, columns: cols("pe", 3), slot: 3 },
                LayoutEntry { field: StateField::Gripper, columns: cols("g", 1), slot: 5 },
            ],
        };
        assert!(matches!(layout.validate(), Err(Error::Config { .. })));

        let layout = StateLayout {
            entries: vec![LayoutEntry { field: StateField::Wrench, columns: cols("w", 6), slot: 50 }],
        };
        assert!(layout.validate().is_err());

        let raw = RawState {
            j_robot: vec![0.0; 6],
            j_h: vec![0.0; 6],
            gripper: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            generalize_state(&raw, &StateVelocities::default(), &six_joint_layout()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constant_pose_has_zero_velocity() {
        let times: Vec<f64> = (0..10).map(|i| i as f64 / 200.0).collect();
        let pose = Pose::new(Vec3::new(0.3, 0.1, 0.2), Quaternion::new(0.9, 0.1, 0.2, 0.3).unwrap());
        let v = compute_velocities(&times, &vec![pose; 10]).unwrap();
        assert!(v.iter().all(|(a, b)| a.norm() == 0.0 && b.norm() == 0.0));
    }

    #[test]
    fn linear_motion_velocity() {
        let times: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let poses: Vec<Pose> = times
            .iter()
            .map(|&t| Pose::new(Vec3::new(t, 0.0, 0.0), Quaternion::IDENTITY))
            .collect();
        for (v, _) in compute_velocities(&times, &poses).unwrap() {
            assert!((v - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn constant_spin_about_z() {
        let times: Vec<f64> = (0..400).map(|i| i as f64 / 200.0).collect();
        let poses: Vec<Pose> = times
            .iter()
            .map(|&t| {
                Pose::new(
                    Vec3::zeros(),
                    Quaternion::from_axis_angle(&Vec3::new(0.0, 0.0, 1.0), t),
                )
            })
            .collect();
        for (_, w) in compute_velocities(&times, &poses).unwrap() {
            assert!((w - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn duplicate_timestamps_rejected() {
        let poses = vec![Pose::default(); 3];
        assert!(compute_velocities(&[0.0, 0.1, 0.1], &poses).is_err());
        assert!(compute_velocities(&[0.0], &poses[..1]).is_err());
    }
}
