//! Shared domain types: poses, states, reference trajectories, control
//! sequences, and cost weighting.

use nalgebra::{DVector, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Tolerance on quaternion norm accepted at construction and validation.
pub const QUAT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TypeError {
    #[error("quaternion norm {norm} departs from 1 by more than {QUAT_NORM_TOL}")]
    QuatNorm { norm: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// Validation failures reported by [`validate_reference`], one code per
/// invariant. `frame` is the first offending frame where applicable.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ValidationError {
    #[error("dt must be positive, got {dt}")]
    NonpositiveDt { dt: f64 },
    #[error("source_rate_hz must be positive, got {rate}")]
    NonpositiveRate { rate: f64 },
    #[error("reference needs at least 2 frames (T >= 1), got {frames}")]
    TooFewFrames { frames: usize },
    #[error("frame {frame}: joint dimension {got} does not match n_u = {expected}")]
    DimensionMismatch {
        frame: usize,
        got: usize,
        expected: usize,
    },
    #[error("frame {frame}: {field} quaternion norm {norm} outside tolerance")]
    QuatNorm {
        frame: usize,
        field: &'static str,
        norm: f64,
    },
    #[error("frame {frame}: non-finite value in {field}")]
    NonFinite { frame: usize, field: &'static str },
}

/// Rigid-body pose: position plus unit quaternion, canonicalized to w >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from raw components, quaternion in (w, x, y, z) order.
    /// Rejects norms off unity by more than [`QUAT_NORM_TOL`], then
    /// renormalizes the residual and flips sign so that w >= 0.
    pub fn from_wxyz(position: Vector3<f64>, wxyz: [f64; 4]) -> Result<Self, TypeError> {
        let [w, x, y, z] = wxyz;
        if !(position.iter().all(|v| v.is_finite()) && wxyz.iter().all(|v| v.is_finite())) {
            return Err(TypeError::NonFinite { what: "pose" });
        }
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(TypeError::QuatNorm { norm });
        }
        Ok(Self::from_parts(
            position,
            UnitQuaternion::new_normalize(q),
        ))
    }

    /// Canonicalizes an already-unit quaternion (sign flip to w >= 0).
    pub fn from_parts(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        let orientation = if orientation.w < 0.0 {
            UnitQuaternion::new_unchecked(-orientation.into_inner())
        } else {
            orientation
        };
        Self {
            position,
            orientation,
        }
    }

    /// Quaternion components in (w, x, y, z) order.
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    fn check_quat(&self) -> Result<(), TypeError> {
        let norm = self.orientation.quaternion().norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(TypeError::QuatNorm { norm });
        }
        Ok(())
    }
}

/// Position and geodesic rotation distance between two poses.
///
/// The rotation distance is `arccos(clamp(2<q_a, q_b>^2 - 1, -1, 1))`,
/// which is invariant to the sign of either quaternion and lies in [0, pi].
pub fn pose_distance(a: &Pose, b: &Pose) -> Result<(f64, f64), TypeError> {
    a.check_quat()?;
    b.check_quat()?;
    let pos_err = (a.position - b.position).norm();
    let dot = a.orientation.quaternion().dot(b.orientation.quaternion());
    let rot_err = (2.0 * dot * dot - 1.0).clamp(-1.0, 1.0).acos();
    Ok((pos_err, rot_err))
}

/// Full kinematic state of one scene frame: robot joints + base, object
/// pose, and the matching velocities. Velocity vectors pack (linear,
/// angular). Worlds without a free object carry identity/zero object slots.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub joint_pos: DVector<f64>,
    pub joint_vel: DVector<f64>,
    pub base_pose: Pose,
    pub base_vel: Vector6<f64>,
    pub object_pose: Pose,
    pub object_vel: Vector6<f64>,
}

impl State {
    /// All-zero state with identity poses for a robot with `n_u` joints.
    pub fn zeros(n_u: usize) -> Self {
        Self {
            joint_pos: DVector::zeros(n_u),
            joint_vel: DVector::zeros(n_u),
            base_pose: Pose::identity(),
            base_vel: Vector6::zeros(),
            object_pose: Pose::identity(),
            object_vel: Vector6::zeros(),
        }
    }

    pub fn n_u(&self) -> usize {
        self.joint_pos.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joint_pos.iter().all(|v| v.is_finite())
            && self.joint_vel.iter().all(|v| v.is_finite())
            && self.base_pose.position.iter().all(|v| v.is_finite())
            && self.base_vel.iter().all(|v| v.is_finite())
            && self.object_pose.position.iter().all(|v| v.is_finite())
            && self.object_vel.iter().all(|v| v.is_finite())
            && self
                .base_pose
                .orientation
                .quaternion()
                .coords
                .iter()
                .all(|v| v.is_finite())
            && self
                .object_pose
                .orientation
                .quaternion()
                .coords
                .iter()
                .all(|v| v.is_finite())
    }
}

/// Time-indexed kinematic targets: T+1 frames at fixed `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    pub source_rate_hz: f64,
    pub frames: Vec<State>,
}

impl ReferenceTrajectory {
    pub fn new(dt: f64, source_rate_hz: f64, frames: Vec<State>) -> Self {
        Self {
            dt,
            source_rate_hz,
            frames,
        }
    }

    /// Number of transitions T (frames - 1).
    pub fn t_steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    /// Sub-trajectory covering frames `[start, start + len]` inclusive,
    /// i.e. `len` transitions.
    pub fn window(&self, start: usize, len: usize) -> ReferenceTrajectory {
        ReferenceTrajectory {
            dt: self.dt,
            source_rate_hz: self.source_rate_hz,
            frames: self.frames[start..=start + len].to_vec(),
        }
    }
}

/// Checks dimensions, dt, quaternion norms, and finiteness; reports the
/// first violation together with its frame index.
pub fn validate_reference(
    traj: &ReferenceTrajectory,
    n_u: usize,
) -> Result<(), ValidationError> {
    if !(traj.dt > 0.0) {
        return Err(ValidationError::NonpositiveDt { dt: traj.dt });
    }
    if !(traj.source_rate_hz > 0.0) {
        return Err(ValidationError::NonpositiveRate {
            rate: traj.source_rate_hz,
        });
    }
    if traj.frames.len() < 2 {
        return Err(ValidationError::TooFewFrames {
            frames: traj.frames.len(),
        });
    }
    for (i, frame) in traj.frames.iter().enumerate() {
        if frame.joint_pos.len() != n_u || frame.joint_vel.len() != n_u {
            return Err(ValidationError::DimensionMismatch {
                frame: i,
                got: frame.joint_pos.len(),
                expected: n_u,
            });
        }
        for (field, pose) in [("base", &frame.base_pose), ("object", &frame.object_pose)] {
            let norm = pose.orientation.quaternion().norm();
            if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
                return Err(ValidationError::QuatNorm {
                    frame: i,
                    field,
                    norm,
                });
            }
        }
        if !frame.is_finite() {
            return Err(ValidationError::NonFinite {
                frame: i,
                field: "state",
            });
        }
    }
    Ok(())
}

/// Decision variable of the optimizer: a T x n_u matrix of control rows.
/// At the optimization level each row is a joint-setpoint delta from the
/// reference; the dynamics layer consumes absolute setpoint rows of the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    data: nalgebra::DMatrix<f64>,
}

impl ControlSequence {
    pub fn zeros(t_steps: usize, n_u: usize) -> Self {
        Self {
            data: nalgebra::DMatrix::zeros(t_steps, n_u),
        }
    }

    pub fn from_matrix(data: nalgebra::DMatrix<f64>) -> Self {
        Self { data }
    }

    pub fn t_steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.data.row(t).iter().copied().collect()
    }

    pub fn matrix(&self) -> &nalgebra::DMatrix<f64> {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut nalgebra::DMatrix<f64> {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps every row into the per-joint bound box.
    pub fn clamp_to(&mut self, bounds: &[(f64, f64)]) {
        for t in 0..self.data.nrows() {
            for (j, &(lo, hi)) in bounds.iter().enumerate() {
                let v = self.data[(t, j)];
                self.data[(t, j)] = v.clamp(lo, hi);
            }
        }
    }

    /// True if every entry lies inside the per-joint bounds.
    pub fn within_bounds(&self, bounds: &[(f64, f64)]) -> bool {
        (0..self.data.nrows()).all(|t| {
            bounds
                .iter()
                .enumerate()
                .all(|(j, &(lo, hi))| self.data[(t, j)] >= lo && self.data[(t, j)] <= hi)
        })
    }
}

/// Diagonal weights of the tracking objective. Pose blocks of the object
/// use the split position/rotation weights; `q_vel` applies uniformly to
/// all velocity blocks; the terminal weight is `q_terminal_scale` times
/// the stage weight.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub q_robot: f64,
    pub q_object_pos: f64,
    pub q_object_rot: f64,
    pub q_vel: f64,
    pub q_terminal_scale: f64,
    pub r_control: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            q_robot: 1.0,
            q_object_pos: 200.0,
            q_object_rot: 5.0,
            q_vel: 1e-3,
            q_terminal_scale: 5.0,
            r_control: 0.1,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<(), TypeError> {
        let all = [
            self.q_robot,
            self.q_object_pos,
            self.q_object_rot,
            self.q_vel,
            self.q_terminal_scale,
            self.r_control,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TypeError::NonFinite {
                what: "weighting config (weights must be finite and >= 0)",
            });
        }
        Ok(())
    }

    /// Uniform scaling of every weight, used by scale-invariance tests.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            q_robot: self.q_robot * s,
            q_object_pos: self.q_object_pos * s,
            q_object_rot: self.q_object_rot * s,
            q_vel: self.q_vel * s,
            // terminal scale is a multiplier on Q_t, not a weight itself
            q_terminal_scale: self.q_terminal_scale,
            r_control: self.r_control * s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn pose_at(p: [f64; 3], wxyz: [f64; 4]) -> Pose {
        Pose::from_wxyz(Vector3::new(p[0], p[1], p[2]), wxyz).unwrap()
    }

    #[test]
    fn identical_poses_have_zero_distance() {
        let a = pose_at([0.3, -0.2, 1.0], [1.0, 0.0, 0.0, 0.0]);
        let (p, r) = pose_distance(&a, &a).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn three_four_five_position_error() {
        let a = pose_at([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let b = pose_at([0.0, 3.0, 4.0], [1.0, 0.0, 0.0, 0.0]);
        let (p, r) = pose_distance(&a, &b).unwrap();
        assert_relative_eq!(p, 5.0, max_relative = 1e-12);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn quarter_turn_about_z_is_half_pi() {
        let a = pose_at([0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let b = pose_at([0.0; 3], [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2]);
        let (_, r) = pose_distance(&a, &b).unwrap();
        assert_relative_eq!(r, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn rotation_error_ignores_quaternion_sign() {
        let a = pose_at([0.0; 3], [0.8, 0.6, 0.0, 0.0]);
        let mut b = a;
        b.orientation = UnitQuaternion::new_unchecked(-b.orientation.into_inner());
        let (_, r) = pose_distance(&a, &b).unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn pose_distance_is_symmetric_and_bounded() {
        let a = pose_at([1.0, 2.0, 3.0], [0.5, 0.5, 0.5, 0.5]);
        let b = pose_at([0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let (pa, ra) = pose_distance(&a, &b).unwrap();
        let (pb, rb) = pose_distance(&b, &a).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        assert!((0.0..=std::f64::consts::PI).contains(&ra));
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        assert!(matches!(
            Pose::from_wxyz(Vector3::zeros(), [0.5, 0.0, 0.0, 0.0]),
            Err(TypeError::QuatNorm { .. })
        ));
        let mut bad = Pose::identity();
        bad.orientation =
            UnitQuaternion::new_unchecked(Quaternion::new(0.5, 0.0, 0.0, 0.0));
        assert!(pose_distance(&bad, &Pose::identity()).is_err());
    }

    #[test]
    fn construction_canonicalizes_w_sign() {
        let p = pose_at([0.0; 3], [-FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2]);
        assert!(p.quat_wxyz()[0] >= 0.0);
    }

    fn well_formed(frames: usize, n_u: usize) -> ReferenceTrajectory {
        ReferenceTrajectory::new(0.02, 50.0, vec![State::zeros(n_u); frames])
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(validate_reference(&well_formed(10, 3), 3).is_ok());
    }

    #[test]
    fn validate_reports_quat_norm_with_frame() {
        let mut traj = well_formed(10, 3);
        traj.frames[3].object_pose.orientation =
            UnitQuaternion::new_unchecked(Quaternion::new(0.5, 0.0, 0.0, 0.0));
        match validate_reference(&traj, 3) {
            Err(ValidationError::QuatNorm { frame: 3, .. }) => {}
            other => panic!("expected QuatNorm at frame 3, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_nonpositive_dt() {
        let mut traj = well_formed(10, 3);
        traj.dt = 0.0;
        assert!(matches!(
            validate_reference(&traj, 3),
            Err(ValidationError::NonpositiveDt { .. })
        ));
    }

    #[test]
    fn validate_rejects_dimension_mismatch() {
        let traj = well_formed(4, 2);
        assert!(matches!(
            validate_reference(&traj, 3),
            Err(ValidationError::DimensionMismatch { frame: 0, .. })
        ));
    }

    #[test]
    fn control_sequence_clamp_and_bounds() {
        let mut u = ControlSequence::zeros(3, 2);
        u.matrix_mut()[(1, 0)] = 2.0;
        u.matrix_mut()[(2, 1)] = -5.0;
        let bounds = [(-1.0, 1.0), (-1.0, 1.0)];
        assert!(!u.within_bounds(&bounds));
        u.clamp_to(&bounds);
        assert!(u.within_bounds(&bounds));
        assert_eq!(u.matrix()[(1, 0)], 1.0);
        assert_eq!(u.matrix()[(2, 1)], -1.0);
    }
}
