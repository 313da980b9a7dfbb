//! Rigid poses with unit-quaternion orientation.
//!
//! Frames are right-handed with `y` up and `z` forward. Quaternions are
//! stored `[w, x, y, z]`. A [`RelativePose`] of the teammate expressed in the
//! ego frame maps teammate-frame points into the ego frame:
//! `p_ego = R · p_mate + t`.

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    #[serde(rename = "p")]
    pub position: [f64; 3],
    #[serde(rename = "q")]
    pub orientation: [f64; 4],
}

impl Default for RelativePose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            position: [0.0; 3],
            orientation: IDENTITY_QUAT,
        }
    }

    /// Normalises the quaternion; a zero vector becomes the identity.
    pub fn new(position: [f64; 3], orientation: [f64; 4]) -> Self {
        Self {
            position,
            orientation: normalize_quat(orientation),
        }
    }

    pub fn from_unit(position: [f64; 3], q: &UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn transform_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.unit_quaternion() * Vector3::from(*p) + self.translation();
        [v.x, v.y, v.z]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RelativePose) -> RelativePose {
        let q = self.unit_quaternion() * other.unit_quaternion();
        RelativePose::from_unit(self.transform_point(&other.position), &q)
    }

    pub fn inverse(&self) -> RelativePose {
        let qi = self.unit_quaternion().inverse();
        let t = qi * -self.translation();
        RelativePose::from_unit([t.x, t.y, t.z], &qi)
    }

    /// Sign convention for reporting: `w ≥ 0`.
    pub fn canonical(&self) -> RelativePose {
        let mut out = *self;
        if out.orientation[0] < 0.0 {
            out.orientation.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    pub fn position_error(&self, other: &RelativePose) -> f64 {
        (self.translation() - other.translation()).norm()
    }

    /// Geodesic angle between the two orientations, radians.
    pub fn angle_to(&self, other: &RelativePose) -> f64 {
        self.unit_quaternion().angle_to(&other.unit_quaternion())
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        IDENTITY_QUAT
    } else {
        q.map(|v| v / n)
    }
}

/// Intrinsic yaw (about `y`), then pitch (about the new `x`), then roll
/// (about the new `z`), all in radians.
///
/// Yaw of 90° with zero pitch and roll gives `[cos 45°, 0, sin 45°, 0]`.
pub fn quat_from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> [f64; 4] {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    let q = UnitQuaternion::from_rotation_matrix(&r);
    [q.w, q.i, q.j, q.k]
}

/// Squared chordal quaternion distance `‖q̂ − q‖²`.
pub fn chordal_sq(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `2·e²·(4 − e²)` with `e² = ‖q̂ − q‖²`; sign-invariant in either argument.
///
/// For unit quaternions `4 − e² = ‖q̂ + q‖²`, and the product form is exactly
/// zero at `q̂ = ±q` and never negative.
pub fn chordal_rotation_loss(predicted: &[f64; 4], truth: &[f64; 4]) -> f64 {
    let minus = chordal_sq(predicted, truth);
    let plus: f64 = predicted.iter().zip(truth).map(|(x, y)| (x + y) * (x + y)).sum();
    2.0 * minus * plus
}
