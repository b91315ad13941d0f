use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Similarity transform `p ↦ scale · R · p + t` with `R ∈ SO(3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct Transform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    scale: f64,
}

impl TryFrom<RawTransform> for Transform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        let r = raw.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        Transform::new(rotation, Vector3::from(raw.translation), raw.scale)
    }
}

impl From<Transform> for RawTransform {
    fn from(t: Transform) -> Self {
        let m = t.rotation;
        RawTransform {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: t.translation.into(),
            scale: t.scale,
        }
    }
}

impl Transform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ORTHO_TOL) {
            return Err(Error::invalid("transform.rotation", "matrix is not orthonormal"));
        }
        if !((rotation.determinant() - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invalid("transform.rotation", "determinant is not +1"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("transform.scale", format!("{scale} is not positive")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("transform.translation", "non-finite component"));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>, scale: f64) -> Self {
        let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner();
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
            scale,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.translation = t;
        self
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_inverse(&self, p: &Point) -> Point {
        self.rotation.transpose() * (p - self.translation) / self.scale
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.transpose();
        Self {
            translation: -(rotation * self.translation) / self.scale,
            rotation,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Transform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// 4×4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}
