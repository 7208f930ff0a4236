//! Unit quaternions, the 3-vector log map used as the rotation regression
//! target, and the pose error metrics.
//!
//! Quaternions are stored scalar-first, `[w, x, y, z]`, and a [`Pose`] always
//! holds the representative with `w >= 0`.

use std::ops::{Mul, Neg};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

/// Below this vector-part norm the log map returns exactly zero.
pub const LOG_GUARD: f64 = 1e-12;

/// Tolerance on `| |q| - 1 |` for inputs that must already be unit length.
pub fn unit_tolerance<T: Scalar>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(16.0))
}

impl<T: Scalar> Quaternion<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [T; 3], angle: T) -> Result<Self> {
        let n = norm3(axis);
        if !(n > T::zero()) {
            return Err(Error::InvalidArgument("rotation axis has zero length".into()));
        }
        let half = angle / T::lit(2.0);
        let s = half.sin() / n;
        Ok(Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s))
    }

    pub fn vector(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: Self) -> T {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// The representative of the same rotation with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < T::zero() {
            -self
        } else {
            self
        }
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - T::one()).abs() <= unit_tolerance::<T>()
    }

    /// Rotates a 3-vector (assumes unit length).
    pub fn rotate(self, v: [T; 3]) -> [T; 3] {
        let m = self.to_rotation_matrix();
        [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    /// Row-major rotation matrix of a unit quaternion. Every entry is a
    /// quadratic form in the components, so `q` and `-q` give identical bits.
    pub fn to_rotation_matrix(self) -> [[T; 3]; 3] {
        let Self { w, x, y, z } = self;
        let two = T::lit(2.0);
        [
            [
                T::one() - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                T::one() - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                T::one() - two * (x * x + y * y),
            ],
        ]
    }

    /// Unit quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: [[T; 3]; 3]) -> Self {
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self::new(
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            )
        };
        q.normalized().unwrap_or_else(|_| Self::identity())
    }

    pub fn cast<U: Scalar>(self) -> Quaternion<U> {
        Quaternion::from_array(self.to_array().map(|v| U::lit(v.to_f64_lossy())))
    }
}

impl<T: Scalar> Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Hamilton product.
impl<T: Scalar> Mul for Quaternion<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Axis direction scaled by `arccos(w)`; `|v| <= pi/2` for canonical inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRotation<T>(pub [T; 3]);

impl<T: Scalar> LogRotation<T> {
    pub fn norm(self) -> T {
        norm3(self.0)
    }
}

/// Log map `(v / |v|) * arccos(w)` of a unit quaternion.
///
/// Inputs with `w < 0` are first replaced by `-q`. The angle is evaluated as
/// `atan2(|v|, w)`, which equals `arccos(w)` on the unit sphere and keeps full
/// precision near the identity.
pub fn quat_log<T: Scalar>(q: Quaternion<T>) -> Result<LogRotation<T>> {
    if !q.is_unit() {
        return Err(Error::InvalidArgument(format!(
            "quat_log needs a unit quaternion, |q| = {}",
            q.norm()
        )));
    }
    let q = q.canonical();
    let v = q.vector();
    let vn = norm3(v);
    if vn < T::lit(LOG_GUARD) {
        return Ok(LogRotation([T::zero(); 3]));
    }
    let angle = vn.atan2(q.w);
    Ok(LogRotation(v.map(|c| c / vn * angle)))
}

/// Inverse of [`quat_log`]: `[cos|w|, (w/|w|) sin|w|]`.
pub fn quat_exp<T: Scalar>(w: LogRotation<T>) -> Quaternion<T> {
    let n = w.norm();
    if n == T::zero() {
        return Quaternion::identity();
    }
    let s = n.sin() / n;
    Quaternion::new(n.cos(), w.0[0] * s, w.0[1] * s, w.0[2] * s)
}

/// Geodesic angle between two rotations in degrees; insensitive to the
/// quaternion sign.
///
/// Equal to `2 * arccos(|q1 . q2|)`. With `q2` flipped onto the hemisphere of
/// `q1`, the half-angle is recovered as `2 * atan2(|q1 - q2|, |q1 + q2|)`,
/// which is exact for identical rotations and well conditioned near them.
pub fn rotation_error_deg<T: Scalar>(q1: Quaternion<T>, q2: Quaternion<T>) -> T {
    let q2 = if q1.dot(q2) < T::zero() { -q2 } else { q2 };
    let diff = Quaternion::new(q1.w - q2.w, q1.x - q2.x, q1.y - q2.y, q1.z - q2.z).norm();
    let sum = Quaternion::new(q1.w + q2.w, q1.x + q2.x, q1.y + q2.y, q1.z + q2.z).norm();
    (T::lit(4.0) * diff.atan2(sum)).to_degrees()
}

pub fn translation_error<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

pub(crate) fn norm3<T: Scalar>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Translation plus canonical unit rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    translation: [T; 3],
    rotation: Quaternion<T>,
}

impl<T: Scalar> Pose<T> {
    /// Canonicalizes the rotation, normalizing it first unless it is already
    /// unit length within [`unit_tolerance`]. Leaving unit inputs untouched
    /// makes text serialization round-trip bit-exactly.
    pub fn new(translation: [T; 3], rotation: Quaternion<T>) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite translation {translation:?}")));
        }
        let rotation = if rotation.is_unit() {
            rotation
        } else {
            rotation.normalized()?
        };
        Ok(Self {
            translation,
            rotation: rotation.canonical(),
        })
    }

    pub fn translation(&self) -> [T; 3] {
        self.translation
    }

    pub fn rotation(&self) -> Quaternion<T> {
        self.rotation
    }

    pub fn log_rotation(&self) -> LogRotation<T> {
        quat_log(self.rotation).expect("pose rotation is unit length")
    }

    /// Serialization order `tx, ty, tz, qw, qx, qy, qz`.
    pub fn to_array(&self) -> [T; 7] {
        let [tx, ty, tz] = self.translation;
        let [qw, qx, qy, qz] = self.rotation.to_array();
        [tx, ty, tz, qw, qx, qy, qz]
    }

    pub fn from_array(a: [T; 7]) -> Result<Self> {
        Self::new([a[0], a[1], a[2]], Quaternion::new(a[3], a[4], a[5], a[6]))
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose {
            translation: self.translation.map(|v| U::lit(v.to_f64_lossy())),
            rotation: self.rotation.cast(),
        }
    }
}
