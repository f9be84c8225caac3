//! Minimal 3D math types for the rigid-body simulation.
//!
//! Hand-rolled rather than pulled from a linear-algebra crate so the core
//! stays `no_std` and every floating-point operation is explicit, which keeps
//! rollouts bitwise reproducible.

use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);
    pub const X: Vec3 = vec3(1.0, 0.0, 0.0);
    pub const Y: Vec3 = vec3(0.0, 1.0, 0.0);
    pub const Z: Vec3 = vec3(0.0, 0.0, 1.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            Vec3::ZERO
        }
    }

    /// Componentwise product.
    pub fn scale(self, o: Vec3) -> Vec3 {
        vec3(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Any unit vector orthogonal to `self` (which must be nonzero).
    pub fn any_orthogonal(self) -> Vec3 {
        let a = if libm::fabs(self.x) < 0.9 { Vec3::X } else { Vec3::Y };
        self.cross(a).normalized()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn diagonal(d: Vec3) -> Mat3 {
        Mat3 {
            m: [[d.x, 0.0, 0.0], [0.0, d.y, 0.0], [0.0, 0.0, d.z]],
        }
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 {
            m: [[r0.x, r0.y, r0.z], [r1.x, r1.y, r1.z], [r2.x, r2.y, r2.z]],
        }
    }

    pub fn row(&self, i: usize) -> Vec3 {
        vec3(self.m[i][0], self.m[i][1], self.m[i][2])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        vec3(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        Mat3::from_rows(self.col(0), self.col(1), self.col(2))
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        vec3(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = Mat3::IDENTITY;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.row(i).dot(o.col(j));
            }
        }
        r
    }

    pub fn inverse(&self) -> Mat3 {
        let c0 = self.col(1).cross(self.col(2));
        let c1 = self.col(2).cross(self.col(0));
        let c2 = self.col(0).cross(self.col(1));
        let det = self.col(0).dot(self.col(1).cross(self.col(2)));
        // Rows of the inverse are the cofactor columns over det.
        Mat3::from_rows(c0 / det, c1 / det, c2 / det)
    }

    /// `a * b^T` outer product.
    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        Mat3::from_rows(b * a.x, b * a.y, b * a.z)
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] += o.m[i][j];
            }
        }
        r
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, s: f64) -> Mat3 {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] *= s;
            }
        }
        r
    }
}

/// Unit quaternion, `w + xi + yj + zk`, representing a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let half = 0.5 * angle;
        let s = libm::sin(half);
        let a = axis.normalized();
        Quat {
            w: libm::cos(half),
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn mul_quat(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotate a vector by this quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = vec3(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Rotate a vector by the inverse rotation.
    pub fn rotate_inv(self, v: Vec3) -> Vec3 {
        self.conjugate().rotate(v)
    }

    pub fn to_mat3(self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::from_rows(
            vec3(
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ),
            vec3(
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ),
            vec3(
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ),
        )
    }

    /// Rotation-vector (axis * angle) that takes `self` to `target`,
    /// expressed in world frame. Small for nearby orientations.
    pub fn rotation_to(self, target: Quat) -> Vec3 {
        let mut d = target.mul_quat(self.conjugate());
        if d.w < 0.0 {
            d = Quat::new(-d.w, -d.x, -d.y, -d.z);
        }
        let v = vec3(d.x, d.y, d.z);
        let s = v.norm();
        if s < 1e-12 {
            return Vec3::ZERO;
        }
        let angle = 2.0 * libm::atan2(s, d.w);
        v * (angle / s)
    }

    /// Integrate an angular velocity (world frame) over dt.
    pub fn integrate(self, omega: Vec3, dt: f64) -> Quat {
        let dq = Quat {
            w: 0.0,
            x: omega.x,
            y: omega.y,
            z: omega.z,
        };
        let q = dq.mul_quat(self);
        Quat {
            w: self.w + 0.5 * dt * q.w,
            x: self.x + 0.5 * dt * q.x,
            y: self.y + 0.5 * dt * q.y,
            z: self.z + 0.5 * dt * q.z,
        }
        .normalized()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rigid transform: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation: Quat::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Quat, translation: Vec3) -> Transform {
        Transform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn compose(&self, o: &Transform) -> Transform {
        Transform {
            rotation: self.rotation.mul_quat(o.rotation).normalized(),
            translation: self.apply(o.translation),
        }
    }

    pub fn inverse(&self) -> Transform {
        let inv = self.rotation.conjugate();
        Transform {
            rotation: inv,
            translation: inv.rotate(-self.translation),
        }
    }
}

/// 2D point used for planar position tracking.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

pub const fn vec2(x: f64, y: f64) -> Vec2 {
    Vec2 { x, y }
}

impl Vec2 {
    pub const ZERO: Vec2 = vec2(0.0, 0.0);

    pub fn norm(self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        vec2(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        vec2(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        vec2(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        vec2(self.x / s, self.y / s)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        *self = *self + o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quat_rotation_matches_matrix() {
        let q = Quat::from_axis_angle(vec3(1.0, 2.0, -0.5), 0.83);
        let v = vec3(0.3, -1.2, 2.0);
        let rq = q.rotate(v);
        let rm = q.to_mat3().mul_vec(v);
        assert_abs_diff_eq!(rq.x, rm.x, epsilon = 1e-12);
        assert_abs_diff_eq!(rq.y, rm.y, epsilon = 1e-12);
        assert_abs_diff_eq!(rq.z, rm.z, epsilon = 1e-12);
    }

    #[test]
    fn roll_90_about_x_sends_down_to_minus_y() {
        // A body rolled +90 deg about x sees world "down" along its -y axis.
        let q = Quat::from_axis_angle(Vec3::X, core::f64::consts::FRAC_PI_2);
        let g_local = q.rotate_inv(vec3(0.0, 0.0, -1.0));
        assert_abs_diff_eq!(g_local.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g_local.y, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g_local.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mat3_inverse_roundtrip() {
        let m = Mat3::from_rows(vec3(2.0, 0.3, 0.1), vec3(0.3, 1.5, -0.2), vec3(0.1, -0.2, 0.9));
        let p = m.mul_mat(&m.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(p.m[i][j], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotation_to_recovers_axis_angle() {
        let a = Quat::from_axis_angle(Vec3::Y, 0.2);
        let b = Quat::from_axis_angle(Vec3::Y, 0.5);
        let rv = a.rotation_to(b);
        assert_abs_diff_eq!(rv.y, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(rv.x, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_compose_inverse() {
        let t = Transform::new(
            Quat::from_axis_angle(vec3(0.1, 1.0, 0.3), 1.1),
            vec3(0.5, -0.2, 0.7),
        );
        let p = vec3(1.0, 2.0, 3.0);
        let back = t.inverse().apply(t.apply(p));
        assert_abs_diff_eq!(back.x, p.x, epsilon = 1e-12);
        assert_abs_diff_eq!(back.y, p.y, epsilon = 1e-12);
        assert_abs_diff_eq!(back.z, p.z, epsilon = 1e-12);
    }
}
