//! Quaternion and SO(3) kernels.
//!
//! Convention: scalar-first `(w, x, y, z)`, Hamilton product, and
//! [`rotation_matrix`] maps body-frame vectors into the inertial frame.
//! Quaternion kinematics use body rates: `q̇ = ½ G(q) ω`.

use nalgebra::{Matrix3, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Deviation from unit norm beyond which [`Quaternion::normalize`] rescales.
pub const RENORMALIZE_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Unit-norm copy. Zero quaternions map to the identity.
    pub fn normalize(self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::identity();
        }
        if (n - 1.0).abs() <= RENORMALIZE_THRESHOLD {
            return self;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Representative of `±self` in the hemisphere of `reference`.
    pub fn aligned_with(self, reference: Self) -> Self {
        if self.dot(reference) < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

fn debug_check_unit(q: Quaternion) {
    debug_assert!(
        (q.norm() - 1.0).abs() <= 1e-9,
        "quaternion not normalized: |q| = {}",
        q.norm()
    );
}

/// Body-to-inertial rotation `𝒬(q)`.
pub fn rotation_matrix(q: Quaternion) -> Matrix3<f64> {
    debug_check_unit(q);
    let r = rotation_kernel(&q.to_array());
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Attitude Jacobian `G(q)`, so that `q̇ = ½ G(q) ω`.
pub fn attitude_jacobian(q: Quaternion) -> Matrix4x3<f64> {
    debug_check_unit(q);
    let Quaternion { w, x, y, z } = q;
    Matrix4x3::new(
        -x, -y, -z, //
        w, -z, y, //
        z, w, -x, //
        -y, x, w,
    )
}

/// Skew-symmetric cross-product matrix: `hat(v) u = v × u`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

// Generic kernels used by the model code. They operate on raw arrays so the
// same code path runs on f64 and on dual numbers.

pub(crate) fn rotation_kernel<S: Scalar>(q: &[S; 4]) -> [[S; 3]; 3] {
    let [w, x, y, z] = *q;
    let two = 2.0;
    [
        [
            S::one() - (y * y + z * z) * two,
            (x * y - w * z) * two,
            (x * z + w * y) * two,
        ],
        [
            (x * y + w * z) * two,
            S::one() - (x * x + z * z) * two,
            (y * z - w * x) * two,
        ],
        [
            (x * z - w * y) * two,
            (y * z + w * x) * two,
            S::one() - (x * x + y * y) * two,
        ],
    ]
}

/// `𝒬(q) v`.
pub(crate) fn rotate<S: Scalar>(r: &[[S; 3]; 3], v: &[S; 3]) -> [S; 3] {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

/// `𝒬ᵀ(q) v` for a constant inertial-frame vector.
pub(crate) fn rotate_transpose_const<S: Scalar>(r: &[[S; 3]; 3], v: &[f64; 3]) -> [S; 3] {
    std::array::from_fn(|j| r[0][j] * v[0] + r[1][j] * v[1] + r[2][j] * v[2])
}

/// `½ G(q) ω`.
pub(crate) fn quaternion_rate<S: Scalar>(q: &[S; 4], w: &[S; 3]) -> [S; 4] {
    let [qw, qx, qy, qz] = *q;
    let [wx, wy, wz] = *w;
    [
        (-qx * wx - qy * wy - qz * wz) * 0.5,
        (qw * wx - qz * wy + qy * wz) * 0.5,
        (qz * wx + qw * wy - qx * wz) * 0.5,
        (-qy * wx + qx * wy + qw * wz) * 0.5,
    ]
}

/// `a × b`.
pub(crate) fn cross<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rescales the quaternion block `x[3..7]` of a flattened state to unit norm.
pub(crate) fn normalize_quaternion_block<S: Scalar>(x: &mut [S; 13]) {
    let n2 = x[3] * x[3] + x[4] * x[4] + x[5] * x[5] + x[6] * x[6];
    if !(n2.value() > 0.0) || !n2.value().is_finite() {
        return;
    }
    if (n2.value().sqrt() - 1.0).abs() <= RENORMALIZE_THRESHOLD {
        return;
    }
    let n = n2.sqrt();
    for xi in x[3..7].iter_mut() {
        *xi = *xi / n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(rng: &mut impl Rng) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = q.norm();
            if n > 1e-3 && n <= 1.0 {
                return Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n);
            }
        }
    }

    #[test]
    fn identity_and_half_yaw() {
        assert_eq!(rotation_matrix(Quaternion::identity()), Matrix3::identity());
        let r = rotation_matrix(Quaternion::new(0.0, 0.0, 0.0, 1.0));
        assert!((r - Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn rotation_is_orthonormal_and_double_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let q = random_unit(&mut rng);
            let r = rotation_matrix(q);
            assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r - rotation_matrix(-q)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rotation_agrees_with_hamilton_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = random_unit(&mut rng);
            let v = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let conj = Quaternion::new(q.w, -q.x, -q.y, -q.z);
            let p = q.mul(Quaternion::new(0.0, v.x, v.y, v.z)).mul(conj);
            let rv = rotation_matrix(q) * v;
            assert!((rv - Vector3::new(p.x, p.y, p.z)).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobian_pure_yaw_at_identity() {
        let qdot = 0.5 * attitude_jacobian(Quaternion::identity()) * Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(qdot, Vector4::new(0.0, 0.0, 0.0, 0.5));
    }

    #[test]
    fn jacobian_columns_orthogonal_to_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let q = random_unit(&mut rng);
            let row = q.to_vector().transpose() * attitude_jacobian(q);
            assert!(row.abs().max() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_kernel_and_hamilton_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let q = random_unit(&mut rng);
            let w = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let a = 0.5 * attitude_jacobian(q) * w;
            let b = quaternion_rate(&q.to_array(), &[w.x, w.y, w.z]);
            let c = q.mul(Quaternion::new(0.0, w.x, w.y, w.z));
            for i in 0..4 {
                assert!((a[i] - b[i]).abs() < 1e-15);
                assert!((a[i] - 0.5 * c.to_array()[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_turn_returns_to_identity() {
        let mut q = Quaternion::identity();
        let w = Vector3::new(0.0, 0.0, 2.0 * std::f64::consts::PI);
        let h = 1e-4;
        for _ in 0..10_000 {
            let qd = 0.5 * attitude_jacobian(q) * w;
            q = Quaternion::new(q.w + h * qd[0], q.x + h * qd[1], q.y + h * qd[2], q.z + h * qd[3])
                .normalize();
        }
        // One full turn maps q to -q on the double cover.
        let err = (q.to_vector() - Quaternion::identity().to_vector())
            .norm()
            .min((q.to_vector() + Quaternion::identity().to_vector()).norm());
        assert!(err < 1e-2, "err = {err}");
    }

    #[test]
    fn hat_is_cross_product() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let e = hat(&Vector3::x()) * Vector3::y();
        assert_eq!(e, Vector3::z());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let u = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let hv = hat(&v);
            let c = cross(&[v.x, v.y, v.z], &[u.x, u.y, u.z]);
            assert!((hv * u - Vector3::from(c)).abs().max() < 1e-15);
            assert_eq!(hv + hv.transpose(), Matrix3::zeros());
        }
    }

    #[test]
    fn normalize_reaches_unit_norm() {
        let q = Quaternion::new(3.0, -1.0, 0.5, 2.0).normalize();
        assert!((q.norm() - 1.0).abs() < 1e-12);
        assert_eq!(Quaternion::new(0.0, 0.0, 0.0, 0.0).normalize(), Quaternion::identity());
    }
}
