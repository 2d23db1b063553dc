//! Minimal 3-D rigid-body geometry: vectors, rotation matrices, and the
//! SO(3) exponential/logarithm.
//!
//! Rotations are stored as orthonormal matrices wrapped in [`Rotation`];
//! quaternions are deliberately kept out of the computational path (they
//! appear only in trajectory interchange files and test oracles).
//!
//! The actual formulas live in the [`gen`] submodule, written once over the
//! [`Scalar`](crate::autodiff::Scalar) abstraction so the filter rollout can
//! be differentiated; the public API here is the plain `f64` instantiation
//! with nalgebra types.

use crate::error::{CoreError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Orthonormality drift above which [`Rotation::from_matrix`] refuses input.
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Skew-symmetric (cross-product) matrix of `v`:
///
/// ```text
///            [   0  -v.z   v.y ]
/// skew(v) =  [  v.z    0  -v.x ]
///            [ -v.y   v.x    0 ]
/// ```
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map (Rodrigues form with a second-order Taylor fallback
/// below `1e-8` rad).
pub fn so3_exp(theta: &Vec3) -> Rotation {
    let m = gen::so3_exp(&[theta.x, theta.y, theta.z]);
    Rotation(mat3_from_rows(&m))
}

/// SO(3) logarithm; returns a rotation vector with norm in `[0, pi]`.
///
/// Near the angle-`pi` branch the axis is recovered from the symmetric part
/// of the matrix; at exactly `pi` the sign of the axis is a fixed convention
/// (either sign is a valid logarithm there).
pub fn so3_log(r: &Rotation) -> Vec3 {
    let v = gen::so3_log(&rows_from_mat3(r.matrix()));
    Vec3::new(v[0], v[1], v[2])
}

/// A rotation matrix guaranteed orthonormal (within [`ORTHONORMALITY_TOL`])
/// with determinant `+1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wrap a matrix, validating orthonormality and handedness.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let r = Rotation(m);
        let defect = r.ortho_defect();
        if !defect.is_finite() || defect > ORTHONORMALITY_TOL {
            return Err(CoreError::InvalidInput(format!(
                "matrix is not a rotation (orthonormality defect {defect:.3e})"
            )));
        }
        if (m.determinant() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(CoreError::InvalidInput(format!(
                "matrix is not right-handed (det {:.6})",
                m.determinant()
            )));
        }
        Ok(r)
    }

    /// Wrap a matrix that is trusted to be a rotation (e.g. the output of
    /// [`so3_exp`] or a product of existing rotations).
    #[inline]
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Inverse rotation (= transpose).
    #[inline]
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn ortho_defect(&self) -> f64 {
        let e = self.0.transpose() * self.0 - Mat3::identity();
        e.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// Pull a slightly drifted matrix back onto SO(3) with Newton iterations
    /// `R <- R (3 I - R^T R) / 2` (converges cubically for small drift).
    pub fn renormalized(&self) -> Self {
        let mut m = self.0;
        for _ in 0..8 {
            let defect = {
                let e = m.transpose() * m - Mat3::identity();
                e.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
            };
            if defect <= 1e-13 {
                break;
            }
            m = m * (Mat3::identity() * 3.0 - m.transpose() * m) * 0.5;
        }
        Rotation(m)
    }

    /// Intrinsic Z-Y-X Euler construction: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        let ry = Mat3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let rz = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        Rotation(rz * ry * rx)
    }

    /// Geodesic angle to another rotation, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        so3_log(&(self.inverse() * *other)).norm()
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        if q.w < 0.0 {
            [-q.w, -q.i, -q.j, -q.k]
        } else {
            [q.w, q.i, q.j, q.k]
        }
    }

    /// Rotation from a `(w, x, y, z)` quaternion; normalizes first.
    pub fn from_quaternion(q: &[f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(CoreError::InvalidInput(format!(
                "quaternion norm {norm} cannot be normalized"
            )));
        }
        let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        Ok(Rotation(*uq.to_rotation_matrix().matrix()))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    #[inline]
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        self.0 * v
    }
}

#[inline]
pub(crate) fn rows_from_mat3(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

#[inline]
pub(crate) fn mat3_from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

/// Scalar-generic implementations (row-major `[[R; 3]; 3]`, `[R; 3]`).
pub(crate) mod gen {
    use crate::autodiff::Scalar;

    pub type V3<R> = [R; 3];
    pub type M3<R> = [[R; 3]; 3];

    /// Below this angle the exponential switches to its Taylor expansion.
    pub const EXP_SMALL_ANGLE: f64 = 1e-8;
    /// Below this value of `|sin(angle)|` the logarithm leaves the generic
    /// branch (small-angle series on one side, symmetric-part extraction
    /// near `pi` on the other).
    const LOG_SMALL_SIN: f64 = 1e-4;

    #[inline]
    pub fn v3_lit<R: Scalar>(v: &[f64; 3]) -> V3<R> {
        [R::lit(v[0]), R::lit(v[1]), R::lit(v[2])]
    }

    #[inline]
    pub fn m3_lit<R: Scalar>(m: &[[f64; 3]; 3]) -> M3<R> {
        [v3_lit(&m[0]), v3_lit(&m[1]), v3_lit(&m[2])]
    }

    #[inline]
    pub fn zero3<R: Scalar>() -> V3<R> {
        [R::lit(0.0); 3]
    }

    #[inline]
    pub fn m3_identity<R: Scalar>() -> M3<R> {
        let (o, l) = (R::lit(0.0), R::lit(1.0));
        [[l, o, o], [o, l, o], [o, o, l]]
    }

    #[inline]
    pub fn v3_add<R: Scalar>(a: &V3<R>, b: &V3<R>) -> V3<R> {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    #[inline]
    pub fn v3_sub<R: Scalar>(a: &V3<R>, b: &V3<R>) -> V3<R> {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    pub fn v3_scale<R: Scalar>(a: &V3<R>, s: R) -> V3<R> {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    #[inline]
    pub fn v3_dot<R: Scalar>(a: &V3<R>, b: &V3<R>) -> R {
        a[0].mul_add(b[0], a[1].mul_add(b[1], a[2] * b[2]))
    }

    #[inline]
    pub fn v3_norm<R: Scalar>(a: &V3<R>) -> R {
        v3_dot(a, a).sqrt()
    }

    #[inline]
    pub fn v3_cross<R: Scalar>(a: &V3<R>, b: &V3<R>) -> V3<R> {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[inline]
    pub fn skew<R: Scalar>(v: &V3<R>) -> M3<R> {
        let o = R::lit(0.0);
        [
            [o, -v[2], v[1]],
            [v[2], o, -v[0]],
            [-v[1], v[0], o],
        ]
    }

    pub fn m3_mul<R: Scalar>(a: &M3<R>, b: &M3<R>) -> M3<R> {
        let mut out = [[R::lit(0.0); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] =
                    a[i][0].mul_add(b[0][j], a[i][1].mul_add(b[1][j], a[i][2] * b[2][j]));
            }
        }
        out
    }

    pub fn m3_mul_vec<R: Scalar>(m: &M3<R>, v: &V3<R>) -> V3<R> {
        [
            v3_dot(&m[0], v),
            v3_dot(&m[1], v),
            v3_dot(&m[2], v),
        ]
    }

    /// `m^T v` without materializing the transpose.
    pub fn m3_tmul_vec<R: Scalar>(m: &M3<R>, v: &V3<R>) -> V3<R> {
        [
            m[0][0].mul_add(v[0], m[1][0].mul_add(v[1], m[2][0] * v[2])),
            m[0][1].mul_add(v[0], m[1][1].mul_add(v[1], m[2][1] * v[2])),
            m[0][2].mul_add(v[0], m[1][2].mul_add(v[1], m[2][2] * v[2])),
        ]
    }

    #[inline]
    pub fn m3_transpose<R: Scalar>(m: &M3<R>) -> M3<R> {
        [
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ]
    }

    #[inline]
    pub fn m3_add<R: Scalar>(a: &M3<R>, b: &M3<R>) -> M3<R> {
        [
            v3_add(&a[0], &b[0]),
            v3_add(&a[1], &b[1]),
            v3_add(&a[2], &b[2]),
        ]
    }

    #[inline]
    pub fn m3_scale<R: Scalar>(m: &M3<R>, s: R) -> M3<R> {
        [
            v3_scale(&m[0], s),
            v3_scale(&m[1], s),
            v3_scale(&m[2], s),
        ]
    }

    /// Rodrigues rotation: `I + A [v]x + B [v]x^2` with
    /// `A = sin(t)/t`, `B = (1 - cos(t))/t^2`, and their second-order Taylor
    /// expansions below [`EXP_SMALL_ANGLE`].
    pub fn so3_exp<R: Scalar>(v: &V3<R>) -> M3<R> {
        let t2 = v3_dot(v, v);
        let t = t2.sqrt();
        let (a, b) = if t.value() < EXP_SMALL_ANGLE {
            (
                R::lit(1.0) - t2 / R::lit(6.0),
                R::lit(0.5) - t2 / R::lit(24.0),
            )
        } else {
            (t.sin() / t, (R::lit(1.0) - t.cos()) / t2)
        };
        let k = skew(v);
        let k2 = m3_mul(&k, &k);
        m3_add(
            &m3_identity(),
            &m3_add(&m3_scale(&k, a), &m3_scale(&k2, b)),
        )
    }

    /// Left Jacobian of SO(3): `J_l = I + (1-cos t)/t^2 K + (t-sin t)/t^3 K^2`
    /// with `K = skew(v)`, `t = |v|`. It maps tangent-space translation
    /// increments onto the group action in the SE_2(3) exponential.
    pub fn so3_left_jacobian<R: Scalar>(v: &V3<R>) -> M3<R> {
        let t2 = v3_dot(v, v);
        let t = t2.sqrt();
        let (a, b) = if t.value() < EXP_SMALL_ANGLE {
            (
                R::lit(0.5) - t2 / R::lit(24.0),
                R::lit(1.0 / 6.0) - t2 / R::lit(120.0),
            )
        } else {
            (
                (R::lit(1.0) - t.cos()) / t2,
                (t - t.sin()) / (t2 * t),
            )
        };
        let k = skew(v);
        let k2 = m3_mul(&k, &k);
        m3_add(
            &m3_identity(),
            &m3_add(&m3_scale(&k, a), &m3_scale(&k2, b)),
        )
    }

    /// Inverse of [`so3_exp`]; the returned vector has norm in `[0, pi]`.
    pub fn so3_log<R: Scalar>(m: &M3<R>) -> V3<R> {
        let half = R::lit(0.5);
        // Antisymmetric part: sin(angle) * axis.
        let a = [
            (m[2][1] - m[1][2]) * half,
            (m[0][2] - m[2][0]) * half,
            (m[1][0] - m[0][1]) * half,
        ];
        let tr = m[0][0] + m[1][1] + m[2][2];
        let mut c = (tr - R::lit(1.0)) * half;
        if c.value() > 1.0 {
            c = R::lit(1.0);
        } else if c.value() < -1.0 {
            c = R::lit(-1.0);
        }
        let s = v3_norm(&a);

        if s.value() >= LOG_SMALL_SIN {
            // Generic branch: angle/sin(angle) rescale of the antisymmetric
            // part. The angle comes from atan2(s, c) rather than acos(c):
            // near small angles acos amplifies trace rounding by 1/s, which
            // is visible in downstream per-meter rotation metrics.
            let angle = if c.value() > 0.0 {
                (s / c).atan()
            } else if c.value() < 0.0 {
                R::lit(std::f64::consts::PI) - (s / (R::lit(0.0) - c)).atan()
            } else {
                R::lit(std::f64::consts::FRAC_PI_2)
            };
            return v3_scale(&a, angle / s);
        }
        if c.value() > 0.0 {
            // Small angle: angle/sin(angle) = 1 + s^2/6 + 7 s^4/360 + O(s^6).
            let s2 = s * s;
            let factor = R::lit(1.0) + s2 * (R::lit(1.0 / 6.0) + s2 * R::lit(7.0 / 360.0));
            return v3_scale(&a, factor);
        }

        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part, for which (B - cI)/(1 - c) = n n^T.
        let angle = c.acos();
        let one_minus_c = R::lit(1.0) - c;
        let diag = [
            (m[0][0] - c) / one_minus_c,
            (m[1][1] - c) / one_minus_c,
            (m[2][2] - c) / one_minus_c,
        ];
        let k = if diag[0].value() >= diag[1].value() && diag[0].value() >= diag[2].value() {
            0
        } else if diag[1].value() >= diag[2].value() {
            1
        } else {
            2
        };
        let dk = if diag[k].value() > 0.0 {
            diag[k]
        } else {
            R::lit(0.0)
        };
        let mut n = zero3::<R>();
        n[k] = dk.sqrt();
        for i in 0..3 {
            if i != k {
                // Off-diagonal of the symmetric part gives n_i * n_k.
                let sym = (m[i][k] + m[k][i]) * half;
                n[i] = sym / (one_minus_c * n[k]);
            }
        }
        // The antisymmetric part, however tiny, still carries the sign of
        // sin(angle) * axis; align with it when it is meaningful. At exactly
        // pi either sign is a valid logarithm and the built axis is kept.
        if v3_dot(&a, &n).value() < 0.0 {
            n = v3_scale(&n, R::lit(-1.0));
        }
        v3_scale(&n, angle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand_core::{RngCore, SeedableRng};

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// Uniform in [-1, 1) from a seeded stream.
    fn unit_draws(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 * (2.0f64).powi(-52) - 1.0
    }

    fn random_axis_angle(rng: &mut rand_chacha::ChaCha8Rng, max_angle: f64) -> Vec3 {
        loop {
            let v = Vec3::new(unit_draws(rng), unit_draws(rng), unit_draws(rng));
            let n = v.norm();
            if n > 1e-6 && n <= 1.0 {
                let angle = (unit_draws(rng) * 0.5 + 0.5) * max_angle;
                return v * (angle / n);
            }
        }
    }

    #[test]
    fn skew_matches_cross_product() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let w = Vec3::new(-0.3, 0.7, 0.2);
        assert_relative_eq!(skew(&v) * w, v.cross(&w), epsilon = 1e-15);
        let k = skew(&v);
        assert_eq!(k + k.transpose(), Mat3::zeros());
        assert_eq!(k[(0, 1)], -3.0);
        assert_eq!(k[(1, 0)], 3.0);
        assert_eq!(k[(0, 2)], 2.0);
    }

    #[test]
    fn exp_quarter_turn_about_z_sends_x_to_y() {
        let r = so3_exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let e1 = Vec3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(r * e1, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_tiny_angle_uses_taylor_branch() {
        let v = Vec3::new(1e-12, -2e-12, 0.5e-12);
        let r = so3_exp(&v);
        let first_order = Mat3::identity() + skew(&v);
        assert!(max_abs_diff(r.matrix(), &first_order) < 1e-18);
    }

    #[test]
    fn log_of_half_turn_has_norm_pi() {
        let r = so3_exp(&Vec3::new(0.0, 0.0, std::f64::consts::PI));
        let v = so3_log(&r);
        assert_relative_eq!(v.norm(), std::f64::consts::PI, epsilon = 1e-6);
        // Axis must be +/- z.
        assert!(v.x.abs() < 1e-6 && v.y.abs() < 1e-6);
    }

    #[test]
    fn exp_matches_quaternion_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v = random_axis_angle(&mut rng, 3.1);
            let r = so3_exp(&v);
            let q = UnitQuaternion::from_scaled_axis(v);
            let expect = q.to_rotation_matrix();
            assert!(
                max_abs_diff(r.matrix(), expect.matrix()) < 1e-12,
                "exp disagrees with quaternion oracle for {v:?}"
            );
        }
    }

    #[test]
    fn exp_is_orthonormal_up_to_large_angles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let v = random_axis_angle(&mut rng, 10.0);
            let r = so3_exp(&v);
            assert!(r.ortho_defect() < 1e-12);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn near_pi_round_trip_recovers_the_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let angle = std::f64::consts::PI - 1e-5 * (unit_draws(&mut rng) * 0.5 + 0.5);
            let mut axis = Vec3::new(
                unit_draws(&mut rng),
                unit_draws(&mut rng),
                unit_draws(&mut rng),
            );
            if axis.norm() < 1e-3 {
                axis = Vec3::new(1.0, 0.0, 0.0);
            }
            axis /= axis.norm();
            let r = so3_exp(&(axis * angle));
            let back = so3_exp(&so3_log(&r));
            assert!(
                max_abs_diff(r.matrix(), back.matrix()) < 1e-8,
                "round trip off near pi (angle {angle})"
            );
        }
    }

    #[test]
    fn from_matrix_rejects_sheared_input() {
        let mut m = Mat3::identity();
        m[(0, 1)] = 1e-3;
        assert!(Rotation::from_matrix(m).is_err());
    }

    #[test]
    fn renormalize_repairs_small_drift() {
        let r = so3_exp(&Vec3::new(0.3, -0.2, 0.9));
        let drifted = Rotation::from_matrix_unchecked(r.matrix() + Mat3::from_element(1e-7));
        assert!(drifted.ortho_defect() > 1e-8);
        let fixed = drifted.renormalized();
        assert!(fixed.ortho_defect() < 1e-12);
        // Still close to the original rotation.
        assert!(max_abs_diff(fixed.matrix(), r.matrix()) < 1e-6);
    }

    #[test]
    fn rpy_composition_order_is_z_then_y_then_x() {
        let r = Rotation::from_rpy(0.1, -0.2, 0.3);
        let expect = so3_exp(&Vec3::new(0.0, 0.0, 0.3))
            * so3_exp(&Vec3::new(0.0, -0.2, 0.0))
            * so3_exp(&Vec3::new(0.1, 0.0, 0.0));
        assert!(max_abs_diff(r.matrix(), expect.matrix()) < 1e-12);
    }

    #[test]
    fn generic_exp_gradient_matches_finite_differences() {
        use crate::autodiff::Tape;
        // d/dx of every matrix entry of exp([x, 0.4, -0.2]) at x = 0.3.
        let (y, z) = (0.4, -0.2);
        let eval = |x: f64| gen::so3_exp::<f64>(&[x, y, z]);
        let h = 1e-6;
        let (plus, minus) = (eval(0.3 + h), eval(0.3 - h));
        let tape = Tape::new();
        let x = tape.input(0.3);
        let m = gen::so3_exp(&[x, crate::autodiff::Var::Const(y), crate::autodiff::Var::Const(z)]);
        for i in 0..3 {
            for j in 0..3 {
                let grads = tape.backward(m[i][j]);
                let fd = (plus[i][j] - minus[i][j]) / (2.0 * h);
                assert_relative_eq!(grads.by_input(0), fd, epsilon = 1e-8, max_relative = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(
            x in -1.0f64..1.0,
            y in -1.0f64..1.0,
            z in -1.0f64..1.0,
            scale in 0.0f64..1.0,
        ) {
            let dir = Vec3::new(x, y, z);
            prop_assume!(dir.norm() > 1e-3);
            let v = dir / dir.norm() * (scale * (std::f64::consts::PI - 0.1));
            let back = so3_log(&so3_exp(&v));
            prop_assert!((back - v).norm() <= 1e-9, "round trip error {}", (back - v).norm());
        }

        #[test]
        fn compose_with_inverse_is_identity(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            z in -3.0f64..3.0,
        ) {
            let r = so3_exp(&Vec3::new(x, y, z));
            let ident = r * r.inverse();
            prop_assert!(max_abs_diff(ident.matrix(), &Mat3::identity()) < 1e-13);
        }
    }
}
