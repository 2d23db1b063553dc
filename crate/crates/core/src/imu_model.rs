//! IMU measurement error model: deterministic scale / misalignment /
//! cross-coupling / bias distortion, stochastic corruption for protocol
//! studies, and the learned per-axis correction that (approximately) inverts
//! it.
//!
//! The deterministic forward model stacks into the block matrix
//!
//! ```text
//!     [ S_w M_w   A   ]        gyro  = S_w M_w w + A a + b_w + noise
//! C = [                ]  =>
//!     [   0     S_a M_a]        accel = S_a M_a a     + b_a + noise
//! ```
//!
//! where `S` are diagonal scale factors, `M` unit-diagonal misalignments and
//! `A` the acceleration-to-gyro cross-coupling. The learned correction is a
//! per-axis diagonal approximation of `C^-1` plus a subtracted bias term:
//! `corrected_i = c_inv_i * raw_i - bias_i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::geom3d::{Mat3, Vec3};
use crate::rng::SeededStream;

/// Scale applied to the network's correction logits: each per-axis inverse
/// gain is `10^(BETA_SCALE * y)`, so outputs in [-1, 1] map to gains in
/// roughly [0.79, 1.26].
pub const BETA_SCALE: f64 = 0.1;

/// Standard gravity magnitude (m/s^2), along -z of the world frame.
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// One timestamped IMU measurement (angular velocity rad/s, specific force
/// m/s^2, both in the sensor frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Deterministic sensor-error parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorModel {
    /// Gyro scale factors (diagonal of `S_w`).
    pub gyro_scale: Vec3,
    /// Gyro misalignment (unit diagonal).
    pub gyro_misalign: Mat3,
    /// Acceleration-to-gyro cross-coupling (`A`, g-sensitivity).
    pub accel_to_gyro: Mat3,
    /// Constant gyro bias.
    pub gyro_bias: Vec3,
    /// Accelerometer scale factors (diagonal of `S_a`).
    pub accel_scale: Vec3,
    /// Accelerometer misalignment (unit diagonal).
    pub accel_misalign: Mat3,
    /// Constant accelerometer bias.
    pub accel_bias: Vec3,
}

impl ErrorModel {
    /// A perfect sensor: unit scales, no misalignment, no coupling, no bias.
    pub fn identity() -> Self {
        ErrorModel {
            gyro_scale: Vec3::new(1.0, 1.0, 1.0),
            gyro_misalign: Mat3::identity(),
            accel_to_gyro: Mat3::zeros(),
            gyro_bias: Vec3::zeros(),
            accel_scale: Vec3::new(1.0, 1.0, 1.0),
            accel_misalign: Mat3::identity(),
            accel_bias: Vec3::zeros(),
        }
    }

    /// Apply the deterministic part of the error model to a clean sample.
    pub fn distort(&self, clean: &ImuSample) -> ImuSample {
        let sm_w = Mat3::from_diagonal(&self.gyro_scale) * self.gyro_misalign;
        let sm_a = Mat3::from_diagonal(&self.accel_scale) * self.accel_misalign;
        ImuSample {
            t: clean.t,
            gyro: sm_w * clean.gyro + self.accel_to_gyro * clean.accel + self.gyro_bias,
            accel: sm_a * clean.accel + self.accel_bias,
        }
    }
}

/// Stochastic corruption protocol: white noise per sample plus one uniform
/// bias draw per sequence per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Gyro noise standard deviation, rad/s.
    pub gyro_noise_std: f64,
    /// Per-axis gyro bias drawn uniformly from this range, rad/s.
    pub gyro_bias_range: (f64, f64),
    /// Accelerometer noise standard deviation, m/s^2.
    pub accel_noise_std: f64,
    /// Per-axis accelerometer bias drawn uniformly from this range, m/s^2.
    pub accel_bias_range: (f64, f64),
    /// Seed for the corruption stream.
    pub seed: u64,
}

impl CorruptionSpec {
    /// The low-cost-sensor protocol used throughout: gyro noise std 1e-3
    /// rad/s with biases in [0.015, 0.025], accel noise std 1e-2 m/s^2 with
    /// biases in [0.45, 0.55].
    pub fn kitti_lowcost(seed: u64) -> Self {
        CorruptionSpec {
            gyro_noise_std: 1e-3,
            gyro_bias_range: (0.015, 0.025),
            accel_noise_std: 1e-2,
            accel_bias_range: (0.45, 0.55),
            seed,
        }
    }
}

/// The bias values actually drawn for a sequence (recorded in sidecar files
/// so corrupted datasets are auditable).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasDraw {
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
}

/// Corrupt a sequence: distort deterministically, then add the drawn
/// sequence bias and per-sample white noise.
///
/// Draw order is fixed: gyro bias x/y/z, accel bias x/y/z, then per sample
/// gyro noise x/y/z followed by accel noise x/y/z — all from one ChaCha8
/// stream seeded with `spec.seed`, so the output is identical across runs
/// and platforms.
pub fn corrupt(
    samples: &[ImuSample],
    model: &ErrorModel,
    spec: &CorruptionSpec,
) -> (Vec<ImuSample>, BiasDraw) {
    let mut rng = SeededStream::new(spec.seed);
    let (glo, ghi) = spec.gyro_bias_range;
    let (alo, ahi) = spec.accel_bias_range;
    let draw = BiasDraw {
        gyro: [
            rng.uniform(glo, ghi),
            rng.uniform(glo, ghi),
            rng.uniform(glo, ghi),
        ],
        accel: [
            rng.uniform(alo, ahi),
            rng.uniform(alo, ahi),
            rng.uniform(alo, ahi),
        ],
    };
    let gyro_bias = Vec3::new(draw.gyro[0], draw.gyro[1], draw.gyro[2]);
    let accel_bias = Vec3::new(draw.accel[0], draw.accel[1], draw.accel[2]);

    let out = samples
        .iter()
        .map(|s| {
            let mut d = model.distort(s);
            let gn = Vec3::new(
                rng.gaussian_std(spec.gyro_noise_std),
                rng.gaussian_std(spec.gyro_noise_std),
                rng.gaussian_std(spec.gyro_noise_std),
            );
            let an = Vec3::new(
                rng.gaussian_std(spec.accel_noise_std),
                rng.gaussian_std(spec.accel_noise_std),
                rng.gaussian_std(spec.accel_noise_std),
            );
            d.gyro += gyro_bias + gn;
            d.accel += accel_bias + an;
            d
        })
        .collect();
    (out, draw)
}

/// Per-axis measurement correction: `corrected_i = c_inv_i * raw_i - bias_i`
/// with gyro axes in slots 0..3 and accel axes in slots 3..6.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub c_inv_diag: [f64; 6],
    pub bias: [f64; 6],
}

impl Correction {
    /// Leaves measurements untouched.
    pub fn identity() -> Self {
        Correction {
            c_inv_diag: [1.0; 6],
            bias: [0.0; 6],
        }
    }
}

/// Apply a correction to a raw sample.
pub fn apply_correction(raw: &ImuSample, corr: &Correction) -> ImuSample {
    let g = corrected_axes(
        &[raw.gyro.x, raw.gyro.y, raw.gyro.z, raw.accel.x, raw.accel.y, raw.accel.z],
        &corr.c_inv_diag,
        &corr.bias,
    );
    ImuSample {
        t: raw.t,
        gyro: Vec3::new(g[0], g[1], g[2]),
        accel: Vec3::new(g[3], g[4], g[5]),
    }
}

/// Decode a correction from the network's scale logits `y_c` and bias head
/// `y_b`: `c_inv_i = 10^(beta_s * y_c_i)`, `bias_i = y_b_i`.
pub fn decode_correction(y_c: &[f64; 6], y_b: &[f64; 6], beta_s: f64) -> Correction {
    Correction {
        c_inv_diag: decode_gains(y_c, beta_s),
        bias: *y_b,
    }
}

/// Shared decode of the per-axis inverse gains (used by both the plain and
/// the recorded evaluation paths).
pub(crate) fn decode_gains<R: Scalar>(y_c: &[R; 6], beta_s: f64) -> [R; 6] {
    std::array::from_fn(|i| (y_c[i] * R::lit(beta_s)).pow10())
}

/// Axis-wise correction application shared with the differentiable rollout.
pub(crate) fn corrected_axes<R: Scalar>(raw: &[R; 6], c_inv: &[R; 6], bias: &[R; 6]) -> [R; 6] {
    std::array::from_fn(|i| c_inv[i].mul_add(raw[i], -bias[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample(t: f64, g: [f64; 3], a: [f64; 3]) -> ImuSample {
        ImuSample {
            t,
            gyro: Vec3::new(g[0], g[1], g[2]),
            accel: Vec3::new(a[0], a[1], a[2]),
        }
    }

    #[test]
    fn distort_applies_scale_coupling_and_bias() {
        let mut model = ErrorModel::identity();
        model.gyro_scale = Vec3::new(1.1, 0.9, 1.0);
        model.accel_to_gyro = Mat3::from_diagonal(&Vec3::new(0.01, 0.0, 0.0));
        model.gyro_bias = Vec3::new(0.02, 0.0, 0.0);
        let s = sample(0.0, [0.5, -0.3, 0.1], [2.0, 0.0, 9.81]);
        let d = model.distort(&s);
        assert_relative_eq!(d.gyro.x, 1.1 * 0.5 + 0.01 * 2.0 + 0.02, epsilon = 1e-15);
        assert_relative_eq!(d.gyro.y, 0.9 * -0.3, epsilon = 1e-15);
        assert_relative_eq!(d.accel.z, 9.81, epsilon = 1e-15);
    }

    #[test]
    fn diagonal_corruption_has_an_exact_inverse() {
        // Diagonal scale + fixed bias, no noise: the matching correction must
        // recover the clean samples to fp precision.
        let mut model = ErrorModel::identity();
        model.gyro_scale = Vec3::new(1.05, 0.97, 1.02);
        model.gyro_bias = Vec3::new(0.02, -0.01, 0.015);
        model.accel_scale = Vec3::new(0.99, 1.03, 1.01);
        model.accel_bias = Vec3::new(0.5, 0.48, -0.52);
        let spec = CorruptionSpec {
            gyro_noise_std: 0.0,
            gyro_bias_range: (0.0, 0.0),
            accel_noise_std: 0.0,
            accel_bias_range: (0.0, 0.0),
            seed: 1,
        };
        let clean: Vec<ImuSample> = (0..50)
            .map(|k| {
                let t = k as f64 * 0.01;
                sample(t, [t.sin(), 0.3 * t.cos(), -0.2], [0.1, 9.7 * t.cos(), 9.81])
            })
            .collect();
        let (raw, _) = corrupt(&clean, &model, &spec);
        let corr = Correction {
            c_inv_diag: [
                1.0 / 1.05,
                1.0 / 0.97,
                1.0 / 1.02,
                1.0 / 0.99,
                1.0 / 1.03,
                1.0 / 1.01,
            ],
            bias: [
                0.02 / 1.05,
                -0.01 / 0.97,
                0.015 / 1.02,
                0.5 / 0.99,
                0.48 / 1.03,
                -0.52 / 1.01,
            ],
        };
        for (r, c) in raw.iter().zip(&clean) {
            let rec = apply_correction(r, &corr);
            assert_relative_eq!(rec.gyro, c.gyro, epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(rec.accel, c.accel, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn decode_gain_reference_values() {
        let corr = decode_correction(&[1.0; 6], &[0.0; 6], BETA_SCALE);
        for g in corr.c_inv_diag {
            assert_relative_eq!(g, 1.2589254117941673, epsilon = 1e-15);
        }
        let corr = decode_correction(&[-1.0; 6], &[0.0; 6], BETA_SCALE);
        for g in corr.c_inv_diag {
            assert_relative_eq!(g, 0.7943282347242815, epsilon = 1e-15);
        }
        // Zero logits and zero bias: the identity correction.
        let corr = decode_correction(&[0.0; 6], &[0.0; 6], BETA_SCALE);
        assert_eq!(corr, Correction::identity());
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let clean: Vec<ImuSample> =
            (0..200).map(|k| sample(k as f64 * 0.01, [0.1, 0.0, 0.05], [0.0, 0.0, 9.81])).collect();
        let spec = CorruptionSpec::kitti_lowcost(99);
        let (a, da) = corrupt(&clean, &ErrorModel::identity(), &spec);
        let (b, db) = corrupt(&clean, &ErrorModel::identity(), &spec);
        assert_eq!(a, b);
        assert_eq!(da, db);
        let (c, _) = corrupt(&clean, &ErrorModel::identity(), &CorruptionSpec::kitti_lowcost(100));
        assert_ne!(a, c);
    }

    #[test]
    fn sequence_bias_is_constant_and_in_range() {
        let clean: Vec<ImuSample> =
            (0..5000).map(|k| sample(k as f64 * 0.01, [0.0; 3], [0.0; 3])).collect();
        let spec = CorruptionSpec::kitti_lowcost(5);
        let (raw, draw) = corrupt(&clean, &ErrorModel::identity(), &spec);
        for axis in 0..3 {
            assert!((0.015..=0.025).contains(&draw.gyro[axis]), "gyro draw {draw:?}");
            assert!((0.45..=0.55).contains(&draw.accel[axis]), "accel draw {draw:?}");
            // Empirical mean of the corrupted samples recovers the bias.
            let mean = raw.iter().map(|s| s.gyro[axis]).sum::<f64>() / raw.len() as f64;
            assert!(
                (mean - draw.gyro[axis]).abs() < 5e-5,
                "axis {axis}: mean {mean} vs draw {}",
                draw.gyro[axis]
            );
        }
    }

    #[test]
    fn noise_std_matches_spec_roughly() {
        let clean: Vec<ImuSample> =
            (0..20_000).map(|k| sample(k as f64 * 0.01, [0.0; 3], [0.0; 3])).collect();
        let (raw, draw) = corrupt(&clean, &ErrorModel::identity(), &CorruptionSpec::kitti_lowcost(17));
        let vals: Vec<f64> = raw.iter().map(|s| s.gyro.x - draw.gyro[0]).collect();
        let var = vals.iter().map(|x| x * x).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((var.sqrt() - 1e-3).abs() / 1e-3 < 0.05, "std {}", var.sqrt());
    }
}
