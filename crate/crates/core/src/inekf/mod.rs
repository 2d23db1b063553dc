//! Right-invariant error-state Kalman filter for strapdown IMU navigation.
//!
//! The estimated state is world attitude / velocity / position, gyro and
//! accelerometer biases, and the rotation + lever arm of a constrained body
//! point (e.g. a wheel contact or rigidly mounted sensor) relative to the
//! IMU. Propagation integrates bias-corrected IMU samples with explicit
//! Euler steps; the only measurement is the pseudo-observation that the
//! constrained point's lateral and vertical body-frame velocity is zero,
//! whose noise can be re-tuned per step by an external adaptor.
//!
//! The generic arithmetic lives in [`gen`] (shared between `f64` and the
//! autodiff tape); this module is the plain-`f64` front end with input
//! validation, rotation renormalization and non-finite detection.

pub(crate) mod gen;

use crate::datasets::Trajectory;
use crate::error::{CoreError, Result};
use crate::geom3d::{mat3_from_rows, rows_from_mat3, Rotation, Vec3};
use crate::imu_model::ImuSample;
use serde::{Deserialize, Serialize};

/// Dimension of the error state:
/// `[dR, dv, dp, dbw, dba, dRc, dpc]`, three components each.
pub const ERROR_DIM: usize = gen::DIM;

pub type CovMatrix = nalgebra::SMatrix<f64, 21, 21>;

#[inline]
fn a3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[inline]
fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Full filter state (the "mean" of the estimate).
#[derive(Clone, Copy, Debug)]
pub struct FilterState {
    /// Body-to-world attitude.
    pub r: Rotation,
    /// World-frame velocity (m/s).
    pub v: Vec3,
    /// World-frame position (m).
    pub p: Vec3,
    /// Gyroscope bias (rad/s).
    pub bw: Vec3,
    /// Accelerometer bias (m/s^2).
    pub ba: Vec3,
    /// Rotation from the constrained-point frame to the body frame.
    pub rc: Rotation,
    /// Lever arm of the constrained point in the body frame (m).
    pub pc: Vec3,
}

impl FilterState {
    /// State with the given pose/velocity, zero biases and identity
    /// extrinsics.
    pub fn new(r: Rotation, v: Vec3, p: Vec3) -> Self {
        Self {
            r,
            v,
            p,
            bw: Vec3::zeros(),
            ba: Vec3::zeros(),
            rc: Rotation::identity(),
            pc: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.matrix().iter().all(|x| x.is_finite())
            && self.rc.matrix().iter().all(|x| x.is_finite())
            && [&self.v, &self.p, &self.bw, &self.ba, &self.pc]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn to_gen(&self) -> gen::StateG<f64> {
        gen::StateG {
            r: rows_from_mat3(self.r.matrix()),
            v: a3(&self.v),
            p: a3(&self.p),
            bw: a3(&self.bw),
            ba: a3(&self.ba),
            rc: rows_from_mat3(self.rc.matrix()),
            pc: a3(&self.pc),
        }
    }

    pub(crate) fn from_gen(s: &gen::StateG<f64>) -> Self {
        Self {
            r: Rotation::from_matrix_unchecked(mat3_from_rows(&s.r)),
            v: v3(&s.v),
            p: v3(&s.p),
            bw: v3(&s.bw),
            ba: v3(&s.ba),
            rc: Rotation::from_matrix_unchecked(mat3_from_rows(&s.rc)),
            pc: v3(&s.pc),
        }
    }
}

/// Error-state covariance, kept exactly symmetric.
#[derive(Clone, Debug)]
pub struct Covariance(CovMatrix);

impl Covariance {
    /// Wrap a matrix, validating finiteness and symmetry.
    pub fn from_matrix(m: CovMatrix) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite("covariance matrix".into()));
        }
        let defect = (m - m.transpose()).abs().max();
        if defect > 1e-9 {
            return Err(CoreError::InvalidInput(format!(
                "covariance is not symmetric (max |P - P^T| = {defect:.3e})"
            )));
        }
        Ok(Self(m))
    }

    /// Block-diagonal initial covariance from per-block variances.
    pub fn from_variances(init: &InitVariances) -> Self {
        let d = [
            init.att,
            init.vel,
            init.pos,
            init.gyro_bias,
            init.accel_bias,
            init.extr_rot,
            init.extr_pos,
        ];
        let mut m = CovMatrix::zeros();
        for (b, var) in d.iter().enumerate() {
            for k in 0..3 {
                m[(3 * b + k, 3 * b + k)] = *var;
            }
        }
        Self(m)
    }

    pub fn matrix(&self) -> &CovMatrix {
        &self.0
    }

    /// Maximum absolute asymmetry `max |P - P^T|`.
    pub fn sym_defect(&self) -> f64 {
        (self.0 - self.0.transpose()).abs().max()
    }

    /// Smallest eigenvalue (the matrix is treated as symmetric).
    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub(crate) fn rows(&self) -> [[f64; 21]; 21] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0[(i, j)]))
    }

    pub(crate) fn from_rows(r: &[[f64; 21]; 21]) -> Self {
        Self(CovMatrix::from_fn(|i, j| r[i][j]))
    }
}

/// Initial error-state variances, one per 3-component block.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InitVariances {
    pub att: f64,
    pub vel: f64,
    pub pos: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub extr_rot: f64,
    pub extr_pos: f64,
}

impl Default for InitVariances {
    fn default() -> Self {
        Self {
            att: 1e-4,
            vel: 1e-2,
            pos: 1e-2,
            // Bias states are frozen by default (zero prior variance and
            // zero random walk): the filter applies no bias corrections and
            // leaves bias compensation to the external per-sample correction
            // stage. In-filter bias estimation from the two-component
            // velocity pseudo-measurement is fragile under low-cost MEMS
            // corruption: a prior tight relative to the true bias
            // misattributes innovations to attitude, a prior wide enough to
            // cover it lets the cross-covariance gains destabilize attitude
            // before the bias converges. Either way the filter ends up worse
            // than open-loop integration. Set these (and the matching
            // process-noise densities) to nonzero values to re-enable
            // in-filter bias estimation.
            gyro_bias: 0.0,
            accel_bias: 0.0,
            extr_rot: 1e-6,
            extr_pos: 1e-6,
        }
    }
}

/// Continuous-time process-noise densities, one per 3-component block.
///
/// Bias and extrinsic random walks default to zero: those states are then
/// frozen by the filter and corrected only through the external adaptor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoise {
    pub gyro: f64,
    pub accel: f64,
    pub pos: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub extr_rot: f64,
    pub extr_pos: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            gyro: 1e-8,
            accel: 1e-6,
            pos: 0.0,
            gyro_bias: 0.0,
            accel_bias: 0.0,
            extr_rot: 0.0,
            extr_pos: 0.0,
        }
    }
}

impl ProcessNoise {
    pub(crate) fn q_diag(&self) -> gen::QDiag {
        let d = [
            self.gyro,
            self.accel,
            self.pos,
            self.gyro_bias,
            self.accel_bias,
            self.extr_rot,
            self.extr_pos,
        ];
        let mut q = [0.0; 21];
        for (b, den) in d.iter().enumerate() {
            for k in 0..3 {
                q[3 * b + k] = *den;
            }
        }
        gen::QDiag(q)
    }
}

/// All filter tuning in one serializable bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Gravity magnitude along -z of the world frame (m/s^2).
    pub gravity: f64,
    pub init: InitVariances,
    pub process: ProcessNoise,
    /// Baseline lateral pseudo-measurement variance ((m/s)^2).
    pub sigma_lat2: f64,
    /// Baseline vertical pseudo-measurement variance ((m/s)^2).
    pub sigma_up2: f64,
    /// Apply the zero-velocity pseudo-update each step of `run_sequence`.
    pub zupt_enabled: bool,
    /// Use the Joseph-form covariance update (slower, better conditioned).
    pub joseph_update: bool,
    /// Timestamp gaps larger than this (s) are integrated as exactly this
    /// long and reported as [`GapEvent`]s.
    pub gap_threshold: f64,
    /// Updates whose innovation covariance condition number exceeds this
    /// are skipped.
    pub cond_max: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            gravity: crate::imu_model::STANDARD_GRAVITY,
            init: InitVariances::default(),
            process: ProcessNoise::default(),
            sigma_lat2: 0.01,
            sigma_up2: 0.01,
            zupt_enabled: true,
            joseph_update: false,
            gap_threshold: 0.05,
            cond_max: 1e12,
        }
    }
}

/// Map the two log-scale noise gains emitted by an adaptor to pseudo-
/// measurement variances: `n_i = sigma_i^2 * 10^(y_i)`.
pub fn decode_meas_noise(y_r: &[f64; 2], sigma_lat2: f64, sigma_up2: f64) -> (f64, f64) {
    gen::decode_noise(y_r, sigma_lat2, sigma_up2)
}

/// Result of one zero-velocity pseudo-update.
#[derive(Clone, Copy, Debug)]
pub struct ZuptOutcome {
    /// Pre-update (lateral, vertical) velocity at the constrained point.
    pub innovation: [f64; 2],
    /// False when the update was skipped as ill-conditioned.
    pub applied: bool,
}

/// The filter: parameters, state estimate and covariance.
#[derive(Clone, Debug)]
pub struct Filter {
    pub params: FilterParams,
    pub state: FilterState,
    pub cov: Covariance,
}

impl Filter {
    /// Start a filter at `state` with the block-diagonal covariance from
    /// `params.init`.
    pub fn new(params: FilterParams, state: FilterState) -> Self {
        let cov = Covariance::from_variances(&params.init);
        Self { params, state, cov }
    }

    /// One explicit-Euler propagation step with a raw IMU sample (biases
    /// are subtracted internally). Renormalizes the attitude and checks
    /// every output for finiteness.
    pub fn propagate(&mut self, gyro: &Vec3, accel: &Vec3, dt: f64) -> Result<()> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "propagation step must be positive and finite, got dt = {dt}"
            )));
        }
        let (s, p) = gen::propagate(
            &self.state.to_gen(),
            &self.cov.rows(),
            &a3(gyro),
            &a3(accel),
            dt,
            &self.params.process.q_diag(),
            self.params.gravity,
        );
        let mut state = FilterState::from_gen(&s);
        state.r = state.r.renormalized();
        self.state = state;
        self.cov = Covariance::from_rows(&p);
        self.check_finite("propagation")
    }

    /// Bias-corrected velocity of the constrained point in its own frame.
    pub fn body_velocity(&self, gyro: &Vec3) -> Vec3 {
        let omega = a3(&(gyro - self.state.bw));
        v3(&gen::body_velocity(&self.state.to_gen(), &omega))
    }

    /// Zero lateral/vertical velocity pseudo-update with measurement
    /// variances `(n_lat, n_up)`. `gyro` is the raw angular rate at the
    /// update time; the current bias estimate is subtracted internally.
    ///
    /// Skipped (state and covariance untouched, `applied = false`) when the
    /// innovation covariance condition number exceeds `params.cond_max`.
    pub fn zupt(&mut self, gyro: &Vec3, n_lat: f64, n_up: f64) -> Result<ZuptOutcome> {
        if !(n_lat.is_finite() && n_lat > 0.0 && n_up.is_finite() && n_up > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "measurement variances must be positive and finite, got ({n_lat}, {n_up})"
            )));
        }
        let omega = a3(&(gyro - self.state.bw));
        let out = gen::zupt_update(
            &self.state.to_gen(),
            &self.cov.rows(),
            &omega,
            n_lat,
            n_up,
            self.params.cond_max,
            self.params.joseph_update,
        );
        let outcome = ZuptOutcome {
            innovation: out.innovation,
            applied: out.applied,
        };
        if !out.applied {
            return Ok(outcome);
        }
        let mut state = FilterState::from_gen(&out.state);
        state.r = state.r.renormalized();
        state.rc = state.rc.renormalized();
        self.state = state;
        self.cov = Covariance::from_rows(&out.cov);
        self.check_finite("zero-velocity update")?;
        Ok(outcome)
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if !self.state.is_finite() || !self.cov.matrix().iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite(format!("filter state after {what}")));
        }
        Ok(())
    }
}

/// Per-step pseudo-measurement variances for [`run_sequence`].
#[derive(Clone, Copy, Debug)]
pub enum NoiseSchedule<'a> {
    /// Use `(sigma_lat2, sigma_up2)` from the parameters every step.
    Static,
    /// One `(n_lat, n_up)` pair per step; must hold `samples.len() - 1`
    /// entries (step `k` consumes entry `k - 1`).
    PerStep(&'a [(f64, f64)]),
}

/// A timestamp gap that was clamped during [`run_sequence`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GapEvent {
    /// Index of the sample *after* the gap.
    pub index: usize,
    /// Raw timestamp difference (s).
    pub dt: f64,
    /// Step actually integrated (s).
    pub capped_to: f64,
}

/// Output of [`run_sequence`].
#[derive(Clone, Debug)]
pub struct RunResult {
    /// One pose per input sample (the first is the initial state).
    pub trajectory: Trajectory,
    pub final_state: FilterState,
    pub final_cov: Covariance,
    pub zupt_applied: usize,
    pub zupt_skipped: usize,
    pub gaps: Vec<GapEvent>,
}

/// Run the filter over a whole IMU sequence.
///
/// Step `k` (for `k = 1..n`) integrates sample `k - 1` over
/// `t[k] - t[k-1]` and then, if enabled, applies the zero-velocity update
/// using sample `k`'s angular rate. Timestamps must be strictly
/// increasing; gaps longer than `params.gap_threshold` are integrated as
/// exactly the threshold (the state freezes for the remainder) and
/// reported. The returned trajectory keeps the original timestamps.
pub fn run_sequence(
    params: &FilterParams,
    init: FilterState,
    samples: &[ImuSample],
    noise: NoiseSchedule<'_>,
) -> Result<RunResult> {
    if samples.is_empty() {
        return Err(CoreError::InvalidInput(
            "cannot run the filter over an empty sample sequence".into(),
        ));
    }
    if let NoiseSchedule::PerStep(per) = noise {
        if per.len() != samples.len() - 1 {
            return Err(CoreError::InvalidInput(format!(
                "per-step noise schedule has {} entries for {} propagation steps",
                per.len(),
                samples.len() - 1
            )));
        }
    }
    for (k, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(CoreError::InvalidInput(format!(
                "sample timestamps must be strictly increasing (index {})",
                k + 1
            )));
        }
    }

    let mut filter = Filter::new(params.clone(), init);
    let mut trajectory = Trajectory::with_capacity(samples.len());
    trajectory.push(samples[0].t, filter.state.r, filter.state.v, filter.state.p);
    let mut gaps = Vec::new();
    let mut zupt_applied = 0;
    let mut zupt_skipped = 0;

    for k in 1..samples.len() {
        let dt_raw = samples[k].t - samples[k - 1].t;
        let dt = if dt_raw > params.gap_threshold {
            gaps.push(GapEvent {
                index: k,
                dt: dt_raw,
                capped_to: params.gap_threshold,
            });
            params.gap_threshold
        } else {
            dt_raw
        };
        filter.propagate(&samples[k - 1].gyro, &samples[k - 1].accel, dt)?;
        if params.zupt_enabled {
            let (n_lat, n_up) = match noise {
                NoiseSchedule::Static => (params.sigma_lat2, params.sigma_up2),
                NoiseSchedule::PerStep(per) => per[k - 1],
            };
            let out = filter.zupt(&samples[k].gyro, n_lat, n_up)?;
            if out.applied {
                zupt_applied += 1;
            } else {
                zupt_skipped += 1;
            }
        }
        trajectory.push(samples[k].t, filter.state.r, filter.state.v, filter.state.p);
    }

    Ok(RunResult {
        trajectory,
        final_state: filter.state,
        final_cov: filter.cov.clone(),
        zupt_applied,
        zupt_skipped,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::{so3_exp, so3_log};

    const G: f64 = 9.80665;

    fn rich_state() -> FilterState {
        FilterState {
            r: Rotation::from_rpy(0.3, -0.2, 0.5),
            v: Vec3::new(1.2, -0.4, 0.3),
            p: Vec3::new(5.0, -2.0, 1.5),
            bw: Vec3::new(0.01, -0.02, 0.005),
            ba: Vec3::new(-0.05, 0.1, 0.02),
            rc: Rotation::from_rpy(0.02, 0.01, -0.03),
            pc: Vec3::new(0.3, -0.1, 0.08),
        }
    }

    /// Apply a full right-invariant error to a state: group action on
    /// attitude/velocity/position, additive on biases and lever arm,
    /// right-multiplied exponential on the extrinsic rotation.
    fn inject(s: &gen::StateG<f64>, xi: &[f64; ERROR_DIM]) -> gen::StateG<f64> {
        let e = so3_exp(&Vec3::new(xi[0], xi[1], xi[2]));
        let em = *e.matrix();
        let ec = so3_exp(&Vec3::new(xi[15], xi[16], xi[17]));
        let v = em * v3(&s.v) + Vec3::new(xi[3], xi[4], xi[5]);
        let p = em * v3(&s.p) + Vec3::new(xi[6], xi[7], xi[8]);
        gen::StateG {
            r: rows_from_mat3(&(em * mat3_from_rows(&s.r))),
            v: a3(&v),
            p: a3(&p),
            bw: [s.bw[0] + xi[9], s.bw[1] + xi[10], s.bw[2] + xi[11]],
            ba: [s.ba[0] + xi[12], s.ba[1] + xi[13], s.ba[2] + xi[14]],
            rc: rows_from_mat3(&(mat3_from_rows(&s.rc) * *ec.matrix())),
            pc: [s.pc[0] + xi[18], s.pc[1] + xi[19], s.pc[2] + xi[20]],
        }
    }

    /// Inverse of [`inject`]: the error coordinates of `x` relative to
    /// `base`.
    fn error_between(x: &gen::StateG<f64>, base: &gen::StateG<f64>) -> [f64; ERROR_DIM] {
        let rx = Rotation::from_matrix_unchecked(mat3_from_rows(&x.r));
        let rb = Rotation::from_matrix_unchecked(mat3_from_rows(&base.r));
        let e_rot = rx * rb.inverse();
        let xi_r = so3_log(&e_rot);
        let em = *e_rot.matrix();
        let dv = v3(&x.v) - em * v3(&base.v);
        let dp = v3(&x.p) - em * v3(&base.p);
        let rcx = Rotation::from_matrix_unchecked(mat3_from_rows(&x.rc));
        let rcb = Rotation::from_matrix_unchecked(mat3_from_rows(&base.rc));
        let xi_rc = so3_log(&(rcb.inverse() * rcx));
        let mut out = [0.0; ERROR_DIM];
        for k in 0..3 {
            out[k] = xi_r[k];
            out[3 + k] = dv[k];
            out[6 + k] = dp[k];
            out[9 + k] = x.bw[k] - base.bw[k];
            out[12 + k] = x.ba[k] - base.ba[k];
            out[15 + k] = xi_rc[k];
            out[18 + k] = x.pc[k] - base.pc[k];
        }
        out
    }

    fn hover_samples(n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| ImuSample {
                t: k as f64 * dt,
                gyro: Vec3::zeros(),
                accel: Vec3::new(0.0, 0.0, G),
            })
            .collect()
    }

    #[test]
    fn stationary_hover_stays_put() {
        let params = FilterParams::default();
        let init = FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros());
        let samples = hover_samples(201, 0.01);
        let out = run_sequence(&params, init, &samples, NoiseSchedule::Static).unwrap();
        assert_eq!(out.trajectory.len(), samples.len());
        assert!(out.final_state.p.norm() < 1e-9, "p = {}", out.final_state.p);
        assert!(out.final_state.v.norm() < 1e-9);
        assert_eq!(out.zupt_applied, 200);
        assert!(out.final_cov.sym_defect() == 0.0);
        assert!(out.final_cov.min_eigenvalue() > -1e-12);
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn constant_accel_matches_closed_form() {
        let mut params = FilterParams::default();
        params.zupt_enabled = false;
        let alpha = 0.3;
        let dt = 0.01;
        let n_steps = 100;
        let samples: Vec<ImuSample> = (0..=n_steps)
            .map(|k| ImuSample {
                t: k as f64 * dt,
                gyro: Vec3::zeros(),
                accel: Vec3::new(alpha, 0.0, G),
            })
            .collect();
        let init = FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros());
        let out = run_sequence(&params, init, &samples, NoiseSchedule::Static).unwrap();
        // Explicit Euler: v_n = alpha dt n, p_n = alpha dt^2 n(n-1)/2.
        let n = n_steps as f64;
        let v_expect = alpha * dt * n;
        let p_expect = alpha * dt * dt * n * (n - 1.0) / 2.0;
        assert!((out.final_state.v.x - v_expect).abs() < 1e-12 * v_expect);
        assert!((out.final_state.p.x - p_expect).abs() < 1e-12 * p_expect);
        assert!(out.final_state.v.y.abs() < 1e-15);
        assert!(out.final_state.p.z.abs() < 1e-15);
    }

    #[test]
    fn propagation_jacobian_matches_finite_differences() {
        let s0 = rich_state().to_gen();
        let q = gen::QDiag([0.0; ERROR_DIM]);
        let p0 = [[0.0; ERROR_DIM]; ERROR_DIM];
        let gyro = [0.4, -0.2, 0.1];
        let accel = [0.3, 0.2, 9.9];
        // Small dt keeps the O(dt^2) gap between the one-step linearization
        // and the exact discrete Jacobian below the tolerance.
        let dt = 1e-4;
        let step = |s: &gen::StateG<f64>| gen::propagate(s, &p0, &gyro, &accel, dt, &q, G).0;
        let base_next = step(&s0);
        let f = gen::cov_value(&gen::error_jacobian_f(&s0, dt, G));
        let eps = 1e-6;
        for i in 0..ERROR_DIM {
            let mut xi = [0.0; ERROR_DIM];
            xi[i] = eps;
            let plus = error_between(&step(&inject(&s0, &xi)), &base_next);
            xi[i] = -eps;
            let minus = error_between(&step(&inject(&s0, &xi)), &base_next);
            for r in 0..ERROR_DIM {
                let fd = (plus[r] - minus[r]) / (2.0 * eps);
                assert!(
                    (fd - f[r][i]).abs() < 2e-6,
                    "F[{r}][{i}]: finite diff {fd:.9e} vs analytic {:.9e}",
                    f[r][i]
                );
            }
        }
    }

    #[test]
    fn measurement_jacobian_matches_finite_differences() {
        let s0 = rich_state().to_gen();
        let gyro_raw = [0.4, -0.2, 0.1];
        let meas = |s: &gen::StateG<f64>| {
            let om = [
                gyro_raw[0] - s.bw[0],
                gyro_raw[1] - s.bw[1],
                gyro_raw[2] - s.bw[2],
            ];
            let vc = gen::body_velocity(s, &om);
            [vc[1], vc[2]]
        };
        let om0 = [
            gyro_raw[0] - s0.bw[0],
            gyro_raw[1] - s0.bw[1],
            gyro_raw[2] - s0.bw[2],
        ];
        let h = gen::zupt_h(&s0, &om0);
        let eps = 1e-6;
        for i in 0..ERROR_DIM {
            let mut xi = [0.0; ERROR_DIM];
            xi[i] = eps;
            let plus = meas(&inject(&s0, &xi));
            xi[i] = -eps;
            let minus = meas(&inject(&s0, &xi));
            for row in 0..2 {
                let fd = (plus[row] - minus[row]) / (2.0 * eps);
                assert!(
                    (fd - h[row][i]).abs() < 1e-7,
                    "H[{row}][{i}]: finite diff {fd:.9e} vs analytic {:.9e}",
                    h[row][i]
                );
            }
        }
    }

    #[test]
    fn body_velocity_point_examples() {
        // Pure translation, aligned frames: the velocity passes through.
        let mut st = FilterState::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let f = Filter::new(FilterParams::default(), st);
        assert!((f.body_velocity(&Vec3::zeros()) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);

        // Lever arm: rotation about y at 1 rad/s, point 1 m above the IMU,
        // moves the point forward at 1 m/s.
        st = FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros());
        st.pc = Vec3::new(0.0, 0.0, 1.0);
        let f = Filter::new(FilterParams::default(), st);
        let vc = f.body_velocity(&Vec3::new(0.0, 1.0, 0.0));
        assert!((vc - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15, "vc = {vc}");

        // Extrinsic rotation: a point frame yawed +90 degrees sees the
        // forward velocity on its -y axis.
        st = FilterState::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        st.rc = Rotation::from_rpy(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let f = Filter::new(FilterParams::default(), st);
        let vc = f.body_velocity(&Vec3::zeros());
        assert!((vc - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12, "vc = {vc}");
    }

    #[test]
    fn huge_noise_update_barely_moves_state() {
        let state = FilterState::new(
            Rotation::identity(),
            Vec3::new(0.0, 0.5, 0.2),
            Vec3::new(1.0, 2.0, 3.0),
        );
        let mut f = Filter::new(FilterParams::default(), state);
        let before = f.state;
        let cov_before = f.cov.clone();
        let out = f.zupt(&Vec3::zeros(), 1e6, 1e6).unwrap();
        assert!(out.applied);
        assert!((f.state.v - before.v).norm() < 1e-6);
        assert!((f.state.p - before.p).norm() < 1e-6);
        assert!(f.state.r.angle_to(&before.r) < 1e-8);
        assert!((f.cov.matrix() - cov_before.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn innovation_shrinks_after_update() {
        let state = FilterState::new(Rotation::identity(), Vec3::new(0.0, 0.5, 0.2), Vec3::zeros());
        let mut f = Filter::new(FilterParams::default(), state);
        let out = f.zupt(&Vec3::zeros(), 0.01, 0.01).unwrap();
        assert!(out.applied);
        assert!((out.innovation[0] - 0.5).abs() < 1e-12);
        assert!((out.innovation[1] - 0.2).abs() < 1e-12);
        // P_v = N here, so each axis shrinks by about a factor of two.
        assert!((f.state.v.y - 0.25).abs() < 1e-3, "v_y = {}", f.state.v.y);
        assert!((f.state.v.z - 0.10).abs() < 1e-3);
        let after = f.body_velocity(&Vec3::zeros());
        assert!(after.y.abs() < 0.5 * 0.55);
        assert!(after.z.abs() < 0.2 * 0.55);
    }

    #[test]
    fn ill_conditioned_update_is_skipped() {
        let state = FilterState::new(Rotation::identity(), Vec3::new(0.0, 0.5, 0.2), Vec3::zeros());
        let mut params = FilterParams::default();
        params.cond_max = 1.0;
        let mut f = Filter::new(params, state);
        let cov_before = f.cov.clone();
        let out = f.zupt(&Vec3::zeros(), 0.01, 0.02).unwrap();
        assert!(!out.applied);
        assert_eq!(f.state.v, state.v);
        assert_eq!(f.state.p, state.p);
        assert_eq!(f.cov.matrix(), cov_before.matrix());
    }

    #[test]
    fn joseph_update_matches_standard_form() {
        let state = FilterState::new(
            Rotation::from_rpy(0.1, -0.05, 0.3),
            Vec3::new(0.3, 0.4, -0.1),
            Vec3::zeros(),
        );
        let mut std_f = Filter::new(FilterParams::default(), state);
        let mut joseph_params = FilterParams::default();
        joseph_params.joseph_update = true;
        let mut jos_f = Filter::new(joseph_params, state);
        let gyro = Vec3::new(0.2, 0.1, -0.3);
        std_f.zupt(&gyro, 0.01, 0.01).unwrap();
        jos_f.zupt(&gyro, 0.01, 0.01).unwrap();
        let diff = (std_f.cov.matrix() - jos_f.cov.matrix()).abs().max();
        assert!(diff < 1e-12, "max covariance difference {diff:.3e}");
        assert!(jos_f.cov.min_eigenvalue() > -1e-12);
        assert!((std_f.state.v - jos_f.state.v).norm() < 1e-15);
    }

    /// With a rank-one covariance supported on a single velocity axis the
    /// update must reduce exactly to the scalar Kalman closed form
    /// `v+ = v n/(p0 + n)`, `p+ = p0 n/(p0 + n)`.
    #[test]
    fn rank_one_covariance_matches_scalar_kalman() {
        let state = FilterState::new(Rotation::identity(), Vec3::new(0.0, 0.3, 0.0), Vec3::zeros());
        let mut f = Filter::new(FilterParams::default(), state);
        let p0 = 0.04;
        let n = 0.01;
        let mut m = CovMatrix::zeros();
        m[(4, 4)] = p0; // the lateral-velocity error slot
        f.cov = Covariance::from_matrix(m).unwrap();
        let out = f.zupt(&Vec3::zeros(), n, n).unwrap();
        assert!(out.applied);
        assert!((out.innovation[0] - 0.3).abs() < 1e-15);
        assert!(out.innovation[1].abs() < 1e-15);
        let expect_v = 0.3 * n / (p0 + n);
        let expect_p = p0 * n / (p0 + n);
        assert!((f.state.v.y - expect_v).abs() < 1e-12, "v_y = {}", f.state.v.y);
        assert!(f.state.v.x.abs() < 1e-15);
        assert!(f.state.v.z.abs() < 1e-15);
        assert!((f.cov.matrix()[(4, 4)] - expect_p).abs() < 1e-12);
        let mut off_mass = 0.0;
        for i in 0..ERROR_DIM {
            for j in 0..ERROR_DIM {
                if (i, j) != (4, 4) {
                    off_mass += f.cov.matrix()[(i, j)].abs();
                }
            }
        }
        assert!(off_mass < 1e-14, "stray covariance mass {off_mass:.3e}");
        assert!(f.state.r.angle_to(&Rotation::identity()) < 1e-14);
        assert!(f.state.p.norm() < 1e-15);
        assert!(f.state.bw.norm() < 1e-15);
    }

    #[test]
    fn propagate_rejects_bad_dt() {
        let mut f = Filter::new(
            FilterParams::default(),
            FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros()),
        );
        assert!(matches!(
            f.propagate(&Vec3::zeros(), &Vec3::zeros(), 0.0),
            Err(CoreError::InvalidInput(_))
        ));
        assert!(matches!(
            f.propagate(&Vec3::zeros(), &Vec3::zeros(), f64::NAN),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn run_sequence_validates_inputs() {
        let params = FilterParams::default();
        let init = FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros());
        let mut samples = hover_samples(3, 0.01);
        samples[2].t = 0.005;
        assert!(matches!(
            run_sequence(&params, init, &samples, NoiseSchedule::Static),
            Err(CoreError::InvalidInput(_))
        ));
        let samples = hover_samples(3, 0.01);
        let wrong = [(0.01, 0.01); 5];
        assert!(matches!(
            run_sequence(&params, init, &samples, NoiseSchedule::PerStep(&wrong)),
            Err(CoreError::InvalidInput(_))
        ));
        assert!(matches!(
            run_sequence(&params, init, &[], NoiseSchedule::Static),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn run_sequence_caps_timestamp_gaps() {
        let mut params = FilterParams::default();
        params.zupt_enabled = false;
        let init = FilterState::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let mk = |t: f64| ImuSample {
            t,
            gyro: Vec3::zeros(),
            accel: Vec3::new(0.0, 0.0, G),
        };
        let samples = vec![mk(0.0), mk(0.01), mk(0.5)];
        let out = run_sequence(&params, init, &samples, NoiseSchedule::Static).unwrap();
        assert_eq!(out.gaps.len(), 1);
        assert_eq!(out.gaps[0].index, 2);
        assert!((out.gaps[0].dt - 0.49).abs() < 1e-12);
        assert!((out.gaps[0].capped_to - 0.05).abs() < 1e-15);
        // Integrated time is 0.01 + 0.05, not 0.5.
        assert!((out.final_state.p.x - 0.06).abs() < 1e-12);
        // The trajectory keeps the raw timestamps.
        assert_eq!(out.trajectory.t, vec![0.0, 0.01, 0.5]);
    }

    #[test]
    fn run_sequence_is_deterministic() {
        let params = FilterParams::default();
        let init = FilterState::new(
            Rotation::identity(),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::zeros(),
        );
        let samples: Vec<ImuSample> = (0..50)
            .map(|k| {
                let s = k as f64 * 0.05;
                ImuSample {
                    t: k as f64 * 0.01,
                    gyro: Vec3::new(0.1 * s.sin(), -0.2 * s.cos(), 0.05),
                    accel: Vec3::new(0.2 * s.sin(), 0.1, G + 0.05 * s.cos()),
                }
            })
            .collect();
        let a = run_sequence(&params, init, &samples, NoiseSchedule::Static).unwrap();
        let b = run_sequence(&params, init, &samples, NoiseSchedule::Static).unwrap();
        assert_eq!(a.trajectory.p, b.trajectory.p);
        assert_eq!(a.trajectory.v, b.trajectory.v);
        assert_eq!(a.final_cov.matrix(), b.final_cov.matrix());
    }
}
