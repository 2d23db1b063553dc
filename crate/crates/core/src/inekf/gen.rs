//! Scalar-generic filter arithmetic.
//!
//! Everything here is written over [`Scalar`] so the exact same propagate /
//! update code runs in plain `f64` (the public filter API) and on the
//! autodiff tape (training differentiates through it, Kalman gain included).
//!
//! # Error-state convention
//!
//! The 21-dimensional error state is ordered
//!
//! ```text
//! [ dR (0..3) | dv (3..6) | dp (6..9) | dbw (9..12) | dba (12..15)
//!   | dRc (15..18) | dpc (18..21) ]
//! ```
//!
//! with a right-invariant error on the (R, v, p) group part
//! (`truth = exp(xi) * estimate`), additive errors on the biases and the
//! extrinsic translation, and a right-side exponential on the extrinsic
//! rotation. `F`, `G` and `H` below are derived under that convention and
//! are validated against finite differences of the nonlinear maps in the
//! module tests.
//!
//! Corrections are applied with `so3_exp` on the rotation components and
//! additively on all vector components; the rotation-velocity coupling this
//! drops is second order in the per-step correction.

use crate::autodiff::Scalar;
use crate::geom3d::gen::{
    m3_mul, m3_mul_vec, m3_scale, m3_tmul_vec, m3_transpose, skew, so3_exp, so3_left_jacobian,
    v3_add, v3_cross, v3_scale, v3_sub, M3, V3,
};

pub const DIM: usize = 21;

/// Filter state, generic over the scalar.
#[derive(Clone)]
pub struct StateG<R: Scalar> {
    pub r: M3<R>,
    pub v: V3<R>,
    pub p: V3<R>,
    pub bw: V3<R>,
    pub ba: V3<R>,
    pub rc: M3<R>,
    pub pc: V3<R>,
}

pub type CovG<R> = [[R; DIM]; DIM];

pub fn cov_lit<R: Scalar>(m: &[[f64; DIM]; DIM]) -> CovG<R> {
    std::array::from_fn(|i| std::array::from_fn(|j| R::lit(m[i][j])))
}

#[cfg(test)]
pub fn cov_value<R: Scalar>(m: &CovG<R>) -> [[f64; DIM]; DIM] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[i][j].value()))
}

fn zeros<R: Scalar>() -> CovG<R> {
    [[R::lit(0.0); DIM]; DIM]
}

fn identity<R: Scalar>() -> CovG<R> {
    let mut m = zeros();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = R::lit(1.0);
    }
    m
}

/// `a * b` (dense; constant-folding on the tape skips the structural zeros).
fn mat_mul<R: Scalar>(a: &CovG<R>, b: &CovG<R>) -> CovG<R> {
    let mut out = zeros();
    for i in 0..DIM {
        for j in 0..DIM {
            let mut acc = R::lit(0.0);
            for k in 0..DIM {
                acc = a[i][k].mul_add(b[k][j], acc);
            }
            out[i][j] = acc;
        }
    }
    out
}

/// `a * b^T`.
fn mat_mul_nt<R: Scalar>(a: &CovG<R>, b: &CovG<R>) -> CovG<R> {
    let mut out = zeros();
    for i in 0..DIM {
        for j in 0..DIM {
            let mut acc = R::lit(0.0);
            for k in 0..DIM {
                acc = a[i][k].mul_add(b[j][k], acc);
            }
            out[i][j] = acc;
        }
    }
    out
}

fn mat_add<R: Scalar>(a: &CovG<R>, b: &CovG<R>) -> CovG<R> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][j] + b[i][j]))
}

/// `(P + P^T) / 2`, computed once per off-diagonal pair so the result is
/// exactly symmetric in floating point.
pub fn symmetrize<R: Scalar>(p: &CovG<R>) -> CovG<R> {
    let half = R::lit(0.5);
    let mut out = *p;
    for i in 0..DIM {
        for j in (i + 1)..DIM {
            let m = (p[i][j] + p[j][i]) * half;
            out[i][j] = m;
            out[j][i] = m;
        }
    }
    out
}

fn set_block<R: Scalar>(m: &mut CovG<R>, row: usize, col: usize, blk: &M3<R>) {
    for i in 0..3 {
        for j in 0..3 {
            m[row + i][col + j] = blk[i][j];
        }
    }
}

/// Process-noise diagonal (continuous-time densities) in error-state order.
#[derive(Clone, Copy, Debug)]
pub struct QDiag(pub [f64; DIM]);

/// Discrete error-propagation Jacobian `F = I + A dt`, linearized at `s`
/// under the right-invariant error convention. Validated against central
/// finite differences of the nonlinear step in the public module's tests.
pub fn error_jacobian_f<R: Scalar>(s: &StateG<R>, dt: f64, gravity: f64) -> CovG<R> {
    let neg_dt = R::lit(-dt);
    let r_dt = m3_scale(&s.r, neg_dt); // -R dt
    let sv = skew(&s.v);
    let sp = skew(&s.p);
    let mut f = identity::<R>();
    set_block(&mut f, 0, 9, &r_dt); // dR <- dbw
    // dv <- dR: -[g]x dt  (g = (0, 0, gravity))
    f[3][1] = R::lit(gravity * dt);
    f[4][0] = R::lit(-gravity * dt);
    set_block(&mut f, 3, 9, &m3_scale(&m3_mul(&sv, &s.r), neg_dt)); // dv <- dbw
    set_block(&mut f, 3, 12, &r_dt); // dv <- dba
    for k in 0..3 {
        f[6 + k][3 + k] = R::lit(dt); // dp <- dv
    }
    set_block(&mut f, 6, 9, &m3_scale(&m3_mul(&sp, &s.r), neg_dt)); // dp <- dbw
    f
}

/// One explicit-Euler propagation step.
///
/// State recurrence (u is the corrected measurement, biases subtracted
/// here):
///
/// ```text
/// R' = R * so3_exp((w - bw) dt)
/// v' = v + (R (a - ba) - g) dt
/// p' = p + v dt
/// ```
///
/// Covariance: `P' = F P F^T + (G Q G^T) dt`, `F = I + A dt` with the
/// right-invariant error Jacobian `A`, re-symmetrized afterwards.
#[allow(clippy::too_many_arguments)]
pub fn propagate<R: Scalar>(
    s: &StateG<R>,
    p: &CovG<R>,
    gyro: &V3<R>,
    accel: &V3<R>,
    dt: f64,
    q: &QDiag,
    gravity: f64,
) -> (StateG<R>, CovG<R>) {
    let dt_r = R::lit(dt);
    let w = v3_sub(gyro, &s.bw);
    let a = v3_sub(accel, &s.ba);

    // --- state ---
    let r_next = m3_mul(&s.r, &so3_exp(&v3_scale(&w, dt_r)));
    let accel_world = m3_mul_vec(&s.r, &a);
    let dv = [
        accel_world[0] * dt_r,
        accel_world[1] * dt_r,
        (accel_world[2] - R::lit(gravity)) * dt_r,
    ];
    let v_next = v3_add(&s.v, &dv);
    let p_next = v3_add(&s.p, &v3_scale(&s.v, dt_r));

    let f = error_jacobian_f(s, dt, gravity);
    let sv = skew(&s.v);
    let sp = skew(&s.p);

    // --- G, with the gyro/accel noise columns rotated like the bias
    // columns (sign irrelevant inside G Q G^T) ---
    let mut g = zeros::<R>();
    set_block(&mut g, 0, 0, &s.r);
    set_block(&mut g, 3, 0, &m3_mul(&sv, &s.r));
    set_block(&mut g, 6, 0, &m3_mul(&sp, &s.r));
    set_block(&mut g, 3, 3, &s.r);
    for k in 6..DIM {
        g[k][k] = R::lit(1.0);
    }

    // Qd = G diag(q * dt) G^T: scale G's columns, multiply by G^T.
    let mut gq = g;
    for j in 0..DIM {
        let qj = R::lit(q.0[j] * dt);
        for row in gq.iter_mut() {
            row[j] = row[j] * qj;
        }
    }
    let qd = mat_mul_nt(&gq, &g);

    let fp = mat_mul(&f, p);
    let p_next_cov = symmetrize(&mat_add(&mat_mul_nt(&fp, &f), &qd));

    (
        StateG {
            r: r_next,
            v: v_next,
            p: p_next,
            bw: s.bw,
            ba: s.ba,
            rc: s.rc,
            pc: s.pc,
        },
        p_next_cov,
    )
}

/// Body-frame velocity at the constrained sensor point:
/// `v_c = Rc^T (R^T v + w x pc)` with `w` the bias-corrected angular rate.
pub fn body_velocity<R: Scalar>(s: &StateG<R>, omega_unbiased: &V3<R>) -> V3<R> {
    let body_v = m3_tmul_vec(&s.r, &s.v);
    let lever = v3_cross(omega_unbiased, &s.pc);
    m3_tmul_vec(&s.rc, &v3_add(&body_v, &lever))
}

/// Measurement Jacobian of the (lateral, vertical) components of
/// [`body_velocity`] with respect to the error state, as two length-21 rows.
pub fn zupt_h<R: Scalar>(s: &StateG<R>, omega_unbiased: &V3<R>) -> [[R; DIM]; 2] {
    let zero = R::lit(0.0);
    let mut h = [[zero; DIM]; 2];
    let rc_t = m3_transpose(&s.rc);
    let rt = m3_transpose(&s.r);
    let h_v = m3_mul(&rc_t, &rt); // dv block
    let h_bw = m3_mul(&rc_t, &skew(&s.pc)); // dbw block
    let vc = body_velocity(s, omega_unbiased);
    let h_rc = skew(&vc); // dRc block
    let h_pc = m3_mul(&rc_t, &skew(omega_unbiased)); // dpc block
    for (out_row, src_row) in [(0usize, 1usize), (1, 2)] {
        for j in 0..3 {
            h[out_row][3 + j] = h_v[src_row][j];
            h[out_row][9 + j] = h_bw[src_row][j];
            h[out_row][15 + j] = h_rc[src_row][j];
            h[out_row][18 + j] = h_pc[src_row][j];
        }
    }
    h
}

/// Apply an error-state correction: `so3_exp` on the rotation slots,
/// additive on everything else.
pub fn retract<R: Scalar>(s: &StateG<R>, xi: &[R; DIM]) -> StateG<R> {
    // The navigation part (R, v, p) lives on SE_2(3) with the error
    // defined by the group action `true = exp(xi) * estimate`, matching
    // the propagation Jacobian and the measurement model. Its exponential
    // rotates v and p along with the attitude correction and maps the
    // vector increments through the SO(3) left Jacobian; updating v and p
    // additively instead (dropping the `xi_theta x v` coupling) makes the
    // velocity pseudo-update inconsistent and slowly destabilizes the
    // filter on turning trajectories. Biases and the lever arm are plain
    // vectors; the mount rotation uses a right-multiplied exponential.
    let phi = [xi[0], xi[1], xi[2]];
    let d_r = so3_exp(&phi);
    let jl = so3_left_jacobian(&phi);
    let v = v3_add(
        &m3_mul_vec(&d_r, &s.v),
        &m3_mul_vec(&jl, &[xi[3], xi[4], xi[5]]),
    );
    let p = v3_add(
        &m3_mul_vec(&d_r, &s.p),
        &m3_mul_vec(&jl, &[xi[6], xi[7], xi[8]]),
    );
    let d_rc = so3_exp(&[xi[15], xi[16], xi[17]]);
    StateG {
        r: m3_mul(&d_r, &s.r),
        v,
        p,
        bw: [s.bw[0] + xi[9], s.bw[1] + xi[10], s.bw[2] + xi[11]],
        ba: [s.ba[0] + xi[12], s.ba[1] + xi[13], s.ba[2] + xi[14]],
        rc: m3_mul(&s.rc, &d_rc),
        pc: [s.pc[0] + xi[18], s.pc[1] + xi[19], s.pc[2] + xi[20]],
    }
}

/// Outcome of a pseudo-measurement update.
pub struct ZuptOutcomeG<R: Scalar> {
    pub state: StateG<R>,
    pub cov: CovG<R>,
    /// Pre-update (lateral, vertical) body velocity.
    pub innovation: [R; 2],
    /// False when the innovation covariance was too ill-conditioned and the
    /// update was skipped.
    pub applied: bool,
}

/// Zero lateral/vertical velocity pseudo-update.
///
/// `K = P H^T (H P H^T + N)^-1`; the state is retracted by `K (0 - h)` and
/// the covariance becomes `(I - K H) P` (Joseph form when `joseph` is set),
/// re-symmetrized. If the condition number of `H P H^T + N` exceeds
/// `cond_max` the update is skipped and flagged.
pub fn zupt_update<R: Scalar>(
    s: &StateG<R>,
    p: &CovG<R>,
    omega_unbiased: &V3<R>,
    n_lat: R,
    n_up: R,
    cond_max: f64,
    joseph: bool,
) -> ZuptOutcomeG<R> {
    let vc = body_velocity(s, omega_unbiased);
    let innovation = [vc[1], vc[2]];
    let h = zupt_h(s, omega_unbiased);

    // pht[i][m] = (P H^T)_{i m}, 21x2.
    let mut pht = [[R::lit(0.0); 2]; DIM];
    for i in 0..DIM {
        for m in 0..2 {
            let mut acc = R::lit(0.0);
            for k in 0..DIM {
                acc = p[i][k].mul_add(h[m][k], acc);
            }
            pht[i][m] = acc;
        }
    }
    // S = H P H^T + N (2x2 symmetric).
    let mut s2 = [[R::lit(0.0); 2]; 2];
    for m in 0..2 {
        for n in 0..2 {
            let mut acc = R::lit(0.0);
            for k in 0..DIM {
                acc = h[m][k].mul_add(pht[k][n], acc);
            }
            s2[m][n] = acc;
        }
    }
    s2[0][0] = s2[0][0] + n_lat;
    s2[1][1] = s2[1][1] + n_up;

    // Condition check on the symmetric 2x2 via its eigenvalues.
    let tr = s2[0][0].value() + s2[1][1].value();
    let det = s2[0][0].value() * s2[1][1].value() - s2[0][1].value() * s2[1][0].value();
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let lam_max = 0.5 * (tr + disc);
    let lam_min = 0.5 * (tr - disc);
    if !(lam_min > 0.0) || !lam_max.is_finite() || lam_max / lam_min > cond_max {
        return ZuptOutcomeG {
            state: s.clone(),
            cov: *p,
            innovation,
            applied: false,
        };
    }

    // 2x2 inverse.
    let det_r = s2[0][0] * s2[1][1] - s2[0][1] * s2[1][0];
    let inv = [
        [s2[1][1] / det_r, -s2[0][1] / det_r],
        [-s2[1][0] / det_r, s2[0][0] / det_r],
    ];
    // K = P H^T S^-1 (21x2).
    let mut kk = [[R::lit(0.0); 2]; DIM];
    for i in 0..DIM {
        for m in 0..2 {
            kk[i][m] = pht[i][0].mul_add(inv[0][m], pht[i][1] * inv[1][m]);
        }
    }
    // xi = K (0 - h).
    let z = [-innovation[0], -innovation[1]];
    let mut xi = [R::lit(0.0); DIM];
    for i in 0..DIM {
        xi[i] = kk[i][0].mul_add(z[0], kk[i][1] * z[1]);
    }
    let state = retract(s, &xi);

    let cov = if joseph {
        // (I - K H) P (I - K H)^T + K N K^T.
        let mut ikh = identity::<R>();
        for i in 0..DIM {
            for j in 0..DIM {
                let kh = kk[i][0].mul_add(h[0][j], kk[i][1] * h[1][j]);
                ikh[i][j] = ikh[i][j] - kh;
            }
        }
        let jp = mat_mul(&ikh, p);
        let mut out = mat_mul_nt(&jp, &ikh);
        for i in 0..DIM {
            for j in 0..DIM {
                let knk =
                    (kk[i][0] * n_lat) * kk[j][0] + (kk[i][1] * n_up) * kk[j][1];
                out[i][j] = out[i][j] + knk;
            }
        }
        symmetrize(&out)
    } else {
        // (I - K H) P = P - K (H P); H P = (P H^T)^T because P is kept
        // exactly symmetric.
        let mut out = *p;
        for i in 0..DIM {
            for j in 0..DIM {
                let khp = kk[i][0].mul_add(pht[j][0], kk[i][1] * pht[j][1]);
                out[i][j] = out[i][j] - khp;
            }
        }
        symmetrize(&out)
    };

    ZuptOutcomeG {
        state,
        cov,
        innovation,
        applied: true,
    }
}

/// Shared decode of the adaptive pseudo-measurement noise:
/// `N = diag(sigma_lat^2 * 10^y0, sigma_up^2 * 10^y1)`.
pub fn decode_noise<R: Scalar>(y_r: &[R; 2], sigma_lat2: f64, sigma_up2: f64) -> (R, R) {
    (
        R::lit(sigma_lat2) * y_r[0].pow10(),
        R::lit(sigma_up2) * y_r[1].pow10(),
    )
}
