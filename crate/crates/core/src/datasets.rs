//! Trajectory containers, synthetic sequence generation, GNSS/INS log
//! parsing, resampling, and CSV/JSON serialization.
//!
//! The world frame is ENU (x east, y north, z up); gravity acts along -z.
//!
//! Synthetic sequences are constructed to be *exactly* consistent with the
//! filter's explicit-Euler integrator: the emitted angular rate is the SO(3)
//! log of consecutive attitudes over `dt` and the emitted specific force is
//! the forward difference of the velocity (plus gravity) rotated into the
//! body frame. Feeding the clean IMU stream through propagation from the
//! true initial state therefore reproduces the true trajectory to
//! floating-point accuracy — the tests use that as an end-to-end oracle.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom3d::{so3_exp, so3_log, Rotation, Vec3};
use crate::imu_model::{ImuSample, STANDARD_GRAVITY};
use crate::rng::SeededStream;

/// Sub-stream label for the lateral-slip process.
const SLIP_STREAM_LABEL: u64 = 0x534C_4950;
/// Sub-stream label for dataset splitting.
const SPLIT_STREAM_LABEL: u64 = 0x5350_4C54;

/// A time-stamped sequence of poses and velocities in the world frame.
///
/// Stored as parallel columns; `validate` checks that the columns agree in
/// length, the timestamps are finite and strictly increasing, and every
/// numeric entry is finite.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub r: Vec<Rotation>,
    pub v: Vec<Vec3>,
    pub p: Vec<Vec3>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: f64, r: Rotation, v: Vec3, p: Vec3) {
        self.t.push(t);
        self.r.push(r);
        self.v.push(v);
        self.p.push(p);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.r.len() != n || self.v.len() != n || self.p.len() != n {
            return Err(CoreError::Structural(format!(
                "trajectory columns disagree: t={} r={} v={} p={}",
                n,
                self.r.len(),
                self.v.len(),
                self.p.len()
            )));
        }
        for i in 0..n {
            if !self.t[i].is_finite() {
                return Err(CoreError::NonFinite(format!("trajectory t[{i}]")));
            }
            if i > 0 && self.t[i] <= self.t[i - 1] {
                return Err(CoreError::Structural(format!(
                    "trajectory timestamps not strictly increasing at index {i}"
                )));
            }
            let finite = self.r[i].matrix().iter().all(|x| x.is_finite())
                && self.v[i].iter().all(|x| x.is_finite())
                && self.p[i].iter().all(|x| x.is_finite());
            if !finite {
                return Err(CoreError::NonFinite(format!("trajectory entry {i}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic sequences
// ---------------------------------------------------------------------------

/// One leg of a piecewise motion profile.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Segment {
    /// Leg length (s).
    pub duration: f64,
    /// Constant yaw rate over the leg (rad/s).
    pub yaw_rate: f64,
    /// Constant forward acceleration over the leg (m/s^2).
    pub forward_accel: f64,
}

/// Planar motion profile of a synthetic sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SynthKind {
    /// Constant velocity along +x.
    Straight { speed: f64 },
    /// Constant-rate left turn of the given radius (m).
    Circle { speed: f64, radius: f64 },
    /// Heading sweeps `pi * sin(2 pi t / period)`, weaving through
    /// alternating left and right loops.
    FigureEight { speed: f64, period: f64 },
    /// Concatenation of constant-rate legs; after the last leg the motion
    /// continues straight at the final speed.
    Piecewise {
        start_speed: f64,
        segments: Vec<Segment>,
    },
}

/// Full description of a synthetic sequence.
///
/// `lateral_slip_std` adds a first-order Gauss-Markov lateral velocity in
/// the body frame (time constant `slip_time_constant`), so the "no sideways
/// motion" pseudo-measurement is only approximately true — as on a real
/// vehicle.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Sequence length (s).
    pub duration: f64,
    /// Sample rate (Hz).
    pub rate_hz: f64,
    /// Stationary standard deviation of the lateral slip velocity (m/s).
    pub lateral_slip_std: f64,
    /// Correlation time of the slip process (s).
    pub slip_time_constant: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Circle {
                speed: 8.0,
                radius: 20.0,
            },
            duration: 60.0,
            rate_hz: 100.0,
            lateral_slip_std: 0.0,
            slip_time_constant: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.duration.is_finite()
            && self.duration > 0.0
            && self.rate_hz.is_finite()
            && self.rate_hz > 0.0
            && self.lateral_slip_std.is_finite()
            && self.lateral_slip_std >= 0.0
            && self.slip_time_constant.is_finite()
            && self.slip_time_constant > 0.0;
        if !ok {
            return Err(CoreError::InvalidInput(format!(
                "bad synthesis parameters: duration {} s at {} Hz, slip std {} (tau {})",
                self.duration, self.rate_hz, self.lateral_slip_std, self.slip_time_constant
            )));
        }
        if self.duration * self.rate_hz < 2.0 {
            return Err(CoreError::InvalidInput(
                "synthetic sequence needs at least two samples".into(),
            ));
        }
        let kind_ok = match &self.kind {
            SynthKind::Straight { speed } => speed.is_finite(),
            SynthKind::Circle { speed, radius } => {
                speed.is_finite() && radius.is_finite() && *radius > 0.0
            }
            SynthKind::FigureEight { speed, period } => {
                speed.is_finite() && period.is_finite() && *period > 0.0
            }
            SynthKind::Piecewise {
                start_speed,
                segments,
            } => {
                start_speed.is_finite()
                    && segments.iter().all(|s| {
                        s.duration.is_finite()
                            && s.duration > 0.0
                            && s.yaw_rate.is_finite()
                            && s.forward_accel.is_finite()
                    })
            }
        };
        if !kind_ok {
            return Err(CoreError::InvalidInput(
                "bad synthesis motion profile".into(),
            ));
        }
        Ok(())
    }
}

/// Yaw angle and forward speed of the profile at time `t`.
fn yaw_and_speed(kind: &SynthKind, t: f64) -> (f64, f64) {
    match kind {
        SynthKind::Straight { speed } => (0.0, *speed),
        SynthKind::Circle { speed, radius } => (speed / radius * t, *speed),
        SynthKind::FigureEight { speed, period } => (
            std::f64::consts::PI * (std::f64::consts::TAU * t / period).sin(),
            *speed,
        ),
        SynthKind::Piecewise {
            start_speed,
            segments,
        } => {
            let mut elapsed = 0.0;
            let mut yaw = 0.0;
            let mut speed = *start_speed;
            for seg in segments {
                if t < elapsed + seg.duration {
                    let dt = t - elapsed;
                    return (yaw + seg.yaw_rate * dt, speed + seg.forward_accel * dt);
                }
                yaw += seg.yaw_rate * seg.duration;
                speed += seg.forward_accel * seg.duration;
                elapsed += seg.duration;
            }
            (yaw, speed)
        }
    }
}

/// Generate a clean IMU stream and the matching ground truth.
///
/// Returns one IMU sample per trajectory point, starting at the origin with
/// identity attitude. The sample count is `duration * rate_hz` (rounded for
/// floating point), so 60 s at 100 Hz yields exactly 6000 rows. See the
/// module docs for the exactness guarantee.
pub fn synthesize(spec: &SynthSpec) -> Result<(Vec<ImuSample>, Trajectory)> {
    spec.validate()?;
    let dt = 1.0 / spec.rate_hz;
    let n = (spec.duration * spec.rate_hz + 1e-9).floor() as usize;

    // Slip process at every internal state (one state beyond the last
    // sample, so every sample has a forward difference).
    let mut slip = vec![0.0; n + 1];
    if spec.lateral_slip_std > 0.0 {
        let mut rng = SeededStream::derive(spec.seed, SLIP_STREAM_LABEL);
        let rho = (-dt / spec.slip_time_constant).exp();
        let innov = spec.lateral_slip_std * (1.0 - rho * rho).sqrt();
        slip[0] = rng.gaussian_std(spec.lateral_slip_std);
        for k in 1..=n {
            slip[k] = rho * slip[k - 1] + rng.gaussian_std(innov);
        }
    }

    let mut rs = Vec::with_capacity(n + 1);
    let mut vs = Vec::with_capacity(n + 1);
    for (k, s) in slip.iter().enumerate() {
        let (yaw, speed) = yaw_and_speed(&spec.kind, k as f64 * dt);
        let r = Rotation::from_rpy(0.0, 0.0, yaw);
        rs.push(r);
        vs.push(r * Vec3::new(speed, *s, 0.0));
    }

    let g = Vec3::new(0.0, 0.0, STANDARD_GRAVITY);
    let mut samples = Vec::with_capacity(n);
    let mut traj = Trajectory::with_capacity(n);
    let mut p = Vec3::zeros();
    for k in 0..n {
        let t = k as f64 * dt;
        let gyro = so3_log(&(rs[k].inverse() * rs[k + 1])) / dt;
        let accel = rs[k].inverse() * ((vs[k + 1] - vs[k]) / dt + g);
        samples.push(ImuSample { t, gyro, accel });
        traj.push(t, rs[k], vs[k], p);
        p += vs[k] * dt;
    }
    traj.validate()?;
    Ok((samples, traj))
}

// ---------------------------------------------------------------------------
// GNSS/INS text logs (one whitespace-separated record per file)
// ---------------------------------------------------------------------------

/// Field count of one GNSS/INS record
/// (`lat lon alt roll pitch yaw vn ve vf vl vu ax ay az af al au wx wy wz
/// wf wl wu pos_acc vel_acc navstat numsats posmode velmode orimode`).
pub const INS_FIELD_COUNT: usize = 30;

const EARTH_RADIUS: f64 = 6_378_137.0;

/// Equirectangular ENU projection anchored at the first fix.
fn enu_from_geodetic(lat: f64, lon: f64, alt: f64, anchor: (f64, f64, f64)) -> Vec3 {
    let rad = std::f64::consts::PI / 180.0;
    let east = (lon - anchor.1) * rad * EARTH_RADIUS * (anchor.0 * rad).cos();
    let north = (lat - anchor.0) * rad * EARTH_RADIUS;
    Vec3::new(east, north, alt - anchor.2)
}

fn read_ins_timestamps(path: &Path) -> Result<Vec<f64>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut base_ns = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let parsed = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f").map_err(
            |e| CoreError::Parse {
                file: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad timestamp '{s}': {e}"),
            },
        )?;
        let ns = parsed
            .and_utc()
            .timestamp_nanos_opt()
            .ok_or_else(|| CoreError::Parse {
                file: path.display().to_string(),
                line: idx + 1,
                msg: "timestamp out of range".into(),
            })?;
        let base = *base_ns.get_or_insert(ns);
        out.push((ns - base) as f64 * 1e-9);
    }
    Ok(out)
}

fn parse_ins_record(path: &Path) -> Result<[f64; INS_FIELD_COUNT]> {
    let text = fs::read_to_string(path)?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != INS_FIELD_COUNT {
        return Err(CoreError::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!(
                "expected {INS_FIELD_COUNT} fields, found {}",
                fields.len()
            ),
        });
    }
    let mut out = [0.0; INS_FIELD_COUNT];
    for (i, f) in fields.iter().enumerate() {
        out[i] = f.parse().map_err(|e| CoreError::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!("field {i} ('{f}'): {e}"),
        })?;
    }
    Ok(out)
}

/// Parse a GNSS/INS recording directory: `timestamps.txt` plus one record
/// file per sample under `data/`.
///
/// Produces the raw IMU stream (`wx wy wz`, `ax ay az`) and the ground
/// truth: ENU position anchored at the first fix, attitude from roll/pitch/
/// yaw, velocity `(ve, vn, vu)`.
pub fn parse_ins_dir(dir: &Path) -> Result<(Vec<ImuSample>, Trajectory)> {
    let times = read_ins_timestamps(&dir.join("timestamps.txt"))?;
    let data_dir = dir.join("data");
    let mut files: Vec<_> = fs::read_dir(&data_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    if files.len() != times.len() {
        return Err(CoreError::Structural(format!(
            "{} timestamps but {} record files in {}",
            times.len(),
            files.len(),
            data_dir.display()
        )));
    }
    if files.is_empty() {
        return Err(CoreError::Structural(format!(
            "no records found in {}",
            data_dir.display()
        )));
    }

    let mut samples = Vec::with_capacity(files.len());
    let mut traj = Trajectory::with_capacity(files.len());
    let mut anchor = None;
    for (i, f) in files.iter().enumerate() {
        let rec = parse_ins_record(f)?;
        let anchor = *anchor.get_or_insert((rec[0], rec[1], rec[2]));
        let p = enu_from_geodetic(rec[0], rec[1], rec[2], anchor);
        let r = Rotation::from_rpy(rec[3], rec[4], rec[5]);
        let v = Vec3::new(rec[7], rec[6], rec[10]); // (ve, vn, vu)
        samples.push(ImuSample {
            t: times[i],
            gyro: Vec3::new(rec[17], rec[18], rec[19]),
            accel: Vec3::new(rec[11], rec[12], rec[13]),
        });
        traj.push(times[i], r, v, p);
    }
    traj.validate()?;
    Ok((samples, traj))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Resample a trajectory at the given times: linear interpolation on
/// velocity and position, constant-rate geodesic interpolation on attitude.
///
/// Times must lie inside the source span (up to 1 ns of slack at the
/// edges); the output keeps the requested times in the requested order.
pub fn resample_truth(traj: &Trajectory, times: &[f64]) -> Result<Trajectory> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(CoreError::InvalidInput(
            "cannot resample an empty trajectory".into(),
        ));
    }
    const EDGE_SLACK: f64 = 1e-9;
    let t0 = traj.t[0];
    let tn = *traj.t.last().expect("non-empty");
    let mut out = Trajectory::with_capacity(times.len());
    for &tau in times {
        if !tau.is_finite() || tau < t0 - EDGE_SLACK || tau > tn + EDGE_SLACK {
            return Err(CoreError::InvalidInput(format!(
                "resample time {tau} outside trajectory span [{t0}, {tn}]"
            )));
        }
        if traj.len() == 1 {
            out.push(tau, traj.r[0], traj.v[0], traj.p[0]);
            continue;
        }
        let tau_c = tau.clamp(t0, tn);
        let i = traj
            .t
            .partition_point(|&x| x <= tau_c)
            .saturating_sub(1)
            .min(traj.len() - 2);
        let s = ((tau_c - traj.t[i]) / (traj.t[i + 1] - traj.t[i])).clamp(0.0, 1.0);
        let delta = so3_log(&(traj.r[i].inverse() * traj.r[i + 1]));
        let r = traj.r[i] * so3_exp(&(delta * s));
        let v = traj.v[i] * (1.0 - s) + traj.v[i + 1] * s;
        let p = traj.p[i] * (1.0 - s) + traj.p[i + 1] * s;
        out.push(tau, r, v, p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

pub const IMU_CSV_HEADER: &str = "t,wx,wy,wz,ax,ay,az";
pub const TRAJECTORY_CSV_HEADER: &str = "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz";

/// Normalize `-0.0` to `+0.0` so value-equal streams always serialize to
/// identical bytes (reproducibility is checked byte-wise downstream).
fn z(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::with_capacity(64 * (samples.len() + 1));
    out.push_str(IMU_CSV_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            z(s.t),
            z(s.gyro.x),
            z(s.gyro.y),
            z(s.gyro.z),
            z(s.accel.x),
            z(s.accel.y),
            z(s.accel.z)
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let file = fs::File::open(path)?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if idx == 0 {
            check_header(s, IMU_CSV_HEADER, path)?;
            continue;
        }
        if s.is_empty() {
            continue;
        }
        let f = parse_csv_fields(s, 7, path, idx + 1)?;
        samples.push(ImuSample {
            t: f[0],
            gyro: Vec3::new(f[1], f[2], f[3]),
            accel: Vec3::new(f[4], f[5], f[6]),
        });
    }
    Ok(samples)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    let mut out = String::with_capacity(96 * (traj.len() + 1));
    out.push_str(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for i in 0..traj.len() {
        let q = traj.r[i].to_quaternion();
        let (p, v) = (&traj.p[i], &traj.v[i]);
        let _ = writeln!(
            out,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            z(traj.t[i]),
            z(p.x),
            z(p.y),
            z(p.z),
            z(q[0]),
            z(q[1]),
            z(q[2]),
            z(q[3]),
            z(v.x),
            z(v.y),
            z(v.z)
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path)?;
    let mut traj = Trajectory::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if idx == 0 {
            check_header(s, TRAJECTORY_CSV_HEADER, path)?;
            continue;
        }
        if s.is_empty() {
            continue;
        }
        let f = parse_csv_fields(s, 11, path, idx + 1)?;
        let r = Rotation::from_quaternion(&[f[4], f[5], f[6], f[7]]).map_err(|e| {
            CoreError::Parse {
                file: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            }
        })?;
        traj.push(
            f[0],
            r,
            Vec3::new(f[8], f[9], f[10]),
            Vec3::new(f[1], f[2], f[3]),
        );
    }
    traj.validate()?;
    Ok(traj)
}

fn check_header(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(CoreError::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!("expected header '{expected}', found '{found}'"),
        });
    }
    Ok(())
}

fn parse_csv_fields(s: &str, expect: usize, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != expect {
        return Err(CoreError::Parse {
            file: path.display().to_string(),
            line: line_no,
            msg: format!("expected {expect} fields, found {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.trim().parse::<f64>().map_err(|e| CoreError::Parse {
                file: path.display().to_string(),
                line: line_no,
                msg: format!("'{p}': {e}"),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset splits
// ---------------------------------------------------------------------------

/// A reproducible assignment of sequence names to train/val/test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Shuffle `names` with the split sub-stream of `seed` and cut it into
/// train/val/test by the given fractions (test takes the remainder).
pub fn split_names(
    names: &[String],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SplitManifest> {
    let ok = (0.0..=1.0).contains(&train_frac)
        && (0.0..=1.0).contains(&val_frac)
        && train_frac + val_frac <= 1.0 + 1e-12;
    if !ok {
        return Err(CoreError::InvalidInput(format!(
            "bad split fractions: train {train_frac}, val {val_frac}"
        )));
    }
    let mut pool = names.to_vec();
    SeededStream::derive(seed, SPLIT_STREAM_LABEL).shuffle(&mut pool);
    let n = pool.len();
    let n_train = ((train_frac * n as f64).round() as usize).min(n);
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let test = pool.split_off(n_train + n_val);
    let val = pool.split_off(n_train);
    Ok(SplitManifest {
        seed,
        train: pool,
        val,
        test,
    })
}
