//! End-to-end training of the spiking correction network through the
//! dead-reckoning filter.
//!
//! Each training example is a window of corrupted IMU samples paired with
//! the ground-truth motion increment over the window span. The loss rolls
//! the filter forward over the corrected window — propagation and the
//! zero-lateral/vertical-velocity update run as ordinary differentiable
//! arithmetic on the reverse-mode tape, Kalman gain included — and applies a
//! Huber penalty to the nine components of the position, velocity, and
//! rotation increment residuals. Gradients flow through the filter into the
//! network's gain, bias, and noise outputs, with surrogate slopes at spike
//! nodes.
//!
//! The optimizer is adaptive moment estimation with decoupled weight decay
//! ((0.9, 0.999) moments, eps 1e-8, bias correction), and the learning rate
//! follows a cosine schedule with warm restarts, stepped once per epoch.
//! Shuffling, dropout masks, and initialization derive entirely from the
//! configured seed, so a rerun reproduces losses bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, SpikeMode, Tape};
use crate::datasets::Trajectory;
use crate::error::{CoreError, Result};
use crate::geom3d::gen as g3;
use crate::geom3d::{rows_from_mat3, Vec3};
use crate::imu_model::{corrected_axes, decode_gains, ImuSample, BETA_SCALE};
use crate::inekf::gen as kf;
use crate::inekf::{Covariance, FilterParams, FilterState};
use crate::rng::SeededStream;
use crate::snn::{forward_generic, NetConfig, ParamStore, CHANNELS};

/// Sub-stream label for the per-epoch shuffle.
const SHUFFLE_STREAM_LABEL: u64 = 0x5348_5546;
/// Sub-stream label for per-window dropout masks.
const DROPOUT_STREAM_LABEL: u64 = 0x4452_4F50;

// ---------------------------------------------------------------------------
// Configuration and targets
// ---------------------------------------------------------------------------

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Base learning rate (peak of each cosine cycle).
    pub lr: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
    /// Dropout fraction; overrides the network configuration's value during
    /// training.
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Huber transition point, in SI residual units.
    pub huber_delta: f64,
    /// Window length in samples; must match the network's window.
    pub window_n: usize,
    /// Seeds initialization, shuffling, and dropout.
    pub seed: u64,
    /// Cosine warm-restart period, in epochs.
    pub restart_period: usize,
    /// Checkpoint cadence in epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-2,
            dropout: 0.1,
            epochs: 1000,
            batch_size: 8,
            huber_delta: 4e-4,
            window_n: 128,
            seed: 0,
            restart_period: 100,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted (a frozen run is a valid diagnostic); everything
    /// else must be a sane training setup.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.batch_size >= 1
            && self.huber_delta > 0.0
            && self.window_n >= 2
            && self.restart_period >= 1;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidInput(format!(
                "bad training configuration: lr {}, weight_decay {}, dropout {}, batch {}, \
                 huber_delta {}, window_n {}, restart_period {}",
                self.lr,
                self.weight_decay,
                self.dropout,
                self.batch_size,
                self.huber_delta,
                self.window_n,
                self.restart_period
            )))
        }
    }
}

/// Ground-truth motion increment over one window span.
#[derive(Clone, Copy, Debug)]
pub struct SupervisionTarget {
    /// Relative displacement, m.
    pub dp: Vec3,
    /// Velocity change, m/s.
    pub dv: Vec3,
    /// Relative rotation as a log-map vector, rad; norm at most pi.
    pub dr: Vec3,
}

/// One training example: a sample window, the true filter state at its
/// start, and the increment it should reproduce.
#[derive(Clone, Debug)]
pub struct TrainWindow {
    /// Index of the first sample in the source sequence (diagnostics).
    pub start: usize,
    pub samples: Vec<ImuSample>,
    /// Truth pose/velocity at the window start; biases zero, extrinsics
    /// identity.
    pub init: FilterState,
    pub target: SupervisionTarget,
}

/// Pair windows of `window_n` samples with ground-truth increments.
///
/// Window `k` starts at sample `k * stride` and spans samples
/// `[i, i + window_n - 1]`; its target is the truth increment between those
/// two instants: `dp = p_j - p_i`, `dv = v_j - v_i`,
/// `dr = log(R_i^T R_j)`. A sequence shorter than one window yields an
/// empty list.
pub fn build_windows(
    samples: &[ImuSample],
    truth: &Trajectory,
    window_n: usize,
    stride: usize,
) -> Result<Vec<TrainWindow>> {
    if window_n < 2 || stride < 1 {
        return Err(CoreError::InvalidInput(format!(
            "window_n {window_n} and stride {stride} must be at least 2 and 1"
        )));
    }
    if samples.len() != truth.len() {
        return Err(CoreError::Structural(format!(
            "{} IMU samples but {} ground-truth states",
            samples.len(),
            truth.len()
        )));
    }
    let mut windows = Vec::new();
    let mut i = 0;
    while i + window_n <= samples.len() {
        let j = i + window_n - 1;
        let rel = truth.r[i].inverse() * truth.r[j];
        windows.push(TrainWindow {
            start: i,
            samples: samples[i..=j].to_vec(),
            init: FilterState::new(truth.r[i], truth.v[i], truth.p[i]),
            target: SupervisionTarget {
                dp: truth.p[j] - truth.p[i],
                dv: truth.v[j] - truth.v[i],
                dr: crate::geom3d::so3_log(&rel),
            },
        });
        i += stride;
    }
    Ok(windows)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

fn huber_generic<R: Scalar>(r: R, delta: f64) -> R {
    if r.value().abs() <= delta {
        r * r * R::lit(0.5)
    } else {
        r.abs() * R::lit(delta) - R::lit(0.5 * delta * delta)
    }
}

/// Huber penalty: quadratic `r^2/2` for `|r| <= delta`, linear
/// `delta|r| - delta^2/2` beyond; continuous with continuous slope at the
/// transition.
pub fn huber(r: f64, delta: f64) -> f64 {
    huber_generic(r, delta)
}

fn state_lits<R: Scalar>(s: &FilterState) -> kf::StateG<R> {
    kf::StateG {
        r: g3::m3_lit(&rows_from_mat3(s.r.matrix())),
        v: g3::v3_lit(&[s.v.x, s.v.y, s.v.z]),
        p: g3::v3_lit(&[s.p.x, s.p.y, s.p.z]),
        bw: g3::v3_lit(&[s.bw.x, s.bw.y, s.bw.z]),
        ba: g3::v3_lit(&[s.ba.x, s.ba.y, s.ba.z]),
        rc: g3::m3_lit(&rows_from_mat3(s.rc.matrix())),
        pc: g3::v3_lit(&[s.pc.x, s.pc.y, s.pc.z]),
    }
}

/// Differentiable window loss: network forward, correction/noise decode,
/// filter rollout, Huber on the nine increment residuals.
///
/// Generic over the scalar, so the same code path runs in plain `f64` and
/// on the gradient tape; `params` must come from `store` (values or tape
/// inputs) in storage order. Returns the loss and the normalization
/// statistics the encoder observed.
pub fn window_loss<R: Scalar>(
    net: &NetConfig,
    store: &ParamStore,
    params: &[R],
    filter: &FilterParams,
    win: &TrainWindow,
    huber_delta: f64,
    training: bool,
    mode: SpikeMode,
    dropout_rng: Option<&mut SeededStream>,
) -> Result<(R, [(f64, f64); CHANNELS])> {
    let n = win.samples.len();
    if n != net.window_n {
        return Err(CoreError::InvalidInput(format!(
            "window holds {n} samples, the network expects {}",
            net.window_n
        )));
    }
    let raw: Vec<[f64; CHANNELS]> = win
        .samples
        .iter()
        .map(|s| [s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z])
        .collect();
    let (y, stats) = forward_generic(net, store, params, &raw, training, mode, dropout_rng)?;

    // Decode the window-constant correction and measurement noise.
    let y_c: [R; 6] = std::array::from_fn(|i| y[i]);
    let y_b: [R; 6] = std::array::from_fn(|i| y[6 + i]);
    let y_r: [R; 2] = std::array::from_fn(|i| y[12 + i]);
    let gains = decode_gains(&y_c, BETA_SCALE);
    let (n_lat, n_up) = kf::decode_noise(&y_r, filter.sigma_lat2, filter.sigma_up2);
    let corrected: Vec<[R; 6]> = raw
        .iter()
        .map(|r| {
            let lits: [R; 6] = std::array::from_fn(|i| R::lit(r[i]));
            corrected_axes(&lits, &gains, &y_b)
        })
        .collect();

    // Roll the filter over the window from the true initial state.
    let mut state = state_lits::<R>(&win.init);
    let mut cov = kf::cov_lit(&Covariance::from_variances(&filter.init).rows());
    let q = filter.process.q_diag();
    for k in 1..n {
        let dt = win.samples[k].t - win.samples[k - 1].t;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CoreError::InvalidInput(format!(
                "non-increasing timestamps at window offset {k}: dt {dt}"
            )));
        }
        let gyro: g3::V3<R> = std::array::from_fn(|i| corrected[k - 1][i]);
        let accel: g3::V3<R> = std::array::from_fn(|i| corrected[k - 1][3 + i]);
        let (s2, c2) = kf::propagate(&state, &cov, &gyro, &accel, dt, &q, filter.gravity);
        state = s2;
        cov = c2;
        if filter.zupt_enabled {
            let omega: g3::V3<R> =
                std::array::from_fn(|i| corrected[k][i] - state.bw[i]);
            let out = kf::zupt_update(
                &state,
                &cov,
                &omega,
                n_lat,
                n_up,
                filter.cond_max,
                filter.joseph_update,
            );
            state = out.state;
            cov = out.cov;
        }
    }

    // Increment residuals against the supervision target.
    let r0t = g3::m3_transpose(&g3::m3_lit(&rows_from_mat3(win.init.r.matrix())));
    let dr_hat = g3::so3_log(&g3::m3_mul(&r0t, &state.r));
    let t = &win.target;
    let residuals: [R; 9] = [
        state.p[0] - R::lit(win.init.p.x + t.dp.x),
        state.p[1] - R::lit(win.init.p.y + t.dp.y),
        state.p[2] - R::lit(win.init.p.z + t.dp.z),
        state.v[0] - R::lit(win.init.v.x + t.dv.x),
        state.v[1] - R::lit(win.init.v.y + t.dv.y),
        state.v[2] - R::lit(win.init.v.z + t.dv.z),
        dr_hat[0] - R::lit(t.dr.x),
        dr_hat[1] - R::lit(t.dr.y),
        dr_hat[2] - R::lit(t.dr.z),
    ];
    let mut loss = R::lit(0.0);
    for r in residuals {
        loss = loss + huber_generic(r, huber_delta);
    }
    Ok((loss, stats))
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Cosine learning-rate schedule with warm restarts (fixed period):
/// `base * (1 + cos(pi * (step mod period) / period)) / 2`.
pub fn lr_schedule(step: usize, base_lr: f64, restart_period: usize) -> f64 {
    let phase = (step % restart_period) as f64 / restart_period as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update: moment EMAs with bias correction, then
    /// `w -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * w`, skipping
    /// entries whose mask is false.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, wd: f64, mask: &[bool]) {
        assert_eq!(w.len(), g.len());
        assert_eq!(w.len(), self.m.len());
        assert_eq!(w.len(), mask.len());
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..w.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS) + lr * wd * w[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One epoch's log record (serialized as a JSON line by the caller).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean window loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    /// Mean over batches of the batch-gradient L2 norm.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Owns the parameter store, optimizer state, and epoch counter.
pub struct Trainer {
    net: NetConfig,
    filter: FilterParams,
    cfg: TrainConfig,
    store: ParamStore,
    opt: AdamW,
    epoch: usize,
}

impl Trainer {
    /// Fresh parameters seeded from the training configuration. The network
    /// configuration's window and dropout are forced to the trainer's
    /// values, keeping one source of truth.
    pub fn new(mut net: NetConfig, filter: FilterParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        net.window_n = cfg.window_n;
        net.dropout = cfg.dropout;
        net.validate()?;
        let store = ParamStore::init(&net, cfg.seed)?;
        let opt = AdamW::new(store.len());
        Ok(Self {
            net,
            filter,
            cfg,
            store,
            opt,
            epoch: 0,
        })
    }

    /// Resume from existing parameters (fresh optimizer state).
    pub fn from_store(
        net: NetConfig,
        filter: FilterParams,
        cfg: TrainConfig,
        store: ParamStore,
    ) -> Result<Self> {
        let mut t = Self::new(net, filter, cfg)?;
        if store.len() != t.store.len() {
            return Err(CoreError::Structural(format!(
                "resumed parameters hold {} values, the configuration needs {}",
                store.len(),
                t.store.len()
            )));
        }
        t.store = store;
        Ok(t)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over all windows: seeded shuffle, batched forward/backward
    /// (batch items in parallel, reduced in a fixed order), optimizer step
    /// per batch, running-statistics update. A non-finite window loss
    /// aborts with the offending window's start index and gradient norm.
    pub fn train_epoch(&mut self, windows: &[TrainWindow]) -> Result<EpochStats> {
        let started = std::time::Instant::now();
        if windows.is_empty() {
            return Err(CoreError::InvalidInput("no training windows".into()));
        }
        let lr = lr_schedule(self.epoch, self.cfg.lr, self.cfg.restart_period);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        SeededStream::derive(self.cfg.seed, SHUFFLE_STREAM_LABEL ^ self.epoch as u64)
            .shuffle(&mut order);
        let mask = self.store.trainable_mask();

        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let epoch = self.epoch;
            let seed = self.cfg.seed;
            let passes: Vec<Result<(f64, Vec<f64>, [(f64, f64); CHANNELS])>> = batch
                .par_iter()
                .map(|&wi| {
                    let win = &windows[wi];
                    let mut drop_rng = SeededStream::derive(
                        seed,
                        DROPOUT_STREAM_LABEL ^ ((epoch as u64) << 32) ^ wi as u64,
                    );
                    let tape = Tape::new();
                    let vars: Vec<_> =
                        self.store.values().iter().map(|&v| tape.input(v)).collect();
                    let (loss, stats) = window_loss(
                        &self.net,
                        &self.store,
                        &vars,
                        &self.filter,
                        win,
                        self.cfg.huber_delta,
                        true,
                        SpikeMode::Hard,
                        Some(&mut drop_rng),
                    )?;
                    let grads = tape.backward(loss).input_gradients();
                    if !loss.value().is_finite() {
                        let gn = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                        return Err(CoreError::NonFiniteLoss {
                            epoch,
                            window_start: win.start,
                            grad_norm: gn,
                        });
                    }
                    Ok((loss.value(), grads, stats))
                })
                .collect();

            // Deterministic reduction in batch order.
            let mut grad_mean = vec![0.0; self.store.len()];
            let mut stat_mean = [(0.0, 0.0); CHANNELS];
            let inv = 1.0 / batch.len() as f64;
            for pass in passes {
                let (loss, grads, stats) = pass?;
                loss_sum += loss;
                for (acc, g) in grad_mean.iter_mut().zip(&grads) {
                    *acc += g * inv;
                }
                for (acc, s) in stat_mean.iter_mut().zip(&stats) {
                    acc.0 += s.0 * inv;
                    acc.1 += s.1 * inv;
                }
            }
            norm_sum += grad_mean.iter().map(|g| g * g).sum::<f64>().sqrt();
            batches += 1;
            self.opt
                .step(self.store.values_mut(), &grad_mean, lr, self.cfg.weight_decay, &mask);
            self.store
                .update_running_stats(&stat_mean, self.net.norm_momentum);
        }

        let stats = EpochStats {
            epoch: self.epoch,
            loss: loss_sum / windows.len() as f64,
            lr,
            grad_norm: norm_sum / batches as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.epoch += 1;
        Ok(stats)
    }
}
