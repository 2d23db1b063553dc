//! Spiking network mapping a window of IMU samples to a 14-component
//! correction head.
//!
//! Pipeline (all activations leaky integrate-and-fire spikes):
//!
//! 1. **Encoder** — 1-D convolution along time (6 -> 6 channels), per-channel
//!    normalization, then LIF thresholding where each time step is divided
//!    into `ts` segments; the membrane integrates over the fine time axis
//!    `t * ts + s` with the input current held constant within a step.
//! 2. **Embedding** — each of the 6 channels is one token; a shared linear
//!    layer maps its time axis to `d_model` features per segment, followed
//!    by LIF over segments.
//! 3. **Attention blocks** — spike-valued Q/K/V (linear + LIF), attention
//!    scores as scaled dot products of binary vectors without softmax,
//!    LIF, output projection (linear + LIF), additive residual; then a
//!    two-layer feed-forward (linear + LIF twice) with another residual.
//!    Dropout (training only) acts on linear outputs in the embedding and
//!    feed-forward sublayers.
//! 4. **Head** — mean spike rate over segments, flattened across tokens,
//!    through a real-valued linear layer; `tanh` bounds the 6 gain and 2
//!    noise components to [-1, 1], the 6 bias components stay unbounded.
//!
//! The forward pass is generic over [`Scalar`], so the identical code runs
//! in `f64` (inference) and on the autodiff tape (training, with surrogate
//! gradients at the spike nonlinearity). Membrane state lives entirely
//! inside one forward call: windows never leak state into each other.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{surrogate_sigmoid, surrogate_slope, Scalar, SpikeMode};
use crate::error::{CoreError, Result};
use crate::rng::SeededStream;

/// Input channels (gyro xyz, accel xyz). Fixed by the sensor layout.
pub const CHANNELS: usize = 6;
/// Head width: 6 inverse gains, 6 biases, 2 noise exponents.
pub const OUT_DIM: usize = 14;

/// Sub-stream label for weight initialization.
const INIT_STREAM_LABEL: u64 = 0x494E_4954;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SNCKPT01";
const CHECKPOINT_FORMAT: &str = "snn-checkpoint-v1";

// ---------------------------------------------------------------------------
// Neuron model
// ---------------------------------------------------------------------------

/// Leaky integrate-and-fire parameters, including the number of simulation
/// segments per input time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    /// Membrane decay factor in (0, 1].
    pub beta: f64,
    /// Firing threshold.
    pub u_thr: f64,
    /// Post-spike reset potential.
    pub v_reset: f64,
    /// Surrogate-gradient steepness.
    pub alpha: f64,
    /// Segments per input time step (>= 1).
    pub ts: usize,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            beta: 0.9,
            u_thr: 1.0,
            v_reset: 0.0,
            alpha: 2.0,
            ts: 4,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta <= 1.0
            && self.u_thr > self.v_reset
            && self.alpha > 0.0
            && self.ts >= 1
            && [self.beta, self.u_thr, self.v_reset, self.alpha]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidInput(format!(
                "bad neuron parameters: beta {}, u_thr {}, v_reset {}, alpha {}, ts {}",
                self.beta, self.u_thr, self.v_reset, self.alpha, self.ts
            )))
        }
    }
}

/// One membrane update: `u = h_prev + i`, spike `s = 1[u >= u_thr]`, next
/// hidden state `h = v_reset * s + (1 - s) * beta * u`. Returns `(u, s, h)`.
pub fn lif_step<R: Scalar>(h_prev: R, input_i: R, p: &LifParams, mode: SpikeMode) -> (R, R, R) {
    let u = h_prev + input_i;
    let s = (u - R::lit(p.u_thr)).spike(p.alpha, mode);
    let h = s * R::lit(p.v_reset) + (R::lit(1.0) - s) * (R::lit(p.beta) * u);
    (u, s, h)
}

/// Smooth spike approximation and its derivative at membrane potential `u`
/// (measured in absolute units; the threshold is subtracted internally).
pub fn surrogate(u: f64, p: &LifParams) -> (f64, f64) {
    let rel = u - p.u_thr;
    (
        surrogate_sigmoid(rel, p.alpha),
        surrogate_slope(rel, p.alpha),
    )
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Input window length (samples).
    pub window_n: usize,
    /// Token feature width.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Encoder convolution kernel length (odd).
    pub conv_kernel: usize,
    /// Dropout fraction (training only).
    pub dropout: f64,
    /// Normalization epsilon.
    pub norm_eps: f64,
    /// Running-statistics update rate during training.
    pub norm_momentum: f64,
    pub lif: LifParams,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            window_n: 128,
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            conv_kernel: 5,
            dropout: 0.1,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            lif: LifParams::default(),
        }
    }
}

impl NetConfig {
    /// Full-scale configuration: 500-sample window, 256-wide model.
    pub fn large() -> Self {
        Self {
            window_n: 500,
            d_model: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        let ok = self.window_n >= 1
            && self.d_model >= 1
            && self.n_heads >= 1
            && self.d_model % self.n_heads == 0
            && self.n_blocks >= 1
            && self.conv_kernel >= 1
            && self.conv_kernel % 2 == 1
            && (0.0..1.0).contains(&self.dropout)
            && self.norm_eps > 0.0
            && self.norm_momentum > 0.0
            && self.norm_momentum <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidInput(format!(
                "bad network configuration: window {}, d_model {}, heads {}, blocks {}, \
                 kernel {}, dropout {}",
                self.window_n,
                self.d_model,
                self.n_heads,
                self.n_blocks,
                self.conv_kernel,
                self.dropout
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Shape and placement of one named tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// False for running statistics (updated outside the optimizer).
    pub trainable: bool,
}

/// All network parameters as one flat `f64` vector with named views.
///
/// Initialization is fully determined by the seed: weights draw from a
/// truncated normal (std 0.02) in registration order, biases start at zero,
/// normalization gains at one, and the head at exactly zero so a fresh
/// network emits the identity correction.
#[derive(Clone, Debug)]
pub struct ParamStore {
    metas: Vec<TensorMeta>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

enum Init {
    TruncNormal,
    Zero,
    One,
}

impl ParamStore {
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = Self {
            metas: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        };
        let mut rng = SeededStream::derive(seed, INIT_STREAM_LABEL);
        let (t, d, k) = (cfg.window_n, cfg.d_model, cfg.conv_kernel);
        let mut reg = |name: String, shape: &[usize], trainable: bool, init: Init| {
            let len: usize = shape.iter().product();
            let offset = store.data.len();
            store.index.insert(name.clone(), store.metas.len());
            store.metas.push(TensorMeta {
                name,
                shape: shape.to_vec(),
                offset,
                len,
                trainable,
            });
            for _ in 0..len {
                store.data.push(match init {
                    Init::TruncNormal => rng.truncated_normal(0.02),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                });
            }
        };

        reg(
            "encoder.conv.weight".into(),
            &[CHANNELS, CHANNELS, k],
            true,
            Init::TruncNormal,
        );
        reg("encoder.conv.bias".into(), &[CHANNELS], true, Init::Zero);
        reg("encoder.norm.gamma".into(), &[CHANNELS], true, Init::One);
        reg("encoder.norm.beta".into(), &[CHANNELS], true, Init::Zero);
        reg("encoder.norm.mean".into(), &[CHANNELS], false, Init::Zero);
        reg("encoder.norm.var".into(), &[CHANNELS], false, Init::One);
        reg("embed.weight".into(), &[d, t], true, Init::TruncNormal);
        reg("embed.bias".into(), &[d], true, Init::Zero);
        for b in 0..cfg.n_blocks {
            for part in ["q", "k", "v", "out", "ffn1", "ffn2"] {
                reg(
                    format!("block{b}.{part}.weight"),
                    &[d, d],
                    true,
                    Init::TruncNormal,
                );
                reg(format!("block{b}.{part}.bias"), &[d], true, Init::Zero);
            }
        }
        reg(
            "head.weight".into(),
            &[OUT_DIM, CHANNELS * d],
            true,
            Init::Zero,
        );
        reg("head.bias".into(), &[OUT_DIM], true, Init::Zero);
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorMeta, &[f64])> {
        let i = *self.index.get(name)?;
        let m = &self.metas[i];
        Some((m, &self.data[m.offset..m.offset + m.len]))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = *self.index.get(name)?;
        let m = &self.metas[i];
        Some(&mut self.data[m.offset..m.offset + m.len])
    }

    /// Per-scalar trainability mask, aligned with `values()`.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for m in &self.metas {
            if m.trainable {
                mask[m.offset..m.offset + m.len].fill(true);
            }
        }
        mask
    }

    pub(crate) fn slice<'a, R>(&self, params: &'a [R], name: &str) -> &'a [R] {
        let m = &self.metas[self.index[name]];
        &params[m.offset..m.offset + m.len]
    }

    /// Fold freshly observed per-channel `(mean, var)` statistics into the
    /// running estimates used at inference.
    pub fn update_running_stats(&mut self, observed: &[(f64, f64); CHANNELS], momentum: f64) {
        let m = self.tensor_mut("encoder.norm.mean").expect("registered");
        for (slot, obs) in m.iter_mut().zip(observed) {
            *slot += momentum * (obs.0 - *slot);
        }
        let v = self.tensor_mut("encoder.norm.var").expect("registered");
        for (slot, obs) in v.iter_mut().zip(observed) {
            *slot += momentum * (obs.1 - *slot);
        }
    }

    /// Serialize as a versioned container: magic, JSON manifest (format tag,
    /// configuration, tensor table), then all values as little-endian f32.
    pub fn save(&self, cfg: &NetConfig, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            format: &'a str,
            config: &'a NetConfig,
            tensors: &'a [TensorMeta],
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: CHECKPOINT_FORMAT,
            config: cfg,
            tensors: &self.metas,
        })?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(manifest.len() as u64).to_le_bytes())?;
        file.write_all(&manifest)?;
        let mut bytes = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Load a checkpoint written by [`ParamStore::save`]; the tensor table
    /// must exactly match the registry derived from the stored
    /// configuration.
    pub fn load(path: &Path) -> Result<(NetConfig, Self)> {
        #[derive(Deserialize)]
        struct Manifest {
            format: String,
            config: NetConfig,
            tensors: Vec<TensorMeta>,
        }
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Format(format!(
                "not a checkpoint file: bad magic {magic:02x?}"
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint format '{}'",
                manifest.format
            )));
        }
        let mut store = Self::init(&manifest.config, 0)?;
        if manifest.tensors != store.metas {
            return Err(CoreError::Structural(
                "checkpoint tensor table does not match its configuration".into(),
            ));
        }
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * store.data.len() {
            return Err(CoreError::Structural(format!(
                "checkpoint data holds {} bytes, expected {}",
                bytes.len(),
                4 * store.data.len()
            )));
        }
        for (i, v) in store.data.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        }
        Ok((manifest.config, store))
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Binary activations indexed `(segment, time, channel)`.
#[derive(Clone, Debug)]
pub struct SpikeTrain {
    pub steps: usize,
    pub time: usize,
    pub channels: usize,
    /// Flattened `((s * time) + t) * channels + c`; every entry 0 or 1.
    pub data: Vec<f64>,
}

impl SpikeTrain {
    pub fn get(&self, s: usize, t: usize, c: usize) -> f64 {
        self.data[(s * self.time + t) * self.channels + c]
    }
}

/// The 14 raw head outputs: 6 gain logits (in [-1, 1]), 6 additive biases,
/// 2 noise exponents (in [-1, 1]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetOutput {
    pub y: [f64; OUT_DIM],
}

impl NetOutput {
    pub fn y_c(&self) -> [f64; 6] {
        self.y[0..6].try_into().expect("6 components")
    }

    pub fn y_b(&self) -> [f64; 6] {
        self.y[6..12].try_into().expect("6 components")
    }

    pub fn y_r(&self) -> [f64; 2] {
        self.y[12..14].try_into().expect("2 components")
    }
}

fn check_window(cfg: &NetConfig, window: &[[f64; CHANNELS]]) -> Result<()> {
    if window.len() != cfg.window_n {
        return Err(CoreError::InvalidInput(format!(
            "window holds {} samples, the network expects {}",
            window.len(),
            cfg.window_n
        )));
    }
    if !window.iter().flatten().all(|x| x.is_finite()) {
        return Err(CoreError::NonFinite("network input window".into()));
    }
    Ok(())
}

/// Encoder: convolution, normalization, fine-time LIF.
///
/// Returns the spike tensor (flattened `(s, t, c)`) and the per-channel
/// `(mean, var)` statistics that normalization used.
fn encode<R: Scalar>(
    cfg: &NetConfig,
    store: &ParamStore,
    params: &[R],
    window: &[[f64; CHANNELS]],
    training: bool,
    mode: SpikeMode,
) -> (Vec<R>, [(f64, f64); CHANNELS]) {
    let t_len = cfg.window_n;
    let k = cfg.conv_kernel;
    let pad = k / 2;
    let w = store.slice(params, "encoder.conv.weight");
    let b = store.slice(params, "encoder.conv.bias");

    // conv[t][o], flattened t * CHANNELS + o.
    let mut conv = vec![R::lit(0.0); t_len * CHANNELS];
    for ti in 0..t_len {
        for o in 0..CHANNELS {
            let mut acc = b[o];
            for i in 0..CHANNELS {
                for kk in 0..k {
                    let src = ti + kk;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let x = R::lit(window[src - pad][i]);
                    acc = w[(o * CHANNELS + i) * k + kk].mul_add(x, acc);
                }
            }
            conv[ti * CHANNELS + o] = acc;
        }
    }

    // Per-channel statistics: fresh window statistics during training
    // (differentiated through), frozen running estimates at inference.
    let gamma = store.slice(params, "encoder.norm.gamma");
    let beta = store.slice(params, "encoder.norm.beta");
    let run_mean = store.slice(params, "encoder.norm.mean");
    let run_var = store.slice(params, "encoder.norm.var");
    let inv_n = R::lit(1.0 / t_len as f64);
    let mut observed = [(0.0, 0.0); CHANNELS];
    let mut normed = vec![R::lit(0.0); t_len * CHANNELS];
    for o in 0..CHANNELS {
        let (mean, var) = if training {
            let mut sum = R::lit(0.0);
            for ti in 0..t_len {
                sum = sum + conv[ti * CHANNELS + o];
            }
            let mean = sum * inv_n;
            let mut sq = R::lit(0.0);
            for ti in 0..t_len {
                let d = conv[ti * CHANNELS + o] - mean;
                sq = d.mul_add(d, sq);
            }
            (mean, sq * inv_n)
        } else {
            (run_mean[o], run_var[o])
        };
        observed[o] = (mean.value(), var.value());
        let inv_std = (var + R::lit(cfg.norm_eps)).sqrt().recip();
        let scale = gamma[o] * inv_std;
        for ti in 0..t_len {
            let centered = conv[ti * CHANNELS + o] - mean;
            normed[ti * CHANNELS + o] = centered.mul_add(scale, beta[o]);
        }
    }

    // LIF over fine time: membrane carries across the whole window, the
    // input current repeats over the ts segments of its time step.
    let ts = cfg.lif.ts;
    let mut spikes = vec![R::lit(0.0); ts * t_len * CHANNELS];
    for o in 0..CHANNELS {
        let mut h = R::lit(0.0);
        for ti in 0..t_len {
            let current = normed[ti * CHANNELS + o];
            for s in 0..ts {
                let (_, sp, h_next) = lif_step(h, current, &cfg.lif, mode);
                h = h_next;
                spikes[(s * t_len + ti) * CHANNELS + o] = sp;
            }
        }
    }
    (spikes, observed)
}

/// `out[c related] = w (d_out x d_in) * x[c] + bias`, per segment and token.
fn linear_over_segments<R: Scalar>(
    x: &[Vec<R>],
    w: &[R],
    bias: &[R],
    d_in: usize,
    d_out: usize,
) -> Vec<Vec<R>> {
    x.iter()
        .map(|xs| {
            let mut out = vec![R::lit(0.0); CHANNELS * d_out];
            for c in 0..CHANNELS {
                for o in 0..d_out {
                    let mut acc = bias[o];
                    for i in 0..d_in {
                        acc = w[o * d_in + i].mul_add(xs[c * d_in + i], acc);
                    }
                    out[c * d_out + o] = acc;
                }
            }
            out
        })
        .collect()
}

/// LIF across segments with one membrane per element.
fn lif_over_segments<R: Scalar>(pre: &[Vec<R>], lif: &LifParams, mode: SpikeMode) -> Vec<Vec<R>> {
    let width = pre[0].len();
    let mut h = vec![R::lit(0.0); width];
    pre.iter()
        .map(|ps| {
            let mut out = Vec::with_capacity(width);
            for (j, p) in ps.iter().enumerate() {
                let (_, sp, h_next) = lif_step(h[j], *p, lif, mode);
                h[j] = h_next;
                out.push(sp);
            }
            out
        })
        .collect()
}

/// Inverted dropout on linear outputs; draws one Bernoulli factor per
/// element per segment, in a fixed order.
fn apply_dropout<R: Scalar>(x: &mut [Vec<R>], p: f64, rng: &mut SeededStream) {
    let keep_scale = 1.0 / (1.0 - p);
    for xs in x.iter_mut() {
        for e in xs.iter_mut() {
            let factor = if rng.uniform01() < p { 0.0 } else { keep_scale };
            *e = *e * R::lit(factor);
        }
    }
}

/// Full forward pass, generic over the scalar type.
///
/// `params` must align with `store` (same length and layout); during
/// training a dropout stream is required whenever `cfg.dropout > 0`.
/// Returns the 14 head outputs and the normalization statistics observed by
/// the encoder.
pub(crate) fn forward_generic<R: Scalar>(
    cfg: &NetConfig,
    store: &ParamStore,
    params: &[R],
    window: &[[f64; CHANNELS]],
    training: bool,
    mode: SpikeMode,
    mut dropout_rng: Option<&mut SeededStream>,
) -> Result<([R; OUT_DIM], [(f64, f64); CHANNELS])> {
    cfg.validate()?;
    check_window(cfg, window)?;
    if params.len() != store.len() {
        return Err(CoreError::InvalidInput(format!(
            "parameter vector holds {} values, the store holds {}",
            params.len(),
            store.len()
        )));
    }
    let use_dropout = training && cfg.dropout > 0.0;
    if use_dropout && dropout_rng.is_none() {
        return Err(CoreError::InvalidInput(
            "training with dropout requires a dropout stream".into(),
        ));
    }

    let (t_len, d, ts) = (cfg.window_n, cfg.d_model, cfg.lif.ts);
    let (enc, observed) = encode(cfg, store, params, window, training, mode);

    // Embedding: shared linear over each token's time axis, per segment.
    let we = store.slice(params, "embed.weight");
    let be = store.slice(params, "embed.bias");
    let mut emb_pre: Vec<Vec<R>> = Vec::with_capacity(ts);
    for s in 0..ts {
        let mut xs = vec![R::lit(0.0); CHANNELS * d];
        for c in 0..CHANNELS {
            for di in 0..d {
                let mut acc = be[di];
                for ti in 0..t_len {
                    acc = we[di * t_len + ti].mul_add(enc[(s * t_len + ti) * CHANNELS + c], acc);
                }
                xs[c * d + di] = acc;
            }
        }
        emb_pre.push(xs);
    }
    if use_dropout {
        apply_dropout(&mut emb_pre, cfg.dropout, dropout_rng.as_mut().expect("checked"));
    }
    let mut x = lif_over_segments(&emb_pre, &cfg.lif, mode);

    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / ((dh as f64).sqrt() * CHANNELS as f64);
    for blk in 0..cfg.n_blocks {
        let t_name = |part: &str, kind: &str| format!("block{blk}.{part}.{kind}");
        let lin = |xin: &[Vec<R>], part: &str| {
            linear_over_segments(
                xin,
                store.slice(params, &t_name(part, "weight")),
                store.slice(params, &t_name(part, "bias")),
                d,
                d,
            )
        };
        let q = lif_over_segments(&lin(&x, "q"), &cfg.lif, mode);
        let k = lif_over_segments(&lin(&x, "k"), &cfg.lif, mode);
        let v = lif_over_segments(&lin(&x, "v"), &cfg.lif, mode);

        // Scaled dot-product attention over binary activations, no softmax.
        let mut attn_pre: Vec<Vec<R>> = Vec::with_capacity(ts);
        for s in 0..ts {
            let mut out = vec![R::lit(0.0); CHANNELS * d];
            for h in 0..n_heads {
                let base = h * dh;
                let mut scores = [[R::lit(0.0); CHANNELS]; CHANNELS];
                for a in 0..CHANNELS {
                    for b2 in 0..CHANNELS {
                        let mut acc = R::lit(0.0);
                        for f in 0..dh {
                            acc = q[s][a * d + base + f].mul_add(k[s][b2 * d + base + f], acc);
                        }
                        scores[a][b2] = acc;
                    }
                }
                for a in 0..CHANNELS {
                    for f in 0..dh {
                        let mut acc = R::lit(0.0);
                        for b2 in 0..CHANNELS {
                            acc = scores[a][b2].mul_add(v[s][b2 * d + base + f], acc);
                        }
                        out[a * d + base + f] = acc * R::lit(scale);
                    }
                }
            }
            attn_pre.push(out);
        }
        let attn_sp = lif_over_segments(&attn_pre, &cfg.lif, mode);
        let out_sp = lif_over_segments(&lin(&attn_sp, "out"), &cfg.lif, mode);
        for s in 0..ts {
            for j in 0..CHANNELS * d {
                x[s][j] = x[s][j] + out_sp[s][j];
            }
        }

        let mut f1 = lin(&x, "ffn1");
        if use_dropout {
            apply_dropout(&mut f1, cfg.dropout, dropout_rng.as_mut().expect("checked"));
        }
        let f1_sp = lif_over_segments(&f1, &cfg.lif, mode);
        let mut f2 = lin(&f1_sp, "ffn2");
        if use_dropout {
            apply_dropout(&mut f2, cfg.dropout, dropout_rng.as_mut().expect("checked"));
        }
        let f2_sp = lif_over_segments(&f2, &cfg.lif, mode);
        for s in 0..ts {
            for j in 0..CHANNELS * d {
                x[s][j] = x[s][j] + f2_sp[s][j];
            }
        }
    }

    // Head: mean rate over segments, flattened, linear, bounded gains/noise.
    let inv_ts = R::lit(1.0 / ts as f64);
    let mut rate = vec![R::lit(0.0); CHANNELS * d];
    for xs in &x {
        for (r, e) in rate.iter_mut().zip(xs) {
            *r = *r + *e;
        }
    }
    for r in rate.iter_mut() {
        *r = *r * inv_ts;
    }
    let wh = store.slice(params, "head.weight");
    let bh = store.slice(params, "head.bias");
    let mut y = [R::lit(0.0); OUT_DIM];
    for (o, slot) in y.iter_mut().enumerate() {
        let mut acc = bh[o];
        for (j, r) in rate.iter().enumerate() {
            acc = wh[o * (CHANNELS * d) + j].mul_add(*r, acc);
        }
        *slot = if o < 6 || o >= 12 { acc.tanh() } else { acc };
    }
    Ok((y, observed))
}

/// Inference-mode forward pass: hard spikes, dropout off, frozen
/// normalization statistics. Deterministic for identical inputs.
pub fn forward(cfg: &NetConfig, store: &ParamStore, window: &[[f64; CHANNELS]]) -> Result<NetOutput> {
    let (y, _) = forward_generic::<f64>(
        cfg,
        store,
        store.values(),
        window,
        false,
        SpikeMode::Hard,
        None,
    )?;
    Ok(NetOutput { y })
}

/// Run only the spike encoder (inference mode) and expose the binary
/// activations.
pub fn spike_encode(
    cfg: &NetConfig,
    store: &ParamStore,
    window: &[[f64; CHANNELS]],
) -> Result<SpikeTrain> {
    cfg.validate()?;
    check_window(cfg, window)?;
    let (spikes, _) = encode::<f64>(
        cfg,
        store,
        store.values(),
        window,
        false,
        SpikeMode::Hard,
    );
    Ok(SpikeTrain {
        steps: cfg.lif.ts,
        time: cfg.window_n,
        channels: CHANNELS,
        data: spikes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            window_n: 16,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            dropout: 0.0,
            ..NetConfig::default()
        }
    }

    fn test_window(n: usize) -> Vec<[f64; CHANNELS]> {
        (0..n)
            .map(|t| {
                let s = t as f64 * 0.37;
                [
                    1.5 * s.sin(),
                    -0.8 * (1.3 * s).cos(),
                    0.4 * (0.7 * s).sin(),
                    2.0 * (0.9 * s).cos(),
                    -1.1 * (1.7 * s).sin(),
                    0.6 * s.cos(),
                ]
            })
            .collect()
    }

    #[test]
    fn lif_branches_follow_the_reset_rule() {
        let p = LifParams::default();
        // Below threshold: no spike, leaky accumulation.
        let (u, s, h) = lif_step::<f64>(0.2, 0.3, &p, SpikeMode::Hard);
        assert_eq!(u, 0.5);
        assert_eq!(s, 0.0);
        assert!((h - 0.9 * 0.5).abs() < 1e-15);
        // At/above threshold: spike and reset.
        let (u, s, h) = lif_step::<f64>(0.9, 0.4, &p, SpikeMode::Hard);
        assert!((u - 1.3).abs() < 1e-15);
        assert_eq!(s, 1.0);
        assert_eq!(h, p.v_reset);
        // Exactly at threshold counts as a spike.
        let (_, s, _) = lif_step::<f64>(0.0, 1.0, &p, SpikeMode::Hard);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn constant_drive_first_spike_at_step_four() {
        let p = LifParams {
            beta: 1.0,
            ..LifParams::default()
        };
        let mut h = 0.0;
        let mut spikes = Vec::new();
        for _ in 0..4 {
            let (_, s, h_next) = lif_step::<f64>(h, 0.3, &p, SpikeMode::Hard);
            h = h_next;
            spikes.push(s);
        }
        // Membrane walks 0.3, 0.6, 0.9, 1.2 and crosses on the fourth step.
        assert_eq!(spikes, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(h, 0.0);
    }

    #[test]
    fn surrogate_value_and_slope_at_threshold() {
        let p = LifParams::default();
        let (s, ds) = surrogate(p.u_thr, &p);
        assert!((s - 0.5).abs() < 1e-15);
        assert!((ds - p.alpha / 2.0).abs() < 1e-15);
        // Slope matches central differences of the smooth spike curve.
        let eps = 1e-5;
        let mut u = -2.0;
        while u <= 2.0 {
            let (_, ds) = surrogate(u + p.u_thr, &p);
            let fd = (surrogate_sigmoid(u + eps, p.alpha) - surrogate_sigmoid(u - eps, p.alpha))
                / (2.0 * eps);
            assert!((ds - fd).abs() < 1e-6, "u = {u}: {ds} vs {fd}");
            u += 0.05;
        }
    }

    #[test]
    fn spike_encode_is_binary_and_shaped() {
        let cfg = tiny_cfg();
        let store = ParamStore::init(&cfg, 1).unwrap();
        let window = test_window(cfg.window_n);
        let train = spike_encode(&cfg, &store, &window).unwrap();
        assert_eq!(train.steps, cfg.lif.ts);
        assert_eq!(train.time, cfg.window_n);
        assert_eq!(train.channels, CHANNELS);
        assert_eq!(train.data.len(), cfg.lif.ts * cfg.window_n * CHANNELS);
        assert!(train.data.iter().all(|&s| s == 0.0 || s == 1.0));

        // No drive, no spikes (bias starts at zero).
        let zeros = vec![[0.0; CHANNELS]; cfg.window_n];
        let silent = spike_encode(&cfg, &store, &zeros).unwrap();
        assert!(silent.data.iter().all(|&s| s == 0.0));

        // Wrong window length is rejected.
        assert!(matches!(
            spike_encode(&cfg, &store, &test_window(7)),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn spike_rate_grows_with_drive() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::init(&cfg, 1).unwrap();
        // Positive self-weights on channel 0, nothing else.
        let k = cfg.conv_kernel;
        let w = store.tensor_mut("encoder.conv.weight").unwrap();
        w.fill(0.0);
        for kk in 0..k {
            w[kk] = 0.2; // out 0, in 0
        }
        let mut rates = Vec::new();
        for amp in [0.2, 0.6, 1.0, 1.4, 1.8] {
            let window = vec![[amp, 0.0, 0.0, 0.0, 0.0, 0.0]; cfg.window_n];
            let train = spike_encode(&cfg, &store, &window).unwrap();
            let rate: f64 = (0..cfg.lif.ts)
                .flat_map(|s| (0..cfg.window_n).map(move |t| (s, t)))
                .map(|(s, t)| train.get(s, t, 0))
                .sum();
            rates.push(rate);
        }
        for pair in rates.windows(2) {
            assert!(pair[1] >= pair[0], "rates not monotone: {rates:?}");
        }
        assert!(*rates.last().unwrap() > 0.0);
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let cfg = tiny_cfg();
        let store = ParamStore::init(&cfg, 2).unwrap();
        let window = test_window(cfg.window_n);
        let out = forward(&cfg, &store, &window).unwrap();
        assert_eq!(out.y, [0.0; OUT_DIM]);
        assert_eq!(out.y_c(), [0.0; 6]);
        // Identical windows produce identical outputs.
        let again = forward(&cfg, &store, &window).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn head_bounds_gain_and_noise_components() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::init(&cfg, 3).unwrap();
        store.tensor_mut("head.weight").unwrap().fill(5.0);
        store.tensor_mut("head.bias").unwrap().fill(-3.0);
        let out = forward(&cfg, &store, &test_window(cfg.window_n)).unwrap();
        for &g in out.y_c().iter().chain(out.y_r().iter()) {
            assert!((-1.0..=1.0).contains(&g), "unbounded head output {g}");
        }
        assert!(out.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_permutation_is_equivariant() {
        let cfg = tiny_cfg();
        let store_a = ParamStore::init(&cfg, 4).unwrap();
        let mut store_b = store_a.clone();
        let perm = |c: usize| (c + 1) % CHANNELS; // new index -> old index
        let k = cfg.conv_kernel;
        {
            let wa = store_a.tensor("encoder.conv.weight").unwrap().1.to_vec();
            let wb = store_b.tensor_mut("encoder.conv.weight").unwrap();
            for o in 0..CHANNELS {
                for i in 0..CHANNELS {
                    for kk in 0..k {
                        wb[(o * CHANNELS + i) * k + kk] =
                            wa[(perm(o) * CHANNELS + perm(i)) * k + kk];
                    }
                }
            }
        }
        for name in [
            "encoder.conv.bias",
            "encoder.norm.gamma",
            "encoder.norm.beta",
            "encoder.norm.mean",
            "encoder.norm.var",
        ] {
            let a = store_a.tensor(name).unwrap().1.to_vec();
            let b = store_b.tensor_mut(name).unwrap();
            for o in 0..CHANNELS {
                b[o] = a[perm(o)];
            }
        }
        let win_a = test_window(cfg.window_n);
        let win_b: Vec<[f64; CHANNELS]> = win_a
            .iter()
            .map(|row| std::array::from_fn(|i| row[perm(i)]))
            .collect();
        let enc_a = spike_encode(&cfg, &store_a, &win_a).unwrap();
        let enc_b = spike_encode(&cfg, &store_b, &win_b).unwrap();
        for s in 0..enc_a.steps {
            for t in 0..enc_a.time {
                for c in 0..CHANNELS {
                    assert_eq!(enc_b.get(s, t, c), enc_a.get(s, t, perm(c)));
                }
            }
        }
    }

    #[test]
    fn windows_do_not_leak_state() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::init(&cfg, 5).unwrap();
        // A non-zero head so outputs actually vary.
        let head_len = store.tensor("head.weight").unwrap().0.len;
        let mut rng = SeededStream::derive(5, 99);
        let head = store.tensor_mut("head.weight").unwrap();
        for i in 0..head_len {
            head[i] = rng.uniform(-0.5, 0.5);
        }
        let w1 = test_window(cfg.window_n);
        let mut w2 = test_window(cfg.window_n);
        for row in w2.iter_mut() {
            row[0] += 1.0;
        }
        let first = forward(&cfg, &store, &w1).unwrap();
        let _ = forward(&cfg, &store, &w2).unwrap();
        let third = forward(&cfg, &store, &w1).unwrap();
        assert_eq!(first, third);
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::init(&cfg, 6).unwrap();
        store.update_running_stats(
            &[(0.1, 1.2), (0.2, 0.9), (-0.1, 1.1), (0.0, 1.0), (0.3, 0.8), (-0.2, 1.3)],
            0.5,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.ckpt");
        store.save(&cfg, &path).unwrap();
        let (cfg2, loaded) = ParamStore::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.metas(), store.metas());
        for (a, b) in store.values().iter().zip(loaded.values()) {
            // Storage is 32-bit; compare at f32 resolution.
            assert!((a - b).abs() <= a.abs().max(1.0) * 1e-6, "{a} vs {b}");
        }
        // Corrupt magic is rejected.
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTACKPTxxxxxxx").unwrap();
        assert!(matches!(
            ParamStore::load(&bad),
            Err(CoreError::Format(_))
        ));
    }

    /// Tape gradients through the whole network (smooth spike mode) match
    /// central finite differences for every parameter.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::init(&cfg, 7).unwrap();
        let head_len = store.tensor("head.weight").unwrap().0.len;
        let mut rng = SeededStream::derive(7, 123);
        {
            let head = store.tensor_mut("head.weight").unwrap();
            for i in 0..head_len {
                head[i] = rng.uniform(-0.3, 0.3);
            }
        }
        let window = test_window(cfg.window_n);

        let loss_f64 = |values: &[f64]| -> f64 {
            let (y, _) = forward_generic::<f64>(
                &cfg,
                &store,
                values,
                &window,
                true,
                SpikeMode::Smooth,
                None,
            )
            .unwrap();
            y.iter().sum()
        };

        let tape = Tape::new();
        let vars: Vec<_> = store.values().iter().map(|&v| tape.input(v)).collect();
        let (y, _) = forward_generic(
            &cfg,
            &store,
            &vars,
            &window,
            true,
            SpikeMode::Smooth,
            None,
        )
        .unwrap();
        let mut loss = y[0];
        for v in &y[1..] {
            loss = loss + *v;
        }
        let grads = tape.backward(loss);

        let mut values = store.values().to_vec();
        let step = 1e-4;
        let mut checked = 0;
        for i in 0..values.len() {
            let saved = values[i];
            // Central differences at h and 2h, Richardson-extrapolated to
            // cancel the O(h^2) truncation term of the smooth forward.
            let mut central = |h: f64| {
                values[i] = saved + h;
                let up = loss_f64(&values);
                values[i] = saved - h;
                let down = loss_f64(&values);
                values[i] = saved;
                (up - down) / (2.0 * h)
            };
            let d1 = central(step);
            let d2 = central(2.0 * step);
            let fd = (4.0 * d1 - d2) / 3.0;
            let an = grads.by_input(i);
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom <= 1e-3,
                "param {i} ({}): fd {fd:.6e} vs tape {an:.6e}",
                store
                    .metas()
                    .iter()
                    .find(|m| i >= m.offset && i < m.offset + m.len)
                    .map(|m| m.name.as_str())
                    .unwrap_or("?")
            );
            checked += 1;
        }
        assert_eq!(checked, values.len());
    }
}
