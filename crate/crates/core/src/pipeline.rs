//! Orchestration of the adaptive dead-reckoning pipeline: slide a causal
//! window over the raw IMU stream, let the network decode a per-sample
//! correction and pseudo-measurement noise, and feed both into the filter.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::imu_model::{apply_correction, decode_correction, Correction, ImuSample, BETA_SCALE};
use crate::inekf::{
    decode_meas_noise, run_sequence, FilterParams, FilterState, NoiseSchedule, RunResult,
};
use crate::snn::{self, NetConfig, ParamStore};

/// One network input row: gyro then accel, in axis order.
pub fn sample_row(s: &ImuSample) -> [f64; 6] {
    [s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]
}

/// Output of the per-sample adaptive pass.
pub struct AdaptiveStream {
    /// The input samples with the decoded per-sample correction applied.
    pub corrected: Vec<ImuSample>,
    /// One (lateral, vertical) pseudo-measurement variance per propagation
    /// step; step `k` uses the window ending at sample `k`.
    pub noise: Vec<(f64, f64)>,
}

/// Run the network over every causal window `[k+1-window_n, k]` of the
/// stream and apply the decoded correction to sample `k`. Samples earlier
/// than one full window pass through unchanged with the baseline noise.
pub fn adaptive_stream(
    net: &NetConfig,
    store: &ParamStore,
    samples: &[ImuSample],
    filter: &FilterParams,
) -> Result<AdaptiveStream> {
    let wn = net.window_n;
    if wn == 0 {
        return Err(CoreError::InvalidInput(
            "network window length must be positive".into(),
        ));
    }
    let per: Vec<Result<(Correction, Option<(f64, f64)>)>> = (0..samples.len())
        .into_par_iter()
        .map(|k| {
            if k + 1 < wn {
                return Ok((Correction::identity(), None));
            }
            let rows: Vec<[f64; 6]> = samples[k + 1 - wn..=k].iter().map(sample_row).collect();
            let out = snn::forward(net, store, &rows)?;
            let corr = decode_correction(&out.y_c(), &out.y_b(), BETA_SCALE);
            let noise = decode_meas_noise(&out.y_r(), filter.sigma_lat2, filter.sigma_up2);
            Ok((corr, Some(noise)))
        })
        .collect();

    let mut corrected = Vec::with_capacity(samples.len());
    let mut noise = Vec::with_capacity(samples.len().saturating_sub(1));
    for (k, item) in per.into_iter().enumerate() {
        let (corr, n) = item?;
        corrected.push(apply_correction(&samples[k], &corr));
        if k >= 1 {
            noise.push(n.unwrap_or((filter.sigma_lat2, filter.sigma_up2)));
        }
    }
    Ok(AdaptiveStream { corrected, noise })
}

/// Adaptive end-to-end run: network-corrected samples plus per-step noise
/// through the filter.
pub fn run_adaptive(
    net: &NetConfig,
    store: &ParamStore,
    params: &FilterParams,
    init: FilterState,
    samples: &[ImuSample],
) -> Result<RunResult> {
    let stream = adaptive_stream(net, store, samples, params)?;
    run_sequence(
        params,
        init,
        &stream.corrected,
        NoiseSchedule::PerStep(&stream.noise),
    )
}
