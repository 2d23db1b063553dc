//! Implementations of the six subcommands.
//!
//! Commands only orchestrate: parsing lives in `spikenav-core`, and every
//! random draw is tied to an explicit seed, so re-running a command with
//! the same flags and config produces byte-identical primary outputs (the
//! training log's wall-clock field is the one documented exception).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use spikenav_core::datasets::{
    read_imu_csv, read_trajectory_csv, split_names, synthesize, write_imu_csv,
    write_trajectory_csv, SplitManifest, SynthKind, SynthSpec,
};
use spikenav_core::error::{CoreError, Result};
use spikenav_core::evalmetrics::{evaluate_with, format_report_table, EvalOptions};
use spikenav_core::imu_model::corrupt;
use spikenav_core::inekf::{run_sequence, GapEvent, NoiseSchedule};
use spikenav_core::pipeline::adaptive_stream;
use spikenav_core::trainer::{build_windows, TrainWindow};
use spikenav_core::{
    CorruptionSpec, ErrorModel, FilterState, ParamStore,
    Rotation, Trainer, Trajectory, Vec3,
};

use crate::config::{load_config, RunFileConfig, SeqPair, TrainFileConfig};

/// Timestamps closer than this (s) count as the same instant when aligning
/// an estimate with ground truth.
const ALIGN_TOLERANCE: f64 = 1e-6;

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Trajectory family: straight, circle, or figure-eight.
    #[arg(long)]
    pub kind: String,
    /// Sequence length in seconds.
    #[arg(long)]
    pub duration: f64,
    /// Sample rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    /// Forward speed in m/s.
    #[arg(long, default_value_t = 5.0)]
    pub speed: f64,
    /// Turn radius in m (circle only).
    #[arg(long, default_value_t = 20.0)]
    pub radius: f64,
    /// Weave period in s (figure-eight only; default: half the duration).
    #[arg(long)]
    pub period: Option<f64>,
    /// Standard deviation of the lateral slip velocity in m/s (0 = none).
    #[arg(long, default_value_t = 0.0)]
    pub slip_std: f64,
    /// Correlation time of the slip process in s.
    #[arg(long, default_value_t = 1.0)]
    pub slip_tau: f64,
    /// Seed for the slip process.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File stem: writes <out-dir>/<name>_imu.csv and <name>_truth.csv
    /// (default: the kind).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let kind = match args.kind.as_str() {
        "straight" => SynthKind::Straight { speed: args.speed },
        "circle" => SynthKind::Circle {
            speed: args.speed,
            radius: args.radius,
        },
        "figure-eight" | "figure_eight" => SynthKind::FigureEight {
            speed: args.speed,
            period: args.period.unwrap_or(args.duration / 2.0),
        },
        other => {
            return Err(CoreError::InvalidInput(format!(
                "unknown kind '{other}' (expected straight, circle, or figure-eight)"
            )))
        }
    };
    let spec = SynthSpec {
        kind,
        duration: args.duration,
        rate_hz: args.rate,
        lateral_slip_std: args.slip_std,
        slip_time_constant: args.slip_tau,
        seed: args.seed,
    };
    let (samples, truth) = synthesize(&spec)?;

    fs::create_dir_all(&args.out_dir)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| args.kind.replace('-', "_"));
    let imu_path = args.out_dir.join(format!("{name}_imu.csv"));
    let truth_path = args.out_dir.join(format!("{name}_truth.csv"));
    write_imu_csv(&imu_path, &samples)?;
    write_trajectory_csv(&truth_path, &truth)?;
    println!(
        "synth: {} samples over {} s at {} Hz -> {}, {}",
        samples.len(),
        args.duration,
        args.rate,
        imu_path.display(),
        truth_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// corrupt
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Clean IMU CSV to corrupt.
    #[arg(long)]
    pub input: PathBuf,
    /// Corrupted IMU CSV to write; a sidecar JSON with the drawn biases
    /// lands next to it.
    #[arg(long)]
    pub output: PathBuf,
    /// Named protocol (kitti-lowcost); explicit flags override its fields.
    #[arg(long)]
    pub preset: Option<String>,
    /// Gyro white-noise standard deviation, rad/s.
    #[arg(long)]
    pub gyro_noise_std: Option<f64>,
    /// Lower edge of the per-axis gyro bias draw, rad/s.
    #[arg(long)]
    pub gyro_bias_min: Option<f64>,
    /// Upper edge of the per-axis gyro bias draw, rad/s.
    #[arg(long)]
    pub gyro_bias_max: Option<f64>,
    /// Accelerometer white-noise standard deviation, m/s^2.
    #[arg(long)]
    pub accel_noise_std: Option<f64>,
    /// Lower edge of the per-axis accelerometer bias draw, m/s^2.
    #[arg(long)]
    pub accel_bias_min: Option<f64>,
    /// Upper edge of the per-axis accelerometer bias draw, m/s^2.
    #[arg(long)]
    pub accel_bias_max: Option<f64>,
    /// Seed for the bias draw and noise stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Sidecar record written next to every corrupted stream.
#[derive(Serialize)]
struct CorruptSidecar<'a> {
    spec: &'a CorruptionSpec,
    bias: spikenav_core::imu_model::BiasDraw,
}

pub fn cmd_corrupt(args: &CorruptArgs) -> Result<()> {
    let mut spec = match args.preset.as_deref() {
        Some("kitti-lowcost") => CorruptionSpec::kitti_lowcost(0),
        Some(other) => {
            return Err(CoreError::InvalidInput(format!(
                "unknown preset '{other}' (expected kitti-lowcost)"
            )))
        }
        None => CorruptionSpec {
            gyro_noise_std: 0.0,
            gyro_bias_range: (0.0, 0.0),
            accel_noise_std: 0.0,
            accel_bias_range: (0.0, 0.0),
            seed: 0,
        },
    };
    if let Some(v) = args.gyro_noise_std {
        spec.gyro_noise_std = v;
    }
    if let Some(v) = args.gyro_bias_min {
        spec.gyro_bias_range.0 = v;
    }
    if let Some(v) = args.gyro_bias_max {
        spec.gyro_bias_range.1 = v;
    }
    if let Some(v) = args.accel_noise_std {
        spec.accel_noise_std = v;
    }
    if let Some(v) = args.accel_bias_min {
        spec.accel_bias_range.0 = v;
    }
    if let Some(v) = args.accel_bias_max {
        spec.accel_bias_range.1 = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }

    let samples = read_imu_csv(&args.input)?;
    let (corrupted, bias) = corrupt(&samples, &ErrorModel::identity(), &spec);
    write_imu_csv(&args.output, &corrupted)?;
    let sidecar = args.output.with_extension("json");
    write_pretty_json(&sidecar, &CorruptSidecar { spec: &spec, bias })?;
    println!(
        "corrupt: {} samples -> {} (sidecar {})",
        corrupted.len(),
        args.output.display(),
        sidecar.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Comma-separated sequence names to assign.
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
    /// Directory to scan: every `<name>_imu.csv` file and every
    /// subdirectory contributes its name to the pool.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Fraction of names assigned to the training split.
    #[arg(long, default_value_t = 0.6)]
    pub train_frac: f64,
    /// Fraction assigned to validation; the rest is the test split.
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let mut pool = args.names.clone();
    if let Some(root) = &args.root {
        let mut found = Vec::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            let file_name = entry.file_name();
            let name = file_name.to_string_lossy();
            if entry.file_type()?.is_dir() {
                found.push(name.into_owned());
            } else if let Some(stem) = name.strip_suffix("_imu.csv") {
                found.push(stem.to_string());
            }
        }
        found.sort();
        pool.extend(found);
    }
    pool.sort();
    pool.dedup();
    if pool.is_empty() {
        return Err(CoreError::InvalidInput(
            "no sequence names: pass --names and/or --root".into(),
        ));
    }
    let manifest = split_names(&pool, args.train_frac, args.val_frac, args.seed)?;
    manifest.save(&args.out)?;
    println!(
        "split: {} sequences -> {} train, {} val, {} test ({})",
        pool.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config JSON (see the README for the schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Start from the parameters of an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Resolve the training sequence list from the manifest and/or explicit
/// pairs; every missing file is reported in one structural error.
fn resolve_sequences(cfg: &TrainFileConfig) -> Result<Vec<(String, SeqPair)>> {
    let mut pairs: Vec<(String, SeqPair)> = Vec::new();
    if let Some(split_path) = &cfg.split {
        let manifest = SplitManifest::load(split_path)?;
        let root = cfg
            .data_root
            .clone()
            .unwrap_or_else(|| PathBuf::from("."));
        for name in &manifest.train {
            pairs.push((
                name.clone(),
                SeqPair {
                    imu: root.join(format!("{name}_imu.csv")),
                    truth: root.join(format!("{name}_truth.csv")),
                },
            ));
        }
    }
    for (i, p) in cfg.sequences.iter().enumerate() {
        pairs.push((format!("sequences[{i}] ({})", p.imu.display()), p.clone()));
    }
    if pairs.is_empty() {
        return Err(CoreError::InvalidInput(
            "no training sequences: set `split` or `sequences` in the config".into(),
        ));
    }
    let missing: Vec<String> = pairs
        .iter()
        .filter(|(_, p)| !p.imu.is_file() || !p.truth.is_file())
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CoreError::Structural(format!(
            "missing training sequences: {}",
            missing.join(", ")
        )));
    }
    Ok(pairs)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = load_config(Some(&args.config))?;
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if cfg.out_dir.as_os_str().is_empty() {
        return Err(CoreError::InvalidInput(
            "training config needs an out_dir (or pass --out-dir)".into(),
        ));
    }

    let pairs = resolve_sequences(&cfg)?;
    let stride = cfg.stride.unwrap_or(cfg.train.window_n);
    let mut windows: Vec<TrainWindow> = Vec::new();
    for (name, p) in &pairs {
        let samples = read_imu_csv(&p.imu)?;
        let truth = read_trajectory_csv(&p.truth)?;
        let w = build_windows(&samples, &truth, cfg.train.window_n, stride)?;
        println!("train: {name}: {} windows", w.len());
        windows.extend(w);
    }
    if windows.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "no training windows: every sequence is shorter than one window \
             ({} samples)",
            cfg.train.window_n
        )));
    }

    let mut trainer = match &args.resume {
        Some(ck) => {
            let (net, store) = ParamStore::load(ck)?;
            Trainer::from_store(net, cfg.filter.clone(), cfg.train.clone(), store)?
        }
        None => Trainer::new(cfg.net.clone(), cfg.filter.clone(), cfg.train.clone())?,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    write_pretty_json(&cfg.out_dir.join("config_used.json"), &cfg)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;

    let epochs = cfg.train.epochs;
    for _ in 0..epochs {
        let stats = trainer.train_epoch(&windows)?;
        serde_json::to_writer(&mut log, &stats)?;
        writeln!(log)?;
        log.flush()?;
        let done = stats.epoch + 1;
        println!(
            "epoch {done}/{epochs}: loss {:.6e} lr {:.3e} grad {:.3e} ({:.0} ms)",
            stats.loss, stats.lr, stats.grad_norm, stats.wall_ms
        );
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < epochs
        {
            let path = cfg.out_dir.join(format!("checkpoint_epoch{done}.ckpt"));
            trainer.store().save(trainer.net_config(), &path)?;
        }
    }
    let model_path = cfg.out_dir.join("model.ckpt");
    trainer.store().save(trainer.net_config(), &model_path)?;
    println!(
        "train: {} windows, {} epochs -> {}",
        windows.len(),
        epochs,
        model_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RunArgs {
    /// IMU stream to filter.
    #[arg(long)]
    pub imu: PathBuf,
    /// Ground-truth trajectory; its first row initializes the filter
    /// state (default: identity attitude at the origin, zero velocity).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Trained checkpoint enabling adaptive measurement corrections and
    /// pseudo-measurement noise; omit for the static-noise baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Filter config JSON (top-level `filter` block).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Estimated trajectory CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write detected timestamp gaps as JSON.
    #[arg(long)]
    pub gaps_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GapLog<'a> {
    gaps: &'a [GapEvent],
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg: RunFileConfig = load_config(args.config.as_deref())?;
    let samples = read_imu_csv(&args.imu)?;
    if samples.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "no samples in {}",
            args.imu.display()
        )));
    }

    let init = match &args.truth {
        Some(p) => {
            let truth = read_trajectory_csv(p)?;
            if truth.is_empty() {
                return Err(CoreError::InvalidInput(format!(
                    "no poses in {}",
                    p.display()
                )));
            }
            FilterState::new(truth.r[0], truth.v[0], truth.p[0])
        }
        None => FilterState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros()),
    };

    let (mode, stream, noise) = match &args.checkpoint {
        None => ("static", None, None),
        Some(ck) => {
            let (net, store) = ParamStore::load(ck)?;
            let adaptive = adaptive_stream(&net, &store, &samples, &cfg.filter)?;
            ("adaptive", Some(adaptive.corrected), Some(adaptive.noise))
        }
    };
    let input = stream.as_deref().unwrap_or(&samples);
    let schedule = match &noise {
        Some(n) => NoiseSchedule::PerStep(n),
        None => NoiseSchedule::Static,
    };

    let result = run_sequence(&cfg.filter, init, input, schedule)?;
    for g in &result.gaps {
        eprintln!(
            "gap: sample {}: dt {:.3} s integrated as {:.3} s",
            g.index, g.dt, g.capped_to
        );
    }
    if let Some(p) = &args.gaps_out {
        write_pretty_json(p, &GapLog { gaps: &result.gaps })?;
    }
    write_trajectory_csv(&args.out, &result.trajectory)?;
    println!(
        "run ({mode}): {} poses, zupt {} applied / {} skipped, {} gaps -> {}",
        result.trajectory.len(),
        result.zupt_applied,
        result.zupt_skipped,
        result.gaps.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated trajectory CSV.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Ground-truth trajectory CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Write the full report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Write the text table to a file (it always goes to stdout).
    #[arg(long)]
    pub table_out: Option<PathBuf>,
    /// Score every start index instead of every 10th.
    #[arg(long)]
    pub exhaustive: bool,
    /// Row label in the table.
    #[arg(long, default_value = "seq")]
    pub name: String,
}

/// Keep the poses whose timestamps match within [`ALIGN_TOLERANCE`],
/// walking both trajectories once. Lets an estimate with dropped samples
/// (data gaps) be scored against the full ground truth.
fn align(est: &Trajectory, truth: &Trajectory) -> Result<(Trajectory, Trajectory)> {
    let mut a = Trajectory::default();
    let mut b = Trajectory::default();
    let (mut i, mut j) = (0, 0);
    while i < est.len() && j < truth.len() {
        let d = est.t[i] - truth.t[j];
        if d.abs() <= ALIGN_TOLERANCE {
            a.push(est.t[i], est.r[i], est.v[i], est.p[i]);
            b.push(truth.t[j], truth.r[j], truth.v[j], truth.p[j]);
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    if a.len() < 2 {
        return Err(CoreError::InvalidInput(
            "fewer than two common timestamps between estimate and truth".into(),
        ));
    }
    Ok((a, b))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let est = read_trajectory_csv(&args.estimate)?;
    let truth = read_trajectory_csv(&args.truth)?;
    let (est, truth) = align(&est, &truth)?;

    let opts = EvalOptions {
        exhaustive: args.exhaustive,
        ..EvalOptions::default()
    };
    let started = std::time::Instant::now();
    let report = evaluate_with(&est, &truth, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();

    let table = format_report_table(&[(args.name.clone(), report.clone(), elapsed)]);
    print!("{table}");
    if !report.available {
        println!("metrics unavailable: truth path is shorter than the smallest evaluation length");
    }
    if let Some(p) = &args.json_out {
        write_pretty_json(p, &report)?;
    }
    if let Some(p) = &args.table_out {
        fs::write(p, &table)?;
    }
    Ok(())
}
