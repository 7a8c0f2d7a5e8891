//! Command implementations behind the `illumap` binary.
//!
//! Each `cmd_*` function is the testable core of one subcommand: it takes
//! plain arguments, does the work through `illumap-core`, and returns a
//! machine-readable result. The binary in `main.rs` only parses flags,
//! dispatches, and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use illumap_core::dataset::{
    generate_dataset, load_split, read_manifest, read_sample, DatasetManifest, GenerateConfig,
    SceneSample,
};
use illumap_core::estimators::{
    cheng_pca, gray_edge, gray_world, shades_of_gray, tile_global_estimate, white_patch,
    CHENG_DEFAULT_PERCENTILE, SHADES_OF_GRAY_DEFAULT_P,
};
use illumap_core::image::apply_correction;
use illumap_core::metrics::{mean_angular_error, summarize_errors};
use illumap_core::nn::{load_checkpoint, model_forward, CheckpointMeta, ModelConfig};
use illumap_core::train::{
    fit, run_ablation, training_log_csv, AblationRow, EpochLog, TrainConfig,
};
use illumap_core::{Error, ErrorStats, Result, ValidityMask};

/// Baseline method names accepted by `--methods`.
pub const BASELINE_METHODS: [&str; 6] = ["gw", "wp", "sog", "ge1", "ge2", "cheng"];

/// One evaluation result in the shape of a benchmark table row.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: String,
    pub split: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub trimean: f64,
    pub count: usize,
    /// Echo of the configuration that produced the numbers.
    pub config: serde_json::Value,
    pub wall_time_s: f64,
}

impl RunReport {
    fn new(
        method: &str,
        split: &str,
        stats: &ErrorStats<f32>,
        config: serde_json::Value,
        started: Instant,
    ) -> Self {
        Self {
            method: method.to_string(),
            split: split.to_string(),
            mean: stats.mean as f64,
            sd: stats.sd as f64,
            median: stats.median as f64,
            trimean: stats.trimean as f64,
            count: stats.count,
            config,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "method,split,mean,sd,median,trimean,count,wall_time_s";

/// CSV rendering of reports; scalar fields only, one row per report.
pub fn reports_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.split, r.mean, r.sd, r.median, r.trimean, r.count, r.wall_time_s
        ));
    }
    out
}

pub fn reports_json(reports: &[RunReport]) -> String {
    serde_json::to_string_pretty(reports).expect("report serialization cannot fail")
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_reports(reports: &[RunReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, reports_json(reports))
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, reports_csv(reports))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))
}

/// Flat JSON config file; every key is optional and mirrors a
/// `TrainConfig` or `ModelConfig` field name. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub epochs: Option<usize>,
    pub freeze_epoch: Option<usize>,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub input_size: Option<usize>,
    pub encoder_depth: Option<usize>,
    pub width_multiplier: Option<f64>,
    pub base_channels: Option<usize>,
    pub aifm_enabled: Option<bool>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p.display().to_string(), e.to_string()))
        }
    }
}

/// Desk-scale defaults overridden by the config file, then by `--seed`.
pub fn resolve_configs(
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> (TrainConfig, ModelConfig) {
    let mut tc = TrainConfig::default();
    if let Some(v) = file.epochs {
        tc.epochs = v;
    }
    if let Some(v) = file.freeze_epoch {
        tc.freeze_epoch = v;
    }
    if let Some(v) = file.base_lr {
        tc.base_lr = v;
    }
    if let Some(v) = file.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = file.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = file.seed {
        tc.seed = v;
    }
    if let Some(v) = seed_flag {
        tc.seed = v;
    }
    let mut mc = ModelConfig::desk();
    if let Some(v) = file.input_size {
        mc.input_size = v;
    }
    for b in &mut mc.branches {
        if let Some(v) = file.encoder_depth {
            b.encoder_depth = v;
        }
        if let Some(v) = file.width_multiplier {
            b.width_multiplier = v;
        }
        if let Some(v) = file.base_channels {
            b.base_channels = v;
        }
    }
    if let Some(v) = file.aifm_enabled {
        mc.aifm_enabled = v;
    }
    (tc, mc)
}

/// Generates `count` synthetic samples plus a 7:2:1 split manifest.
pub fn cmd_generate(
    out: &Path,
    count: usize,
    size: usize,
    illuminants: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let cfg = GenerateConfig {
        count,
        size,
        illuminants,
        seed,
        ..GenerateConfig::default()
    };
    generate_dataset::<f32>(out, &cfg)
}

/// Trains on the dataset's train/val splits and writes checkpoints plus
/// `training_log.csv` into `out`.
pub fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(CheckpointMeta, Vec<EpochLog>)> {
    let file = load_file_config(config)?;
    let (tc, mc) = resolve_configs(&file, seed_flag);
    let manifest = read_manifest(data)?;
    let train: Vec<SceneSample<f32>> = load_split(data, &manifest, "train")?;
    let val: Vec<SceneSample<f32>> = load_split(data, &manifest, "val")?;
    let result = fit(&tc, &mc, &train, &val, out)?;
    let log_path = out.join("training_log.csv");
    fs::write(&log_path, training_log_csv(&result.log))
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    Ok((result.best, result.log))
}

/// Evaluates a checkpoint on one split; masks are honored.
pub fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<RunReport> {
    let started = Instant::now();
    let mut cp = load_checkpoint::<f32>(checkpoint)?;
    let manifest = read_manifest(data)?;
    let samples: Vec<SceneSample<f32>> = load_split(data, &manifest, split)?;
    let stats =
        illumap_core::train::validate(&mut cp.store, &cp.config, &samples, EVAL_BATCH)?;
    let config = json!({
        "checkpoint": checkpoint.display().to_string(),
        "model": cp.config,
        "meta": cp.meta,
    });
    let report = RunReport::new("network", split, &stats, config, started);
    if let Some(dir) = out {
        write_reports(std::slice::from_ref(&report), dir)?;
    }
    Ok(report)
}

const EVAL_BATCH: usize = 8;

/// Paths written by [`cmd_correct`], all derived from the `--out` file.
#[derive(Debug, Clone, Serialize)]
pub struct CorrectOutput {
    pub corrected: PathBuf,
    pub predicted_map: PathBuf,
    pub meta: PathBuf,
    pub height: usize,
    pub width: usize,
}

/// Runs the network on one stored sample and writes the von Kries
/// corrected image (raw little-endian f32, H x W x 3), the predicted
/// (r, b) map (raw little-endian f32, H x W x 2), and a meta.json.
pub fn cmd_correct(image: &Path, checkpoint: &Path, out: &Path) -> Result<CorrectOutput> {
    let sample: SceneSample<f32> = read_sample(image)?;
    let mut cp = load_checkpoint::<f32>(checkpoint)?;
    let s = cp.config.input_size;
    if sample.image.height() != s || sample.image.width() != s {
        return Err(Error::ShapeMismatch(format!(
            "--image {}x{} does not match the checkpoint input size {s}",
            sample.image.height(),
            sample.image.width()
        )));
    }
    let (pred, _) = model_forward(&sample.image, &mut cp.store, &cp.config, false)?;
    let pred = pred.clamped();
    let corrected = apply_correction(&sample.image, &pred)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let pred_path = sibling(out, "pred.bin");
    let meta_path = sibling(out, "meta.json");
    write_raw_f32(out, corrected.data().iter().copied())?;
    write_raw_f32(&pred_path, pred.data().iter().copied())?;
    let meta = json!({
        "height": s,
        "width": s,
        "corrected": {"file": file_name(out), "channels": 3},
        "predicted_map": {"file": file_name(&pred_path), "channels": 2},
        "source": image.display().to_string(),
        "checkpoint": checkpoint.display().to_string(),
    });
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(CorrectOutput {
        corrected: out.to_path_buf(),
        predicted_map: pred_path,
        meta: meta_path,
        height: s,
        width: s,
    })
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", out.display()))
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn write_raw_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn baseline_estimate(
    method: &str,
    img: &illumap_core::ImageTensor<f32>,
    mask: Option<&ValidityMask>,
) -> Result<[f32; 3]> {
    match method {
        "gw" => gray_world(img, mask),
        "wp" => white_patch(img, mask),
        "sog" => shades_of_gray(img, SHADES_OF_GRAY_DEFAULT_P as f32, mask),
        "ge1" => gray_edge(img, 1, 7.0, 4.0, mask),
        "ge2" => gray_edge(img, 2, 7.0, 4.0, mask),
        "cheng" => cheng_pca(img, CHENG_DEFAULT_PERCENTILE, mask),
        other => Err(Error::ConfigError(format!(
            "--methods: unknown method '{other}' (expected one of {})",
            BASELINE_METHODS.join(", ")
        ))),
    }
}

fn baseline_params(method: &str) -> serde_json::Value {
    match method {
        "gw" => json!({"norm_power": 1}),
        "wp" => json!({"norm_power": "inf"}),
        "sog" => json!({"norm_power": SHADES_OF_GRAY_DEFAULT_P}),
        "ge1" => json!({"derivative_order": 1, "norm_power": 7, "smoothing_sigma": 4}),
        "ge2" => json!({"derivative_order": 2, "norm_power": 7, "smoothing_sigma": 4}),
        "cheng" => json!({"percentile": CHENG_DEFAULT_PERCENTILE}),
        _ => json!(null),
    }
}

/// Runs each global baseline over a split; the global estimate is tiled
/// to a constant map and scored pixel-wise against the ground truth.
pub fn cmd_baseline(
    data: &Path,
    methods: &[String],
    split: &str,
    out: Option<&Path>,
) -> Result<Vec<RunReport>> {
    if methods.is_empty() {
        return Err(Error::ConfigError("--methods: no method given".into()));
    }
    let manifest = read_manifest(data)?;
    let samples: Vec<SceneSample<f32>> = load_split(data, &manifest, split)?;
    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let started = Instant::now();
        let mut errors = Vec::with_capacity(samples.len());
        for sample in &samples {
            let est = baseline_estimate(method, &sample.image, Some(&sample.mask))?;
            let map =
                tile_global_estimate(est, sample.image.height(), sample.image.width())?;
            errors.push(mean_angular_error(&map, &sample.gt, Some(&sample.mask))?);
        }
        let stats = summarize_errors(&errors)?;
        let config = json!({"method": method, "params": baseline_params(method)});
        reports.push(RunReport::new(method, split, &stats, config, started));
    }
    if let Some(dir) = out {
        write_reports(&reports, dir)?;
    }
    Ok(reports)
}

pub const ABLATION_CSV_HEADER: &str = "variant,mean,sd,median,trimean,count";

pub fn ablation_csv(rows: &[AblationRow<f32>]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.stats.mean, r.stats.sd, r.stats.median, r.stats.trimean, r.stats.count
        ));
    }
    out
}

/// Trains the five ablation variants with a shared seed and split, scores
/// each on the test split, and writes one `ablation.csv` into `out`.
pub fn cmd_ablate(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<Vec<AblationRow<f32>>> {
    let file = load_file_config(config)?;
    let (tc, mc) = resolve_configs(&file, seed_flag);
    let manifest = read_manifest(data)?;
    let train: Vec<SceneSample<f32>> = load_split(data, &manifest, "train")?;
    let val: Vec<SceneSample<f32>> = load_split(data, &manifest, "val")?;
    let test: Vec<SceneSample<f32>> = load_split(data, &manifest, "test")?;
    let rows = run_ablation(&tc, &mc, &train, &val, &test, out)?;
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, ablation_csv(&rows))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(rows)
}
