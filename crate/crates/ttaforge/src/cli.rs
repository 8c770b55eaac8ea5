//! Command-line entry points: dataset generation, direct/adaptive runs,
//! and offline evaluation, each leaving a reproducible run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapt::{run_stream, AdaptationConfig, EvalSource, RunMode, StreamImage};
use crate::augment::CorruptionKind;
use crate::backend::{ToyDetector, ToyDetectorConfig, ToyEmbedder, ToyEmbedderConfig};
use crate::core::BoundingBox;
use crate::data::{self, Dataset, SyntheticSpec, TargetShift};
use crate::error::{Result, TtaError};
use crate::evalkit::{self, EvalRecord, PredictionRecord};

pub const SEED_ENV_VAR: &str = "TTAFORGE_SEED";

#[derive(Parser)]
#[command(
    name = "ttaforge",
    version,
    about = "Test-time adaptive detection on synthetic corrupted streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shape-detection dataset.
    Gen(GenArgs),
    /// Run direct testing or online adaptation over a dataset stream.
    Run(RunArgs),
    /// Recompute metrics from saved predictions.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub num_images: usize,
    /// Square image edge; must be a multiple of the detector patch size.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Domain shift: none, palette, or palette plus one corruption such as
    /// gauss3, bright1..5, contrast1..5, shot1..5.
    #[arg(long, default_value = "none")]
    pub target_shift: String,
}

#[derive(Args)]
pub struct RunArgs {
    /// direct or adapt.
    #[arg(long)]
    pub mode: String,
    /// Flat key = value config file; omitted keys use the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for predictions, reports, metrics, and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// After an adapt run, dump the final instance memory (crops + index)
    /// under `<out>/memory/`.
    #[arg(long, default_value_t = false)]
    pub dump_memory: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory with the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions file (JSON lines).
    #[arg(long)]
    pub pred: PathBuf,
    /// Output directory for the metric CSVs.
    #[arg(long)]
    pub out: PathBuf,
    /// Matching IoU threshold.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Also emit per-category TP/FP score histograms.
    #[arg(long, default_value_t = false)]
    pub tp_fp_hist: bool,
    #[arg(long, default_value_t = 20)]
    pub hist_bins: usize,
}

pub fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

// --- seeds -------------------------------------------------------------------

/// Precedence: command-line flag, then TTAFORGE_SEED, then the config file,
/// then the built-in default.
pub fn resolve_seed(flag: Option<u64>, config_file: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(text) = std::env::var(SEED_ENV_VAR) {
        return text.trim().parse::<u64>().map_err(|_| {
            TtaError::Invalid(format!("{SEED_ENV_VAR}={text:?} is not a valid seed"))
        });
    }
    Ok(config_file.unwrap_or(default))
}

fn salted(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The frozen toy backends for a run seed. Both modes of the same seed see
/// the identical "pretrained" detector.
pub fn build_backends(seed: u64) -> Result<(ToyDetector, ToyEmbedder)> {
    let det_config = ToyDetectorConfig {
        seed: salted(seed, 101),
        class_colors: Some(data::SOURCE_COLORS.to_vec()),
        ..Default::default()
    };
    let detector = ToyDetector::new(&det_config, &data::shape_categories())?;
    let embedder = ToyEmbedder::new(&ToyEmbedderConfig {
        seed: salted(seed, 102),
        ..Default::default()
    });
    Ok((detector, embedder))
}

// --- flat config file ---------------------------------------------------------

/// Parse a flat `key = value` config. Unknown keys are hard errors so typos
/// cannot silently fall back to defaults.
pub fn parse_config_text(text: &str, path: &Path) -> Result<AdaptationConfig> {
    let mut config = AdaptationConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(TtaError::MalformedFile {
                path: path.to_path_buf(),
                line: ln + 1,
                message: format!("expected key = value, got {line:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |msg: String| TtaError::MalformedFile {
            path: path.to_path_buf(),
            line: ln + 1,
            message: msg,
        };
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad(format!("{key}: expected true or false, got {v:?}"))),
        };
        match key {
            "th_pl" => config.th_pl = parse_f64(value)?,
            "th_me" => config.th_me = parse_f64(value)?,
            "gamma" => config.gamma = parse_f64(value)?,
            "m" => config.num_prompts = parse_usize(value)?,
            "capacity" => config.capacity = parse_usize(value)?,
            "alpha" => config.alpha = parse_f64(value)?,
            "beta" => config.beta = parse_f64(value)?,
            "lr_text" => config.lr_text = parse_f64(value)?,
            "lr_visual" => config.lr_visual = parse_f64(value)?,
            "batch_size" => config.batch_size = parse_usize(value)?,
            "adam_beta1" => config.adam_beta1 = parse_f64(value)?,
            "adam_beta2" => config.adam_beta2 = parse_f64(value)?,
            "adam_eps" => config.adam_eps = parse_f64(value)?,
            "weight_decay" => config.weight_decay = parse_f64(value)?,
            "seed" => {
                config.seed = value
                    .parse::<u64>()
                    .map_err(|e| bad(format!("seed: {e}")))?
            }
            "nms_iou" => config.nms_iou = parse_f64(value)?,
            "enhance" => config.enhance = parse_bool(value)?,
            "hallucinate" => config.hallucinate = parse_bool(value)?,
            "eval_source" => {
                config.eval_source = match value {
                    "teacher" => EvalSource::Teacher,
                    "student" => EvalSource::Student,
                    _ => {
                        return Err(bad(format!(
                            "eval_source: expected teacher or student, got {value:?}"
                        )))
                    }
                }
            }
            "resize_scales" => {
                let mut scales = Vec::new();
                for part in value.split(',') {
                    scales.push(
                        part.trim()
                            .parse::<usize>()
                            .map_err(|e| bad(format!("resize_scales: {e}")))?,
                    );
                }
                config.augment.resize_scales = scales;
            }
            "rand_erase_max_patches" => config.augment.rand_erase_max_patches = parse_usize(value)?,
            "rand_erase_fill" => config.augment.rand_erase_fill = parse_f64(value)?,
            "halluc_max_instances" => config.halluc.max_instances = parse_usize(value)?,
            "halluc_th_iou" => config.halluc.th_iou = parse_f64(value)?,
            "halluc_max_retries" => config.halluc.max_retries = parse_usize(value)?,
            "halluc_beta_a" => config.halluc.beta_a = parse_f64(value)?,
            "halluc_beta_b" => config.halluc.beta_b = parse_f64(value)?,
            "halluc_scale_lo" => config.halluc.scale_range.0 = parse_f64(value)?,
            "halluc_scale_hi" => config.halluc.scale_range.1 = parse_f64(value)?,
            _ => return Err(bad(format!("unknown config key {key:?}"))),
        }
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<AdaptationConfig> {
    let text = fs::read_to_string(path).map_err(|e| TtaError::io(path, e))?;
    parse_config_text(&text, path)
}

/// Flat snapshot of every config key, mirroring the config-file format.
pub fn config_snapshot(config: &AdaptationConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("th_pl", config.th_pl.to_string());
    put("th_me", config.th_me.to_string());
    put("gamma", config.gamma.to_string());
    put("m", config.num_prompts.to_string());
    put("capacity", config.capacity.to_string());
    put("alpha", config.alpha.to_string());
    put("beta", config.beta.to_string());
    put("lr_text", config.lr_text.to_string());
    put("lr_visual", config.lr_visual.to_string());
    put("batch_size", config.batch_size.to_string());
    put("adam_beta1", config.adam_beta1.to_string());
    put("adam_beta2", config.adam_beta2.to_string());
    put("adam_eps", config.adam_eps.to_string());
    put("weight_decay", config.weight_decay.to_string());
    put("seed", config.seed.to_string());
    put("nms_iou", config.nms_iou.to_string());
    put("enhance", config.enhance.to_string());
    put("hallucinate", config.hallucinate.to_string());
    put(
        "eval_source",
        match config.eval_source {
            EvalSource::Teacher => "teacher".to_string(),
            EvalSource::Student => "student".to_string(),
        },
    );
    put(
        "resize_scales",
        config
            .augment
            .resize_scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put(
        "rand_erase_max_patches",
        config.augment.rand_erase_max_patches.to_string(),
    );
    put(
        "rand_erase_fill",
        config.augment.rand_erase_fill.to_string(),
    );
    put(
        "halluc_max_instances",
        config.halluc.max_instances.to_string(),
    );
    put("halluc_th_iou", config.halluc.th_iou.to_string());
    put("halluc_max_retries", config.halluc.max_retries.to_string());
    put("halluc_beta_a", config.halluc.beta_a.to_string());
    put("halluc_beta_b", config.halluc.beta_b.to_string());
    put("halluc_scale_lo", config.halluc.scale_range.0.to_string());
    put("halluc_scale_hi", config.halluc.scale_range.1.to_string());
    m
}

// --- manifest -----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub mode: String,
    pub seed: u64,
    pub dataset: String,
    pub out_dir: String,
    pub config: BTreeMap<String, String>,
    pub status: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub wall_ms: Option<u128>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, mode: &str, seed: u64, dataset: &Path, out_dir: &Path) -> Self {
        RunManifest {
            version: format!("ttaforge {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            mode: mode.to_string(),
            seed,
            dataset: dataset.display().to_string(),
            out_dir: out_dir.display().to_string(),
            config: BTreeMap::new(),
            status: "running".to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            wall_ms: None,
            outputs: BTreeMap::new(),
        }
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(&path, json).map_err(|e| TtaError::io(&path, e))
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

// --- gen -----------------------------------------------------------------------

pub fn parse_target_shift(name: &str) -> Result<TargetShift> {
    if name == "none" {
        return Ok(TargetShift::None);
    }
    if name == "palette" {
        return Ok(TargetShift::Palette);
    }
    for (prefix, kind) in [
        ("gauss", CorruptionKind::GaussianNoise),
        ("shot", CorruptionKind::ShotNoise),
        ("bright", CorruptionKind::Brightness),
        ("contrast", CorruptionKind::Contrast),
    ] {
        if let Some(rest) = name.strip_prefix(prefix) {
            let severity: u8 = rest
                .parse()
                .map_err(|_| TtaError::Invalid(format!("unknown target shift {name:?}")))?;
            if !(1..=5).contains(&severity) {
                return Err(TtaError::Invalid(format!(
                    "target shift severity {severity} outside 1..=5"
                )));
            }
            return Ok(TargetShift::PaletteWithCorruption(kind, severity));
        }
    }
    Err(TtaError::Invalid(format!("unknown target shift {name:?}")))
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let started = Instant::now();
    let seed = resolve_seed(args.seed, None, 0)?;
    let shift = parse_target_shift(&args.target_shift)?;
    let spec = SyntheticSpec::new(args.num_images, args.size, seed, shift)?;
    fs::create_dir_all(&args.out).map_err(|e| TtaError::io(&args.out, e))?;

    let mut manifest = RunManifest::new("gen", &args.target_shift, seed, &args.out, &args.out);
    manifest
        .config
        .insert("num_images".into(), args.num_images.to_string());
    manifest.config.insert("size".into(), args.size.to_string());
    manifest
        .config
        .insert("target_shift".into(), args.target_shift.clone());
    manifest.write(&args.out)?;

    let ds = data::generate(&spec, &args.out)?;

    manifest.status = "complete".into();
    manifest.finished_unix_ms = Some(now_ms());
    manifest.wall_ms = Some(started.elapsed().as_millis());
    manifest
        .outputs
        .insert("annotations".into(), "annotations.json".into());
    manifest.outputs.insert("images".into(), "images".into());
    manifest.write(&args.out)?;
    println!(
        "generated {} images ({} annotations) under {}",
        ds.num_images(),
        ds.file.annotations.len(),
        args.out.display()
    );
    Ok(())
}

// --- run -----------------------------------------------------------------------

fn load_stream(dataset: &Dataset) -> Result<Vec<StreamImage>> {
    let mut stream = Vec::with_capacity(dataset.num_images());
    for entry in &dataset.file.images {
        stream.push(StreamImage {
            id: entry.id,
            image: dataset.load_image(entry)?,
        });
    }
    Ok(stream)
}

fn predictions_to_records(
    predictions: &[(u64, Vec<crate::core::Detection>)],
) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for (image_id, dets) in predictions {
        for d in dets {
            out.push(PredictionRecord {
                image_id: *image_id,
                box_: d.box_,
                score: d.score,
                category: d.label,
            });
        }
    }
    out
}

fn write_metrics(
    out_dir: &Path,
    dataset: &Dataset,
    records: &[PredictionRecord],
    iou: f64,
) -> Result<(EvalRecord, Option<f64>)> {
    let gt = dataset.ground_truth();
    let eval = evalkit::evaluate(records, &gt, dataset.categories.len(), iou);
    let map_range = evalkit::map_over_iou_range(records, &gt, dataset.categories.len());
    evalkit::write_metrics_csv(&out_dir.join("metrics.csv"), &eval, &dataset.categories)?;
    evalkit::write_pr_csv(&out_dir.join("pr_curve.csv"), &eval, &dataset.categories)?;
    Ok((eval, map_range))
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let started = Instant::now();
    let mode = match args.mode.as_str() {
        "direct" => RunMode::Direct,
        "adapt" => RunMode::Adapt,
        other => {
            return Err(TtaError::Invalid(format!(
                "mode must be direct or adapt, got {other:?}"
            )))
        }
    };
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => AdaptationConfig::default(),
    };
    config.seed = resolve_seed(args.seed, Some(config.seed), 0)?;

    let dataset = data::load(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| TtaError::io(&args.out, e))?;

    let mut manifest = RunManifest::new("run", &args.mode, config.seed, &args.data, &args.out);
    manifest.config = config_snapshot(&config);
    manifest.write(&args.out)?;

    let (detector, embedder) = build_backends(config.seed)?;
    let stream = load_stream(&dataset)?;
    let output = match mode {
        RunMode::Adapt if args.dump_memory => {
            let mut state = crate::adapt::AdaptationState::new(&detector, &config);
            let out = crate::adapt::run_adaptation(&stream, &mut state, &detector, &embedder, &config)?;
            state
                .memory
                .dump(&args.out.join("memory"), &dataset.categories)?;
            out
        }
        _ => run_stream(&stream, &detector, &embedder, &config, mode)?,
    };

    let mut report_text = String::new();
    for r in &output.reports {
        report_text.push_str(&r.format_line());
        report_text.push('\n');
    }
    let reports_path = args.out.join("step_reports.txt");
    fs::write(&reports_path, report_text).map_err(|e| TtaError::io(&reports_path, e))?;

    let records = predictions_to_records(&output.predictions);
    data::save_predictions(&args.out.join("predictions.jsonl"), &records)?;
    let (eval, map_range) = write_metrics(&args.out, &dataset, &records, 0.5)?;

    manifest.status = "complete".into();
    manifest.finished_unix_ms = Some(now_ms());
    manifest.wall_ms = Some(started.elapsed().as_millis());
    for (k, v) in [
        ("predictions", "predictions.jsonl"),
        ("metrics", "metrics.csv"),
        ("pr_curve", "pr_curve.csv"),
        ("step_reports", "step_reports.txt"),
    ] {
        manifest.outputs.insert(k.into(), v.into());
    }
    manifest.write(&args.out)?;

    let ap50 = eval.mean_ap.map(|v| format!("{v:.4}")).unwrap_or_default();
    let map = map_range.map(|v| format!("{v:.4}")).unwrap_or_default();
    println!("mode={} AP50={ap50} mAP(50:95)={map}", args.mode);
    Ok(())
}

// --- eval ----------------------------------------------------------------------

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dataset = data::load(&args.data)?;
    let records = data::load_predictions(&args.pred)?;
    for r in &records {
        if r.category >= dataset.categories.len() {
            return Err(TtaError::Invalid(format!(
                "prediction references missing category id {}",
                r.category
            )));
        }
        let _ = BoundingBox::new(r.box_.x1, r.box_.y1, r.box_.x2, r.box_.y2)?;
    }
    fs::create_dir_all(&args.out).map_err(|e| TtaError::io(&args.out, e))?;
    let gt = dataset.ground_truth();
    let eval = evalkit::evaluate(&records, &gt, dataset.categories.len(), args.iou);
    let map_range = evalkit::map_over_iou_range(&records, &gt, dataset.categories.len());
    evalkit::write_metrics_csv(&args.out.join("metrics.csv"), &eval, &dataset.categories)?;
    evalkit::write_pr_csv(&args.out.join("pr_curve.csv"), &eval, &dataset.categories)?;

    if args.tp_fp_hist {
        let mut all: Vec<(f64, bool)> = Vec::new();
        for (c, e) in eval.per_category.iter().enumerate() {
            let (tp, fp) = evalkit::tp_fp_histogram(&e.records, args.hist_bins);
            let name = dataset.categories.name(c);
            evalkit::write_histogram_csv(&args.out.join(format!("hist_{name}.csv")), &tp, &fp)?;
            all.extend_from_slice(&e.records);
        }
        let (tp, fp) = evalkit::tp_fp_histogram(&all, args.hist_bins);
        evalkit::write_histogram_csv(&args.out.join("hist_all.csv"), &tp, &fp)?;
    }

    let ap = eval.mean_ap.map(|v| format!("{v:.4}")).unwrap_or_default();
    let map = map_range.map(|v| format!("{v:.4}")).unwrap_or_default();
    println!("AP{:.0}={ap} mAP(50:95)={map}", args.iou * 100.0);
    Ok(())
}
