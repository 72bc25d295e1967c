//! Command-line front end: `detect`, `eval`, `synth`, `augment`, `bench`.
//!
//! Machine-readable results are always written as files under `--out`;
//! standard output gets one summary line per command. Pipeline settings
//! resolve as command-line flag, then `--config` file, then built-in
//! default.
//!
//! Exit codes: 0 success, 1 I/O or environment failure, 2 input-contract
//! violation, 3 partial success.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::augment::{augment_dataset, AugmentError, AugmentSpec};
use crate::detect::{BaselineParams, DetectError, DetectorSpec, ExternalSpec, DEFAULT_TIMEOUT_MS};
use crate::enhance::{BlurParams, EnhanceParams};
use crate::eval::{evaluate, pr_curve_csv, EvalError};
use crate::model::{load_manifest, manifest_root, DatasetManifest, ImageBuffer, ManifestEntry, ManifestError};
use crate::overlay::annotate;
use crate::pipeline::{bench, default_workers, run_dataset, DetectionsDocument, PipelineConfig, PipelineError, LATENCY_BUDGET_MS};
use crate::synth::{compose_scene, generate_dataset, scene_rng, SceneAssets, SynthConfig, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

pub const BENCH_WIDTH: u32 = 3840;
pub const BENCH_HEIGHT: u32 = 2160;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn io(message: impl fmt::Display) -> Self {
        Self { code: EXIT_IO, message: message.to_string() }
    }

    fn input(message: impl fmt::Display) -> Self {
        Self { code: EXIT_INPUT, message: message.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Read { .. } | ManifestError::Write { .. } => Self::io(e),
            _ => Self::input(e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Malformed(_) | PipelineError::InvalidDetection { .. } => Self::input(e),
            PipelineError::Detector(DetectError::Params(_)) => Self::input(e),
            _ => Self::io(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Write { .. } => Self::io(e),
            _ => Self::input(e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::EmptySprite(_) => Self::input(e),
            SynthError::Manifest(m) => m.into(),
            _ => Self::io(e),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Parse(_) | AugmentError::UnsafePath(_) => Self::input(e),
            AugmentError::Manifest(m) => m.into(),
            _ => Self::io(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sartile", version, about = "Tiled small-target detection, evaluation and synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalFlags {
    /// TOML file of pipeline settings; command-line flags take precedence [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads [default: logical CPU count]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Only report errors [default: off]
    #[arg(long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Report progress [default: off]
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the tiled detector over an image or a manifest
    Detect(DetectArgs),
    /// Score a detections document against a manifest
    Eval(EvalArgs),
    /// Generate an annotated synthetic dataset
    Synth(SynthArgs),
    /// Write augmented copies of a dataset
    Augment(AugmentArgs),
    /// Time the pipeline on one frame across worker counts
    Bench(BenchArgs),
}

/// Pipeline flags shared by `detect` and `bench`. Unset flags fall back to
/// the config file, then to the defaults shown.
#[derive(Debug, Args, Default)]
pub struct PipelineFlags {
    /// Patch side in pixels [default: 200]
    #[arg(long)]
    pub patch: Option<u32>,
    /// Overlap between neighbouring patches [default: 50]
    #[arg(long)]
    pub overlap: Option<u32>,
    /// IoU above which overlapping detections are merged [default: 0.5]
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Minimum detection score kept [default: 0.25]
    #[arg(long)]
    pub conf_thresh: Option<f64>,
    /// Contrast-stretch every patch before detection [default: off]
    #[arg(long)]
    pub enhance: bool,
    /// Lower stretch percentile [default: 2]
    #[arg(long)]
    pub stretch_low: Option<f64>,
    /// Upper stretch percentile [default: 98]
    #[arg(long)]
    pub stretch_high: Option<f64>,
    /// Keep detections cut off by patch edges even when a whole copy exists [default: off]
    #[arg(long)]
    pub keep_truncated: bool,
    /// External detector command line [default: none, built-in baseline]
    #[arg(long)]
    pub detector_cmd: Option<String>,
    /// Per-patch timeout for the external detector in ms [default: 10000]
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Baseline threshold in standard deviations [default: 3.5]
    #[arg(long)]
    pub k_sigma: Option<f64>,
    /// Smallest accepted box side [default: 5]
    #[arg(long)]
    pub min_side: Option<u32>,
    /// Largest accepted box side [default: 50]
    #[arg(long)]
    pub max_side: Option<u32>,
    /// Lowest score the baseline emits [default: 0.1]
    #[arg(long)]
    pub conf_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Single input image
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub image: Option<PathBuf>,
    /// Dataset manifest; image paths resolve against its directory
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write copies of the inputs with detections drawn in [default: off]
    #[arg(long)]
    pub annotate: bool,
    /// Record per-image latency in the detections document [default: off]
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections document written by `detect`
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// IoU needed for a match
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Score threshold for the reported precision and recall
    #[arg(long, default_value_t = 0.25)]
    pub conf_thresh: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Targets per scene as an inclusive range
    #[arg(long, default_value = "1-5", value_parser = parse_range)]
    pub targets: (u32, u32),
    /// Target side in pixels as an inclusive range
    #[arg(long, default_value = "5-50", value_parser = parse_range)]
    pub target_side: (u32, u32),
    /// Minimum edge-to-edge gap between targets
    #[arg(long, default_value_t = 10)]
    pub min_separation: u32,
    /// Selective blur radius
    #[arg(long, default_value_t = 5)]
    pub blur_radius: u32,
    /// Selective blur maximum delta
    #[arg(long, default_value_t = 50)]
    pub blur_delta: u8,
    /// Skip the selective blur [default: off]
    #[arg(long)]
    pub no_blur: bool,
    /// Background image; repeatable [default: procedural]
    #[arg(long = "background")]
    pub backgrounds: Vec<PathBuf>,
    /// Sprite image with alpha; repeatable [default: built-in shapes]
    #[arg(long = "sprite")]
    pub sprites: Vec<PathBuf>,
    /// Width of procedural backgrounds
    #[arg(long, default_value_t = 1920)]
    pub width: u32,
    /// Height of procedural backgrounds
    #[arg(long, default_value_t = 1080)]
    pub height: u32,
    /// Class label for every target
    #[arg(long = "class", default_value = "person")]
    pub class_label: String,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Dataset manifest to augment
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated op chain from hflip, vflip, rot90, rot180, rot270,
    /// zoom:<factor> and zoom (factor drawn from 0.5-2.0); repeatable, one
    /// copy per chain
    #[arg(long, required = true)]
    pub ops: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Frame to time [default: seeded 3840x2160 synthetic frame]
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Runs per worker count
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Worker counts to time
    #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
    pub workers_sweep: Vec<usize>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let bad = || format!("expected <min>-<max>, got `{s}`");
    let (a, b) = s.split_once('-').map_or((s, s), |p| p);
    let lo: u32 = a.trim().parse().map_err(|_| bad())?;
    let hi: u32 = b.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Settings accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub patch: Option<u32>,
    pub overlap: Option<u32>,
    pub nms_iou: Option<f64>,
    pub conf_thresh: Option<f64>,
    pub workers: Option<usize>,
    pub enhance: Option<bool>,
    pub stretch_low: Option<f64>,
    pub stretch_high: Option<f64>,
    pub suppress_truncated: Option<bool>,
    pub detector: Option<FileDetector>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDetector {
    pub command: Option<String>,
    pub timeout_ms: Option<u64>,
    pub k_sigma: Option<f64>,
    pub min_side: Option<u32>,
    pub max_side: Option<u32>,
    pub conf_floor: Option<f64>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("failed to read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))
}

/// Merges flags over the file over defaults into a validated config.
pub fn resolve_pipeline(
    flags: &PipelineFlags,
    file: &FileConfig,
    workers: Option<usize>,
) -> Result<PipelineConfig, CliError> {
    let d = PipelineConfig::default();
    let fd = file.detector.as_ref();
    let pick_d = |cli: Option<f64>, f: Option<f64>, def: f64| cli.or(f).unwrap_or(def);

    let enhance = if flags.enhance || file.enhance.unwrap_or(false) {
        let def = EnhanceParams::default();
        let lo = pick_d(flags.stretch_low, file.stretch_low, def.p_low());
        let hi = pick_d(flags.stretch_high, file.stretch_high, def.p_high());
        Some(EnhanceParams::new(lo, hi).map_err(CliError::input)?)
    } else {
        None
    };

    let command = flags.detector_cmd.clone().or_else(|| fd.and_then(|f| f.command.clone()));
    let detector = match command {
        Some(command) => DetectorSpec::External(ExternalSpec {
            command,
            timeout_ms: flags
                .timeout_ms
                .or(fd.and_then(|f| f.timeout_ms))
                .unwrap_or(DEFAULT_TIMEOUT_MS),
        }),
        None => {
            let b = BaselineParams::default();
            let params = BaselineParams {
                k_sigma: pick_d(flags.k_sigma, fd.and_then(|f| f.k_sigma), b.k_sigma),
                min_side: flags.min_side.or(fd.and_then(|f| f.min_side)).unwrap_or(b.min_side),
                max_side: flags.max_side.or(fd.and_then(|f| f.max_side)).unwrap_or(b.max_side),
                conf_floor: pick_d(flags.conf_floor, fd.and_then(|f| f.conf_floor), b.conf_floor),
            };
            params.validate().map_err(CliError::input)?;
            DetectorSpec::Baseline(params)
        }
    };

    let cfg = PipelineConfig {
        patch: flags.patch.or(file.patch).unwrap_or(d.patch),
        overlap: flags.overlap.or(file.overlap).unwrap_or(d.overlap),
        enhance,
        detector,
        nms_iou: pick_d(flags.nms_iou, file.nms_iou, d.nms_iou),
        conf_thresh: pick_d(flags.conf_thresh, file.conf_thresh, d.conf_thresh),
        workers: workers.or(file.workers).unwrap_or_else(default_workers),
        suppress_truncated: !flags.keep_truncated && file.suppress_truncated.unwrap_or(d.suppress_truncated),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("failed to create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("failed to write {}: {e}", path.display())))
}

fn file_config(global: &GlobalFlags) -> Result<FileConfig, CliError> {
    global.config.as_deref().map(load_file_config).transpose().map(Option::unwrap_or_default)
}

/// Flat output name for a manifest-relative image path.
fn flat_png_name(path: &str) -> String {
    let stem = Path::new(path).with_extension("");
    let flat: String = stem
        .to_string_lossy()
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    format!("{flat}.png")
}

fn cmd_detect(global: &GlobalFlags, args: &DetectArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = resolve_pipeline(&args.pipeline, &file_config(global)?, global.workers)?;
    let (manifest, root) = match (&args.image, &args.manifest) {
        (Some(image), _) => {
            let img = ImageBuffer::load(image).map_err(CliError::io)?;
            let name = image
                .file_name()
                .ok_or_else(|| CliError::input(format!("{} is not a file", image.display())))?
                .to_string_lossy()
                .into_owned();
            let entry = ManifestEntry { path: name, width: img.width(), height: img.height(), boxes: Vec::new() };
            let root = image.parent().map(Path::to_path_buf).unwrap_or_default();
            (DatasetManifest::new(vec![entry]), root)
        }
        (None, Some(m)) => (load_manifest(m)?, manifest_root(m)),
        (None, None) => return Err(CliError::input("one of --image or --manifest is required")),
    };

    create_dir(&global.out)?;
    let doc_path = global.out.join("detections.json");
    let run = run_dataset(&manifest, &root, &cfg, &doc_path, args.timing)?;

    if args.annotate {
        let dir = global.out.join("annotated");
        create_dir(&dir)?;
        for r in &run.document.results {
            if r.error.is_some() {
                continue;
            }
            let img = ImageBuffer::load(&root.join(&r.path)).map_err(CliError::io)?;
            annotate(&img, &r.detections)
                .save_png(&dir.join(flat_png_name(&r.path)))
                .map_err(CliError::io)?;
        }
    }

    for (path, failures) in &run.partial {
        for f in failures {
            log::error!("{path}: tile ({}, {}) failed: {}", f.tile.0, f.tile.1, f.error);
        }
    }
    let count: usize = run.document.results.iter().map(|r| r.detections.len()).sum();
    let _ = writeln!(
        out,
        "images={} detections={} failed_images={} partial_images={} -> {}",
        run.document.results.len(),
        count,
        run.failed_images.len(),
        run.partial.len(),
        doc_path.display()
    );
    Ok(if !run.failed_images.is_empty() {
        EXIT_IO
    } else if !run.partial.is_empty() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn class_file_name(class: &str) -> String {
    let safe: String = class
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("pr_{safe}.csv")
}

fn cmd_eval(global: &GlobalFlags, args: &EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        return Err(CliError::input(format!("--iou {} must lie in (0, 1]", args.iou)));
    }
    let doc = DetectionsDocument::load(&args.detections)?;
    let manifest = load_manifest(&args.manifest)?;
    let report = evaluate(&doc, &manifest, args.iou, args.conf_thresh)?;
    create_dir(&global.out)?;
    report.save(&global.out.join("eval_report.json"))?;
    for c in &report.classes {
        write_file(&global.out.join(class_file_name(&c.class)), pr_curve_csv(&c.pr_curve).as_bytes())?;
    }
    let _ = writeln!(out, "{}", report.summary_line());
    Ok(EXIT_OK)
}

fn cmd_synth(global: &GlobalFlags, args: &SynthArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let blur = if args.no_blur {
        None
    } else {
        Some(BlurParams::new(args.blur_radius, args.blur_delta).map_err(CliError::input)?)
    };
    let cfg = SynthConfig {
        background_paths: args.backgrounds.clone(),
        sprite_paths: args.sprites.clone(),
        scenes: args.scenes,
        targets_per_scene: args.targets,
        target_side: args.target_side,
        min_separation: args.min_separation,
        blur,
        seed: global.seed,
        width: args.width,
        height: args.height,
        class_label: args.class_label.clone(),
        workers: global.workers.unwrap_or_else(default_workers),
    };
    let res = generate_dataset(&cfg, &global.out)?;
    let boxes: usize = res.manifest.entries.iter().map(|e| e.boxes.len()).sum();
    let _ = writeln!(
        out,
        "scenes={} boxes={} unplaced={} -> {}",
        res.manifest.len(),
        boxes,
        res.unplaced,
        res.manifest_path.display()
    );
    Ok(EXIT_OK)
}

fn cmd_augment(global: &GlobalFlags, args: &AugmentArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let spec = AugmentSpec::parse(&args.ops, global.seed)?;
    let manifest = load_manifest(&args.manifest)?;
    let merged = augment_dataset(&manifest, &manifest_root(&args.manifest), &spec, &global.out)?;
    let _ = writeln!(
        out,
        "images={} augmented={} -> {}",
        manifest.len(),
        merged.len() - manifest.len(),
        global.out.join("manifest.json").display()
    );
    Ok(EXIT_OK)
}

/// The seeded synthetic frame timed when `bench` gets no `--image`.
pub fn bench_frame(seed: u64) -> ImageBuffer {
    let cfg = SynthConfig {
        width: BENCH_WIDTH,
        height: BENCH_HEIGHT,
        targets_per_scene: (10, 20),
        blur: None,
        ..SynthConfig::default()
    };
    let assets = SceneAssets::load(&cfg).expect("built-in assets fit the frame");
    compose_scene(&cfg, &assets, &mut scene_rng(seed, 0)).image
}

fn cmd_bench(global: &GlobalFlags, args: &BenchArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = resolve_pipeline(&args.pipeline, &file_config(global)?, global.workers)?;
    if args.workers_sweep.contains(&0) {
        return Err(CliError::input("worker counts must be at least 1"));
    }
    let image = match &args.image {
        Some(p) => ImageBuffer::load(p).map_err(CliError::io)?,
        None => bench_frame(global.seed),
    };
    let report = bench(&image, &cfg, args.repeats, &args.workers_sweep)?;
    let _ = writeln!(out, "frame={}x{} tiles={} repeats={}", report.width, report.height, report.tile_count, report.repeats);
    for r in &report.rows {
        let _ = writeln!(
            out,
            "workers={} median_ms={:.1} min_ms={:.1} max_ms={:.1} detections={}",
            r.workers,
            r.total.median_ms,
            r.total.min_ms,
            r.total.max_ms,
            r.detections.len()
        );
    }
    let widest = report.widest().expect("sweep is non-empty");
    let verdict = if report.within_budget() { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "budget: workers={} median_ms={:.1} {verdict} (<{LATENCY_BUDGET_MS:.0}ms)", widest.workers, widest.total.median_ms);

    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "workers": r.workers,
                "median_ms": r.total.median_ms,
                "min_ms": r.total.min_ms,
                "max_ms": r.total.max_ms,
                "stages_ms": {
                    "tile": r.stages.tile_ms,
                    "enhance": r.stages.enhance_ms,
                    "detect": r.stages.detect_ms,
                    "merge": r.stages.merge_ms,
                    "total": r.stages.total_ms,
                },
                "detections": r.detections.len(),
            })
        })
        .collect();
    let doc = json!({
        "width": report.width,
        "height": report.height,
        "tiles": report.tile_count,
        "repeats": report.repeats,
        "budget_ms": LATENCY_BUDGET_MS,
        "within_budget": report.within_budget(),
        "rows": rows,
    });
    create_dir(&global.out)?;
    let mut bytes = serde_json::to_vec(&doc).expect("plain values");
    bytes.push(b'\n');
    write_file(&global.out.join("bench.json"), &bytes)?;
    let dets = DetectionsDocument {
        results: vec![crate::pipeline::ImageResult {
            path: args.image.as_ref().map_or_else(|| "synthetic".to_string(), |p| p.display().to_string()),
            detections: widest.detections.clone(),
            total_ms: None,
            error: None,
        }],
    };
    dets.save(&global.out.join("bench_detections.json"))?;
    Ok(EXIT_OK)
}

fn init_logging(global: &GlobalFlags) {
    let level = if global.quiet {
        log::LevelFilter::Error
    } else if global.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(level).format_timestamp(None);
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        builder.write_style(env_logger::WriteStyle::Never);
    }
    let _ = builder.try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Summaries go to `out`, diagnostics to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
    let color = if no_color { clap::ColorChoice::Never } else { clap::ColorChoice::Auto };
    let cli = match <Cli as clap::CommandFactory>::command()
        .color(color)
        .try_get_matches_from(args)
        .and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli.global);
    let result = match &cli.command {
        Command::Detect(a) => cmd_detect(&cli.global, a, out),
        Command::Eval(a) => cmd_eval(&cli.global, a, out),
        Command::Synth(a) => cmd_synth(&cli.global, a, out),
        Command::Augment(a) => cmd_augment(&cli.global, a, out),
        Command::Bench(a) => cmd_bench(&cli.global, a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.code
        }
    }
}
