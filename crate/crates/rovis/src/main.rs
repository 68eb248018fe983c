//! Command-line pipeline: `gen-data` writes a synthetic benchmark, `train`
//! fits a segmenter on its train split, `infer` tracks a split and writes
//! per-video result JSON, `eval` scores predictions and optionally plots PR
//! curves. Every artifact directory gets exactly one `run_manifest.json`,
//! written before work begins. Exit codes: 0 success, 1 runtime failure,
//! 2 usage/config error.

use clap::{Parser, Subcommand, ValueEnum};
use rovis::data::{load_dataset, make_benchmark, save_dataset, BenchmarkKind, Dataset, Split};
use rovis::metrics::{
    evaluate, pr_curves, standard_thresholds, EvalReport, VideoGroundTruth, VideoPredictions,
};
use rovis::model::{load_checkpoint_bytes, Model};
use rovis::plot::{pr_plot_images, save_ppm};
use rovis::track::{
    iou_link_baseline, read_video_results, static_detections, track_video, write_video_results,
    TrackerConfig, VideoResultFile,
};
use rovis::train::{train, TrainConfig};
use rovis::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "rovis", version, about = "Online video instance segmentation with track queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Split selector for inference and evaluation; the experiment lifecycle
/// measures the held-out val split by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn selects(self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Val => split == Split::Val,
            SplitArg::All => true,
        }
    }
}

fn parse_benchmark(s: &str) -> std::result::Result<BenchmarkKind, String> {
    BenchmarkKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
        let names: Vec<&str> = BenchmarkKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown benchmark {s:?} (expected one of: {})", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes benchmark dataset.
    GenData {
        /// Benchmark suite: occlusion, crowding, reappear, or mixed.
        #[arg(long, value_parser = parse_benchmark)]
        benchmark: BenchmarkKind,
        #[arg(long)]
        seed: u64,
        /// Number of videos (80/20 train/val split).
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite files in a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the segmenter on a dataset's train split.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON (unknown keys are rejected).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tag recorded in the run manifest for paired ablation comparisons.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Track videos with a trained checkpoint and write per-video results.
    Infer(InferArgs),
    /// Score prediction files against dataset ground truth.
    Eval {
        /// Directory of per-video result JSON files (from infer).
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory with ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Write PR-curve images (PPM) into this directory.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Worker threads for loading per-video predictions.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: u16,
    },
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Tracker config JSON (unknown keys are rejected).
    #[arg(long)]
    tracker: PathBuf,
    /// Replace the track-query tracker with a per-frame detection +
    /// mask-IoU linking baseline.
    #[arg(long, value_parser = ["iou-link"])]
    baseline: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Worker threads for per-video inference.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[arg(long)]
    force: bool,
}

/// Provenance record every command writes into its output directory before
/// doing any work, then finalizes with outputs and an end timestamp.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<String>,
    code_version: String,
    started_at_unix: u64,
    finished_at_unix: Option<u64>,
    /// Paths relative to the manifest's directory.
    outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            ablation: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at_unix: now_unix(),
            finished_at_unix: None,
            outputs: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Invalid(format!("serializing run manifest: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    fn finish(mut self, dir: &Path, mut outputs: Vec<String>) -> Result<()> {
        outputs.sort();
        self.outputs = outputs;
        self.finished_at_unix = Some(now_unix());
        self.write(dir)
    }
}

/// Create `dir` if needed; refuse to reuse a non-empty one without --force.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !force {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    Ok(())
}

/// ROVIS_SEED overrides seeds that come from config files.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("ROVIS_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("ROVIS_SEED must be a u64, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config types serialize")
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn cmd_gen_data(
    benchmark: BenchmarkKind,
    seed: u64,
    size: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    if size == 0 {
        eprintln!("warning: --size 0 generates an empty dataset");
    }
    prepare_out_dir(out, force)?;
    let manifest = RunManifest::new(
        "gen-data",
        serde_json::json!({ "benchmark": benchmark.name(), "seed": seed, "size": size }),
        Some(seed),
    );
    manifest.write(out)?;
    let dataset = make_benchmark(benchmark, seed, size)?;
    save_dataset(&dataset, out)?;
    let outputs: Vec<String> = std::iter::once("manifest.json".to_string())
        .chain(dataset.videos.iter().map(|v| v.sample.id.clone()))
        .collect();
    manifest.finish(out, outputs)?;
    println!(
        "wrote {} videos ({} benchmark, seed {seed}) to {}",
        dataset.videos.len(),
        benchmark.name(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config_path: &Path,
    out: &Path,
    ablation: Option<String>,
    force: bool,
) -> Result<()> {
    let mut config: TrainConfig = read_config(config_path, "train config")?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = load_dataset(data)?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::new("train", to_json(&config), Some(config.seed));
    manifest.ablation = ablation;
    manifest.write(out)?;
    let result = rovis_train(&dataset, &config, out)?;
    manifest.finish(out, result.0)?;
    println!("{}", result.1);
    Ok(())
}

/// Runs training and returns (output file names, summary line).
fn rovis_train(dataset: &Dataset, config: &TrainConfig, out: &Path) -> Result<(Vec<String>, String)> {
    let output = train(dataset, config, out)?;
    let mut names: Vec<String> = output
        .epoch_checkpoints
        .iter()
        .chain(std::iter::once(&output.final_checkpoint))
        .chain(std::iter::once(&output.log_path))
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.dedup();
    let last = output.records.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    let summary = format!(
        "trained {} epochs ({} steps), final loss {last:.4}, checkpoint {}",
        config.epochs,
        output.records.len(),
        output.final_checkpoint.display()
    );
    Ok((names, summary))
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let tracker_config: TrackerConfig = read_config(&args.tracker, "tracker config")?;
    tracker_config.validate()?;
    let checkpoint_bytes =
        std::fs::read(&args.checkpoint).map_err(|e| Error::io(&args.checkpoint, e))?;
    let model = load_checkpoint_bytes(&checkpoint_bytes)?;
    let dataset = load_dataset(&args.data)?;
    if !tracker_config.category_agnostic && model.config().num_classes != dataset.categories.len() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the dataset defines {}",
            model.config().num_classes,
            dataset.categories.len()
        )));
    }
    let out = args.out.as_path();
    let baseline = args.baseline.as_deref();
    prepare_out_dir(out, args.force)?;
    let manifest = RunManifest::new(
        "infer",
        serde_json::json!({
            "tracker": to_json(&tracker_config),
            "baseline": baseline,
            "checkpoint": args.checkpoint.display().to_string(),
            "split": format!("{:?}", args.split).to_lowercase(),
        }),
        None,
    );
    manifest.write(out)?;

    let videos: Vec<&rovis::data::VideoSample> = dataset
        .videos
        .iter()
        .filter(|v| args.split.selects(v.split))
        .map(|v| &v.sample)
        .collect();
    let names = infer_videos(
        &checkpoint_bytes,
        &videos,
        &tracker_config,
        baseline,
        out,
        args.jobs as usize,
    )?;
    let count = names.len();
    manifest.finish(out, names)?;
    println!("wrote {count} result files to {}", out.display());
    Ok(())
}

/// Tracks each video and writes `<video_id>.json`, fanning out over worker
/// threads. Each worker rebuilds the model from the checkpoint bytes (model
/// state is not shareable across threads); outputs are per-video files, so
/// the result is identical for any job count.
fn infer_videos(
    checkpoint_bytes: &[u8],
    videos: &[&rovis::data::VideoSample],
    config: &TrackerConfig,
    baseline: Option<&str>,
    out: &Path,
    jobs: usize,
) -> Result<Vec<String>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<String>>>> =
        Mutex::new((0..videos.len()).map(|_| None).collect());
    let workers = jobs.min(videos.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let model = match load_checkpoint_bytes(checkpoint_bytes) {
                    Ok(m) => m,
                    Err(e) => {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i < videos.len() {
                            results.lock().unwrap()[i] = Some(Err(e));
                        }
                        return;
                    }
                };
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= videos.len() {
                        return;
                    }
                    let r = infer_one(&model, videos[i], config, baseline, out);
                    results.lock().unwrap()[i] = Some(r);
                }
            });
        }
    });
    let mut names = Vec::with_capacity(videos.len());
    for (i, slot) in results.into_inner().unwrap().into_iter().enumerate() {
        match slot {
            Some(Ok(name)) => names.push(name),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(Error::Invalid(format!(
                    "video {} was never processed (worker died early)",
                    videos[i].id
                )))
            }
        }
    }
    Ok(names)
}

fn infer_one(
    model: &Model,
    video: &rovis::data::VideoSample,
    config: &TrackerConfig,
    baseline: Option<&str>,
    out: &Path,
) -> Result<String> {
    let tracks = match baseline {
        Some(_) => {
            let per_frame: Vec<_> = video
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| static_detections(model, t, f, config))
                .collect();
            iou_link_baseline(&per_frame, config.category_agnostic)
        }
        None => track_video(model, &video.frames, config)?,
    };
    let (h, w) = (video.frames[0].height, video.frames[0].width);
    let file = VideoResultFile::from_tracks(&video.id, h, w, video.frames.len(), &tracks);
    let name = format!("{}.json", video.id);
    write_video_results(&out.join(&name), &file)?;
    Ok(name)
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    plot: Option<&Path>,
    split: SplitArg,
    jobs: usize,
) -> Result<()> {
    let dataset = load_dataset(gt)?;
    let ground_truth: Vec<VideoGroundTruth> = dataset
        .videos
        .iter()
        .filter(|v| split.selects(v.split))
        .map(|v| VideoGroundTruth::from_sample(&v.sample))
        .collect();
    let predictions = load_predictions(pred, jobs)?;
    if predictions.is_empty() {
        eprintln!("warning: no prediction files in {}", pred.display());
    }
    let thresholds = standard_thresholds();
    let report = evaluate(&predictions, &ground_truth, &thresholds, &dataset.categories)?;

    let report_path = pred.join("eval_report.json");
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| Error::Invalid(format!("serializing eval report: {e}")))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    print_report(&report);

    if let Some(plot_dir) = plot {
        std::fs::create_dir_all(plot_dir).map_err(|e| Error::io(plot_dir, e))?;
        let manifest = RunManifest::new(
            "eval",
            serde_json::json!({
                "pred": pred.display().to_string(),
                "gt": gt.display().to_string(),
                "thresholds": &thresholds,
            }),
            None,
        );
        manifest.write(plot_dir)?;
        let curves = pr_curves(&predictions, &ground_truth, &[0.5, 0.75], &dataset.categories)?;
        let mut outputs = Vec::new();
        for (stem, image) in pr_plot_images(&curves) {
            let name = format!("{stem}.ppm");
            save_ppm(&plot_dir.join(&name), &image)?;
            outputs.push(name);
        }
        let count = outputs.len();
        manifest.finish(plot_dir, outputs)?;
        println!("wrote {count} PR plots to {}", plot_dir.display());
    }
    Ok(())
}

/// Reads every per-video result file in `dir` (skipping the report and
/// manifest this tool writes there), in parallel over worker threads.
fn load_predictions(dir: &Path, jobs: usize) -> Result<Vec<VideoPredictions>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && !matches!(
                    p.file_name().and_then(|n| n.to_str()),
                    Some("eval_report.json") | Some("run_manifest.json")
                )
        })
        .collect();
    files.sort();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<VideoPredictions>>>> =
        Mutex::new((0..files.len()).map(|_| None).collect());
    let workers = jobs.min(files.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= files.len() {
                    return;
                }
                let r = read_video_results(&files[i]).and_then(|file| {
                    file.to_tracks().map(|tracks| VideoPredictions {
                        video_id: file.video_id.clone(),
                        tracks,
                    })
                });
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            slot.unwrap_or_else(|| {
                Err(Error::Invalid(format!("{} was never read", files[i].display())))
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".to_string())
}

fn print_report(report: &EvalReport) {
    println!("{:>8} {:>8} {:>8} {:>8} {:>8}", "AP", "AP50", "AP75", "AR@1", "AR@10");
    println!(
        "{:>8.4} {:>8} {:>8} {:>8.4} {:>8.4}",
        report.ap,
        fmt_opt(report.ap50),
        fmt_opt(report.ap75),
        report.ar_at_1,
        report.ar_at_10
    );
    println!("per-category AP:");
    for c in &report.per_category {
        println!("  {:<12} {:.4}", c.category, c.ap);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { benchmark, seed, size, out, force } => {
            cmd_gen_data(benchmark, seed, size, &out, force)
        }
        Command::Train { data, config, out, ablation, force } => {
            cmd_train(&data, &config, &out, ablation, force)
        }
        Command::Infer(args) => cmd_infer(&args),
        Command::Eval { pred, gt, plot, split, jobs } => {
            cmd_eval(&pred, &gt, plot.as_deref(), split, jobs as usize)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
