//! Python extension module exposing the main rovis types and operations:
//! benchmark generation, dataset I/O, model construction/checkpoints,
//! training, online tracking, evaluation, and the RLE mask codec. Structured
//! configs and reports cross the boundary as JSON strings so the Python
//! surface stays schema-free.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rovis::data::{self, BenchmarkKind, BitMask, Split};
use rovis::metrics::{self, VideoGroundTruth, VideoPredictions};
use rovis::model;
use rovis::rng::Rng;
use rovis::track::{self, TrackerConfig, VideoResultFile};
use rovis::train::TrainConfig;
use std::path::Path;

fn err(e: rovis::Error) -> PyErr {
    match e {
        rovis::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(json: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A benchmark dataset: videos with frames, ground-truth tracks, and a
/// train/val split.
#[pyclass]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Generate a synthetic benchmark ("occlusion", "crowding", "reappear",
    /// or "mixed"); deterministic in (benchmark, seed, size).
    #[staticmethod]
    fn generate(benchmark: &str, seed: u64, size: usize) -> PyResult<Dataset> {
        let kind = BenchmarkKind::ALL
            .into_iter()
            .find(|k| k.name() == benchmark)
            .ok_or_else(|| PyValueError::new_err(format!("unknown benchmark {benchmark:?}")))?;
        Ok(Dataset { inner: data::make_benchmark(kind, seed, size).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Dataset> {
        Ok(Dataset { inner: data::load_dataset(Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, Path::new(path)).map_err(err)
    }

    fn categories(&self) -> Vec<String> {
        self.inner.categories.clone()
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner.videos.iter().map(|v| v.sample.id.clone()).collect()
    }

    fn split_of(&self, video_id: &str) -> PyResult<&'static str> {
        let v = self.video(video_id)?;
        Ok(match v.split {
            Split::Train => "train",
            Split::Val => "val",
        })
    }

    fn num_frames(&self, video_id: &str) -> PyResult<usize> {
        Ok(self.video(video_id)?.sample.frames.len())
    }

    /// Ground truth of one video as JSON: tracks with per-frame RLE masks.
    fn ground_truth_json(&self, video_id: &str) -> PyResult<String> {
        let v = self.video(video_id)?;
        let tracks: Vec<serde_json::Value> = data::gt_tracks(&v.sample)
            .iter()
            .map(|t| {
                serde_json::json!({
                    "instance_id": t.instance_id,
                    "category": t.category,
                    "frames": t.masks.iter().map(|(&f, m)| {
                        serde_json::json!({ "frame": f, "rle": m.to_rle() })
                    }).collect::<Vec<_>>(),
                })
            })
            .collect();
        to_json(&tracks)
    }

    fn __len__(&self) -> usize {
        self.inner.videos.len()
    }
}

impl Dataset {
    fn video(&self, video_id: &str) -> PyResult<&data::DatasetVideo> {
        self.inner
            .videos
            .iter()
            .find(|v| v.sample.id == video_id)
            .ok_or_else(|| PyValueError::new_err(format!("no video {video_id:?}")))
    }
}

/// The track-query segmenter. Not shareable across Python threads (its
/// parameter graph is reference-counted single-threaded state).
#[pyclass(unsendable)]
struct Model {
    inner: model::Model,
}

#[pymethods]
impl Model {
    /// Fresh randomly-initialized model from a ModelConfig JSON object
    /// (e.g. "{}" for the default toy configuration).
    #[staticmethod]
    fn new(config_json: &str, seed: u64) -> PyResult<Model> {
        let config: model::ModelConfig = parse_json(config_json, "model config")?;
        let mut rng = Rng::new(seed);
        Ok(Model { inner: model::Model::new(config, &mut rng).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model { inner: model::load_checkpoint(Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, Path::new(path)).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn config_json(&self) -> PyResult<String> {
        to_json(self.inner.config())
    }

    /// Run the online tracker over one video; returns the per-video result
    /// file as JSON (tracks with per-frame RLE masks and scores).
    fn track(&self, dataset: &Dataset, video_id: &str, tracker_config_json: &str) -> PyResult<String> {
        let config: TrackerConfig = parse_json(tracker_config_json, "tracker config")?;
        let v = dataset.video(video_id)?;
        let tracks = track::track_video(&self.inner, &v.sample.frames, &config).map_err(err)?;
        let (h, w) = (v.sample.frames[0].height, v.sample.frames[0].width);
        let file =
            VideoResultFile::from_tracks(video_id, h, w, v.sample.frames.len(), &tracks);
        to_json(&file)
    }
}

/// Train on the dataset's train split, writing checkpoints and the JSONL loss
/// log under out_dir; returns a JSON summary. config_json is a TrainConfig
/// object ("{}" for defaults).
#[pyfunction]
fn train(dataset: &Dataset, config_json: &str, out_dir: &str) -> PyResult<String> {
    let config: TrainConfig = parse_json(config_json, "train config")?;
    let out = rovis::train::train(&dataset.inner, &config, Path::new(out_dir)).map_err(err)?;
    let summary = serde_json::json!({
        "steps": out.records.len(),
        "final_loss": out.records.last().map(|r| r.loss_total),
        "final_checkpoint": out.final_checkpoint.display().to_string(),
        "log_path": out.log_path.display().to_string(),
    });
    to_json(&summary)
}

/// Evaluate per-video result JSON strings against a dataset's ground truth
/// (split: "train", "val", or "all"); returns the EvalReport as JSON.
#[pyfunction]
fn evaluate(dataset: &Dataset, result_jsons: Vec<String>, split: &str) -> PyResult<String> {
    let selected = |s: Split| match split {
        "train" => s == Split::Train,
        "val" => s == Split::Val,
        "all" => true,
        _ => false,
    };
    if !["train", "val", "all"].contains(&split) {
        return Err(PyValueError::new_err(format!("unknown split {split:?}")));
    }
    let ground_truth: Vec<VideoGroundTruth> = dataset
        .inner
        .videos
        .iter()
        .filter(|v| selected(v.split))
        .map(|v| VideoGroundTruth::from_sample(&v.sample))
        .collect();
    let mut predictions = Vec::new();
    for json in &result_jsons {
        let file: VideoResultFile = parse_json(json, "result file")?;
        predictions.push(VideoPredictions {
            video_id: file.video_id.clone(),
            tracks: file.to_tracks().map_err(err)?,
        });
    }
    let report = metrics::evaluate(
        &predictions,
        &ground_truth,
        &metrics::standard_thresholds(),
        &dataset.inner.categories,
    )
    .map_err(err)?;
    to_json(&report)
}

/// Row-major RLE of a binary mask given as rows of booleans.
#[pyfunction]
fn rle_encode(mask: Vec<Vec<bool>>) -> PyResult<Vec<u32>> {
    let h = mask.len();
    let w = mask.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || mask.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must be non-empty and rectangular"));
    }
    let m = BitMask::from_fn(h, w, |y, x| mask[y][x]);
    Ok(m.to_rle())
}

#[pyfunction]
fn rle_decode(height: usize, width: usize, counts: Vec<u32>) -> PyResult<Vec<Vec<bool>>> {
    let m = BitMask::from_rle(height, width, &counts).map_err(err)?;
    Ok((0..height).map(|y| (0..width).map(|x| m.get(y, x)).collect()).collect())
}

#[pymodule]
fn rovis_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
