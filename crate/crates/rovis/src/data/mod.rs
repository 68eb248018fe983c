//! Video samples, ground-truth annotations, dataset containers, and the
//! synthetic moving-shapes generator behind the built-in benchmarks.

mod benchmark;
mod io;
mod mask;
mod scene;

pub use benchmark::{make_benchmark, BenchmarkKind};
pub use io::{load_dataset, read_ppm, save_dataset, write_ppm};
pub use mask::BitMask;
pub use scene::{generate, ObjectScript, SceneScript, ShapeKind};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One RGB frame, row-major H x W x 3, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Frame {
        assert!(height > 0 && width > 0, "frame: empty dimensions {height}x{width}");
        Frame { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One annotated instance in one frame.
#[derive(Debug, Clone)]
pub struct GtObject {
    pub instance_id: u64,
    pub category: usize,
    pub mask: BitMask,
}

/// A video with per-frame modal ground truth. `annotations[t]` lists the
/// instances visible in frame t; absent instances simply have no entry.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Vec<GtObject>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct DatasetVideo {
    pub sample: VideoSample,
    pub split: Split,
}

/// In-memory dataset: category names plus videos tagged with their split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub videos: Vec<DatasetVideo>,
}

impl Dataset {
    pub fn split_videos(&self, split: Split) -> Vec<&VideoSample> {
        self.videos.iter().filter(|v| v.split == split).map(|v| &v.sample).collect()
    }
}

/// Ground truth reorganized per instance: category plus frame -> mask.
#[derive(Debug, Clone)]
pub struct GtTrack {
    pub instance_id: u64,
    pub category: usize,
    pub masks: BTreeMap<usize, BitMask>,
}

pub fn gt_tracks(sample: &VideoSample) -> Vec<GtTrack> {
    let mut by_id: BTreeMap<u64, GtTrack> = BTreeMap::new();
    for (t, objs) in sample.annotations.iter().enumerate() {
        for o in objs {
            let e = by_id.entry(o.instance_id).or_insert_with(|| GtTrack {
                instance_id: o.instance_id,
                category: o.category,
                masks: BTreeMap::new(),
            });
            e.masks.insert(t, o.mask.clone());
        }
    }
    by_id.into_values().collect()
}
