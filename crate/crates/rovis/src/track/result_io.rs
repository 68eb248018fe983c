//! Per-video tracking result files: JSON with RLE-encoded masks, one file per
//! video. Round-trips exactly: write(read(x)) == x.

use super::TrackResult;
use crate::data::BitMask;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const RESULT_FORMAT_VERSION: u32 = 1;

/// Category of a track in a result file: an index, or the placeholder class
/// used by category-agnostic tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CategoryRepr", into = "CategoryRepr")]
pub enum TrackCategory {
    Category(usize),
    Object,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CategoryRepr {
    Index(usize),
    Name(String),
}

impl From<TrackCategory> for CategoryRepr {
    fn from(c: TrackCategory) -> CategoryRepr {
        match c {
            TrackCategory::Category(i) => CategoryRepr::Index(i),
            TrackCategory::Object => CategoryRepr::Name("object".into()),
        }
    }
}

impl TryFrom<CategoryRepr> for TrackCategory {
    type Error = String;

    fn try_from(r: CategoryRepr) -> std::result::Result<TrackCategory, String> {
        match r {
            CategoryRepr::Index(i) => Ok(TrackCategory::Category(i)),
            CategoryRepr::Name(s) if s == "object" => Ok(TrackCategory::Object),
            CategoryRepr::Name(s) => Err(format!("unknown track category {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMaskRecord {
    pub frame: usize,
    pub score: f64,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackResultRecord {
    pub track_id: u64,
    pub category: TrackCategory,
    /// Mean of per-frame scores over present frames.
    pub score: f64,
    pub frames: Vec<FrameMaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoResultFile {
    pub format_version: u32,
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub tracks: Vec<TrackResultRecord>,
}

impl VideoResultFile {
    pub fn from_tracks(
        video_id: &str,
        height: usize,
        width: usize,
        num_frames: usize,
        tracks: &[TrackResult],
    ) -> VideoResultFile {
        let records = tracks
            .iter()
            .map(|t| TrackResultRecord {
                track_id: t.track_id,
                category: match t.category {
                    Some(c) => TrackCategory::Category(c),
                    None => TrackCategory::Object,
                },
                score: t.score(),
                frames: t
                    .masks
                    .iter()
                    .map(|(&frame, mask)| FrameMaskRecord {
                        frame,
                        score: t.frame_scores[&frame],
                        rle: mask.to_rle(),
                    })
                    .collect(),
            })
            .collect();
        VideoResultFile {
            format_version: RESULT_FORMAT_VERSION,
            video_id: video_id.to_string(),
            height,
            width,
            num_frames,
            tracks: records,
        }
    }

    pub fn to_tracks(&self) -> Result<Vec<TrackResult>> {
        let mut out = Vec::with_capacity(self.tracks.len());
        for rec in &self.tracks {
            let mut masks = BTreeMap::new();
            let mut scores = BTreeMap::new();
            let mut last: Option<usize> = None;
            for fm in &rec.frames {
                if fm.frame >= self.num_frames {
                    return Err(Error::Invalid(format!(
                        "track {} has an entry at frame {} but the video has {} frames",
                        rec.track_id, fm.frame, self.num_frames
                    )));
                }
                if last.is_some_and(|l| fm.frame <= l) {
                    return Err(Error::Invalid(format!(
                        "track {} frame indices are not strictly increasing",
                        rec.track_id
                    )));
                }
                last = Some(fm.frame);
                masks.insert(fm.frame, BitMask::from_rle(self.height, self.width, &fm.rle)?);
                scores.insert(fm.frame, fm.score);
            }
            out.push(TrackResult {
                track_id: rec.track_id,
                category: match rec.category {
                    TrackCategory::Category(c) => Some(c),
                    TrackCategory::Object => None,
                },
                masks,
                frame_scores: scores,
            });
        }
        Ok(out)
    }
}

pub fn write_video_results(path: &Path, file: &VideoResultFile) -> Result<()> {
    let json = serde_json::to_vec_pretty(file)
        .map_err(|e| Error::Invalid(format!("serializing results: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_video_results(path: &Path) -> Result<VideoResultFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: VideoResultFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    if file.format_version != RESULT_FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "{}: unsupported result format_version {}",
            path.display(),
            file.format_version
        )));
    }
    Ok(file)
}
