//! Online tracking: frame-by-frame prediction with a combined static + track
//! query set, background-triggered inactivity with a removal tolerance, and
//! two-stage NMS (track proposals first, then tracks and statics jointly).

mod nms;
mod result_io;
mod scripted;

pub use nms::{matrix_nms, nms_two_stage, plain_nms, Proposal, ProposalOrigin};
pub use result_io::{read_video_results, write_video_results, FrameMaskRecord, TrackCategory, TrackResultRecord, VideoResultFile};
pub use scripted::{ScriptedObject, ScriptedPredictor};

use crate::data::{BitMask, Frame};
use crate::error::{Error, Result};
use crate::model::{Model, QueryState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    Matrix,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Consecutive background frames a track survives before removal.
    pub delta_t: usize,
    pub spawn_score_threshold: f64,
    pub nms_mode: NmsMode,
    pub matrix_nms_sigma: f64,
    pub plain_nms_iou_threshold: f64,
    pub category_agnostic: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            delta_t: 9,
            spawn_score_threshold: 0.5,
            nms_mode: NmsMode::Matrix,
            matrix_nms_sigma: 2.0,
            plain_nms_iou_threshold: 0.6,
            category_agnostic: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.spawn_score_threshold) {
            return Err(Error::Config(format!(
                "spawn_score_threshold {} outside [0, 1]",
                self.spawn_score_threshold
            )));
        }
        if !in_unit(self.plain_nms_iou_threshold) {
            return Err(Error::Config(format!(
                "plain_nms_iou_threshold {} outside [0, 1]",
                self.plain_nms_iou_threshold
            )));
        }
        if !(self.matrix_nms_sigma > 0.0) {
            return Err(Error::Config(format!(
                "matrix_nms_sigma {} must be positive",
                self.matrix_nms_sigma
            )));
        }
        Ok(())
    }
}

/// Value-level output of one frame pass: per-query class probabilities (the
/// background class last), sigmoid mask probabilities, and output embeddings.
/// Rows are ordered `[static queries..., track queries...]`.
pub struct PredictedFrame {
    pub height: usize,
    pub width: usize,
    pub num_static: usize,
    pub class_probs: Vec<Vec<f64>>,
    pub mask_probs: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
    pub query_pos: Vec<Vec<f64>>,
}

/// Anything that can drive the online tracker: the trained segmenter, or a
/// scripted stand-in for state-machine tests.
pub trait FramePredictor {
    fn num_foreground_classes(&self) -> usize;
    /// `tracks[i]` must come back as row `num_static + i`.
    fn predict(&self, frame_index: usize, frame: &Frame, tracks: &[QueryState]) -> PredictedFrame;
}

impl FramePredictor for Model {
    fn num_foreground_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict(&self, _frame_index: usize, frame: &Frame, tracks: &[QueryState]) -> PredictedFrame {
        let out = self.predict_frame(frame, tracks);
        let final_layer = out.final_layer();
        let q = out.num_queries();
        let cls = final_layer.class_dist.value();
        let masks = final_layer.mask_logits.value();
        let emb = out.embeddings.value();
        let c1 = self.config().num_classes + 1;
        let hw = out.frame_height * out.frame_width;
        let d = self.config().embed_dim;
        PredictedFrame {
            height: out.frame_height,
            width: out.frame_width,
            num_static: out.num_static,
            class_probs: (0..q).map(|i| cls[i * c1..(i + 1) * c1].to_vec()).collect(),
            mask_probs: (0..q)
                .map(|i| masks[i * hw..(i + 1) * hw].iter().map(|&l| sigmoid(l)).collect())
                .collect(),
            embeddings: (0..q).map(|i| emb[i * d..(i + 1) * d].to_vec()).collect(),
            query_pos: out.query_pos_values,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One tracked instance over a video. Frames with no entry are frames where
/// the track was inactive (or not yet spawned / already removed).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub track_id: u64,
    /// None in category-agnostic mode.
    pub category: Option<usize>,
    pub masks: BTreeMap<usize, BitMask>,
    pub frame_scores: BTreeMap<usize, f64>,
}

impl TrackResult {
    /// Track confidence: mean of per-frame scores over present frames.
    pub fn score(&self) -> f64 {
        if self.frame_scores.is_empty() {
            return 0.0;
        }
        self.frame_scores.values().sum::<f64>() / self.frame_scores.len() as f64
    }
}

struct LiveTrack {
    state: QueryState,
    result: TrackResult,
}

fn binarize(mask_probs: &[f64], height: usize, width: usize) -> BitMask {
    let mut m = BitMask::new(height, width);
    for (i, &p) in mask_probs.iter().enumerate() {
        if p >= 0.5 {
            m.set(i / width, i % width, true);
        }
    }
    m
}

/// Foreground argmax and its probability; None when background wins.
fn foreground_argmax(probs: &[f64]) -> Option<(usize, f64)> {
    let bg = probs.len() - 1;
    let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
    for (i, &p) in probs.iter().enumerate() {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    if best == bg {
        None
    } else {
        Some((best, best_p))
    }
}

/// Runs the online tracker over a whole video. The output restricted to frames
/// `[0, t]` is bit-identical whether the video is truncated at `t` or processed
/// in full: each frame is committed before the next is read.
pub fn track_video<P: FramePredictor>(
    predictor: &P,
    frames: &[Frame],
    config: &TrackerConfig,
) -> Result<Vec<TrackResult>> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Invalid("track_video needs at least one frame".into()));
    }
    let mut live: Vec<LiveTrack> = Vec::new();
    let mut finished: Vec<TrackResult> = Vec::new();
    let mut next_id: u64 = 0;

    for (t, frame) in frames.iter().enumerate() {
        let states: Vec<QueryState> = live.iter().map(|l| l.state.clone()).collect();
        let pred = predictor.predict(t, frame, &states);
        assert_eq!(
            pred.class_probs.len(),
            pred.num_static + live.len(),
            "predictor returned wrong query count"
        );

        // Track embeddings update every frame, inactive or not.
        for (i, track) in live.iter_mut().enumerate() {
            track.state.embedding = pred.embeddings[pred.num_static + i].clone();
        }

        let mut track_proposals = Vec::new();
        for i in 0..live.len() {
            let row = pred.num_static + i;
            if let Some((cat, score)) = foreground_argmax(&pred.class_probs[row]) {
                let category = live[i].state.category.unwrap_or(cat);
                track_proposals.push(Proposal {
                    origin: ProposalOrigin::Track { index: i },
                    category,
                    score,
                    mask: binarize(&pred.mask_probs[row], pred.height, pred.width),
                });
            }
        }
        let mut static_proposals = Vec::new();
        for row in 0..pred.num_static {
            if let Some((cat, score)) = foreground_argmax(&pred.class_probs[row]) {
                if score >= config.spawn_score_threshold {
                    static_proposals.push(Proposal {
                        origin: ProposalOrigin::Static { row },
                        category: cat,
                        score,
                        mask: binarize(&pred.mask_probs[row], pred.height, pred.width),
                    });
                }
            }
        }

        let survivors = nms_two_stage(track_proposals, static_proposals, config);
        let mut active_this_frame = vec![false; live.len()];
        for p in survivors {
            match p.origin {
                ProposalOrigin::Track { index } => {
                    active_this_frame[index] = true;
                    let track = &mut live[index];
                    track.state.inactive_frames = 0;
                    track.state.last_score = p.score;
                    track.result.masks.insert(t, p.mask);
                    track.result.frame_scores.insert(t, p.score);
                }
                ProposalOrigin::Static { row } => {
                    let category = if config.category_agnostic { None } else { Some(p.category) };
                    let state = QueryState {
                        track_id: next_id,
                        embedding: pred.embeddings[row].clone(),
                        pos: pred.query_pos[row].clone(),
                        category,
                        last_score: p.score,
                        inactive_frames: 0,
                    };
                    let mut result = TrackResult {
                        track_id: next_id,
                        category,
                        masks: BTreeMap::new(),
                        frame_scores: BTreeMap::new(),
                    };
                    result.masks.insert(t, p.mask);
                    result.frame_scores.insert(t, p.score);
                    next_id += 1;
                    live.push(LiveTrack { state, result });
                    active_this_frame.push(true);
                }
            }
        }

        // Inactivity bookkeeping and removal, newest last so indices stay valid.
        let mut idx = 0;
        live.retain_mut(|track| {
            let was_active = active_this_frame[idx];
            idx += 1;
            if was_active {
                return true;
            }
            track.state.inactive_frames += 1;
            if track.state.inactive_frames > config.delta_t {
                finished.push(track.result.clone());
                false
            } else {
                true
            }
        });
    }

    finished.extend(live.into_iter().map(|l| l.result));
    finished.sort_by_key(|r| r.track_id);
    Ok(finished)
}

/// A single-frame detection used by the linking baseline.
#[derive(Debug, Clone)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub mask: BitMask,
}

/// Static-query detections for one frame: threshold then single-stage NMS,
/// with the track-query mechanism disabled.
pub fn static_detections<P: FramePredictor>(
    predictor: &P,
    frame_index: usize,
    frame: &Frame,
    config: &TrackerConfig,
) -> Vec<Detection> {
    let pred = predictor.predict(frame_index, frame, &[]);
    let mut proposals = Vec::new();
    for row in 0..pred.num_static {
        if let Some((cat, score)) = foreground_argmax(&pred.class_probs[row]) {
            if score >= config.spawn_score_threshold {
                proposals.push(Proposal {
                    origin: ProposalOrigin::Static { row },
                    category: cat,
                    score,
                    mask: binarize(&pred.mask_probs[row], pred.height, pred.width),
                });
            }
        }
    }
    nms_two_stage(Vec::new(), proposals, config)
        .into_iter()
        .map(|p| Detection { category: p.category, score: p.score, mask: p.mask })
        .collect()
}

/// Tracking-by-detection baseline: each detection links to the previous
/// frame's instance with the highest mask IoU; a best IoU of zero (or an empty
/// previous frame) spawns a fresh id. No memory beyond one frame.
pub fn iou_link_baseline(per_frame: &[Vec<Detection>], category_agnostic: bool) -> Vec<TrackResult> {
    let mut results: Vec<TrackResult> = Vec::new();
    let mut next_id: u64 = 0;
    // (track index into results, mask) emitted at the previous frame.
    let mut prev: Vec<(usize, BitMask)> = Vec::new();

    for (t, dets) in per_frame.iter().enumerate() {
        // Greedy globally best IoU pair first; ties broken by detection then
        // previous-track order for determinism.
        let mut pairs = Vec::new();
        for (di, det) in dets.iter().enumerate() {
            for (pi, (_, pmask)) in prev.iter().enumerate() {
                let iou = det.mask.iou(pmask);
                if iou > 0.0 {
                    pairs.push((iou, di, pi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_taken = vec![false; dets.len()];
        let mut prev_taken = vec![false; prev.len()];
        let mut assignment: Vec<Option<usize>> = vec![None; dets.len()];
        for (_, di, pi) in pairs {
            if !det_taken[di] && !prev_taken[pi] {
                det_taken[di] = true;
                prev_taken[pi] = true;
                assignment[di] = Some(prev[pi].0);
            }
        }

        let mut current: Vec<(usize, BitMask)> = Vec::new();
        for (di, det) in dets.iter().enumerate() {
            let track_index = match assignment[di] {
                Some(idx) => idx,
                None => {
                    let idx = results.len();
                    results.push(TrackResult {
                        track_id: next_id,
                        category: if category_agnostic { None } else { Some(det.category) },
                        masks: BTreeMap::new(),
                        frame_scores: BTreeMap::new(),
                    });
                    next_id += 1;
                    idx
                }
            };
            results[track_index].masks.insert(t, det.mask.clone());
            results[track_index].frame_scores.insert(t, det.score);
            current.push((track_index, det.mask.clone()));
        }
        prev = current;
    }
    results
}
