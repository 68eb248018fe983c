//! Video instance segmentation evaluation: 3D volumetric IoU between tracks,
//! greedy score-ordered matching per category, 101-point interpolated AP
//! averaged over IoU thresholds 0.50:0.05:0.95, and AR@k with a per-video
//! detection cap.

use crate::data::{BitMask, GtTrack, VideoSample};
use crate::error::{Error, Result};
use crate::track::TrackResult;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The 10 thresholds 0.50, 0.55, ..., 0.95.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Volume IoU of two tracks: masks summed over frames, with absent frames
/// counting as empty. Errors on mismatched resolutions, out-of-range frame
/// indices, or two entirely empty tracks (the quantity is undefined there).
pub fn volumetric_iou(
    a: &BTreeMap<usize, BitMask>,
    b: &BTreeMap<usize, BitMask>,
    video_length: usize,
) -> Result<f64> {
    let mut dims: Option<(usize, usize)> = None;
    for (t, m) in a.iter().chain(b.iter()) {
        if *t >= video_length {
            return Err(Error::Invalid(format!(
                "track has a mask at frame {t} but the video has {video_length} frames"
            )));
        }
        let d = (m.height(), m.width());
        if *dims.get_or_insert(d) != d {
            return Err(Error::Invalid(format!(
                "mask resolution mismatch: {:?} vs {:?}",
                dims.unwrap(),
                d
            )));
        }
    }
    let (inter, union) = volumetric_overlap(a, b);
    if union == 0 {
        return Err(Error::Invalid("volumetric IoU of two empty tracks is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// (intersection, union) pixel volumes; no validation.
fn volumetric_overlap(a: &BTreeMap<usize, BitMask>, b: &BTreeMap<usize, BitMask>) -> (usize, usize) {
    let mut inter = 0usize;
    let mut union = 0usize;
    let frames: BTreeSet<usize> = a.keys().chain(b.keys()).copied().collect();
    for t in frames {
        match (a.get(&t), b.get(&t)) {
            (Some(ma), Some(mb)) => {
                inter += ma.intersection_area(mb);
                union += ma.union_area(mb);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => unreachable!(),
        }
    }
    (inter, union)
}

#[derive(Debug, Clone)]
pub struct VideoPredictions {
    pub video_id: String,
    pub tracks: Vec<TrackResult>,
}

#[derive(Debug, Clone)]
pub struct VideoGroundTruth {
    pub video_id: String,
    pub num_frames: usize,
    pub tracks: Vec<GtTrack>,
}

impl VideoGroundTruth {
    pub fn from_sample(sample: &VideoSample) -> VideoGroundTruth {
        VideoGroundTruth {
            video_id: sample.id.clone(),
            num_frames: sample.frames.len(),
            tracks: crate::data::gt_tracks(sample),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryReport {
    pub category: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Mean over categories, then thresholds.
    pub ap: f64,
    /// Mean over categories at threshold 0.50 (None if 0.50 is not evaluated).
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar_at_1: f64,
    pub ar_at_10: f64,
    /// Only categories that appear in the ground truth.
    pub per_category: Vec<CategoryReport>,
}

/// One video's worth of matching state, with volumetric IoUs cached across
/// thresholds (IoU computation dominates; it never depends on the threshold).
struct VideoMatch {
    /// Predictions: (score, track_id, category).
    preds: Vec<(f64, u64, usize)>,
    /// Ground truth categories, by track.
    gt_cats: Vec<usize>,
    /// iou[pred][gt], only filled where categories match.
    iou: Vec<Vec<f64>>,
}

/// Prediction order within a video: score descending, track id ascending.
fn pred_order(preds: &[(f64, u64, usize)], subset: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = subset.collect();
    order.sort_by(|&a, &b| {
        preds[b].0.partial_cmp(&preds[a].0).unwrap().then(preds[a].1.cmp(&preds[b].1))
    });
    order
}

impl VideoMatch {
    /// Greedy matching at one threshold for one category; returns (score,
    /// track_id, is_tp) per prediction of that category, restricted to
    /// `allowed` prediction indices, and the matched GT count.
    fn match_category(
        &self,
        category: usize,
        threshold: f64,
        allowed: &[bool],
    ) -> (Vec<(f64, u64, bool)>, usize) {
        let order = pred_order(
            &self.preds,
            (0..self.preds.len()).filter(|&i| allowed[i] && self.preds[i].2 == category),
        );
        let mut gt_used = vec![false; self.gt_cats.len()];
        let mut out = Vec::with_capacity(order.len());
        let mut matched = 0usize;
        for pi in order {
            let mut best: Option<(f64, usize)> = None;
            for gi in 0..self.gt_cats.len() {
                if self.gt_cats[gi] != category || gt_used[gi] {
                    continue;
                }
                let iou = self.iou[pi][gi];
                if iou >= threshold && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            let tp = if let Some((_, gi)) = best {
                gt_used[gi] = true;
                matched += 1;
                true
            } else {
                false
            };
            out.push((self.preds[pi].0, self.preds[pi].1, tp));
        }
        (out, matched)
    }

    /// Keep flags for the top-k predictions by score, across categories.
    fn top_k(&self, k: usize) -> Vec<bool> {
        let order = pred_order(&self.preds, 0..self.preds.len());
        let mut allowed = vec![false; self.preds.len()];
        for &i in order.iter().take(k) {
            allowed[i] = true;
        }
        allowed
    }
}

/// 101-point interpolated average precision over a pooled detection list.
/// `dets`: (score, video index, track id, is_tp); ties are broken by video
/// then track id so evaluation is order-independent.
fn ap_101(mut dets: Vec<(f64, usize, u64, bool)>, total_gt: usize) -> f64 {
    assert!(total_gt > 0);
    if dets.is_empty() {
        return 0.0;
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let n = dets.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, d) in dets.iter().enumerate() {
        if d.3 {
            tp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope from the right: p_env[i] = max precision at >= recall[i].
    let mut env = precision.clone();
    for i in (0..n - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    let mut idx = 0usize;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        while idx < n && recall[idx] < r {
            idx += 1;
        }
        if idx < n {
            total += env[idx];
        }
    }
    total / 101.0
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one IoU threshold".into()));
    }
    for w in thresholds.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Invalid("thresholds must be strictly ascending".into()));
        }
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Invalid("thresholds must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Validated matching state shared by AP/AR computation and PR-curve export.
struct EvalState {
    names: Vec<String>,
    videos: Vec<VideoMatch>,
    gt_per_category: Vec<usize>,
    /// Categories with at least one ground-truth track, ascending.
    active: Vec<usize>,
}

fn build_state(
    predictions: &[VideoPredictions],
    ground_truth: &[VideoGroundTruth],
    category_names: &[String],
) -> Result<EvalState> {
    // Agnostic mode is all-or-nothing over the prediction set.
    let mut any_none = false;
    let mut any_some = false;
    for vp in predictions {
        for t in &vp.tracks {
            match t.category {
                None => any_none = true,
                Some(c) => {
                    if c >= category_names.len() {
                        return Err(Error::Invalid(format!(
                            "prediction category {c} out of range ({} categories)",
                            category_names.len()
                        )));
                    }
                    any_some = true;
                }
            }
        }
    }
    if any_none && any_some {
        return Err(Error::Invalid(
            "mixed agnostic and categorized predictions in one evaluation".into(),
        ));
    }
    let agnostic = any_none;
    let names: Vec<String> = if agnostic {
        vec!["object".to_string()]
    } else {
        category_names.to_vec()
    };
    let num_categories = names.len();

    let gt_by_id: BTreeMap<&str, &VideoGroundTruth> =
        ground_truth.iter().map(|g| (g.video_id.as_str(), g)).collect();
    if gt_by_id.len() != ground_truth.len() {
        return Err(Error::Invalid("duplicate video ids in ground truth".into()));
    }

    // Build per-video matching state with cached IoUs.
    let mut videos = Vec::new();
    let mut seen_pred_videos = BTreeSet::new();
    for vp in predictions {
        if !seen_pred_videos.insert(vp.video_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate prediction video id {:?}", vp.video_id)));
        }
        let gt = gt_by_id.get(vp.video_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!("predictions for unknown video {:?}", vp.video_id))
        })?;
        let mut ids = BTreeSet::new();
        for t in &vp.tracks {
            if !ids.insert(t.track_id) {
                return Err(Error::Invalid(format!(
                    "duplicate track id {} in predictions for video {:?}",
                    t.track_id, vp.video_id
                )));
            }
        }
        let preds: Vec<(f64, u64, usize)> = vp
            .tracks
            .iter()
            .map(|t| (t.score(), t.track_id, if agnostic { 0 } else { t.category.unwrap() }))
            .collect();
        let gt_cats: Vec<usize> =
            gt.tracks.iter().map(|g| if agnostic { 0 } else { g.category }).collect();
        let mut iou = vec![vec![0.0; gt_cats.len()]; preds.len()];
        for (pi, pt) in vp.tracks.iter().enumerate() {
            for (gi, gt_track) in gt.tracks.iter().enumerate() {
                if preds[pi].2 == gt_cats[gi] {
                    iou[pi][gi] = volumetric_iou(&pt.masks, &gt_track.masks, gt.num_frames)?;
                }
            }
        }
        videos.push(VideoMatch { preds, gt_cats, iou });
    }
    // Ground-truth-only videos still count toward recall denominators.
    for g in ground_truth {
        if !seen_pred_videos.contains(g.video_id.as_str()) {
            videos.push(VideoMatch {
                preds: Vec::new(),
                gt_cats: g.tracks.iter().map(|t| if agnostic { 0 } else { t.category }).collect(),
                iou: Vec::new(),
            });
        }
    }

    let mut gt_per_category = vec![0usize; num_categories];
    for v in &videos {
        for &c in &v.gt_cats {
            if c >= num_categories {
                return Err(Error::Invalid(format!(
                    "ground-truth category {c} out of range ({num_categories} categories)"
                )));
            }
            gt_per_category[c] += 1;
        }
    }
    let active: Vec<usize> =
        (0..num_categories).filter(|&c| gt_per_category[c] > 0).collect();
    if active.is_empty() {
        return Err(Error::Invalid("no ground-truth tracks to evaluate against".into()));
    }
    Ok(EvalState { names, videos, gt_per_category, active })
}

/// All detections for one category at one threshold, pooled over videos:
/// (score, video index, track id, is_tp), unsorted.
fn pooled_detections(videos: &[VideoMatch], cat: usize, thr: f64) -> Vec<(f64, usize, u64, bool)> {
    let mut pooled = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let allowed = vec![true; v.preds.len()];
        let (dets, _) = v.match_category(cat, thr, &allowed);
        pooled.extend(dets.into_iter().map(|(s, id, tp)| (s, vi, id, tp)));
    }
    pooled
}

/// Full evaluation. Prediction categories must either all be concrete indices
/// into `category_names`, or all be None (category-agnostic), in which case
/// ground truth is collapsed onto a single "object" category.
pub fn evaluate(
    predictions: &[VideoPredictions],
    ground_truth: &[VideoGroundTruth],
    thresholds: &[f64],
    category_names: &[String],
) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    let EvalState { names, videos, gt_per_category, active } =
        build_state(predictions, ground_truth, category_names)?;

    // AP over all predictions.
    let mut ap_per_cat_thr = vec![vec![0.0; thresholds.len()]; active.len()];
    for (ci, &cat) in active.iter().enumerate() {
        for (ti, &thr) in thresholds.iter().enumerate() {
            let pooled = pooled_detections(&videos, cat, thr);
            ap_per_cat_thr[ci][ti] = ap_101(pooled, gt_per_category[cat]);
        }
    }

    // AR@k with a per-video, category-agnostic cap on prediction count.
    let recall_at = |k: usize| -> f64 {
        let caps: Vec<Vec<bool>> = videos.iter().map(|v| v.top_k(k)).collect();
        let mut total = 0.0;
        for &cat in &active {
            for &thr in thresholds {
                let mut matched = 0usize;
                for (v, allowed) in videos.iter().zip(&caps) {
                    matched += v.match_category(cat, thr, allowed).1;
                }
                total += matched as f64 / gt_per_category[cat] as f64;
            }
        }
        total / (active.len() * thresholds.len()) as f64
    };
    let ar_at_1 = recall_at(1);
    let ar_at_10 = recall_at(10);

    let per_category: Vec<CategoryReport> = active
        .iter()
        .enumerate()
        .map(|(ci, &cat)| CategoryReport {
            category: names[cat].clone(),
            ap: ap_per_cat_thr[ci].iter().sum::<f64>() / thresholds.len() as f64,
        })
        .collect();
    let mean_at = |ti: usize| -> f64 {
        ap_per_cat_thr.iter().map(|row| row[ti]).sum::<f64>() / active.len() as f64
    };
    let ap = (0..thresholds.len()).map(mean_at).sum::<f64>() / thresholds.len() as f64;
    let find = |target: f64| thresholds.iter().position(|t| (t - target).abs() < 1e-9);
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        ap,
        ap50: find(0.50).map(mean_at),
        ap75: find(0.75).map(mean_at),
        ar_at_1,
        ar_at_10,
        per_category,
    })
}

/// Raw cumulative precision-recall staircase for one category at one IoU
/// threshold, pooled over videos in the same order AP uses.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub category: String,
    pub threshold: f64,
    /// (recall, precision) after each successive detection, score-descending.
    pub points: Vec<(f64, f64)>,
}

/// PR curves for every ground-truth category at every threshold, for display.
pub fn pr_curves(
    predictions: &[VideoPredictions],
    ground_truth: &[VideoGroundTruth],
    thresholds: &[f64],
    category_names: &[String],
) -> Result<Vec<PrCurve>> {
    validate_thresholds(thresholds)?;
    let state = build_state(predictions, ground_truth, category_names)?;
    let mut curves = Vec::new();
    for &cat in &state.active {
        for &thr in thresholds {
            let mut dets = pooled_detections(&state.videos, cat, thr);
            dets.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let mut tp = 0usize;
            let points = dets
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    if d.3 {
                        tp += 1;
                    }
                    (tp as f64 / state.gt_per_category[cat] as f64, tp as f64 / (i + 1) as f64)
                })
                .collect();
            curves.push(PrCurve { category: state.names[cat].clone(), threshold: thr, points });
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask(width: usize, x0: usize, x1: usize) -> BitMask {
        BitMask::from_fn(1, width, |_, x| (x0..x1).contains(&x))
    }

    fn track_from(id: u64, category: usize, frames: &[(usize, BitMask)], score: f64) -> TrackResult {
        TrackResult {
            track_id: id,
            category: Some(category),
            masks: frames.iter().cloned().collect(),
            frame_scores: frames.iter().map(|(t, _)| (*t, score)).collect(),
        }
    }

    fn gt_from(id: u64, category: usize, frames: &[(usize, BitMask)]) -> GtTrack {
        GtTrack { instance_id: id, category, masks: frames.iter().cloned().collect() }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("cat{i}")).collect()
    }

    #[test]
    fn volumetric_iou_hand_counts() {
        let m4 = mask(10, 0, 4);
        // A on frames 0 and 1, B only on frame 1: 4 / 8.
        let a: BTreeMap<usize, BitMask> = [(0, m4.clone()), (1, m4.clone())].into_iter().collect();
        let b: BTreeMap<usize, BitMask> = [(1, m4.clone())].into_iter().collect();
        assert_eq!(volumetric_iou(&a, &b, 2).unwrap(), 0.5);
        // Identical tracks.
        assert_eq!(volumetric_iou(&a, &a, 2).unwrap(), 1.0);
        // Temporally disjoint.
        let c: BTreeMap<usize, BitMask> = [(0, m4.clone())].into_iter().collect();
        let d: BTreeMap<usize, BitMask> = [(1, m4.clone())].into_iter().collect();
        assert_eq!(volumetric_iou(&c, &d, 2).unwrap(), 0.0);
        // Symmetry on partial overlap.
        let e: BTreeMap<usize, BitMask> = [(0, mask(10, 2, 8))].into_iter().collect();
        let f: BTreeMap<usize, BitMask> = [(0, mask(10, 4, 10))].into_iter().collect();
        let ef = volumetric_iou(&e, &f, 1).unwrap();
        assert_eq!(ef, volumetric_iou(&f, &e, 1).unwrap());
        assert_eq!(ef, 4.0 / 8.0);
    }

    #[test]
    fn volumetric_iou_rejects_bad_inputs() {
        let a: BTreeMap<usize, BitMask> = [(0, mask(10, 0, 4))].into_iter().collect();
        let b: BTreeMap<usize, BitMask> = [(0, BitMask::new(2, 10))].into_iter().collect();
        assert!(volumetric_iou(&a, &b, 1).is_err(), "resolution mismatch");
        assert!(volumetric_iou(&a, &a, 0).is_err(), "frame beyond video length");
        let empty: BTreeMap<usize, BitMask> = BTreeMap::new();
        assert!(volumetric_iou(&empty, &empty, 5).is_err(), "two empty tracks");
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = mask(16, 2, 9);
        let frames: Vec<(usize, BitMask)> = (0..4).map(|t| (t, m.clone())).collect();
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 4,
            tracks: vec![gt_from(5, 1, &frames)],
        }];
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![track_from(0, 1, &frames, 0.9)],
        }];
        let r = evaluate(&preds, &gt, &standard_thresholds(), &names(3)).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap75, Some(1.0));
        assert_eq!(r.ar_at_1, 1.0);
        assert_eq!(r.ar_at_10, 1.0);
        assert_eq!(r.per_category, vec![CategoryReport { category: "cat1".into(), ap: 1.0 }]);
    }

    #[test]
    fn zero_predictions_score_zero() {
        let m = mask(16, 2, 9);
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 1,
            tracks: vec![gt_from(5, 0, &[(0, m)])],
        }];
        let r = evaluate(&[], &gt, &standard_thresholds(), &names(3)).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.ar_at_10, 0.0);
    }

    /// The spec's hand-evaluated PR curve: one GT track; a false positive at
    /// score 0.9 and a true positive (IoU 0.9) at score 0.8 give precision
    /// points (0, 0.5), whose 101-point interpolation is exactly 0.5.
    #[test]
    fn hand_evaluated_pr_curve_gives_half() {
        let m = mask(20, 0, 10);
        let near = mask(20, 0, 9); // IoU 0.9 with m
        assert_eq!(near.iou(&m), 0.9);
        let far = mask(20, 12, 20);
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 1,
            tracks: vec![gt_from(1, 0, &[(0, m)])],
        }];
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![
                track_from(0, 0, &[(0, far)], 0.9),
                track_from(1, 0, &[(0, near)], 0.8),
            ],
        }];
        let r = evaluate(&preds, &gt, &[0.5], &names(1)).unwrap();
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.ap50, Some(0.5));
        assert_eq!(r.ap75, None);
        // At a threshold above the true positive's IoU, everything is a false
        // positive.
        let r = evaluate(&preds, &gt, &[0.95], &names(1)).unwrap();
        assert_eq!(r.ap, 0.0);
    }

    /// Independent scalar reference for a slightly richer scene: 2 GT tracks,
    /// 3 predictions. Worked out by hand: detections sorted by score are
    /// TP(0.9), FP(0.85), TP(0.8) -> precision/recall (1, 0.5), (0.5, 0.5),
    /// (2/3, 1.0). Envelope: [1, 2/3, 2/3]; interpolated AP =
    /// (51*1 + 50*(2/3)) / 101.
    #[test]
    fn hand_evaluated_pr_curve_richer_case() {
        let a = mask(30, 0, 10);
        let b = mask(30, 15, 25);
        let far = mask(30, 26, 30);
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 1,
            tracks: vec![gt_from(1, 0, &[(0, a.clone())]), gt_from(2, 0, &[(0, b.clone())])],
        }];
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![
                track_from(0, 0, &[(0, a.clone())], 0.9),
                track_from(1, 0, &[(0, far)], 0.85),
                track_from(2, 0, &[(0, b.clone())], 0.8),
            ],
        }];
        let r = evaluate(&preds, &gt, &[0.5], &names(1)).unwrap();
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((r.ap - expect).abs() < 1e-12, "{} vs {expect}", r.ap);
        // AR@1: the cap keeps only the score-0.9 prediction, matching 1 of 2.
        assert_eq!(r.ar_at_1, 0.5);
        assert_eq!(r.ar_at_10, 1.0);
    }

    #[test]
    fn shuffled_predictions_evaluate_identically() {
        let mut rng = Rng::new(33);
        let mut gt_videos = Vec::new();
        let mut pred_videos = Vec::new();
        for v in 0..4 {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for i in 0..3 {
                let x0 = rng.below(20);
                let gt_mask = mask(32, x0, x0 + 8 + rng.below(4));
                let frames: Vec<(usize, BitMask)> =
                    (0..3).map(|t| (t, gt_mask.clone())).collect();
                let cat = rng.below(2);
                gts.push(gt_from(i as u64, cat, &frames));
                let px0 = x0 + rng.below(3);
                let p_mask = mask(32, px0, px0 + 8);
                let p_frames: Vec<(usize, BitMask)> =
                    (0..3).map(|t| (t, p_mask.clone())).collect();
                preds.push(track_from(i as u64, cat, &p_frames, 0.5 + 0.4 * rng.next_f64()));
            }
            gt_videos.push(VideoGroundTruth {
                video_id: format!("v{v}"),
                num_frames: 3,
                tracks: gts,
            });
            pred_videos.push(VideoPredictions { video_id: format!("v{v}"), tracks: preds });
        }
        let base = evaluate(&pred_videos, &gt_videos, &standard_thresholds(), &names(2)).unwrap();
        for seed in 0..3 {
            let mut shuffled = pred_videos.clone();
            let mut r = Rng::new(seed);
            r.shuffle(&mut shuffled);
            for vp in shuffled.iter_mut() {
                r.shuffle(&mut vp.tracks);
            }
            let again = evaluate(&shuffled, &gt_videos, &standard_thresholds(), &names(2)).unwrap();
            assert_eq!(base, again, "seed {seed}");
        }
        assert!(base.ap <= base.ap50.unwrap() + 1e-12, "AP must not exceed AP50");
    }

    #[test]
    fn lower_scored_duplicate_never_helps() {
        let m = mask(24, 0, 12);
        let frames: Vec<(usize, BitMask)> = (0..2).map(|t| (t, m.clone())).collect();
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 2,
            tracks: vec![gt_from(1, 0, &frames)],
        }];
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![track_from(0, 0, &frames, 0.9)],
        }];
        let with_dup = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![track_from(0, 0, &frames, 0.9), track_from(1, 0, &frames, 0.4)],
        }];
        let base = evaluate(&preds, &gt, &standard_thresholds(), &names(1)).unwrap();
        let dup = evaluate(&with_dup, &gt, &standard_thresholds(), &names(1)).unwrap();
        assert!(dup.ap <= base.ap);
        assert_eq!(dup.ar_at_10, base.ar_at_10, "recall unchanged by a lower-scored duplicate");
    }

    #[test]
    fn categories_partition_matching() {
        let m = mask(24, 0, 12);
        let frames: Vec<(usize, BitMask)> = vec![(0, m.clone())];
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 1,
            tracks: vec![gt_from(1, 2, &frames)],
        }];
        // Perfect mask, wrong category: never a true positive.
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![track_from(0, 1, &frames, 0.9)],
        }];
        let r = evaluate(&preds, &gt, &standard_thresholds(), &names(3)).unwrap();
        assert_eq!(r.ap, 0.0);
        // Same prediction in agnostic mode matches.
        let preds = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![TrackResult { category: None, ..track_from(0, 1, &frames, 0.9) }],
        }];
        let r = evaluate(&preds, &gt, &standard_thresholds(), &names(3)).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.per_category[0].category, "object");
    }

    #[test]
    fn evaluate_rejects_malformed_inputs() {
        let m = mask(24, 0, 12);
        let frames: Vec<(usize, BitMask)> = vec![(0, m.clone())];
        let gt = vec![VideoGroundTruth {
            video_id: "v0".into(),
            num_frames: 1,
            tracks: vec![gt_from(1, 0, &frames)],
        }];
        let dup_ids = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![track_from(0, 0, &frames, 0.9), track_from(0, 0, &frames, 0.8)],
        }];
        assert!(evaluate(&dup_ids, &gt, &standard_thresholds(), &names(1)).is_err());

        let unknown_video = vec![VideoPredictions {
            video_id: "nope".into(),
            tracks: vec![track_from(0, 0, &frames, 0.9)],
        }];
        assert!(evaluate(&unknown_video, &gt, &standard_thresholds(), &names(1)).is_err());

        let mixed = vec![VideoPredictions {
            video_id: "v0".into(),
            tracks: vec![
                track_from(0, 0, &frames, 0.9),
                TrackResult { category: None, ..track_from(1, 0, &frames, 0.8) },
            ],
        }];
        assert!(evaluate(&mixed, &gt, &standard_thresholds(), &names(1)).is_err());

        assert!(evaluate(&[], &[], &standard_thresholds(), &names(1)).is_err(), "no ground truth");
        assert!(evaluate(&[], &gt, &[], &names(1)).is_err(), "no thresholds");
        assert!(evaluate(&[], &gt, &[0.9, 0.5], &names(1)).is_err(), "descending thresholds");
    }

    #[test]
    fn standard_threshold_list_is_exact() {
        let t = standard_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.50);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }
}
