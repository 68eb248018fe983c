//! Non-maximum suppression over binary masks: soft (matrix) decay, plain
//! greedy suppression, and the two-stage scheme that resolves duplicate track
//! proposals before statics are considered.

use super::{NmsMode, TrackerConfig};
use crate::data::BitMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalOrigin {
    /// Index into the live-track list fed to the predictor this frame.
    Track { index: usize },
    /// Static query row that produced the proposal.
    Static { row: usize },
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub origin: ProposalOrigin,
    pub category: usize,
    pub score: f64,
    pub mask: BitMask,
}

/// Sorted evaluation order: score descending, input order breaking ties.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Soft NMS: every mask keeps a decayed score
/// `score_j * min_i exp(-(iou_ij^2 - iou_max_i^2) / sigma)` over higher-scored
/// same-category masks `i`, where `iou_max_i` is `i`'s largest IoU with
/// anything scored above it. Returns decayed scores in input order; never
/// increases a score.
pub fn matrix_nms(masks: &[BitMask], scores: &[f64], categories: &[usize], sigma: f64) -> Vec<f64> {
    let n = masks.len();
    assert_eq!(scores.len(), n);
    assert_eq!(categories.len(), n);
    let order = score_order(scores);
    // iou[a][b] for positions a < b in sorted order (upper triangle).
    let mut iou = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in (a + 1)..n {
            if categories[order[a]] == categories[order[b]] {
                iou[a][b] = masks[order[a]].iou(&masks[order[b]]);
            }
        }
    }
    let mut out = scores.to_vec();
    for b in 1..n {
        let mut decay: f64 = 1.0;
        for a in 0..b {
            if categories[order[a]] != categories[order[b]] {
                continue;
            }
            // Compensation: how suppressed mask `a` itself already is.
            let mut iou_max: f64 = 0.0;
            for c in 0..a {
                if categories[order[c]] == categories[order[a]] {
                    iou_max = iou_max.max(iou[c][a]);
                }
            }
            let d = (-(iou[a][b].powi(2) - iou_max.powi(2)) / sigma).exp();
            decay = decay.min(d);
        }
        out[order[b]] = scores[order[b]] * decay.min(1.0);
    }
    out
}

/// Hard greedy NMS: walk masks by descending score, keep a mask unless its IoU
/// with an already-kept mask reaches the threshold. Returns keep flags in
/// input order. Class-agnostic by construction.
pub fn plain_nms(masks: &[BitMask], scores: &[f64], iou_threshold: f64) -> Vec<bool> {
    let n = masks.len();
    assert_eq!(scores.len(), n);
    let order = score_order(scores);
    let mut keep = vec![false; n];
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| masks[k].iou(&masks[i]) < iou_threshold) {
            keep[i] = true;
            kept.push(i);
        }
    }
    keep
}

/// One NMS pass over an ordered proposal list, honoring the configured mode.
/// Input order is the tie-break order (earlier wins at equal score).
fn nms_pass(proposals: Vec<Proposal>, config: &TrackerConfig) -> Vec<Proposal> {
    if proposals.is_empty() {
        return proposals;
    }
    let masks: Vec<BitMask> = proposals.iter().map(|p| p.mask.clone()).collect();
    let scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    match config.nms_mode {
        NmsMode::Matrix => {
            let categories: Vec<usize> = if config.category_agnostic {
                vec![0; proposals.len()]
            } else {
                proposals.iter().map(|p| p.category).collect()
            };
            let decayed = matrix_nms(&masks, &scores, &categories, config.matrix_nms_sigma);
            proposals
                .into_iter()
                .zip(decayed)
                .filter(|(_, s)| *s >= config.spawn_score_threshold)
                .map(|(mut p, s)| {
                    p.score = s;
                    p
                })
                .collect()
        }
        NmsMode::Plain => {
            let keep = plain_nms(&masks, &scores, config.plain_nms_iou_threshold);
            proposals.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
        }
    }
}

/// Stage 1 suppresses duplicates among track proposals only; stage 2 runs over
/// the stage-1 survivors plus all static proposals jointly, with track
/// proposals ahead of statics so they win equal-score ties. Track proposals
/// suppressed here simply do not emit this frame (the track goes inactive).
pub fn nms_two_stage(
    track_proposals: Vec<Proposal>,
    static_proposals: Vec<Proposal>,
    config: &TrackerConfig,
) -> Vec<Proposal> {
    let mut joint = nms_pass(track_proposals, config);
    joint.extend(static_proposals);
    nms_pass(joint, config)
}
