//! Two-frame training: sample a neighboring frame pair (x0, x1), detect on
//! x0 with static queries (Hungarian-matched), carry the matched object
//! queries into x1 as track queries with id-locked targets (disappeared
//! instances train toward background), and greedily assign genuinely new
//! x1 instances to static predictions. Track queries are dropped with
//! probability p_fn (their targets re-route to the static pool) and
//! background queries from x0 are injected as false positives with
//! probability p_fp. Deep supervision applies the same targets to every
//! decoder layer's heads. Optimization is AdamW with a backbone learning-rate
//! multiplier, selective weight decay, and linear warmup.

use crate::data::{Dataset, GtObject, Split, VideoSample};
use crate::error::{Error, Result};
use crate::loss::{
    combined_loss, cross_entropy, mask_loss, match_cost, sample_points, GtAtPoints, LossWeights,
};
use crate::matching::{greedy_assign, hungarian};
use crate::model::{save_checkpoint, ForwardOutput, Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::optim::{self, AdamWConfig, ParamGroup, StepOutcome};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// x1 is drawn uniformly from [x0 - pair_range, x0 + pair_range] \ {x0},
    /// clipped to the video (so x1 may precede x0).
    pub pair_range: usize,
    /// Per-track probability of being dropped from x1 (false negative).
    pub p_fn: f64,
    /// Per-query probability of injecting an x0 background query as a
    /// false-positive track query (trained toward background).
    pub p_fp: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_multiplier: f64,
    /// Parameters whose name contains any of these substrings get no decay.
    pub no_decay_param_names: Vec<String>,
    pub epochs: usize,
    /// Frame pairs per optimizer step (gradient accumulation).
    pub batch_size: usize,
    pub seed: u64,
    /// Linear learning-rate warmup over this many optimizer steps (0 = none).
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            pair_range: 5,
            p_fn: 0.2,
            p_fp: 0.2,
            lr: 1e-3,
            weight_decay: 0.05,
            backbone_lr_multiplier: 0.1,
            no_decay_param_names: vec!["query.static".into(), ".class.".into()],
            epochs: 3,
            batch_size: 1,
            seed: 0,
            warmup_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, p) in [("p_fn", self.p_fn), ("p_fp", self.p_fp)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.pair_range < 1 {
            return Err(Error::Config("pair_range must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.backbone_lr_multiplier > 0.0) {
            return Err(Error::Config("backbone_lr_multiplier must be positive".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One logged training step. `loss_total` always equals
/// `lambda_cls*((cls0+cls_track)+cls1) + lambda_mask*((mask0+mask_track)+mask1)`
/// under the configured weights, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStepRecord {
    pub iteration: usize,
    pub video_id: String,
    pub frame0: usize,
    pub frame1: usize,
    pub loss_cls0: f64,
    pub loss_cls_track: f64,
    pub loss_cls1: f64,
    pub loss_mask0: f64,
    pub loss_mask_track: f64,
    pub loss_mask1: f64,
    pub loss_total: f64,
    pub gt_x0: usize,
    pub gt_x1: usize,
    /// Track queries carried into x1 (surviving matches + injected FPs).
    pub tracks_carried: usize,
    pub fn_dropped: usize,
    pub fp_injected: usize,
    /// Carried tracks whose instance is absent from x1 (background target).
    pub tracks_disappeared: usize,
    /// x1 instances routed to the static pool (new + FN-rerouted).
    pub step3_instances: usize,
    /// Of those, how many a static query was actually assigned to.
    pub step3_matched: usize,
}

/// Uniform (x0, x1) with x1 in the clipped ±pair_range window around x0.
pub fn sample_pair(video: &VideoSample, pair_range: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    let n = video.frames.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "video {:?} has {n} frame(s); pair sampling needs at least 2",
            video.id
        )));
    }
    let x0 = rng.below(n);
    let lo = x0.saturating_sub(pair_range);
    let hi = (x0 + pair_range).min(n - 1);
    let j = lo + rng.below(hi - lo);
    let x1 = j + usize::from(j >= x0);
    Ok((x0, x1))
}

/// Outcome of track-query augmentation for one training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackAugmentation {
    /// Surviving (x0 query row, instance id), in match order.
    pub kept: Vec<(usize, u64)>,
    /// Instance ids whose track query was dropped; re-routed to step 3.
    pub dropped_ids: Vec<u64>,
    /// x0 rows of background queries injected as false-positive tracks.
    pub injected_rows: Vec<usize>,
}

/// Drops each matched track with probability p_fn, then injects each
/// background query with probability p_fp. Injection happens after dropping,
/// so a dropped track can never re-enter as a false positive.
pub fn augment_tracks(
    matched: &[(usize, u64)],
    background_rows: &[usize],
    p_fn: f64,
    p_fp: f64,
    rng: &mut Rng,
) -> TrackAugmentation {
    let mut kept = Vec::new();
    let mut dropped_ids = Vec::new();
    for &(row, id) in matched {
        if rng.next_f64() < p_fn {
            dropped_ids.push(id);
        } else {
            kept.push((row, id));
        }
    }
    let injected_rows =
        background_rows.iter().copied().filter(|_| rng.next_f64() < p_fp).collect();
    TrackAugmentation { kept, dropped_ids, injected_rows }
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let rows = t.shape()[0];
    let cols: usize = t.shape()[1..].iter().product();
    let v = t.value();
    (0..rows).map(|r| v[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn logits_at_points(mask_logits: &Tensor, points: &[usize]) -> Vec<Vec<f64>> {
    let q = mask_logits.shape()[0];
    let hw: usize = mask_logits.shape()[1..].iter().product();
    let v = mask_logits.value();
    (0..q).map(|r| points.iter().map(|&p| v[r * hw + p]).collect()).collect()
}

fn gt_at_points(objs: &[&GtObject], points: &[usize]) -> Vec<GtAtPoints> {
    objs.iter()
        .map(|g| GtAtPoints {
            category: g.category,
            bits: points.iter().map(|&p| f64::from(g.mask.get_flat(p))).collect(),
        })
        .collect()
}

/// Class + mask losses for one frame, summed over every head (deep
/// supervision: identical targets at each of the L+1 prediction sets).
/// `rows`/`classes` drive cross-entropy; `mask_rows`/`mask_bits` drive
/// focal+dice at the shared `points`.
fn supervise(
    out: &ForwardOutput,
    rows: &[usize],
    classes: &[usize],
    mask_rows: &[usize],
    mask_bits: &[f64],
    points: &[usize],
    w: &LossWeights,
) -> (Tensor, Tensor) {
    let k = points.len();
    let hw = out.frame_height * out.frame_width;
    let q = out.num_queries();
    let mut cls = Tensor::scalar(0.0);
    let mut mask = Tensor::scalar(0.0);
    for layer in &out.layers {
        if !rows.is_empty() {
            cls = cls.add(&cross_entropy(&layer.class_dist.gather(0, rows), classes));
        }
        if !mask_rows.is_empty() {
            let flat = layer.mask_logits.reshape(&[q, hw]);
            let idx: Vec<usize> = mask_rows
                .iter()
                .flat_map(|&r| points.iter().map(move |&p| r * hw + p))
                .collect();
            let logits = flat.take_flat(&idx).reshape(&[mask_rows.len(), k]);
            let bits = Tensor::from_vec(mask_bits.to_vec(), &[mask_rows.len(), k]);
            mask = mask.add(&mask_loss(&logits, &bits, w));
        }
    }
    (cls, mask)
}

fn check_frame(video: &VideoSample, t: usize, num_classes: usize) -> Result<()> {
    if t >= video.frames.len() {
        return Err(Error::Dataset(format!(
            "frame {t} out of range for video {:?} ({} frames)",
            video.id,
            video.frames.len()
        )));
    }
    if t >= video.annotations.len() {
        return Err(Error::Dataset(format!("video {:?} has no annotation for frame {t}", video.id)));
    }
    let f = &video.frames[t];
    for g in &video.annotations[t] {
        if g.category >= num_classes {
            return Err(Error::Dataset(format!(
                "instance {} in video {:?} has category {} but the model has {num_classes} classes",
                g.instance_id, video.id, g.category
            )));
        }
        if (g.mask.height(), g.mask.width()) != (f.height, f.width) {
            return Err(Error::Dataset(format!(
                "mask of instance {} in video {:?} is {}x{} but the frame is {}x{}",
                g.instance_id,
                video.id,
                g.mask.height(),
                g.mask.width(),
                f.height,
                f.width
            )));
        }
    }
    Ok(())
}

/// Builds the full two-frame loss graph and its step record (iteration 0;
/// the caller stamps it). No backward pass happens here.
pub fn pair_losses(
    model: &Model,
    video: &VideoSample,
    x0: usize,
    x1: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Tensor, TrainStepRecord)> {
    let num_classes = model.config().num_classes;
    let background = num_classes;
    check_frame(video, x0, num_classes)?;
    check_frame(video, x1, num_classes)?;
    let w = &config.loss;

    // Step 1: static-query detection on x0, Hungarian-matched.
    let frame0 = &video.frames[x0];
    let gts0 = &video.annotations[x0];
    let out0 = model.forward_frame(frame0, None, None, true);
    let s = out0.num_static;
    let pts0 = sample_points(frame0.height, frame0.width, w.num_points, w.exhaustive_points, rng);
    let assignment0 = {
        let last = out0.final_layer();
        let gt_refs: Vec<&GtObject> = gts0.iter().collect();
        let cost = match_cost(
            &tensor_rows(&last.class_dist),
            &logits_at_points(&last.mask_logits, &pts0),
            &gt_at_points(&gt_refs, &pts0),
            w,
        );
        hungarian(&cost)?
    };
    let rows0: Vec<usize> = (0..s).collect();
    let mut classes0 = vec![background; s];
    let mut mask_rows0 = Vec::new();
    let mut mask_bits0 = Vec::new();
    for &(row, gt) in &assignment0.pairs {
        classes0[row] = gts0[gt].category;
        mask_rows0.push(row);
        mask_bits0.extend(pts0.iter().map(|&p| f64::from(gts0[gt].mask.get_flat(p))));
    }
    let (cls0, mask0) = supervise(&out0, &rows0, &classes0, &mask_rows0, &mask_bits0, &pts0, w);

    // Step 2: carry matched queries into x1 as track queries, with FN/FP
    // augmentation. Embeddings are gathered from the x0 graph so gradients
    // flow through the previous frame's decoder.
    let matched: Vec<(usize, u64)> =
        assignment0.pairs.iter().map(|&(row, gt)| (row, gts0[gt].instance_id)).collect();
    let aug = augment_tracks(
        &matched,
        &assignment0.unmatched_predictions,
        config.p_fn,
        config.p_fp,
        rng,
    );
    let track_rows_x0: Vec<usize> =
        aug.kept.iter().map(|&(r, _)| r).chain(aug.injected_rows.iter().copied()).collect();
    let t = track_rows_x0.len();

    let frame1 = &video.frames[x1];
    let gts1 = &video.annotations[x1];
    let out1 = if t == 0 {
        model.forward_frame(frame1, None, None, true)
    } else {
        let te = out0.embeddings.gather(0, &track_rows_x0);
        let tp = model.static_pos_rows(&track_rows_x0);
        model.forward_frame(frame1, Some(&te), Some(&tp), true)
    };
    let pts1 = sample_points(frame1.height, frame1.width, w.num_points, w.exhaustive_points, rng);
    let by_id: BTreeMap<u64, &GtObject> = gts1.iter().map(|g| (g.instance_id, g)).collect();

    // Track targets are id-locked: no matching in x1 for carried queries.
    let rows_track: Vec<usize> = (s..s + t).collect();
    let mut classes_track = Vec::with_capacity(t);
    let mut mask_rows_track = Vec::new();
    let mut mask_bits_track = Vec::new();
    let mut covered = BTreeSet::new();
    let mut tracks_disappeared = 0;
    for (i, &(_, id)) in aug.kept.iter().enumerate() {
        covered.insert(id);
        match by_id.get(&id) {
            Some(g) => {
                classes_track.push(g.category);
                mask_rows_track.push(s + i);
                mask_bits_track.extend(pts1.iter().map(|&p| f64::from(g.mask.get_flat(p))));
            }
            None => {
                classes_track.push(background);
                tracks_disappeared += 1;
            }
        }
    }
    classes_track.extend(std::iter::repeat(background).take(aug.injected_rows.len()));
    let (cls_track, mask_track) = supervise(
        &out1,
        &rows_track,
        &classes_track,
        &mask_rows_track,
        &mask_bits_track,
        &pts1,
        w,
    );

    // Step 3: instances not covered by a carried track (new or FN-rerouted)
    // greedily claim x1 static predictions; the rest train toward background.
    let new_gts: Vec<&GtObject> = gts1.iter().filter(|g| !covered.contains(&g.instance_id)).collect();
    let rows1: Vec<usize> = (0..s).collect();
    let mut classes1 = vec![background; s];
    let mut mask_rows1 = Vec::new();
    let mut mask_bits1 = Vec::new();
    let mut step3_matched = 0;
    if !new_gts.is_empty() {
        let last = out1.final_layer();
        let dist: Vec<Vec<f64>> = tensor_rows(&last.class_dist).into_iter().take(s).collect();
        let logits: Vec<Vec<f64>> =
            logits_at_points(&last.mask_logits, &pts1).into_iter().take(s).collect();
        let assignment1 = greedy_assign(&match_cost(&dist, &logits, &gt_at_points(&new_gts, &pts1), w))?;
        step3_matched = assignment1.pairs.len();
        for &(row, gt) in &assignment1.pairs {
            classes1[row] = new_gts[gt].category;
            mask_rows1.push(row);
            mask_bits1.extend(pts1.iter().map(|&p| f64::from(new_gts[gt].mask.get_flat(p))));
        }
    }
    let (cls1, mask1) = supervise(&out1, &rows1, &classes1, &mask_rows1, &mask_bits1, &pts1, w);

    let total = combined_loss(&cls0, &cls_track, &cls1, &mask0, &mask_track, &mask1, w);
    let record = TrainStepRecord {
        iteration: 0,
        video_id: video.id.clone(),
        frame0: x0,
        frame1: x1,
        loss_cls0: cls0.item(),
        loss_cls_track: cls_track.item(),
        loss_cls1: cls1.item(),
        loss_mask0: mask0.item(),
        loss_mask_track: mask_track.item(),
        loss_mask1: mask1.item(),
        loss_total: total.item(),
        gt_x0: gts0.len(),
        gt_x1: gts1.len(),
        tracks_carried: t,
        fn_dropped: aug.dropped_ids.len(),
        fp_injected: aug.injected_rows.len(),
        tracks_disappeared,
        step3_instances: new_gts.len(),
        step3_matched,
    };
    Ok((total, record))
}

/// Optimizer wiring for a [`Model`]: splits the parameters into groups by
/// backbone membership (reduced learning rate) and the no-decay name list,
/// applies linear warmup, and delegates the update math to [`optim::AdamW`].
pub struct AdamW {
    inner: optim::AdamW,
    warmup_steps: usize,
    steps: usize,
}

impl AdamW {
    pub fn new(model: &Model, config: &TrainConfig) -> AdamW {
        let mut groups: Vec<ParamGroup> = [
            ("backbone", config.backbone_lr_multiplier, true),
            ("backbone_no_decay", config.backbone_lr_multiplier, false),
            ("main", 1.0, true),
            ("main_no_decay", 1.0, false),
        ]
        .into_iter()
        .map(|(name, lr_multiplier, apply_weight_decay)| ParamGroup {
            name: name.into(),
            lr_multiplier,
            apply_weight_decay,
            params: Vec::new(),
        })
        .collect();
        for (name, tensor) in model.named_parameters() {
            let backbone = name.starts_with("backbone.");
            let decay = !config.no_decay_param_names.iter().any(|p| name.contains(p.as_str()));
            let gi = match (backbone, decay) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            groups[gi].params.push((name, tensor));
        }
        let inner = optim::AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            groups,
        );
        AdamW { inner, warmup_steps: config.warmup_steps, steps: 0 }
    }

    pub fn zero_grad(&self) {
        self.inner.clear_grads();
    }

    /// Effective base learning rate for step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.inner.config.lr * self.warmup_scale(step)
    }

    fn warmup_scale(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Advance the warmup schedule and apply one update. A non-finite
    /// gradient skips the update (weights untouched) rather than poisoning
    /// the optimizer state.
    pub fn step(&mut self) -> StepOutcome {
        self.steps += 1;
        self.inner.step(self.warmup_scale(self.steps))
    }
}

/// One optimizer step on one frame pair: zero grads, build losses, backward,
/// update. Aborts with the offending record when the loss is non-finite.
pub fn train_step(
    model: &Model,
    opt: &mut AdamW,
    video: &VideoSample,
    x0: usize,
    x1: usize,
    config: &TrainConfig,
    rng: &mut Rng,
    iteration: usize,
) -> Result<TrainStepRecord> {
    opt.zero_grad();
    let (total, mut record) = pair_losses(model, video, x0, x1, config, rng)?;
    record.iteration = iteration;
    if !record.loss_total.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss: {}",
            serde_json::to_string(&record).unwrap_or_else(|e| e.to_string())
        )));
    }
    total.backward()?;
    opt.step();
    Ok(record)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub records: Vec<TrainStepRecord>,
    /// One checkpoint per epoch, in order.
    pub epoch_checkpoints: Vec<PathBuf>,
    /// The final model (same weights as the last epoch checkpoint).
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Full training loop over the train split: each epoch visits every training
/// video once in shuffled order, sampling one frame pair per visit. Writes a
/// JSONL step log and a checkpoint at every epoch end, plus `model.rvis`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    if config.model.num_classes != dataset.categories.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset defines {}",
            config.model.num_classes,
            dataset.categories.len()
        )));
    }
    let videos = dataset.split_videos(Split::Train);
    if videos.is_empty() {
        return Err(Error::Dataset("no videos in the train split".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = Rng::new(config.seed);
    let model = Model::new(config.model.clone(), &mut rng)?;
    let mut opt = AdamW::new(&model, config);

    let log_path = out_dir.join("train_log.jsonl");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut write_record = |record: &TrainStepRecord| -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Train(format!("cannot serialize step record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))
    };

    let mut records = Vec::new();
    let mut epoch_checkpoints = Vec::new();
    let mut iteration = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            opt.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &vi in chunk {
                let video = videos[vi];
                let (x0, x1) = sample_pair(video, config.pair_range, &mut rng)?;
                let (total, mut record) = pair_losses(&model, video, x0, x1, config, &mut rng)?;
                iteration += 1;
                record.iteration = iteration;
                let abort = !record.loss_total.is_finite();
                write_record(&record)?;
                if abort {
                    return Err(Error::Train(format!(
                        "non-finite loss: {}",
                        serde_json::to_string(&record).unwrap_or_else(|e| e.to_string())
                    )));
                }
                total.mul_scalar(scale).backward()?;
                records.push(record);
            }
            opt.step();
        }
        let path = out_dir.join(format!("epoch_{epoch:03}.rvis"));
        save_checkpoint(&model, &path)?;
        epoch_checkpoints.push(path);
    }
    let final_checkpoint = out_dir.join("model.rvis");
    save_checkpoint(&model, &final_checkpoint)?;
    Ok(TrainOutput { records, epoch_checkpoints, final_checkpoint, log_path })
}

#[cfg(test)]
mod tests;
