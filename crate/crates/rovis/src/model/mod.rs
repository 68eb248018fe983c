//! Online video instance segmenter: conv backbone, FPN-style pixel decoder,
//! masked cross-attention query decoder (no query self-attention), per-layer
//! prediction heads, and track-query plumbing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_bytes, save_checkpoint, save_checkpoint_bytes};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. Serialized into checkpoints; two checkpoints
/// are weight-compatible iff their configs are equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of foreground categories; class heads emit this + 1 background logit.
    pub num_classes: usize,
    pub num_static_queries: usize,
    pub embed_dim: usize,
    pub num_decoder_layers: usize,
    pub num_attention_heads: usize,
    /// Feature pyramid levels the decoder cross-attends to, coarsest first.
    pub pixel_decoder_levels: usize,
    /// Stride of the mask-feature map relative to the input frame.
    pub mask_feature_stride: usize,
    /// Output channels per backbone block; block 0 has stride 1, the rest stride 2.
    pub backbone_channels: Vec<usize>,
    /// When set, frames are resized so the shorter side matches before the
    /// backbone; mask logits are still emitted at the original resolution.
    pub input_resize_shorter_side: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            num_static_queries: 32,
            embed_dim: 48,
            num_decoder_layers: 3,
            num_attention_heads: 4,
            pixel_decoder_levels: 3,
            mask_feature_stride: 4,
            backbone_channels: vec![8, 16, 32, 48, 64],
            input_resize_shorter_side: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.num_static_queries == 0 {
            return fail("num_static_queries must be at least 1".into());
        }
        if self.embed_dim == 0 || self.num_attention_heads == 0 {
            return fail("embed_dim and num_attention_heads must be positive".into());
        }
        if self.embed_dim % self.num_attention_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_attention_heads {}",
                self.embed_dim, self.num_attention_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by 4 for the 2-axis position encoding",
                self.embed_dim
            ));
        }
        if self.backbone_channels.is_empty() {
            return fail("backbone_channels must not be empty".into());
        }
        if self.backbone_channels.contains(&0) {
            return fail("backbone_channels entries must be positive".into());
        }
        if self.pixel_decoder_levels == 0 {
            return fail("pixel_decoder_levels must be at least 1".into());
        }
        if !self.mask_feature_stride.is_power_of_two() {
            return fail(format!(
                "mask_feature_stride {} must be a power of two",
                self.mask_feature_stride
            ));
        }
        let final_stride = 1usize << (self.backbone_channels.len() - 1);
        // The pyramid walks from the coarsest map down to the mask stride, one
        // octave per level, so the three quantities must agree exactly.
        let expected = final_stride / self.mask_feature_stride;
        if self.mask_feature_stride > final_stride
            || (1usize << (self.pixel_decoder_levels - 1)) != expected
        {
            return fail(format!(
                "pixel_decoder_levels {} incompatible with backbone stride {} and \
                 mask_feature_stride {}",
                self.pixel_decoder_levels, final_stride, self.mask_feature_stride
            ));
        }
        if let Some(s) = self.input_resize_shorter_side {
            if s == 0 {
                return fail("input_resize_shorter_side must be positive when set".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_attention_heads
    }
}

struct Conv {
    weight: Tensor, // [out, in, kh, kw]
    bias: Tensor,   // [out]
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.normal() * std).collect();
        Conv {
            weight: Tensor::param(w, &[cout, cin, k, k]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            stride,
            pad,
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

struct Linear {
    weight: Tensor, // [in, out]
    bias: Tensor,   // [1, out]
}

impl Linear {
    fn new(rng: &mut Rng, fin: usize, fout: usize) -> Linear {
        let lim = (6.0 / (fin + fout) as f64).sqrt();
        let w: Vec<f64> = (0..fin * fout).map(|_| rng.uniform(-lim, lim)).collect();
        Linear {
            weight: Tensor::param(w, &[fin, fout]),
            bias: Tensor::param(vec![0.0; fout], &[1, fout]),
        }
    }

    /// x: [rows, in] -> [rows, out]; the bias row is gathered `rows` times so
    /// its gradient accumulates as a column sum.
    fn apply(&self, x: &Tensor) -> Tensor {
        let rows = x.shape()[0];
        x.matmul(&self.weight).add(&self.bias.gather(0, &vec![0; rows]))
    }
}

struct LayerNormParams {
    scale: Tensor, // [dim]
    shift: Tensor, // [dim]
}

impl LayerNormParams {
    fn new(dim: usize) -> LayerNormParams {
        LayerNormParams {
            scale: Tensor::param(vec![1.0; dim], &[dim]),
            shift: Tensor::param(vec![0.0; dim], &[dim]),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.layernorm(&self.scale, &self.shift, 1e-5)
    }
}

/// Multi-head attention where queries and keys may carry additive position
/// embeddings and a boolean mask can hide key locations per query row.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    num_heads: usize,
}

impl MultiHeadAttention {
    fn new(rng: &mut Rng, dim: usize, num_heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            num_heads,
        }
    }

    /// Projects values only; exposed so tests can compare a fully masked-down
    /// attention row against the bare value projection.
    pub fn project_values(&self, values: &Tensor) -> Tensor {
        self.wv.apply(values)
    }

    /// Core attention: softmax over keys per query row, independently per head.
    /// `mask[q * n_keys + k] == true` hides key `k` from query `q`. Returns the
    /// concatenated head outputs before the output projection.
    pub fn attend(&self, queries: &Tensor, keys: &Tensor, values: &Tensor, mask: Option<&[bool]>) -> Tensor {
        let nq = queries.shape()[0];
        let nk = keys.shape()[0];
        if let Some(m) = mask {
            assert_eq!(m.len(), nq * nk, "attention mask length {} != {}x{}", m.len(), nq, nk);
        }
        let dim = queries.shape()[1];
        let dh = dim / self.num_heads;
        let q = self.wq.apply(queries);
        let k = self.wk.apply(keys);
        let v = self.wv.apply(values);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let mut scores = qh.matmul(&kh.t()).mul_scalar(scale);
            if let Some(m) = mask {
                scores = scores.masked_fill(m, -1e30);
            }
            let weights = scores.softmax(1);
            heads.push(weights.matmul(&vh));
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        Tensor::concat(&refs, 1)
    }

    /// Full block: attention plus output projection.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, values: &Tensor, mask: Option<&[bool]>) -> Tensor {
        self.wo.apply(&self.attend(queries, keys, values, mask))
    }
}

struct DecoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNormParams,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNormParams,
}

impl DecoderLayer {
    fn new(rng: &mut Rng, dim: usize, heads: usize) -> DecoderLayer {
        DecoderLayer {
            attn: MultiHeadAttention::new(rng, dim, heads),
            norm1: LayerNormParams::new(dim),
            ffn1: Linear::new(rng, dim, dim * 2),
            ffn2: Linear::new(rng, dim * 2, dim),
            norm2: LayerNormParams::new(dim),
        }
    }

    fn forward(
        &self,
        x: &Tensor,
        q_pos: &Tensor,
        feats: &Tensor,
        k_pos: &Tensor,
        mask: Option<&[bool]>,
    ) -> Tensor {
        let attn_out = self.attn.forward(&x.add(q_pos), &feats.add(k_pos), feats, mask);
        let x = self.norm1.apply(&x.add(&attn_out));
        let f = self.ffn2.apply(&self.ffn1.apply(&x).gelu());
        self.norm2.apply(&x.add(&f))
    }
}

struct HeadSet {
    norm: LayerNormParams,
    class: Linear,
    mask1: Linear,
    mask2: Linear,
}

impl HeadSet {
    fn new(rng: &mut Rng, dim: usize, num_classes: usize) -> HeadSet {
        let class = Linear::new(rng, dim, num_classes + 1);
        // Bias the background logit up so untrained queries start as background,
        // which keeps the first matching steps well conditioned.
        class.bias.update_data(|d| d[num_classes] = 2.0);
        HeadSet {
            norm: LayerNormParams::new(dim),
            class,
            mask1: Linear::new(rng, dim, dim),
            mask2: Linear::new(rng, dim, dim),
        }
    }
}

/// Prediction emitted by one head set (there are `num_decoder_layers + 1`,
/// one before the decoder and one after each layer; the last is the output).
pub struct LayerPrediction {
    /// [Q, num_classes + 1], softmax rows; background last.
    pub class_dist: Tensor,
    /// [Q, H, W] logits at the original frame resolution.
    pub mask_logits: Tensor,
    /// [Q, Hm, Wm] logits at the mask-feature resolution (attention source).
    pub mask_logits_feat: Tensor,
}

/// Everything produced by one frame pass. Query rows are ordered
/// `[static queries..., track queries...]`.
pub struct ForwardOutput {
    pub layers: Vec<LayerPrediction>,
    /// [Q, D] decoder output rows; the embeddings carried forward as track queries.
    pub embeddings: Tensor,
    pub num_static: usize,
    pub num_track: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Value snapshot of each query's position embedding row, for track carry-over.
    pub query_pos_values: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn num_queries(&self) -> usize {
        self.num_static + self.num_track
    }

    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one head set")
    }
}

/// A persisted query: the state a tracked instance carries between frames.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub track_id: u64,
    pub embedding: Vec<f64>,
    pub pos: Vec<f64>,
    /// Locked at spawn time; None in category-agnostic tracking.
    pub category: Option<usize>,
    pub last_score: f64,
    pub inactive_frames: usize,
}

/// Builds persisted query states from decoder output rows. Rows must be unique;
/// reusing one would alias two tracks to the same embedding.
pub fn extract_track_queries(out: &ForwardOutput, rows_and_ids: &[(usize, u64)]) -> Result<Vec<QueryState>> {
    let q = out.num_queries();
    let mut seen = std::collections::BTreeSet::new();
    let emb = out.embeddings.value();
    let dim = out.embeddings.shape()[1];
    let cls = out.final_layer().class_dist.value();
    let num_classes = out.final_layer().class_dist.shape()[1] - 1;
    let mut states = Vec::with_capacity(rows_and_ids.len());
    for &(row, id) in rows_and_ids {
        if row >= q {
            return Err(Error::Invalid(format!("query row {row} out of range (have {q})")));
        }
        if !seen.insert(row) {
            return Err(Error::Invalid(format!("query row {row} extracted twice")));
        }
        let probs = &cls[row * (num_classes + 1)..(row + 1) * (num_classes + 1)];
        let (category, score) = probs[..num_classes]
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        states.push(QueryState {
            track_id: id,
            embedding: emb[row * dim..(row + 1) * dim].to_vec(),
            pos: out.query_pos_values[row].clone(),
            category: Some(category),
            last_score: score,
            inactive_frames: 0,
        });
    }
    Ok(states)
}

pub struct Model {
    config: ModelConfig,
    backbone: Vec<Conv>,
    laterals: Vec<Conv>, // 1x1, coarsest level first
    mask_conv: Conv,     // 3x3 at the mask-feature level
    level_embed: Tensor, // [levels, D]
    layers: Vec<DecoderLayer>,
    heads: Vec<HeadSet>, // num_decoder_layers + 1
    static_embed: Tensor, // [S, D]
    static_pos: Tensor,   // [S, D]
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let d = config.embed_dim;
        let n = config.backbone_channels.len();
        let mut backbone = Vec::with_capacity(n);
        let mut cin = 3;
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            backbone.push(Conv::new(rng, cin, cout, 3, stride, 1));
            cin = cout;
        }
        let mut laterals = Vec::with_capacity(config.pixel_decoder_levels);
        for level in 0..config.pixel_decoder_levels {
            let block = n - 1 - level; // coarsest first
            laterals.push(Conv::new(rng, config.backbone_channels[block], d, 1, 1, 0));
        }
        let mask_conv = Conv::new(rng, d, d, 3, 1, 1);
        let level_embed = Tensor::param(
            (0..config.pixel_decoder_levels * d).map(|_| rng.normal() * 0.02).collect(),
            &[config.pixel_decoder_levels, d],
        );
        let layers = (0..config.num_decoder_layers)
            .map(|_| DecoderLayer::new(rng, d, config.num_attention_heads))
            .collect();
        let heads = (0..config.num_decoder_layers + 1)
            .map(|_| HeadSet::new(rng, d, config.num_classes))
            .collect();
        let s = config.num_static_queries;
        let static_embed = Tensor::param((0..s * d).map(|_| rng.normal() * 0.5).collect(), &[s, d]);
        let static_pos = Tensor::param((0..s * d).map(|_| rng.normal() * 0.5).collect(), &[s, d]);
        Ok(Model {
            config,
            backbone,
            laterals,
            mask_conv,
            level_embed,
            layers,
            heads,
            static_embed,
            static_pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All trainable parameters in a fixed, name-keyed order. The order is the
    /// contract for checkpoints and optimizer state.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), c.weight.clone()));
            out.push((format!("backbone.{i}.bias"), c.bias.clone()));
        }
        for (l, c) in self.laterals.iter().enumerate() {
            out.push((format!("pixel.lateral{l}.weight"), c.weight.clone()));
            out.push((format!("pixel.lateral{l}.bias"), c.bias.clone()));
        }
        out.push(("pixel.mask_conv.weight".into(), self.mask_conv.weight.clone()));
        out.push(("pixel.mask_conv.bias".into(), self.mask_conv.bias.clone()));
        out.push(("pixel.level_embed".into(), self.level_embed.clone()));
        for (l, layer) in self.layers.iter().enumerate() {
            for (tag, lin) in [
                ("attn.q", &layer.attn.wq),
                ("attn.k", &layer.attn.wk),
                ("attn.v", &layer.attn.wv),
                ("attn.out", &layer.attn.wo),
                ("ffn1", &layer.ffn1),
                ("ffn2", &layer.ffn2),
            ] {
                out.push((format!("decoder.{l}.{tag}.weight"), lin.weight.clone()));
                out.push((format!("decoder.{l}.{tag}.bias"), lin.bias.clone()));
            }
            out.push((format!("decoder.{l}.norm1.scale"), layer.norm1.scale.clone()));
            out.push((format!("decoder.{l}.norm1.shift"), layer.norm1.shift.clone()));
            out.push((format!("decoder.{l}.norm2.scale"), layer.norm2.scale.clone()));
            out.push((format!("decoder.{l}.norm2.shift"), layer.norm2.shift.clone()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{i}.norm.scale"), h.norm.scale.clone()));
            out.push((format!("heads.{i}.norm.shift"), h.norm.shift.clone()));
            for (tag, lin) in [("class", &h.class), ("mask1", &h.mask1), ("mask2", &h.mask2)] {
                out.push((format!("heads.{i}.{tag}.weight"), lin.weight.clone()));
                out.push((format!("heads.{i}.{tag}.bias"), lin.bias.clone()));
            }
        }
        out.push(("query.static_embed".into(), self.static_embed.clone()));
        out.push(("query.static_pos".into(), self.static_pos.clone()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_parameter(|t| n += t.numel());
        n
    }

    /// Visit every parameter in `named_parameters` order without allocating.
    pub fn for_each_parameter(&self, mut f: impl FnMut(&Tensor)) {
        for c in &self.backbone {
            f(&c.weight);
            f(&c.bias);
        }
        for c in &self.laterals {
            f(&c.weight);
            f(&c.bias);
        }
        f(&self.mask_conv.weight);
        f(&self.mask_conv.bias);
        f(&self.level_embed);
        for layer in &self.layers {
            for lin in [
                &layer.attn.wq,
                &layer.attn.wk,
                &layer.attn.wv,
                &layer.attn.wo,
                &layer.ffn1,
                &layer.ffn2,
            ] {
                f(&lin.weight);
                f(&lin.bias);
            }
            f(&layer.norm1.scale);
            f(&layer.norm1.shift);
            f(&layer.norm2.scale);
            f(&layer.norm2.shift);
        }
        for h in &self.heads {
            f(&h.norm.scale);
            f(&h.norm.shift);
            for lin in [&h.class, &h.mask1, &h.mask2] {
                f(&lin.weight);
                f(&lin.bias);
            }
        }
        f(&self.static_embed);
        f(&self.static_pos);
    }

    /// Position-embedding row for a static query slot, as a detached value.
    pub fn static_query_pos(&self, slot: usize) -> Vec<f64> {
        let d = self.config.embed_dim;
        let v = self.static_pos.value();
        v[slot * d..(slot + 1) * d].to_vec()
    }

    /// Graph-connected rows of the static position table, for carrying
    /// queries into the next frame during training.
    pub fn static_pos_rows(&self, rows: &[usize]) -> Tensor {
        self.static_pos.gather(0, rows)
    }

    fn frame_to_tensor(frame: &Frame) -> Tensor {
        let (h, w) = (frame.height, frame.width);
        let mut chw = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    chw[c * h * w + y * w + x] = frame.data[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::from_vec(chw, &[3, h, w])
    }

    /// Sinusoidal 2-axis position encoding: [h*w, dim] with dim/4 frequency
    /// bands per (axis, phase) pair. Constant (non-trainable).
    fn position_encoding(h: usize, w: usize, dim: usize) -> Tensor {
        let bands = dim / 4;
        let mut data = vec![0.0; h * w * dim];
        for y in 0..h {
            let ys = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            for x in 0..w {
                let xs = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
                let row = (y * w + x) * dim;
                for b in 0..bands {
                    let t = 10000f64.powf(4.0 * b as f64 / dim as f64);
                    data[row + 4 * b] = (ys / t).sin();
                    data[row + 4 * b + 1] = (ys / t).cos();
                    data[row + 4 * b + 2] = (xs / t).sin();
                    data[row + 4 * b + 3] = (xs / t).cos();
                }
            }
        }
        Tensor::from_vec(data, &[h * w, dim])
    }

    /// Inference entry point: builds constant track-query tensors and runs a
    /// full forward pass with the static queries included.
    pub fn predict_frame(&self, frame: &Frame, tracks: &[QueryState]) -> ForwardOutput {
        let d = self.config.embed_dim;
        let (te, tp) = if tracks.is_empty() {
            (None, None)
        } else {
            let emb: Vec<f64> = tracks.iter().flat_map(|t| t.embedding.iter().copied()).collect();
            let pos: Vec<f64> = tracks.iter().flat_map(|t| t.pos.iter().copied()).collect();
            (
                Some(Tensor::from_vec(emb, &[tracks.len(), d])),
                Some(Tensor::from_vec(pos, &[tracks.len(), d])),
            )
        };
        self.forward_frame(frame, te.as_ref(), tp.as_ref(), true)
    }

    /// Full forward pass. `track_embed`/`track_pos` are [T, D] rows appended
    /// after the static queries (pass graph-connected tensors during training
    /// to backpropagate through the previous frame). `include_static = false`
    /// runs track queries alone.
    pub fn forward_frame(
        &self,
        frame: &Frame,
        track_embed: Option<&Tensor>,
        track_pos: Option<&Tensor>,
        include_static: bool,
    ) -> ForwardOutput {
        let (orig_h, orig_w) = (frame.height, frame.width);
        let mut x = Self::frame_to_tensor(frame);
        if let Some(s) = self.config.input_resize_shorter_side {
            let scale = s as f64 / orig_h.min(orig_w) as f64;
            let nh = ((orig_h as f64 * scale).round() as usize).max(1);
            let nw = ((orig_w as f64 * scale).round() as usize).max(1);
            if (nh, nw) != (orig_h, orig_w) {
                x = x.bilinear_resize(nh, nw);
            }
        }
        // Map pixel values from [0,1] to [-1,1].
        let mut feat = x.affine(2.0, -1.0);
        let mut block_feats = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            feat = conv.apply(&feat).gelu();
            block_feats.push(feat.clone());
        }

        // Top-down pyramid: lateral 1x1 at each level plus upsampled coarser map.
        let levels = self.config.pixel_decoder_levels;
        let n = self.backbone.len();
        let mut fused: Vec<Tensor> = Vec::with_capacity(levels);
        for level in 0..levels {
            let lat = self.laterals[level].apply(&block_feats[n - 1 - level]);
            let f = if level == 0 {
                lat
            } else {
                let (h, w) = (lat.shape()[1], lat.shape()[2]);
                lat.add(&fused[level - 1].bilinear_resize(h, w))
            };
            fused.push(f);
        }
        let mask_features = self.mask_conv.apply(&fused[levels - 1]);
        let (mh, mw) = (mask_features.shape()[1], mask_features.shape()[2]);
        let d = self.config.embed_dim;
        // [D, Hm*Wm]: mask logits are embeddings x this map.
        let mask_flat = mask_features.reshape(&[d, mh * mw]);

        // Per-level flattened key/value features and position rows.
        let mut level_feats = Vec::with_capacity(levels);
        let mut level_pos = Vec::with_capacity(levels);
        let mut level_dims = Vec::with_capacity(levels);
        for (level, f) in fused.iter().enumerate() {
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let flat = f.reshape(&[d, h * w]).t();
            let pos = Self::position_encoding(h, w, d)
                .add(&self.level_embed.gather(0, &vec![level; h * w]));
            level_feats.push(flat);
            level_pos.push(pos);
            level_dims.push((h, w));
        }

        // Assemble query rows: statics first, then tracks.
        let num_static = if include_static { self.config.num_static_queries } else { 0 };
        let num_track = track_embed.map_or(0, |t| t.shape()[0]);
        assert!(num_static + num_track > 0, "forward pass needs at least one query");
        if let (Some(te), Some(tp)) = (track_embed, track_pos) {
            assert_eq!(te.shape(), tp.shape(), "track embed/pos shapes differ");
        }
        let (mut x, q_pos) = match (num_static, track_embed, track_pos) {
            (0, Some(te), Some(tp)) => (te.clone(), tp.clone()),
            (_, Some(te), Some(tp)) => (
                Tensor::concat(&[&self.static_embed, te], 0),
                Tensor::concat(&[&self.static_pos, tp], 0),
            ),
            (_, None, None) => (self.static_embed.clone(), self.static_pos.clone()),
            _ => panic!("track embeddings and positions must be given together"),
        };
        let num_q = num_static + num_track;
        let mut query_pos_values = Vec::with_capacity(num_q);
        {
            let pv = q_pos.value();
            for qi in 0..num_q {
                query_pos_values.push(pv[qi * d..(qi + 1) * d].to_vec());
            }
        }

        let mut predictions = Vec::with_capacity(self.layers.len() + 1);
        predictions.push(self.run_head(0, &x, &mask_flat, mh, mw, orig_h, orig_w));
        for (li, layer) in self.layers.iter().enumerate() {
            let level = li % levels;
            let (lh, lw) = level_dims[level];
            let mask = Self::attention_mask(&predictions[li].mask_logits_feat, mh, mw, lh, lw);
            x = layer.forward(&x, &q_pos, &level_feats[level], &level_pos[level], mask.as_deref());
            predictions.push(self.run_head(li + 1, &x, &mask_flat, mh, mw, orig_h, orig_w));
        }

        ForwardOutput {
            layers: predictions,
            embeddings: x,
            num_static,
            num_track,
            frame_height: orig_h,
            frame_width: orig_w,
            query_pos_values,
        }
    }

    fn run_head(
        &self,
        index: usize,
        x: &Tensor,
        mask_flat: &Tensor,
        mh: usize,
        mw: usize,
        out_h: usize,
        out_w: usize,
    ) -> LayerPrediction {
        let head = &self.heads[index];
        let h = head.norm.apply(x);
        let class_dist = head.class.apply(&h).softmax(1);
        let mask_embed = head.mask2.apply(&head.mask1.apply(&h).gelu());
        let q = x.shape()[0];
        let feat = mask_embed.matmul(mask_flat).reshape(&[q, mh, mw]);
        let mask_logits = if (mh, mw) == (out_h, out_w) {
            feat.clone()
        } else {
            feat.bilinear_resize(out_h, out_w)
        };
        LayerPrediction { class_dist, mask_logits, mask_logits_feat: feat }
    }

    /// Attention mask from the previous head's mask logits: a key location is
    /// hidden where the resized logit is negative (predicted background). Rows
    /// that would hide everything fall back to attending everywhere.
    fn attention_mask(feat_logits: &Tensor, mh: usize, mw: usize, lh: usize, lw: usize) -> Option<Vec<bool>> {
        let q = feat_logits.shape()[0];
        let at_level = if (mh, mw) == (lh, lw) {
            feat_logits.value()
        } else {
            feat_logits.bilinear_resize(lh, lw).value()
        };
        let n = lh * lw;
        let mut mask = vec![false; q * n];
        let mut any = false;
        for qi in 0..q {
            let row = &at_level[qi * n..(qi + 1) * n];
            let mut all_hidden = true;
            for (j, &v) in row.iter().enumerate() {
                let hide = v < 0.0;
                mask[qi * n + j] = hide;
                all_hidden &= hide;
                any |= hide;
            }
            if all_hidden {
                for j in 0..n {
                    mask[qi * n + j] = false;
                }
            }
        }
        if any { Some(mask) } else { None }
    }
}

#[cfg(test)]
mod tests;
