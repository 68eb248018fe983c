use super::*;
use crate::tensor::set_debug_checks;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        num_static_queries: 4,
        embed_dim: 16,
        num_decoder_layers: 2,
        num_attention_heads: 2,
        pixel_decoder_levels: 3,
        mask_feature_stride: 4,
        backbone_channels: vec![4, 8, 12, 16, 16],
        input_resize_shorter_side: None,
    }
}

fn random_frame(h: usize, w: usize, rng: &mut Rng) -> Frame {
    let mut f = Frame::new(h, w);
    for v in f.data.iter_mut() {
        *v = rng.next_f64();
    }
    f
}

fn load_err(bytes: &[u8]) -> String {
    match load_checkpoint_bytes(bytes) {
        Ok(_) => panic!("expected checkpoint load to fail"),
        Err(e) => e.to_string(),
    }
}

fn track_rows(n: usize, d: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let e: Vec<f64> = (0..n * d).map(|_| rng.normal() * 0.3).collect();
    let p: Vec<f64> = (0..n * d).map(|_| rng.normal() * 0.3).collect();
    (Tensor::from_vec(e, &[n, d]), Tensor::from_vec(p, &[n, d]))
}

#[test]
fn default_config_fits_parameter_budget() {
    let model = Model::new(ModelConfig::default(), &mut Rng::new(7)).unwrap();
    let n = model.num_parameters();
    assert!(n <= 200_000, "parameter count {n} exceeds budget");
    assert!(n >= 50_000, "parameter count {n} suspiciously small");
    let names: std::collections::BTreeSet<String> =
        model.named_parameters().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), model.named_parameters().len(), "duplicate parameter names");
}

#[test]
fn config_validation_rejects_inconsistent_settings() {
    let mut c = tiny_config();
    c.embed_dim = 18; // not divisible by 4
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.num_attention_heads = 5;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.pixel_decoder_levels = 2; // 16 / 4 needs 3 levels
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.mask_feature_stride = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.num_static_queries = 0;
    assert!(c.validate().is_err());
    assert!(tiny_config().validate().is_ok());
}

#[test]
fn forward_shapes_and_query_arity() {
    let cfg = tiny_config();
    let mut rng = Rng::new(11);
    let model = Model::new(cfg.clone(), &mut rng).unwrap();
    let frame = random_frame(32, 32, &mut rng);

    let out = model.forward_frame(&frame, None, None, true);
    assert_eq!(out.layers.len(), cfg.num_decoder_layers + 1);
    assert_eq!(out.num_queries(), cfg.num_static_queries);
    for layer in &out.layers {
        assert_eq!(layer.class_dist.shape(), vec![4, cfg.num_classes + 1]);
        assert_eq!(layer.mask_logits.shape(), vec![4, 32, 32]);
        let probs = layer.class_dist.value();
        for q in 0..4 {
            let s: f64 = probs[q * 4..(q + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "class row {q} sums to {s}");
        }
    }
    assert_eq!(out.embeddings.shape(), vec![4, cfg.embed_dim]);
    assert_eq!(out.query_pos_values.len(), 4);

    let (te, tp) = track_rows(2, cfg.embed_dim, &mut rng);
    let out = model.forward_frame(&frame, Some(&te), Some(&tp), true);
    assert_eq!(out.num_static, 4);
    assert_eq!(out.num_track, 2);
    assert_eq!(out.embeddings.shape(), vec![6, cfg.embed_dim]);

    // Track queries can run without any static queries at all.
    let (te, tp) = track_rows(1, cfg.embed_dim, &mut rng);
    let out = model.forward_frame(&frame, Some(&te), Some(&tp), false);
    assert_eq!(out.num_queries(), 1);
    assert_eq!(out.final_layer().mask_logits.shape(), vec![1, 32, 32]);
}

#[test]
fn forward_is_deterministic_in_the_seed() {
    let frame = random_frame(24, 24, &mut Rng::new(3));
    let a = Model::new(tiny_config(), &mut Rng::new(5)).unwrap();
    let b = Model::new(tiny_config(), &mut Rng::new(5)).unwrap();
    let c = Model::new(tiny_config(), &mut Rng::new(6)).unwrap();
    let oa = a.forward_frame(&frame, None, None, true);
    let ob = b.forward_frame(&frame, None, None, true);
    let oc = c.forward_frame(&frame, None, None, true);
    assert_eq!(oa.embeddings.value(), ob.embeddings.value());
    assert_eq!(
        oa.final_layer().mask_logits.value(),
        ob.final_layer().mask_logits.value()
    );
    assert_ne!(oa.embeddings.value(), oc.embeddings.value());
}

/// Swapping two track-query rows must swap the corresponding output rows and
/// leave every other row bit-identical; there is no cross-query mixing op.
#[test]
fn query_permutation_equivariance_is_bit_exact() {
    let cfg = tiny_config();
    let mut rng = Rng::new(21);
    let model = Model::new(cfg.clone(), &mut rng).unwrap();
    let frame = random_frame(32, 32, &mut rng);
    let d = cfg.embed_dim;
    let (te, tp) = track_rows(2, d, &mut rng);
    let swap_rows = |t: &Tensor| {
        let v = t.value();
        let mut s = v[d..2 * d].to_vec();
        s.extend_from_slice(&v[..d]);
        Tensor::from_vec(s, &[2, d])
    };
    let out_ab = model.forward_frame(&frame, Some(&te), Some(&tp), true);
    let out_ba = model.forward_frame(&frame, Some(&swap_rows(&te)), Some(&swap_rows(&tp)), true);

    let s = cfg.num_static_queries;
    let check = |a: &Tensor, b: &Tensor, row_len: usize| {
        let (va, vb) = (a.value(), b.value());
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        for q in 0..s {
            assert_eq!(
                bits(&va[q * row_len..(q + 1) * row_len]),
                bits(&vb[q * row_len..(q + 1) * row_len]),
                "static row {q} changed"
            );
        }
        let (a0, a1) = (s * row_len, (s + 1) * row_len);
        assert_eq!(bits(&va[a0..a1]), bits(&vb[a1..a1 + row_len]), "track row 0 not at slot 1");
        assert_eq!(bits(&va[a1..a1 + row_len]), bits(&vb[a0..a1]), "track row 1 not at slot 0");
    };
    check(&out_ab.embeddings, &out_ba.embeddings, d);
    for (la, lb) in out_ab.layers.iter().zip(&out_ba.layers) {
        check(&la.class_dist, &lb.class_dist, cfg.num_classes + 1);
        check(&la.mask_logits, &lb.mask_logits, 32 * 32);
    }
}

#[test]
fn masked_attention_single_location_matches_value_projection() {
    let mut rng = Rng::new(9);
    let d = 8;
    let attn = MultiHeadAttention::new(&mut rng, d, 2);
    let q = Tensor::from_vec((0..3 * d).map(|_| rng.normal()).collect(), &[3, d]);
    let kv = Tensor::from_vec((0..5 * d).map(|_| rng.normal()).collect(), &[5, d]);
    // Every query row may only see key location 2.
    let mut mask = vec![true; 3 * 5];
    for qi in 0..3 {
        mask[qi * 5 + 2] = false;
    }
    let out = attn.attend(&q, &kv, &kv, Some(&mask)).value();
    let v_proj = attn.project_values(&kv).value();
    let expect = &v_proj[2 * d..3 * d];
    for qi in 0..3 {
        let row = &out[qi * d..(qi + 1) * d];
        for (a, b) in row.iter().zip(expect) {
            assert_eq!(a.to_bits(), b.to_bits(), "attention row differs from value projection");
        }
    }
}

#[test]
fn all_visible_mask_matches_unmasked_attention() {
    let mut rng = Rng::new(13);
    let d = 8;
    let attn = MultiHeadAttention::new(&mut rng, d, 2);
    let q = Tensor::from_vec((0..2 * d).map(|_| rng.normal()).collect(), &[2, d]);
    let kv = Tensor::from_vec((0..6 * d).map(|_| rng.normal()).collect(), &[6, d]);
    let masked = attn.forward(&q, &kv, &kv, Some(&vec![false; 12])).value();
    let unmasked = attn.forward(&q, &kv, &kv, None).value();
    let bits = |v: Vec<f64>| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
    assert_eq!(bits(masked), bits(unmasked));
}

#[test]
fn fully_hidden_rows_fall_back_to_attending_everywhere() {
    // Row 0 predicts background everywhere; row 1 has one positive location.
    let logits = Tensor::from_vec(vec![-1.0, -2.0, -0.5, -3.0, -1.0, 4.0, -1.0, -1.0], &[2, 2, 2]);
    let mask = Model::attention_mask(&logits, 2, 2, 2, 2).unwrap();
    assert_eq!(&mask[..4], &[false; 4], "all-hidden row must unmask");
    assert_eq!(&mask[4..], &[true, false, true, true]);
    // No hidden location anywhere: no mask at all, so the op graph is identical
    // to the unmasked path.
    let open = Tensor::from_vec(vec![1.0, 2.0, 0.5, 3.0], &[1, 2, 2]);
    assert!(Model::attention_mask(&open, 2, 2, 2, 2).is_none());
}

/// Reachability check: a single scalar objective touching every layer output
/// must produce a gradient buffer for every named parameter.
#[test]
fn gradients_reach_every_parameter() {
    set_debug_checks(true);
    let cfg = tiny_config();
    let mut rng = Rng::new(17);
    let model = Model::new(cfg.clone(), &mut rng).unwrap();
    let frame = random_frame(16, 16, &mut rng);
    let (te, tp) = track_rows(1, cfg.embed_dim, &mut rng);
    let out = model.forward_frame(&frame, Some(&te), Some(&tp), true);
    let mut loss = out.embeddings.sum(None);
    for layer in &out.layers {
        loss = loss.add(&layer.class_dist.sum(None)).add(&layer.mask_logits.sum(None));
    }
    loss.backward().unwrap();
    for (name, p) in model.named_parameters() {
        assert!(p.grad().is_some(), "parameter {name} received no gradient");
    }
    set_debug_checks(false);
}

#[test]
fn resize_option_keeps_original_output_resolution() {
    let mut cfg = tiny_config();
    cfg.input_resize_shorter_side = Some(16);
    let mut rng = Rng::new(23);
    let model = Model::new(cfg, &mut rng).unwrap();
    let frame = random_frame(24, 32, &mut rng);
    let out = model.forward_frame(&frame, None, None, true);
    assert_eq!(out.final_layer().mask_logits.shape(), vec![4, 24, 32]);
    assert_eq!(out.frame_height, 24);
    assert_eq!(out.frame_width, 32);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut rng = Rng::new(31);
    let model = Model::new(tiny_config(), &mut rng).unwrap();
    let bytes = save_checkpoint_bytes(&model);
    let loaded = load_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(loaded.config(), model.config());
    for ((na, ta), (nb, tb)) in model.named_parameters().iter().zip(loaded.named_parameters().iter()) {
        assert_eq!(na, nb);
        let (va, vb) = (ta.value(), tb.value());
        assert_eq!(va.len(), vb.len());
        for (a, b) in va.iter().zip(&vb) {
            assert_eq!(a.to_bits(), b.to_bits(), "parameter {na} changed across roundtrip");
        }
    }
    assert_eq!(save_checkpoint_bytes(&loaded), bytes, "re-saved checkpoint differs");

    let frame = random_frame(24, 24, &mut rng);
    let oa = model.forward_frame(&frame, None, None, true);
    let ob = loaded.forward_frame(&frame, None, None, true);
    assert_eq!(oa.embeddings.value(), ob.embeddings.value());
}

#[test]
fn checkpoint_rejects_query_count_mismatch() {
    let mut cfg = tiny_config();
    cfg.num_static_queries = 6;
    let model = Model::new(cfg, &mut Rng::new(2)).unwrap();
    let bytes = save_checkpoint_bytes(&model);
    // Rewrite the embedded config to claim fewer queries than the stored rows.
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&bytes[12..12 + json_len]).unwrap();
    let patched_json = json.replace("\"num_static_queries\":6", "\"num_static_queries\":4");
    assert_ne!(json, patched_json, "expected the query count in the config block");
    let mut patched = bytes[..8].to_vec();
    patched.extend_from_slice(&(patched_json.len() as u32).to_le_bytes());
    patched.extend_from_slice(patched_json.as_bytes());
    patched.extend_from_slice(&bytes[12 + json_len..]);
    let err = load_err(&patched);
    assert!(err.contains("query.static_embed"), "unexpected error: {err}");
    assert!(err.contains("[6, 16]") && err.contains("[4, 16]"), "error must name both shapes: {err}");
}

#[test]
fn checkpoint_rejects_bad_magic_version_and_truncation() {
    let model = Model::new(tiny_config(), &mut Rng::new(2)).unwrap();
    let bytes = save_checkpoint_bytes(&model);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(load_err(&bad_magic).contains("magic"));

    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(load_err(&bad_version).contains("version"));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(load_err(truncated).contains("truncated"));
}

#[test]
fn extract_track_queries_copies_rows_and_rejects_duplicates() {
    let cfg = tiny_config();
    let mut rng = Rng::new(41);
    let model = Model::new(cfg.clone(), &mut rng).unwrap();
    let frame = random_frame(16, 16, &mut rng);
    let out = model.forward_frame(&frame, None, None, true);
    let states = extract_track_queries(&out, &[(2, 70), (0, 71)]).unwrap();
    assert_eq!(states[0].track_id, 70);
    let emb = out.embeddings.value();
    let d = cfg.embed_dim;
    assert_eq!(states[0].embedding, emb[2 * d..3 * d].to_vec());
    assert_eq!(states[1].embedding, emb[..d].to_vec());
    assert_eq!(states[0].pos, out.query_pos_values[2]);
    assert!(states[0].category.unwrap() < cfg.num_classes);

    assert!(extract_track_queries(&out, &[(1, 1), (1, 2)]).is_err());
    assert!(extract_track_queries(&out, &[(99, 1)]).is_err());
}
