use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{PreparedImage, IMAGE_SIZE};
use crate::text::{Vocabulary, END_ID, PAD_ID, START_ID};

fn mini_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        ff_dim: 8,
        vocab_size: 12,
        seq_len: 6,
        ..ModelConfig::default()
    }
}

fn random_features(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((p, d), || rng.gen_range(-1.0..1.0))
}

fn mini() -> (Transformer, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (Transformer::new(mini_config(), 5, 3).unwrap(), random_features(&mut rng, 4, 5))
}

/// Parameter count written out layer by layer.
fn count_oracle(e: usize, ff: usize, v: usize, t: usize, d: usize) -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let norm = |n: usize| 2 * n;
    let attention = 4 * dense(e, e);
    let encoder = norm(d) + dense(d, e) + attention + norm(e);
    let decoder = v * e + t * e + attention + norm(e) + attention + norm(e) + dense(e, ff) + dense(ff, e) + norm(e) + dense(e, v);
    encoder + decoder
}

#[test]
fn reference_parameter_count_is_pinned() {
    let config = ModelConfig::default();
    let model = Transformer::new(config.clone(), 64, 0).unwrap();
    assert_eq!(model.params().num_scalars(), config.num_params(64));
    assert_eq!(config.num_params(64), count_oracle(512, 512, 300, 60, 64));
    assert_eq!(config.num_params(64), 4_052_908);
}

#[test]
fn parameter_count_matches_oracle_for_other_shapes() {
    for &(e, ff, v, t, d) in &[(8, 8, 12, 6, 5), (16, 32, 40, 10, 7), (64, 64, 300, 60, 64)] {
        let config = ModelConfig {
            embed_dim: e,
            ff_dim: ff,
            vocab_size: v,
            seq_len: t,
            ..ModelConfig::default()
        };
        let model = Transformer::new(config.clone(), d, 1).unwrap();
        assert_eq!(model.params().num_scalars(), count_oracle(e, ff, v, t, d));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = ModelConfig {
        embed_dim: 9,
        ..mini_config()
    };
    assert!(Transformer::new(bad, 5, 0).is_err());
    assert!(Transformer::new(mini_config(), 0, 0).is_err());
    let bad = ModelConfig {
        dense_dropout_2: 1.0,
        ..mini_config()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn reference_shapes() {
    let model = Transformer::new(ModelConfig::default(), 64, 0).unwrap();
    let img = PreparedImage::from_pixels(Array3::from_elem((IMAGE_SIZE, IMAGE_SIZE, 3), 0.4), "x");
    let features = StubExtractor.extract(&img);
    let ctx = model.encode(&features, &mut Mode::Inference).unwrap();
    assert_eq!(ctx.vectors.dim(), (49, 512));
    let mut ids = vec![START_ID, 7, 8, 9, END_ID];
    ids.resize(59, PAD_ID);
    let out = model.decode(&ids, &ctx, &mut Mode::Inference).unwrap();
    assert_eq!(out.probs.dim(), (59, 300));
    for row in out.probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn encode_rejects_wrong_feature_width() {
    let (model, _) = mini();
    let wrong = Array2::zeros((4, 6));
    assert!(matches!(
        model.encode(&wrong, &mut Mode::Inference),
        Err(ModelError::DimensionMismatch { .. })
    ));
}

#[test]
fn inference_is_deterministic_and_training_is_not() {
    let (model, f) = mini();
    let a = model.encode(&f, &mut Mode::Inference).unwrap();
    let b = model.encode(&f, &mut Mode::Inference).unwrap();
    assert_eq!(a, b);
    let ids = [START_ID, 5, 6, 7, END_ID];
    let p1 = model.decode(&ids, &a, &mut Mode::Inference).unwrap();
    let p2 = model.decode(&ids, &a, &mut Mode::Inference).unwrap();
    assert_eq!(p1, p2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p3 = model.decode(&ids, &a, &mut Mode::Training(&mut rng)).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn attention_rows_are_stochastic_and_masked() {
    let (model, f) = mini();
    let ids = [START_ID, 4, 5, END_ID, PAD_ID];
    let (_, trace) = model.trace(&f, &ids).unwrap();
    let all = trace.encoder.iter().chain(&trace.decoder_self).chain(&trace.cross);
    for w in all {
        for h in 0..w.dim().0 {
            for q in 0..w.dim().1 {
                let s: f64 = (0..w.dim().2).map(|k| w[[h, q, k]]).sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }
    let w = &trace.decoder_self[0];
    assert_eq!(w.dim(), (2, 5, 5));
    for h in 0..2 {
        for q in 0..5 {
            for k in 0..5 {
                if k > q || ids[k] == PAD_ID {
                    assert!(w[[h, q, k]] <= 1e-7);
                }
            }
        }
    }
    assert_eq!(trace.encoder[0].dim(), (1, 4, 4));
    assert_eq!(trace.cross[0].dim(), (2, 5, 4));
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let model = Transformer::new(mini_config(), 5, trial).unwrap();
        let f = random_features(&mut rng, 4, 5);
        let ctx = model.encode(&f, &mut Mode::Inference).unwrap();
        let ids: Vec<u32> = (0..5).map(|_| rng.gen_range(1..12)).collect();
        let base = model.decode(&ids, &ctx, &mut Mode::Inference).unwrap().probs;
        let t = rng.gen_range(0..4);
        let mut changed = ids.clone();
        for id in changed.iter_mut().skip(t + 1) {
            *id = rng.gen_range(0..12);
        }
        let other = model.decode(&changed, &ctx, &mut Mode::Inference).unwrap().probs;
        for i in 0..=t {
            for j in 0..12 {
                assert!((base[[i, j]] - other[[i, j]]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn cross_attention_is_live() {
    let (model, f) = mini();
    let ctx = model.encode(&f, &mut Mode::Inference).unwrap();
    let zero = EncoderContext {
        vectors: Array2::zeros(ctx.vectors.raw_dim()),
    };
    let ids = [START_ID, 4, 5];
    let a = model.decode(&ids, &ctx, &mut Mode::Inference).unwrap().probs;
    let b = model.decode(&ids, &zero, &mut Mode::Inference).unwrap().probs;
    let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn embeddings_depend_on_position_and_check_range() {
    let (model, _) = mini();
    let e = model.embed_tokens(&[4, 1, 1, 1, 1, 4]).unwrap();
    assert_ne!(e.row(0), e.row(5));
    assert!(matches!(
        model.embed_tokens(&[4, 12]),
        Err(ModelError::TokenOutOfRange { id: 12, vocab_size: 12 })
    ));
    assert!(model.embed_tokens(&[1; 7]).is_err());
}

#[test]
fn generation_stops_at_end_and_respects_length() {
    let (mut model, f) = mini();
    let ctx = model.encode(&f, &mut Mode::Inference).unwrap();
    for max_len in 1..=8 {
        let ids = model.generate_ids(&ctx, max_len).unwrap();
        assert!(ids.len() <= max_len.saturating_sub(1));
        assert!(ids.iter().all(|&id| id != PAD_ID && id != START_ID && id != END_ID));
    }
    let bias = model.params().id_of("dec.output.bias").unwrap();
    model.params_mut().get_mut(bias)[[0, END_ID as usize]] = 1e3;
    let ctx = model.encode(&f, &mut Mode::Inference).unwrap();
    assert!(model.generate_ids(&ctx, 6).unwrap().is_empty());
}

#[test]
fn empty_caption_when_end_always_wins() {
    let vocab = Vocabulary::build(&["la roca es gris"], &crate::text::TextConfig { vocab_size: 12, seq_len: 6 }).unwrap();
    let mut model = CaptionerModel::new("m", mini_config(), vocab, Arc::new(StubExtractor), 0).unwrap();
    let bias = model.transformer.params().id_of("dec.output.bias").unwrap();
    model.transformer.params_mut().get_mut(bias)[[0, END_ID as usize]] = 1e3;
    let img = PreparedImage::from_pixels(Array3::from_elem((IMAGE_SIZE, IMAGE_SIZE, 3), 0.2), "x");
    assert_eq!(model.generate_caption(&img, 6).unwrap(), "");
}

fn mean_loss(model: &Transformer, f: &Array2<f32>, ids: &[u32]) -> f64 {
    let s = model.sample_stats(f, ids, &mut Mode::Inference).unwrap();
    s.loss_sum / s.tokens as f64
}

#[test]
fn gradients_match_finite_differences() {
    let (mut model, f) = mini();
    let ids = [START_ID, 4, 7, 9, END_ID, PAD_ID];
    let mut grads = Grads::zeros_like(model.params());
    let stats = model
        .sample_loss_and_grads(&f, &ids, 1.0 / 4.0, &mut Mode::Inference, &mut grads)
        .unwrap();
    assert_eq!(stats.tokens, 4);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids_list: Vec<ParamId> = model.params().ids().collect();
    let h = 1e-5;
    let mut checked = 0;
    while checked < 20 {
        let pid = ids_list[rng.gen_range(0..ids_list.len())];
        let (r, c) = model.params().get(pid).dim();
        let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let name = model.params().name(pid).to_string();
        // Rows of the token table that never appear carry no gradient.
        if name == "dec.token_embedding" && !ids[..5].contains(&(i as u32)) {
            continue;
        }
        let orig = model.params().get(pid)[[i, j]];
        model.params_mut().get_mut(pid)[[i, j]] = orig + h;
        let plus = mean_loss(&model, &f, &ids);
        model.params_mut().get_mut(pid)[[i, j]] = orig - h;
        let minus = mean_loss(&model, &f, &ids);
        model.params_mut().get_mut(pid)[[i, j]] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(pid)[[i, j]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        assert!(rel <= 1e-3, "{name}[{i},{j}]: analytic {analytic}, numeric {numeric}");
        checked += 1;
    }
}

#[test]
fn gradients_reach_every_tensor() {
    let (model, f) = mini();
    let mut grads = Grads::zeros_like(model.params());
    model
        .sample_loss_and_grads(&f, &[START_ID, 4, 7, END_ID], 1.0, &mut Mode::Inference, &mut grads)
        .unwrap();
    for (pid, g) in model.params().ids().zip(grads.iter()) {
        assert!(g.iter().any(|v| *v != 0.0), "{} has no gradient", model.params().name(pid));
    }
}

#[test]
fn artifact_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = crate::text::TextConfig { vocab_size: 12, seq_len: 6 };
    let vocab = Vocabulary::build(&["roca gris con cuarzo"], &text).unwrap();
    let model = CaptionerModel::new("demo", mini_config(), vocab, Arc::new(StubExtractor), 4).unwrap();
    save_model(&model, dir.path()).unwrap();
    for f in [ARCHITECTURE_FILE, VOCAB_FILE, WEIGHTS_FILE] {
        assert!(dir.path().join(f).is_file());
    }
    let loaded = load_model(dir.path(), None, None).unwrap();
    assert_eq!(loaded.name, "demo");
    assert_eq!(loaded.extractor.name(), STUB_NAME);
    assert_eq!(loaded.transformer.params().checksum(), model.transformer.params().checksum());
    assert_eq!(loaded.transformer.params(), model.transformer.params());
    let img = PreparedImage::from_pixels(Array3::from_elem((IMAGE_SIZE, IMAGE_SIZE, 3), 0.6), "x");
    assert_eq!(
        loaded.generate_caption(&img, 6).unwrap(),
        model.generate_caption(&img, 6).unwrap()
    );
}

#[test]
fn loading_unknown_extractor_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = crate::text::TextConfig { vocab_size: 12, seq_len: 6 };
    let vocab = Vocabulary::build(&["roca"], &text).unwrap();
    let model = CaptionerModel::new("demo", mini_config(), vocab, Arc::new(StubExtractor), 4).unwrap();
    save_model(&model, dir.path()).unwrap();
    let arch = dir.path().join(ARCHITECTURE_FILE);
    let json = std::fs::read_to_string(&arch).unwrap().replace("\"stub\"", "\"xception\"");
    std::fs::write(&arch, json).unwrap();
    let err = load_model(dir.path(), None, None).unwrap_err();
    assert!(err.to_string().contains("xception"), "{err}");
}
