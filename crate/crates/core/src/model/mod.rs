//! BERT-style extractive span model with a history answer embedding layer.
//!
//! Input row `i` is `LayerNorm(token[id_i] + segment[seg_i] + position[i] +
//! hae[hae_i])`; a post-norm transformer encoder produces `T`, and two
//! vectors score every position as an answer start or end. All gradients are
//! derived by hand.

mod encoder;
mod network;
mod ops;
mod params;
mod scalar;

pub use network::{
    batch_loss, cross_entropy, embed, embedding_sum, encoder_forward, forward_backward,
    predict_logits, span_distribution, span_logits, span_loss, EncoderOutput, ForwardMode,
    SpanDistribution, SpanLogits,
};
pub use params::{decays, init_params, init_shape, LayerParams, ModelConfig, ModelParams};
pub use scalar::{DType, Scalar};

#[cfg(test)]
pub(crate) fn attention_probs<F: Scalar>(
    window: &crate::featurizer::EncodedWindow,
    params: &ModelParams<F>,
) -> Vec<Vec<ndarray::Array2<F>>> {
    network::attention_probs(window, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::EncodedWindow;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            hidden: 8,
            layers,
            heads: 2,
            ffn_size: 16,
            max_positions: 12,
            dropout_rate: 0.0,
            use_hae: true,
            seed: 3,
        }
    }

    pub(crate) fn window(seq: usize, real: usize, seed: u64) -> EncodedWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = 2;
        let mut token_ids = vec![0; seq];
        let mut segment_ids = vec![0; seq];
        let mut hae_ids = vec![0; seq];
        let mut attention_mask = vec![0; seq];
        for i in 0..real {
            token_ids[i] = rng.gen_range(1..30);
            attention_mask[i] = 1;
            if i > q {
                segment_ids[i] = 1;
                hae_ids[i] = rng.gen_range(0..2);
            }
        }
        EncodedWindow {
            dialog_id: "w".into(),
            turn_index: 1,
            window_index: 0,
            token_ids,
            segment_ids,
            hae_ids,
            attention_mask,
            labels: Some((q + 2, real - 2)),
            passage_token_offset: 0,
            passage_seq_start: q + 1,
            char_spans: vec![(0, 1); real - q - 2],
        }
    }

    #[test]
    fn init_is_deterministic_and_hae_zero() {
        let a: ModelParams<f32> = init_params(&tiny(2)).unwrap();
        let b: ModelParams<f32> = init_params(&tiny(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.hae_table.iter().all(|&v| v == 0.0));
        assert!(a.token_table.iter().all(|&v| v.abs() <= 0.04));
        assert!(a.layers[0].query_b.iter().all(|&v| v == 0.0));
        assert!(a.layers[1].attn_norm_gamma.iter().all(|&v| v == 1.0));
        let mut other = tiny(2);
        other.seed = 4;
        assert_ne!(a, init_params::<f32>(&other).unwrap());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = tiny(1);
        cfg.hidden = 16;
        cfg.heads = 3;
        assert!(init_params::<f32>(&cfg).is_err());
    }

    #[test]
    fn tensor_names_unique_and_ordered() {
        let mut p: ModelParams<f64> = init_params(&tiny(2)).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(!decays("layer0.attn.query.bias"));
        assert!(!decays("embeddings.norm.gamma"));
        assert!(decays("embeddings.hae"));
        assert!(decays("span.start"));
    }

    #[test]
    fn zero_hae_table_is_invisible() {
        let p: ModelParams<f64> = init_params(&tiny(1)).unwrap();
        let w = window(12, 9, 1);
        let mut no_hist = w.clone();
        no_hist.hae_ids.fill(0);
        let a = embed(&w, &p, ForwardMode::Eval).unwrap();
        let b = embed(&no_hist, &p, ForwardMode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hae_flip_is_additive_on_one_row() {
        let mut p: ModelParams<f64> = init_params(&tiny(1)).unwrap();
        p.hae_table = array![
            [0.1, -0.2, 0.3, 0.0, 0.5, 0.1, 0.0, -0.1],
            [0.4, 0.4, -0.3, 0.2, 0.0, 0.0, 0.7, 0.2]
        ];
        let mut w = window(12, 9, 2);
        w.hae_ids[5] = 0;
        let base = embedding_sum(&w, &p).unwrap();
        w.hae_ids[5] = 1;
        let flipped = embedding_sum(&w, &p).unwrap();
        let delta = &flipped - &base;
        let expected = &p.hae_table.row(1) - &p.hae_table.row(0);
        for (i, row) in delta.rows().into_iter().enumerate() {
            if i == 5 {
                for (d, e) in row.iter().zip(expected.iter()) {
                    assert!((d - e).abs() < 1e-12);
                }
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "row {i} changed");
            }
        }
    }

    #[test]
    fn all_pad_window_is_finite() {
        let p: ModelParams<f32> = init_params(&tiny(2)).unwrap();
        let mut w = window(12, 4, 3);
        w.token_ids.fill(0);
        w.attention_mask.fill(0);
        w.segment_ids.fill(0);
        w.hae_ids.fill(0);
        let e = embed(&w, &p, ForwardMode::Eval).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let logits = predict_logits(&w, &p).unwrap();
        assert!(logits.start.iter().chain(logits.end.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let p: ModelParams<f32> = init_params(&tiny(1)).unwrap();
        let mut w = window(12, 6, 4);
        w.token_ids[1] = 30;
        assert!(matches!(
            embed(&w, &p, ForwardMode::Eval),
            Err(crate::error::Error::IdOutOfRange { id: 30, rows: 30 })
        ));
    }

    #[test]
    fn zero_layers_is_identity() {
        let p: ModelParams<f64> = init_params(&tiny(0)).unwrap();
        let w = window(12, 8, 5);
        let e = embed(&w, &p, ForwardMode::Eval).unwrap();
        let t = encoder_forward(e.clone(), &w.attention_mask, &p, ForwardMode::Eval).unwrap();
        assert_eq!(t.t, e);
    }

    #[test]
    fn padded_keys_get_no_attention() {
        let p: ModelParams<f32> = init_params(&tiny(2)).unwrap();
        let w = window(12, 7, 6);
        for layer in attention_probs(&w, &p) {
            for head in layer {
                for row in head.rows() {
                    for (j, &prob) in row.iter().enumerate() {
                        if w.attention_mask[j] == 0 {
                            assert!(prob <= 1e-6, "key {j} weight {prob}");
                        }
                    }
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn eval_is_deterministic_train_is_not_identity() {
        let mut cfg = tiny(2);
        cfg.dropout_rate = 0.3;
        let p: ModelParams<f32> = init_params(&cfg).unwrap();
        let w = window(12, 10, 7);
        assert_eq!(predict_logits(&w, &p).unwrap(), predict_logits(&w, &p).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = embed(&w, &p, ForwardMode::Train(&mut rng)).unwrap();
        let eval = embed(&w, &p, ForwardMode::Eval).unwrap();
        assert_ne!(train, eval);
    }

    fn hidden2() -> ModelParams<f64> {
        let cfg = ModelConfig {
            vocab_size: 4,
            hidden: 2,
            layers: 0,
            heads: 1,
            ffn_size: 2,
            max_positions: 4,
            dropout_rate: 0.0,
            use_hae: true,
            seed: 0,
        };
        init_params(&cfg).unwrap()
    }

    #[test]
    fn span_logits_dot_products() {
        let mut p = hidden2();
        p.span_start = array![1.0, 0.0];
        let t = EncoderOutput {
            t: array![[3.0, 9.0], [1.0, 4.0]],
        };
        assert_eq!(span_logits(&t, &p).start, array![3.0, 1.0]);

        p.span_start = Array1::zeros(2);
        let logits = span_logits(&t, &p);
        let dist = span_distribution(&logits);
        assert!(dist.start_probs.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn span_softmax_shift_invariant() {
        let mut p = hidden2();
        p.span_start = array![0.6, -0.8];
        let t = array![[3.0, 9.0], [1.0, 4.0], [-2.0, 0.5]];
        let c = 2.5;
        let shifted = &t + &(&p.span_start * c);
        let a = span_logits(&EncoderOutput { t: t.clone() }, &p);
        let b = span_logits(&EncoderOutput { t: shifted }, &p);
        let norm2 = p.span_start.dot(&p.span_start);
        for (x, y) in a.start.iter().zip(b.start.iter()) {
            assert!((y - x - c * norm2).abs() < 1e-12);
        }
        let (da, db) = (span_distribution(&a), span_distribution(&b));
        for (x, y) in da.start_probs.iter().zip(&db.start_probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn span_loss_values() {
        let uniform = SpanLogits {
            start: Array1::<f64>::zeros(384),
            end: Array1::zeros(384),
        };
        let l = span_loss(&uniform, Some((3, 9))).unwrap();
        assert!((l - 384f64.ln()).abs() < 1e-12);
        assert!((l - 5.9506).abs() < 1e-4);

        let mut sharp = uniform.clone();
        sharp.start[3] = 1e3;
        sharp.end[9] = 1e3;
        assert!(span_loss(&sharp, Some((3, 9))).unwrap() < 1e-12);

        // start CE 1, end CE 3
        let two = |ce: f64| SpanLogits {
            start: array![0.0, (ce.exp() - 1.0).ln()],
            end: array![0.0, 0.0],
        }
        .start;
        let logits = SpanLogits {
            start: two(1.0),
            end: two(3.0),
        };
        assert!((cross_entropy(logits.start.view(), 0) - 1.0).abs() < 1e-12);
        assert!((span_loss(&logits, Some((0, 0))).unwrap() - 2.0).abs() < 1e-12);

        assert!(matches!(
            span_loss(&logits, None),
            Err(crate::error::Error::DroppedLabel)
        ));
    }

    #[test]
    fn unused_hae_row_gets_zero_gradient() {
        let p: ModelParams<f64> = init_params(&tiny(2)).unwrap();
        let mut w = window(12, 10, 8);
        w.hae_ids.fill(0);
        let (_, g) = forward_backward(&[&w], &p, None).unwrap();
        assert!(g.hae_table.row(1).iter().all(|&v| v == 0.0));
        assert!(g.hae_table.row(0).iter().any(|&v| v != 0.0));
        // unused vocabulary rows too
        let used: std::collections::HashSet<usize> = w.token_ids.iter().copied().collect();
        for id in (0..30).filter(|i| !used.contains(i)) {
            assert!(g.token_table.row(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hae_disabled_gets_no_gradient() {
        let mut cfg = tiny(1);
        cfg.use_hae = false;
        let p: ModelParams<f64> = init_params(&cfg).unwrap();
        let w = window(12, 10, 9);
        let (_, g) = forward_backward(&[&w], &p, None).unwrap();
        assert!(g.hae_table.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_window_keeps_mean() {
        let p: ModelParams<f64> = init_params(&tiny(2)).unwrap();
        let w = window(12, 10, 10);
        let (l1, g1) = forward_backward(&[&w], &p, None).unwrap();
        let (l2, g2) = forward_backward(&[&w, &w], &p, None).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dropped_window_rejected_by_backward() {
        let p: ModelParams<f64> = init_params(&tiny(1)).unwrap();
        let mut w = window(12, 10, 11);
        w.labels = None;
        assert!(forward_backward(&[&w], &p, None).is_err());
    }

    #[test]
    fn cast_roundtrip_preserves_shapes() {
        let p: ModelParams<f32> = init_params(&tiny(1)).unwrap();
        let q: ModelParams<f64> = p.cast();
        let back: ModelParams<f32> = q.cast();
        assert_eq!(p, back);
        assert_eq!(p.num_params(), q.num_params());
    }
}
