use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::encoder::{layer_backward, layer_forward, LayerCache};
use super::ops::{apply_mask, dropout_mask, layer_norm, layer_norm_backward, log_sum_exp, softmax_in_place, LayerNormCache, MASK_BIAS};
use super::params::ModelParams;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::featurizer::EncodedWindow;

/// Whether dropout is active. Training mode draws masks from the given RNG.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl ForwardMode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Train(rng) => Some(rng),
        }
    }
}

/// Token representations `T`, one row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub t: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanLogits<F> {
    pub start: Array1<F>,
    pub end: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistribution {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

struct EmbedCache<F> {
    norm: LayerNormCache<F>,
    mask: Option<Array2<F>>,
}

fn check_ids<F: Scalar>(window: &EncodedWindow, params: &ModelParams<F>) -> Result<()> {
    let cfg = &params.config;
    if window.seq_len() > cfg.max_positions {
        return Err(Error::IdOutOfRange {
            id: window.seq_len() - 1,
            rows: cfg.max_positions,
        });
    }
    for &id in &window.token_ids {
        if id >= cfg.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                rows: cfg.vocab_size,
            });
        }
    }
    for &id in window.segment_ids.iter().chain(&window.hae_ids) {
        if id > 1 {
            return Err(Error::IdOutOfRange {
                id: id as usize,
                rows: 2,
            });
        }
    }
    Ok(())
}

/// Sum of the token, segment, position and (when enabled) history answer
/// embeddings, before layer normalization.
pub fn embedding_sum<F: Scalar>(window: &EncodedWindow, params: &ModelParams<F>) -> Result<Array2<F>> {
    check_ids(window, params)?;
    let n = window.seq_len();
    let h = params.config.hidden;
    let mut x = Array2::zeros((n, h));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&params.token_table.row(window.token_ids[i]));
        row += &params.segment_table.row(window.segment_ids[i] as usize);
        row += &params.position_table.row(i);
        if params.config.use_hae {
            row += &params.hae_table.row(window.hae_ids[i] as usize);
        }
    }
    Ok(x)
}

fn embed_cached<F: Scalar>(
    window: &EncodedWindow,
    params: &ModelParams<F>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<F>, EmbedCache<F>)> {
    let x = embedding_sum(window, params)?;
    let (mut e, norm) = layer_norm(x.view(), params.emb_norm_gamma.view(), params.emb_norm_beta.view());
    let mask = dropout_mask(rng, e.dim(), params.config.dropout_rate);
    apply_mask(&mut e, mask.as_ref());
    Ok((e, EmbedCache { norm, mask }))
}

pub fn embed<F: Scalar>(
    window: &EncodedWindow,
    params: &ModelParams<F>,
    mut mode: ForwardMode<'_>,
) -> Result<Array2<F>> {
    embed_cached(window, params, mode.rng()).map(|(e, _)| e)
}

fn key_bias<F: Scalar>(attention_mask: &[u8]) -> Array1<F> {
    attention_mask
        .iter()
        .map(|&m| if m == 1 { F::zero() } else { F::lit(MASK_BIAS) })
        .collect()
}

fn encoder_cached<F: Scalar>(
    embeddings: Array2<F>,
    attention_mask: &[u8],
    params: &ModelParams<F>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<F>, Vec<LayerCache<F>>)> {
    let bias = key_bias::<F>(attention_mask);
    let cfg = &params.config;
    let mut x = embeddings;
    let mut caches = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (y, cache) = layer_forward(x, bias.view(), layer, cfg.heads, cfg.dropout_rate, rng.as_deref_mut());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {i}")));
        }
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

pub fn encoder_forward<F: Scalar>(
    embeddings: Array2<F>,
    attention_mask: &[u8],
    params: &ModelParams<F>,
    mut mode: ForwardMode<'_>,
) -> Result<EncoderOutput<F>> {
    encoder_cached(embeddings, attention_mask, params, mode.rng()).map(|(t, _)| EncoderOutput { t })
}

pub fn span_logits<F: Scalar>(t: &EncoderOutput<F>, params: &ModelParams<F>) -> SpanLogits<F> {
    SpanLogits {
        start: t.t.dot(&params.span_start),
        end: t.t.dot(&params.span_end),
    }
}

fn probabilities<F: Scalar>(logits: ArrayView1<'_, F>) -> Vec<f64> {
    let mut v: Vec<f64> = logits.iter().map(|x| x.widen()).collect();
    softmax_in_place(&mut v);
    v
}

pub fn span_distribution<F: Scalar>(logits: &SpanLogits<F>) -> SpanDistribution {
    SpanDistribution {
        start_probs: probabilities(logits.start.view()),
        end_probs: probabilities(logits.end.view()),
    }
}

pub fn cross_entropy<F: Scalar>(logits: ArrayView1<'_, F>, label: usize) -> F {
    log_sum_exp(logits) - logits[label]
}

/// Mean of the start and end cross entropies.
pub fn span_loss<F: Scalar>(logits: &SpanLogits<F>, labels: Option<(usize, usize)>) -> Result<F> {
    let (s, e) = labels.ok_or(Error::DroppedLabel)?;
    let n = logits.start.len();
    if s >= n || e >= n {
        return Err(Error::IdOutOfRange { id: s.max(e), rows: n });
    }
    let half = F::lit(0.5);
    Ok(half * (cross_entropy(logits.start.view(), s) + cross_entropy(logits.end.view(), e)))
}

/// Eval-mode logits for one window.
pub fn predict_logits<F: Scalar>(window: &EncodedWindow, params: &ModelParams<F>) -> Result<SpanLogits<F>> {
    let e = embed(window, params, ForwardMode::Eval)?;
    let t = encoder_forward(e, &window.attention_mask, params, ForwardMode::Eval)?;
    Ok(span_logits(&t, params))
}

/// Eval-mode mean loss over windows.
pub fn batch_loss<F: Scalar>(windows: &[&EncodedWindow], params: &ModelParams<F>) -> Result<F> {
    let mut total = F::zero();
    for w in windows {
        total += span_loss(&predict_logits(w, params)?, w.labels)?;
    }
    Ok(total / F::lit(windows.len() as f64))
}

fn softmax_grad<F: Scalar>(logits: ArrayView1<'_, F>, label: usize, weight: F) -> Array1<F> {
    let lse = log_sum_exp(logits);
    let mut g = logits.mapv(|x| (x - lse).exp() * weight);
    g[label] -= weight;
    g
}

/// Loss of one window and the gradient of `weight * loss`.
fn window_forward_backward<F: Scalar>(
    window: &EncodedWindow,
    params: &ModelParams<F>,
    mut rng: Option<ChaCha8Rng>,
    weight: F,
) -> Result<(F, ModelParams<F>)> {
    let (s_label, e_label) = window.labels.ok_or(Error::DroppedLabel)?;
    let (emb, emb_cache) = embed_cached(window, params, rng.as_mut())?;
    let (t, caches) = encoder_cached(emb, &window.attention_mask, params, rng.as_mut())?;
    let out = EncoderOutput { t };
    let logits = span_logits(&out, params);
    let loss = span_loss(&logits, window.labels)?;

    let mut grads = params.zeros_like();
    let half = F::lit(0.5) * weight;
    let d_start = softmax_grad(logits.start.view(), s_label, half);
    let d_end = softmax_grad(logits.end.view(), e_label, half);
    grads.span_start = out.t.t().dot(&d_start);
    grads.span_end = out.t.t().dot(&d_end);
    let mut dx = d_start.insert_axis(Axis(1)).dot(&params.span_start.view().insert_axis(Axis(0)))
        + d_end.insert_axis(Axis(1)).dot(&params.span_end.view().insert_axis(Axis(0)));

    let heads = params.config.heads;
    for ((layer, cache), layer_grads) in params
        .layers
        .iter()
        .zip(&caches)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dx = layer_backward(dx, cache, layer, layer_grads, heads);
    }

    apply_mask(&mut dx, emb_cache.mask.as_ref());
    let (d_sum, dg, db) = layer_norm_backward(dx.view(), &emb_cache.norm, params.emb_norm_gamma.view());
    grads.emb_norm_gamma = dg;
    grads.emb_norm_beta = db;
    for (i, row) in d_sum.rows().into_iter().enumerate() {
        let mut tok = grads.token_table.row_mut(window.token_ids[i]);
        tok += &row;
        let mut seg = grads.segment_table.row_mut(window.segment_ids[i] as usize);
        seg += &row;
        let mut pos = grads.position_table.row_mut(i);
        pos += &row;
        if params.config.use_hae {
            let mut hae = grads.hae_table.row_mut(window.hae_ids[i] as usize);
            hae += &row;
        }
    }
    Ok((loss, grads))
}

/// Mean span loss over the batch and its exact gradient with respect to every
/// parameter. With `rng`, dropout is active and one mask seed per window is
/// drawn from it in batch order; windows are then processed in parallel and
/// reduced in batch order, so results do not depend on thread scheduling.
pub fn forward_backward<F: Scalar>(
    windows: &[&EncodedWindow],
    params: &ModelParams<F>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(F, ModelParams<F>)> {
    if windows.is_empty() {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let seeds: Vec<Option<u64>> = match rng {
        Some(rng) => windows.iter().map(|_| Some(rng.next_u64())).collect(),
        None => vec![None; windows.len()],
    };
    let weight = F::one() / F::lit(windows.len() as f64);
    let parts = windows
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(w, seed)| window_forward_backward(w, params, seed.map(ChaCha8Rng::seed_from_u64), weight))
        .collect::<Result<Vec<_>>>()?;

    let mut parts = parts.into_iter();
    let (first_loss, mut grads) = parts.next().expect("non-empty batch");
    let mut loss = first_loss;
    for (l, g) in parts {
        loss += l;
        grads.add_assign(&g);
    }
    let loss = loss * weight;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((loss, grads))
}

#[cfg(test)]
pub(crate) fn attention_probs<F: Scalar>(window: &EncodedWindow, params: &ModelParams<F>) -> Vec<Vec<Array2<F>>> {
    let (e, _) = embed_cached(window, params, None).unwrap();
    let (_, caches) = encoder_cached(e, &window.attention_mask, params, None).unwrap();
    caches.iter().map(|c| c.attention_probs().to_vec()).collect()
}
