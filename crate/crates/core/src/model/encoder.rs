//! One post-norm transformer encoder layer and its backward pass.
//!
//! ```text
//! x ─┬─ multi-head attention ─ dropout ─(+)─ LayerNorm ─┬─ GELU FFN ─ dropout ─(+)─ LayerNorm ─ y
//!    └──────────────────────────────────┘               └──────────────────────────┘
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    apply_mask, dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows,
    LayerNormCache,
};
use super::params::LayerParams;
use super::scalar::Scalar;

pub(crate) struct LayerCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head attention probabilities before dropout.
    probs: Vec<Array2<F>>,
    probs_masks: Vec<Option<Array2<F>>>,
    ctx: Array2<F>,
    attn_mask: Option<Array2<F>>,
    attn_norm: LayerNormCache<F>,
    h1: Array2<F>,
    inner_pre: Array2<F>,
    inner_act: Array2<F>,
    ffn_mask: Option<Array2<F>>,
    ffn_norm: LayerNormCache<F>,
}

impl<F> LayerCache<F> {
    #[cfg(test)]
    pub(crate) fn attention_probs(&self) -> &[Array2<F>] {
        &self.probs
    }
}

fn affine<F: Scalar>(x: ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(w) + b
}

pub(crate) fn layer_forward<F: Scalar>(
    x: Array2<F>,
    key_bias: ArrayView1<'_, F>,
    p: &LayerParams<F>,
    heads: usize,
    dropout_rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<F>, LayerCache<F>) {
    let (n, h) = x.dim();
    let dh = h / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    let q = affine(x.view(), &p.query_w, &p.query_b);
    let k = affine(x.view(), &p.key_w, &p.key_b);
    let v = affine(x.view(), &p.value_w, &p.value_b);

    let mut ctx = Array2::zeros((n, h));
    let mut probs = Vec::with_capacity(heads);
    let mut probs_masks = Vec::with_capacity(heads);
    for a in 0..heads {
        let cols = s![.., a * dh..(a + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale + &key_bias;
        softmax_rows(&mut scores);
        let mask = dropout_mask(rng.as_deref_mut(), (n, n), dropout_rate);
        let head_ctx = match &mask {
            Some(m) => (&scores * m).dot(&v.slice(cols)),
            None => scores.dot(&v.slice(cols)),
        };
        ctx.slice_mut(cols).assign(&head_ctx);
        probs.push(scores);
        probs_masks.push(mask);
    }

    let mut attn_out = affine(ctx.view(), &p.output_w, &p.output_b);
    let attn_mask = dropout_mask(rng.as_deref_mut(), (n, h), dropout_rate);
    apply_mask(&mut attn_out, attn_mask.as_ref());
    attn_out += &x;
    let (h1, attn_norm) = layer_norm(attn_out.view(), p.attn_norm_gamma.view(), p.attn_norm_beta.view());

    let inner_pre = affine(h1.view(), &p.inner_w, &p.inner_b);
    let inner_act = inner_pre.mapv(gelu);
    let mut ffn_out = affine(inner_act.view(), &p.outer_w, &p.outer_b);
    let ffn_mask = dropout_mask(rng.as_deref_mut(), (n, h), dropout_rate);
    apply_mask(&mut ffn_out, ffn_mask.as_ref());
    ffn_out += &h1;
    let (y, ffn_norm) = layer_norm(ffn_out.view(), p.ffn_norm_gamma.view(), p.ffn_norm_beta.view());

    let cache = LayerCache {
        x,
        q,
        k,
        v,
        probs,
        probs_masks,
        ctx,
        attn_mask,
        attn_norm,
        h1,
        inner_pre,
        inner_act,
        ffn_mask,
        ffn_norm,
    };
    (y, cache)
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the layer input.
pub(crate) fn layer_backward<F: Scalar>(
    dy: Array2<F>,
    cache: &LayerCache<F>,
    p: &LayerParams<F>,
    grads: &mut LayerParams<F>,
    heads: usize,
) -> Array2<F> {
    let (n, h) = cache.x.dim();
    let dh = h / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    // second sub-layer
    let (d_sum2, dg, db) = layer_norm_backward(dy.view(), &cache.ffn_norm, p.ffn_norm_gamma.view());
    grads.ffn_norm_gamma += &dg;
    grads.ffn_norm_beta += &db;
    let mut d_ffn_out = d_sum2.clone();
    apply_mask(&mut d_ffn_out, cache.ffn_mask.as_ref());
    grads.outer_b += &d_ffn_out.sum_axis(Axis(0));
    grads.outer_w += &cache.inner_act.t().dot(&d_ffn_out);
    let mut d_inner = d_ffn_out.dot(&p.outer_w.t());
    Zip::from(&mut d_inner)
        .and(&cache.inner_pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    grads.inner_b += &d_inner.sum_axis(Axis(0));
    grads.inner_w += &cache.h1.t().dot(&d_inner);
    let d_h1 = d_sum2 + d_inner.dot(&p.inner_w.t());

    // first sub-layer
    let (d_sum1, dg, db) = layer_norm_backward(d_h1.view(), &cache.attn_norm, p.attn_norm_gamma.view());
    grads.attn_norm_gamma += &dg;
    grads.attn_norm_beta += &db;
    let mut d_attn = d_sum1.clone();
    apply_mask(&mut d_attn, cache.attn_mask.as_ref());
    grads.output_b += &d_attn.sum_axis(Axis(0));
    grads.output_w += &cache.ctx.t().dot(&d_attn);
    let d_ctx = d_attn.dot(&p.output_w.t());

    let mut dq = Array2::zeros((n, h));
    let mut dk = Array2::zeros((n, h));
    let mut dv = Array2::zeros((n, h));
    for a in 0..heads {
        let cols = s![.., a * dh..(a + 1) * dh];
        let probs = &cache.probs[a];
        let mask = cache.probs_masks[a].as_ref();
        let d_ctx_a = d_ctx.slice(cols);
        let used = match mask {
            Some(m) => probs * m,
            None => probs.clone(),
        };
        dv.slice_mut(cols).assign(&used.t().dot(&d_ctx_a));
        let mut d_probs = d_ctx_a.dot(&cache.v.slice(cols).t());
        if let Some(m) = mask {
            d_probs *= m;
        }
        // softmax backward: ds = p * (dp - <dp, p>)
        for (mut d_row, p_row) in d_probs.rows_mut().into_iter().zip(probs.rows()) {
            let dot = d_row.iter().zip(p_row.iter()).map(|(&d, &p)| d * p).sum::<F>();
            Zip::from(&mut d_row)
                .and(&p_row)
                .for_each(|d, &p| *d = p * (*d - dot) * scale);
        }
        dq.slice_mut(cols).assign(&d_probs.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_probs.t().dot(&cache.q.slice(cols)));
    }

    let xt = cache.x.t();
    grads.query_w += &xt.dot(&dq);
    grads.query_b += &dq.sum_axis(Axis(0));
    grads.key_w += &xt.dot(&dk);
    grads.key_b += &dk.sum_axis(Axis(0));
    grads.value_w += &xt.dot(&dv);
    grads.value_b += &dv.sum_axis(Axis(0));

    d_sum1 + dq.dot(&p.query_w.t()) + dk.dot(&p.key_w.t()) + dv.dot(&p.value_w.t())
}
