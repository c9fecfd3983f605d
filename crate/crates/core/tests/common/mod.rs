//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use convqa::featurizer::EncodedWindow;
use convqa::model::{predict_logits, ModelConfig, ModelParams};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error of one tensor group and where it occurred.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub index: usize,
}

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// `lse(a) - lse(b)` without cancellation: `ln(sum_i softmax(b)_i * e^(a_i - b_i))`.
fn lse_difference(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = b.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mixed: f64 = weights
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(w, (&x, &y))| w / total * (x - y).exp_m1())
        .sum();
    mixed.ln_1p()
}

/// `L(plus) - L(minus)` of the mean span loss, evaluated from the two sets
/// of logits directly so that the large common part of both losses cancels
/// exactly instead of through rounding.
pub fn loss_difference(plus: &ModelParams<f64>, minus: &ModelParams<f64>, windows: &[&EncodedWindow]) -> f64 {
    let mut total = 0.0;
    for w in windows {
        let (s, e) = w.labels.expect("labelled window");
        let a = predict_logits(w, plus).unwrap();
        let b = predict_logits(w, minus).unwrap();
        let d_start = lse_difference(&a.start, &b.start) - (a.start[s] - b.start[s]);
        let d_end = lse_difference(&a.end, &b.end) - (a.end[e] - b.end[e]);
        total += 0.5 * (d_start + d_end);
    }
    total / windows.len() as f64
}

/// Compares `grads` against central differences of the eval-mode batch loss
/// for every element of every tensor.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    grads: &ModelParams<f64>,
    windows: &[&EncodedWindow],
    step: f64,
) -> Vec<GroupCheck> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut out = Vec::new();
    let mut plus = params.clone();
    let mut minus = params.clone();
    for (g, name) in names.iter().enumerate() {
        let len = analytic[g].len();
        let mut worst = GroupCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            index: 0,
        };
        for i in 0..len {
            let original = nth(params, g, i);
            set_nth(&mut plus, g, i, original + step);
            set_nth(&mut minus, g, i, original - step);
            let numeric = loss_difference(&plus, &minus, windows) / (2.0 * step);
            set_nth(&mut plus, g, i, original);
            set_nth(&mut minus, g, i, original);
            let a = analytic[g][i];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err {
                worst = GroupCheck {
                    name: name.clone(),
                    max_rel_err: err,
                    analytic: a,
                    numeric,
                    index: i,
                };
            }
        }
        out.push(worst);
    }
    out
}

fn nth(p: &ModelParams<f64>, group: usize, i: usize) -> f64 {
    *p.tensors()[group].1.iter().nth(i).unwrap()
}

fn set_nth(p: &mut ModelParams<f64>, group: usize, i: usize, v: f64) {
    let mut tensors = p.tensors_mut();
    *tensors[group].1.iter_mut().nth(i).unwrap() = v;
}

/// Random window with passage positions `q_len + 2 ..` and padding at the end.
pub fn random_window(rng: &mut ChaCha8Rng, config: &ModelConfig, seq: usize, q_len: usize, pad: usize) -> EncodedWindow {
    let used = seq - pad;
    let passage_len = used - q_len - 3;
    let start = q_len + 2;
    let mut segment_ids = vec![0u8; seq];
    segment_ids[start..used].fill(1);
    let mut attention_mask = vec![0u8; seq];
    attention_mask[..used].fill(1);
    let s = start + rng.gen_range(0..passage_len);
    let e = (s + rng.gen_range(0..3)).min(start + passage_len - 1);
    EncodedWindow {
        dialog_id: "g".into(),
        turn_index: 1,
        window_index: 0,
        token_ids: (0..seq).map(|_| rng.gen_range(0..config.vocab_size)).collect(),
        segment_ids,
        hae_ids: (0..seq).map(|i| u8::from(i >= start && rng.gen_bool(0.3))).collect(),
        attention_mask,
        labels: Some((s, e)),
        passage_token_offset: 0,
        passage_seq_start: start,
        char_spans: (0..passage_len).map(|i| (i, i + 1)).collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
