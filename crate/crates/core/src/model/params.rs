use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    /// Adds the two-row history answer embedding table into the input sum.
    /// Disabled, the network is the plain history-free baseline.
    pub use_hae: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// BERT-Base sized configuration for a given vocabulary.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn_size: 3072,
            max_positions: 512,
            dropout_rate: 0.1,
            use_hae: true,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub query_w: Array2<F>,
    pub query_b: Array1<F>,
    pub key_w: Array2<F>,
    pub key_b: Array1<F>,
    pub value_w: Array2<F>,
    pub value_b: Array1<F>,
    pub output_w: Array2<F>,
    pub output_b: Array1<F>,
    pub attn_norm_gamma: Array1<F>,
    pub attn_norm_beta: Array1<F>,
    pub inner_w: Array2<F>,
    pub inner_b: Array1<F>,
    pub outer_w: Array2<F>,
    pub outer_b: Array1<F>,
    pub ffn_norm_gamma: Array1<F>,
    pub ffn_norm_beta: Array1<F>,
}

/// Every learnable array of the network. Gradients and optimizer moments use
/// the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub token_table: Array2<F>,
    pub segment_table: Array2<F>,
    pub position_table: Array2<F>,
    /// Row 0 is E_N (not in a history answer), row 1 is E_H.
    pub hae_table: Array2<F>,
    pub emb_norm_gamma: Array1<F>,
    pub emb_norm_beta: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub span_start: Array1<F>,
    pub span_end: Array1<F>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn sample(&mut self) -> f64 {
        // truncated at two standard deviations
        loop {
            let v = self.normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                return v;
            }
        }
    }

    fn matrix<F: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || F::lit(self.sample()))
    }

    fn vector<F: Scalar>(&mut self, n: usize) -> Array1<F> {
        Array1::from_shape_simple_fn(n, || F::lit(self.sample()))
    }
}

pub fn init_params<F: Scalar>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        normal: Normal::new(0.0, INIT_STD).expect("valid normal"),
    };
    let h = config.hidden;
    let f = config.ffn_size;
    let ones = || Array1::from_elem(h, F::one());
    let zeros = |n| Array1::zeros(n);

    let token_table = init.matrix(config.vocab_size, h);
    let segment_table = init.matrix(2, h);
    let position_table = init.matrix(config.max_positions, h);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            query_w: init.matrix(h, h),
            query_b: zeros(h),
            key_w: init.matrix(h, h),
            key_b: zeros(h),
            value_w: init.matrix(h, h),
            value_b: zeros(h),
            output_w: init.matrix(h, h),
            output_b: zeros(h),
            attn_norm_gamma: ones(),
            attn_norm_beta: zeros(h),
            inner_w: init.matrix(h, f),
            inner_b: zeros(f),
            outer_w: init.matrix(f, h),
            outer_b: zeros(h),
            ffn_norm_gamma: ones(),
            ffn_norm_beta: zeros(h),
        })
        .collect();
    let span_start = init.vector(h);
    let span_end = init.vector(h);

    Ok(ModelParams {
        config: *config,
        token_table,
        segment_table,
        position_table,
        hae_table: Array2::zeros((2, h)),
        emb_norm_gamma: ones(),
        emb_norm_beta: zeros(h),
        layers,
        span_start,
        span_end,
    })
}

/// Whether decoupled weight decay applies to the named tensor. Biases and
/// layer-norm parameters are excluded.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

macro_rules! tensor_list {
    ($self:ident, $view:ident, $iter:ident) => {{
        let mut out = Vec::new();
        out.push(("embeddings.token".to_string(), $self.token_table.$view().into_dyn()));
        out.push(("embeddings.segment".to_string(), $self.segment_table.$view().into_dyn()));
        out.push(("embeddings.position".to_string(), $self.position_table.$view().into_dyn()));
        out.push(("embeddings.hae".to_string(), $self.hae_table.$view().into_dyn()));
        out.push(("embeddings.norm.gamma".to_string(), $self.emb_norm_gamma.$view().into_dyn()));
        out.push(("embeddings.norm.beta".to_string(), $self.emb_norm_beta.$view().into_dyn()));
        for (i, l) in $self.layers.$iter().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("attn.query.weight"), l.query_w.$view().into_dyn()));
            out.push((p("attn.query.bias"), l.query_b.$view().into_dyn()));
            out.push((p("attn.key.weight"), l.key_w.$view().into_dyn()));
            out.push((p("attn.key.bias"), l.key_b.$view().into_dyn()));
            out.push((p("attn.value.weight"), l.value_w.$view().into_dyn()));
            out.push((p("attn.value.bias"), l.value_b.$view().into_dyn()));
            out.push((p("attn.output.weight"), l.output_w.$view().into_dyn()));
            out.push((p("attn.output.bias"), l.output_b.$view().into_dyn()));
            out.push((p("attn_norm.gamma"), l.attn_norm_gamma.$view().into_dyn()));
            out.push((p("attn_norm.beta"), l.attn_norm_beta.$view().into_dyn()));
            out.push((p("ffn.inner.weight"), l.inner_w.$view().into_dyn()));
            out.push((p("ffn.inner.bias"), l.inner_b.$view().into_dyn()));
            out.push((p("ffn.outer.weight"), l.outer_w.$view().into_dyn()));
            out.push((p("ffn.outer.bias"), l.outer_b.$view().into_dyn()));
            out.push((p("ffn_norm.gamma"), l.ffn_norm_gamma.$view().into_dyn()));
            out.push((p("ffn_norm.beta"), l.ffn_norm_beta.$view().into_dyn()));
        }
        out.push(("span.start".to_string(), $self.span_start.$view().into_dyn()));
        out.push(("span.end".to_string(), $self.span_end.$view().into_dyn()));
        out
    }};
}

impl<F: Scalar> ModelParams<F> {
    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        tensor_list!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        tensor_list!(self, view_mut, iter_mut)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.widen() * v.widen()).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut out: ModelParams<G> = init_shape(&self.config);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = G::lit(s.widen()));
        }
        out
    }
}

/// Zero-filled parameters with the shapes implied by `config`.
pub fn init_shape<F: Scalar>(config: &ModelConfig) -> ModelParams<F> {
    let h = config.hidden;
    let f = config.ffn_size;
    let m = |r, c| Array2::zeros((r, c));
    let v = |n| Array1::zeros(n);
    ModelParams {
        config: *config,
        token_table: m(config.vocab_size, h),
        segment_table: m(2, h),
        position_table: m(config.max_positions, h),
        hae_table: m(2, h),
        emb_norm_gamma: v(h),
        emb_norm_beta: v(h),
        layers: (0..config.layers)
            .map(|_| LayerParams {
                query_w: m(h, h),
                query_b: v(h),
                key_w: m(h, h),
                key_b: v(h),
                value_w: m(h, h),
                value_b: v(h),
                output_w: m(h, h),
                output_b: v(h),
                attn_norm_gamma: v(h),
                attn_norm_beta: v(h),
                inner_w: m(h, f),
                inner_b: v(f),
                outer_w: m(f, h),
                outer_b: v(h),
                ffn_norm_gamma: v(h),
                ffn_norm_beta: v(h),
            })
            .collect(),
        span_start: v(h),
        span_end: v(h),
    }
}
