use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention scores of padded keys.
pub(crate) const MASK_BIAS: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: Scalar>(
    x: ArrayView2<'_, F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let h = F::lit(x.ncols() as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / h;
        *inv = F::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: ArrayView2<'_, F>,
    cache: &LayerNormCache<F>,
    gamma: ArrayView1<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let h = F::lit(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&d, &x)| d * x).sum::<F>() / h;
        Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
            *d = inv * (*d - mean_d - x * mean_dx);
        });
    }
    (dx, dgamma, dbeta)
}

/// Tanh approximation of GELU, as in the original BERT code.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

pub(crate) fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(v: ArrayView1<'_, F>) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

/// Inverted-dropout scale mask (entries 0 or 1/(1-rate)), or `None` when
/// dropout is inactive.
pub(crate) fn dropout_mask<F: Scalar>(
    rng: Option<&mut ChaCha8Rng>,
    shape: (usize, usize),
    rate: f64,
) -> Option<Array2<F>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    }))
}

pub(crate) fn apply_mask<F: Scalar>(x: &mut Array2<F>, mask: Option<&Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}
