//! Row-wise kernels shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &Array2<T>,
    gain: ArrayView1<T>,
    bias: ArrayView1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let (n, d) = x.dim();
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[[i, j]] = h;
            y[[i, j]] = h * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns dx and accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LayerNormCache<T>,
    gain: ArrayView1<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Array2<T> {
    let (n, d) = dy.dim();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let g = dy[[i, j]];
            let h = cache.xhat[[i, j]];
            dgain[j] += g * h;
            dbias[j] += g;
            let dh = g * gain[j];
            dxhat[j] = dh;
            mean_dxhat += dh;
            mean_dxhat_xhat += dh * h;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dxhat[j] - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `x W + b` for a row-major activation matrix.
pub(crate) fn affine<T: Real>(x: &Array2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `x^T dy` into `dw` and column sums of `dy` into `db`; returns `dy W^T`.
pub(crate) fn affine_backward<T: Real>(
    x: &Array2<T>,
    w: ArrayView2<T>,
    dy: &Array2<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Array2<T> {
    let gw = x.t().dot(dy);
    for (acc, g) in dw.iter_mut().zip(gw.iter()) {
        *acc += *g;
    }
    for (acc, g) in db.iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
        *acc += *g;
    }
    dy.dot(&w.t())
}

pub(crate) fn softmax_rows<T: Real>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Log-softmax of one row, returned as (logsumexp, probabilities).
pub(crate) fn log_softmax_row<T: Real>(row: ArrayView1<T>) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = row.iter().map(|&v| (v - lse).exp()).collect();
    (lse, probs)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
