//! Layer normalization, row softmax, and exact-erf GELU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-row statistics saved by the layer-norm forward pass.
pub struct LnStats<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

/// Normalize the last axis to zero mean / unit variance, then apply the
/// per-channel affine (gamma, beta). Population variance, epsilon inside
/// the square root.
pub fn layer_norm<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, LnStats<E>)> {
    let c = x.last_dim();
    if c == 0 {
        return Err(Error::EmptyAxis);
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("gamma {:?} / beta {:?} for axis {c}", gamma.shape(), beta.shape()),
        });
    }
    let rows = x.rows();
    let inv_c = E::from_f64(1.0 / c as f64);
    let epse = E::from_f64(eps);
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![E::ZERO; x.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mut m = E::ZERO;
        for &v in row {
            m += v;
        }
        m *= inv_c;
        let mut var = E::ZERO;
        for &v in row {
            let d = v - m;
            var += d * d;
        }
        var *= inv_c;
        let rs = E::ONE / (var + epse).sqrt();
        let orow = &mut out[r * c..(r + 1) * c];
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(row).zip(gd.iter().zip(bd)) {
            *o = (v - m) * rs * g + b;
        }
        mean.push(m);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, LnStats { mean, rstd }))
}

pub fn layer_norm_backward<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &LnStats<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let c = x.last_dim();
    let rows = x.rows();
    let inv_c = E::from_f64(1.0 / c as f64);
    let gd = gamma.data();
    let mut dx = vec![E::ZERO; x.numel()];
    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for r in 0..rows {
        let xrow = &x.data()[r * c..(r + 1) * c];
        let dyrow = &dy.data()[r * c..(r + 1) * c];
        let m = stats.mean[r];
        let rs = stats.rstd[r];

        // dxhat = dy * gamma; accumulate row means needed by the input grad.
        let mut sum_dxhat = E::ZERO;
        let mut sum_dxhat_xhat = E::ZERO;
        for j in 0..c {
            let xhat = (xrow[j] - m) * rs;
            let dxhat = dyrow[j] * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += dyrow[j] * xhat;
            dbeta[j] += dyrow[j];
        }
        let mean_dxhat = sum_dxhat * inv_c;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_c;
        let dxrow = &mut dx[r * c..(r + 1) * c];
        for j in 0..c {
            let xhat = (xrow[j] - m) * rs;
            let dxhat = dyrow[j] * gd[j];
            dxrow[j] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_lastdim<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x.last_dim();
    if c == 0 {
        return Err(Error::EmptyAxis);
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        softmax_row(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place softmax of one row. Shared by the tensor op and the attention
/// kernels so both produce bitwise-identical weights.
#[inline]
pub fn softmax_row<E: Elem>(row: &mut [E]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.maximum(v);
    }
    let mut s = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = E::ONE / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of row softmax given the forward output `y`.
pub fn softmax_backward<E: Elem>(y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    let c = y.last_dim();
    let mut dx = vec![E::ZERO; y.numel()];
    for ((dxrow, yrow), dyrow) in
        dx.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c))
    {
        let mut t = E::ZERO;
        for (yv, dv) in yrow.iter().zip(dyrow) {
            t += *yv * *dv;
        }
        for ((o, &yv), &dv) in dxrow.iter_mut().zip(yrow).zip(dyrow) {
            *o = yv * (dv - t);
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact GELU: x * Phi(x) with the Gaussian CDF via erf.
pub fn gelu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(FRAC_1_SQRT_2);
    x.map(|v| v * (half * (E::ONE + (v * inv_sqrt2).erf())))
}

/// d/dx gelu = Phi(x) + x * phi(x).
pub fn gelu_backward<E: Elem>(x: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(FRAC_1_SQRT_2);
    let inv_sqrt_2pi = E::from_f64(INV_SQRT_2PI);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let phi_cdf = half * (E::ONE + (v * inv_sqrt2).erf());
            let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
            g * (phi_cdf + v * pdf)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu_backward shape")
}
