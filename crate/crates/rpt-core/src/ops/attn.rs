//! Windowed multi-head attention core.
//!
//! Operates on (nw * seq, C) stacks of per-window token sequences: scores and
//! value aggregation are block-diagonal per window and per head. The same
//! routine serves the global dynamic-token stage (nw = 1) and the per-window
//! stage. Scores use a 1/sqrt(head_dim) scale folded into the score write.
//!
//! The multiply counter convention covers score dot products and value
//! aggregation only (2 * seq^2 * head_dim per window and head); the scalar
//! rescale, softmax, and residual adds are not counted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops::linalg::{axpy, dot};
use crate::ops::norm::softmax_row;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub windows: usize,
    pub seq: usize,
    pub heads: usize,
    pub channels: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Multiply-accumulate count for scores plus aggregation.
    pub fn mac_count(&self) -> u64 {
        2 * self.windows as u64 * (self.seq as u64 * self.seq as u64) * self.channels as u64
    }
}

pub fn check_dims<E: Elem>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, d: &AttnDims) -> Result<()> {
    let rows = d.windows * d.seq;
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 || t.shape()[0] != rows || t.shape()[1] != d.channels {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: format!("{name} is {:?}, expected [{rows}, {}]", t.shape(), d.channels),
            });
        }
    }
    if d.heads == 0 || d.channels % d.heads != 0 {
        return Err(Error::NonDivisible {
            what: "attention channels per head",
            extent: d.channels,
            divisor: d.heads.max(1),
        });
    }
    Ok(())
}

#[inline]
fn gather_block<E: Elem>(src: &[E], d: &AttnDims, win: usize, head: usize, out: &mut [E]) {
    let dh = d.head_dim();
    for i in 0..d.seq {
        let row = (win * d.seq + i) * d.channels + head * dh;
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

#[inline]
fn scatter_block<E: Elem>(dst: &mut [E], d: &AttnDims, win: usize, head: usize, blk: &[E]) {
    let dh = d.head_dim();
    for i in 0..d.seq {
        let row = (win * d.seq + i) * d.channels + head * dh;
        dst[row..row + dh].copy_from_slice(&blk[i * dh..(i + 1) * dh]);
    }
}

#[inline]
fn scatter_block_add<E: Elem>(dst: &mut [E], d: &AttnDims, win: usize, head: usize, blk: &[E]) {
    let dh = d.head_dim();
    for i in 0..d.seq {
        let row = (win * d.seq + i) * d.channels + head * dh;
        for (o, &b) in dst[row..row + dh].iter_mut().zip(&blk[i * dh..(i + 1) * dh]) {
            *o += b;
        }
    }
}

/// Forward pass. When `save_weights` is set, the post-softmax weights are
/// returned as a (windows, heads, seq, seq) buffer for backward and probing.
pub fn attention_forward<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    d: &AttnDims,
    save_weights: bool,
) -> Result<(Tensor<E>, Option<Vec<E>>)> {
    check_dims(q, k, v, d)?;
    let dh = d.head_dim();
    let s = d.seq;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());

    let mut out = vec![E::ZERO; q.numel()];
    let mut weights = if save_weights {
        Some(vec![E::ZERO; d.windows * d.heads * s * s])
    } else {
        None
    };

    let mut qb = vec![E::ZERO; s * dh];
    let mut kb = vec![E::ZERO; s * dh];
    let mut vb = vec![E::ZERO; s * dh];
    let mut ob = vec![E::ZERO; s * dh];
    let mut sc = vec![E::ZERO; s * s];

    for win in 0..d.windows {
        for head in 0..d.heads {
            gather_block(q.data(), d, win, head, &mut qb);
            gather_block(k.data(), d, win, head, &mut kb);
            gather_block(v.data(), d, win, head, &mut vb);

            for i in 0..s {
                let qrow = &qb[i * dh..(i + 1) * dh];
                for m in 0..s {
                    sc[i * s + m] = dot(qrow, &kb[m * dh..(m + 1) * dh]) * scale;
                }
            }
            for row in sc.chunks_mut(s) {
                softmax_row(row);
            }
            ob.fill(E::ZERO);
            for i in 0..s {
                let orow = &mut ob[i * dh..(i + 1) * dh];
                for m in 0..s {
                    axpy(sc[i * s + m], &vb[m * dh..(m + 1) * dh], orow);
                }
            }
            scatter_block(&mut out, d, win, head, &ob);
            if let Some(wbuf) = weights.as_mut() {
                let base = (win * d.heads + head) * s * s;
                wbuf[base..base + s * s].copy_from_slice(&sc);
            }
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, weights))
}

/// Backward pass from saved weights. Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    weights: &[E],
    dy: &Tensor<E>,
    d: &AttnDims,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let dh = d.head_dim();
    let s = d.seq;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());

    let mut dq = vec![E::ZERO; q.numel()];
    let mut dk = vec![E::ZERO; q.numel()];
    let mut dv = vec![E::ZERO; q.numel()];

    let mut qb = vec![E::ZERO; s * dh];
    let mut kb = vec![E::ZERO; s * dh];
    let mut vb = vec![E::ZERO; s * dh];
    let mut dob = vec![E::ZERO; s * dh];
    let mut dvb = vec![E::ZERO; s * dh];
    let mut dqb = vec![E::ZERO; s * dh];
    let mut dkb = vec![E::ZERO; s * dh];
    let mut dsc = vec![E::ZERO; s * s];

    for win in 0..d.windows {
        for head in 0..d.heads {
            gather_block(q.data(), d, win, head, &mut qb);
            gather_block(k.data(), d, win, head, &mut kb);
            gather_block(v.data(), d, win, head, &mut vb);
            gather_block(dy.data(), d, win, head, &mut dob);
            let wblk = &weights[(win * d.heads + head) * s * s..(win * d.heads + head + 1) * s * s];

            // dv = W^T * dOut
            dvb.fill(E::ZERO);
            for i in 0..s {
                let drow = &dob[i * dh..(i + 1) * dh];
                for m in 0..s {
                    axpy(wblk[i * s + m], drow, &mut dvb[m * dh..(m + 1) * dh]);
                }
            }

            // dW[i,m] = dOut_i . v_m; then softmax backward and rescale.
            for i in 0..s {
                let drow = &dob[i * dh..(i + 1) * dh];
                for m in 0..s {
                    dsc[i * s + m] = dot(drow, &vb[m * dh..(m + 1) * dh]);
                }
                let wrow = &wblk[i * s..(i + 1) * s];
                let dsrow = &mut dsc[i * s..(i + 1) * s];
                let mut t = E::ZERO;
                for (wv, dv_) in wrow.iter().zip(dsrow.iter()) {
                    t += *wv * *dv_;
                }
                for (ds_, &wv) in dsrow.iter_mut().zip(wrow) {
                    *ds_ = wv * (*ds_ - t) * scale;
                }
            }

            // dq = dS * K; dk = dS^T * Q
            dqb.fill(E::ZERO);
            dkb.fill(E::ZERO);
            for i in 0..s {
                let qrow = &qb[i * dh..(i + 1) * dh];
                let dqrow = &mut dqb[i * dh..(i + 1) * dh];
                for m in 0..s {
                    axpy(dsc[i * s + m], &kb[m * dh..(m + 1) * dh], dqrow);
                }
                for m in 0..s {
                    axpy(dsc[i * s + m], qrow, &mut dkb[m * dh..(m + 1) * dh]);
                }
            }

            scatter_block_add(&mut dq, d, win, head, &dqb);
            scatter_block_add(&mut dk, d, win, head, &dkb);
            scatter_block_add(&mut dv, d, win, head, &dvb);
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(q.shape().to_vec(), dk)?,
        Tensor::new(q.shape().to_vec(), dv)?,
    ))
}

/// Mean attention mass that window-token query rows place on the k dynamic
/// prefix rows, per window: the probe behind the attention-map export.
pub fn dyn_token_mass<E: Elem>(weights: &[E], d: &AttnDims, k_prefix: usize) -> Vec<f64> {
    let s = d.seq;
    let mut mass = vec![0.0f64; d.windows];
    if k_prefix == 0 || s <= k_prefix {
        return mass;
    }
    let denom = ((s - k_prefix) * d.heads) as f64;
    for win in 0..d.windows {
        let mut acc = 0.0;
        for head in 0..d.heads {
            let blk = &weights[(win * d.heads + head) * s * s..(win * d.heads + head + 1) * s * s];
            for i in k_prefix..s {
                for m in 0..k_prefix {
                    acc += blk[i * s + m].to_f64();
                }
            }
        }
        mass[win] = acc / denom;
    }
    mass
}
