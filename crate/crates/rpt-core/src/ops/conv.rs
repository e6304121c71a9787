//! 2D convolution (kernel 1 or 3, stride 1) and non-overlapping average
//! pooling on (C, H, W) maps, with analytic backward kernels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops::linalg::{axpy, dot};
use crate::tensor::Tensor;

/// Border handling for convolutions. Circular exists for equivariance tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Circular,
}

fn dims3<E: Elem>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch { op, detail: format!("expected rank 3, got {:?}", t.shape()) });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Copy (C, H, W) into a (C, H+2p, W+2p) buffer with the given border fill.
fn pad_input<E: Elem>(x: &[E], c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<E> {
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    let mut out = vec![E::ZERO; c * hp * wp];
    for ci in 0..c {
        for yp in 0..hp {
            let orow = &mut out[(ci * hp + yp) * wp..(ci * hp + yp + 1) * wp];
            let ys = yp as isize - p as isize;
            match mode {
                PadMode::Zero => {
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    let xrow = &x[(ci * h + ys as usize) * w..(ci * h + ys as usize + 1) * w];
                    orow[p..p + w].copy_from_slice(xrow);
                }
                PadMode::Circular => {
                    let ysrc = ys.rem_euclid(h as isize) as usize;
                    let xrow = &x[(ci * h + ysrc) * w..(ci * h + ysrc + 1) * w];
                    for (xp, o) in orow.iter_mut().enumerate() {
                        let xs = (xp as isize - p as isize).rem_euclid(w as isize) as usize;
                        *o = xrow[xs];
                    }
                }
            }
        }
    }
    out
}

/// Fold a padded-gradient buffer back to (C, H, W) source coordinates.
fn fold_padded<E: Elem>(dxp: &[E], c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<E> {
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    let mut out = vec![E::ZERO; c * h * w];
    for ci in 0..c {
        for yp in 0..hp {
            let ys = yp as isize - p as isize;
            let ysrc = match mode {
                PadMode::Zero => {
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    ys as usize
                }
                PadMode::Circular => ys.rem_euclid(h as isize) as usize,
            };
            let prow = &dxp[(ci * hp + yp) * wp..(ci * hp + yp + 1) * wp];
            let orow = &mut out[(ci * h + ysrc) * w..(ci * h + ysrc + 1) * w];
            for (xp, &v) in prow.iter().enumerate() {
                let xs = xp as isize - p as isize;
                match mode {
                    PadMode::Zero => {
                        if xs < 0 || xs >= w as isize {
                            continue;
                        }
                        orow[xs as usize] += v;
                    }
                    PadMode::Circular => {
                        orow[xs.rem_euclid(w as isize) as usize] += v;
                    }
                }
            }
        }
    }
    out
}

pub fn check_conv_args<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (cin, h, wd) = dims3(x, "conv2d")?;
    if w.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight must be rank 4, got {:?}", w.shape()),
        });
    }
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::UnsupportedKernel(kh.max(kw)));
    }
    if b.rank() != 1 || b.numel() != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias {:?} for {cout} output channels", b.shape()),
        });
    }
    Ok((cin, h, wd, cout, cin_g, kh))
}

/// conv2d with square kernel (1 or 3), stride 1, spatial extents preserved.
/// `groups == cin` gives depthwise behavior.
pub fn conv2d<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    groups: usize,
    pad: PadMode,
) -> Result<Tensor<E>> {
    let (cin, h, wd, cout, cin_g, k) = check_conv_args(x, w, b)?;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::BadGroups { cin, groups });
    }
    if cin / groups != cin_g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight expects {cin_g} in-channels per group, input gives {}", cin / groups),
        });
    }
    let p = (k - 1) / 2;
    let xp = pad_input(x.data(), cin, h, wd, p, pad);
    let hp = h + 2 * p;
    let wp = wd + 2 * p;
    let cout_g = cout / groups;

    let mut out = vec![E::ZERO; cout * h * wd];
    let wdat = w.data();
    let bdat = b.data();
    for co in 0..cout {
        let g = co / cout_g;
        let obase = co * h * wd;
        out[obase..obase + h * wd].fill(bdat[co]);
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * cin_g + cig) * k + ky) * k + kx];
                    for y in 0..h {
                        let prow = &xp[(ci * hp + y + ky) * wp + kx..(ci * hp + y + ky) * wp + kx + wd];
                        axpy(wv, prow, &mut out[obase + y * wd..obase + (y + 1) * wd]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, wd], out)
}

/// Gradients of conv2d w.r.t. input, weight, and bias.
pub fn conv2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    groups: usize,
    pad: PadMode,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (cin, h, wd) = dims3(x, "conv2d_backward")?;
    let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let p = (k - 1) / 2;
    let hp = h + 2 * p;
    let wp = wd + 2 * p;
    let cout_g = cout / groups;

    let xp = pad_input(x.data(), cin, h, wd, p, pad);
    let dyd = dy.data();
    let wdat = w.data();

    // Bias gradient: per-channel sum of dy.
    let mut db = vec![E::ZERO; cout];
    for co in 0..cout {
        let mut s = E::ZERO;
        for &v in &dyd[co * h * wd..(co + 1) * h * wd] {
            s += v;
        }
        db[co] = s;
    }

    // Weight gradient: correlate padded input with dy.
    let mut dw = vec![E::ZERO; w.numel()];
    for co in 0..cout {
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            for ky in 0..k {
                for kx in 0..k {
                    let mut s = E::ZERO;
                    for y in 0..h {
                        let prow = &xp[(ci * hp + y + ky) * wp + kx..(ci * hp + y + ky) * wp + kx + wd];
                        s += dot(prow, &dyd[(co * h + y) * wd..(co * h + y + 1) * wd]);
                    }
                    dw[((co * cin_g + cig) * k + ky) * k + kx] = s;
                }
            }
        }
    }

    // Input gradient: scatter into padded coordinates, then fold borders back.
    let mut dxp = vec![E::ZERO; cin * hp * wp];
    for co in 0..cout {
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * cin_g + cig) * k + ky) * k + kx];
                    for y in 0..h {
                        let drow = &dyd[(co * h + y) * wd..(co * h + y + 1) * wd];
                        let start = (ci * hp + y + ky) * wp + kx;
                        axpy(wv, drow, &mut dxp[start..start + wd]);
                    }
                }
            }
        }
    }
    let dx = fold_padded(&dxp, cin, h, wd, p, pad);

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Average pooling with kernel == stride (the only configuration the model
/// uses: one token per window cell).
pub fn avg_pool2d<E: Elem>(x: &Tensor<E>, kernel: usize, stride: usize) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(x, "avg_pool2d")?;
    if kernel != stride {
        return Err(Error::BadConfig(format!(
            "avg_pool2d supports kernel == stride only (got kernel {kernel}, stride {stride})"
        )));
    }
    if kernel == 0 || h % kernel != 0 {
        return Err(Error::NonDivisible { what: "avg_pool2d height", extent: h, divisor: kernel.max(1) });
    }
    if w % kernel != 0 {
        return Err(Error::NonDivisible { what: "avg_pool2d width", extent: w, divisor: kernel });
    }
    let ho = h / kernel;
    let wo = w / kernel;
    let inv = E::from_f64(1.0 / (kernel * kernel) as f64);
    let xd = x.data();
    let mut out = vec![E::ZERO; c * ho * wo];
    for ci in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut s = E::ZERO;
                for dy in 0..kernel {
                    let base = (ci * h + yo * kernel + dy) * w + xo * kernel;
                    for dx in 0..kernel {
                        s += xd[base + dx];
                    }
                }
                out[(ci * ho + yo) * wo + xo] = s * inv;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Backward of `avg_pool2d`: distribute each output gradient uniformly.
pub fn avg_pool2d_backward<E: Elem>(x_shape: &[usize], kernel: usize, dy: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let ho = h / kernel;
    let wo = w / kernel;
    let inv = E::from_f64(1.0 / (kernel * kernel) as f64);
    let dyd = dy.data();
    let mut dx = vec![E::ZERO; c * h * w];
    for ci in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                let g = dyd[(ci * ho + yo) * wo + xo] * inv;
                for dy_ in 0..kernel {
                    let base = (ci * h + yo * kernel + dy_) * w + xo * kernel;
                    for dx_ in 0..kernel {
                        dx[base + dx_] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}
