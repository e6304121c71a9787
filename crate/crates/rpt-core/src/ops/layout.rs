//! Pure data-movement kernels: pixel shuffle, channel concat/slice, window
//! tokenization, dynamic-token interleaving, reflect padding, and the
//! bilinear token-grid resampler. All except the resampler are permutations
//! (or embeddings) with exact inverses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::{chw, Tensor};

fn dims3<E: Elem>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch { op, detail: format!("expected rank 3, got {:?}", t.shape()) });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// (C*r^2, H, W) -> (C, rH, rW): out[c, r*y+dy, r*x+dx] = x[c*r^2 + dy*r + dx, y, x].
pub fn pixel_shuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let (cr2, h, w) = dims3(x, "pixel_shuffle")?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::NonDivisible { what: "pixel_shuffle channels", extent: cr2, divisor: r.max(1) * r.max(1) });
    }
    let c = cr2 / (r * r);
    let (ho, wo) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![E::ZERO; c * ho * wo];
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = co * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[chw(co, r * y + dy, r * xx + dx, ho, wo)] = xd[chw(ci, y, xx, h, w)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Exact inverse of `pixel_shuffle`.
pub fn pixel_unshuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let (c, ho, wo) = dims3(x, "pixel_unshuffle")?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(Error::NonDivisible { what: "pixel_unshuffle extents", extent: ho.max(wo), divisor: r.max(1) });
    }
    let (h, w) = (ho / r, wo / r);
    let xd = x.data();
    let mut out = vec![E::ZERO; c * r * r * h * w];
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = co * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[chw(ci, y, xx, h, w)] = xd[chw(co, r * y + dy, r * xx + dx, ho, wo)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * r * r, h, w], out)
}

/// Concatenate along the last axis; leading extents must match.
pub fn concat_lastdim<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != b.rank() || a.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "concat_lastdim",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let lead = &a.shape()[..a.rank() - 1];
    if lead != &b.shape()[..b.rank() - 1] {
        return Err(Error::ShapeMismatch {
            op: "concat_lastdim",
            detail: format!("leading extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let rows = a.rows();
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = lead.to_vec();
    shape.push(ca + cb);
    Tensor::new(shape, out)
}

/// Columns [start, start+len) of the last axis.
pub fn narrow_lastdim<E: Elem>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let c = x.last_dim();
    if start + len > c {
        return Err(Error::ShapeMismatch {
            op: "narrow_lastdim",
            detail: format!("[{start}, {}) out of axis {c}", start + len),
        });
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
    }
    let mut shape = x.shape()[..x.rank() - 1].to_vec();
    shape.push(len);
    Tensor::new(shape, out)
}

/// Embed a (rows, len) gradient back into a zero (rows, c) tensor at `start`.
pub fn narrow_backward<E: Elem>(dy: &Tensor<E>, c: usize, start: usize) -> Result<Tensor<E>> {
    let len = dy.last_dim();
    let rows = dy.rows();
    let mut out = vec![E::ZERO; rows * c];
    for r in 0..rows {
        out[r * c + start..r * c + start + len].copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
    }
    let mut shape = dy.shape()[..dy.rank() - 1].to_vec();
    shape.push(c);
    Tensor::new(shape, out)
}

/// (C, H, W) -> (N_w * w^2, C) token stack. Window j = row * cols + col in
/// row-major window order; token t = y * w + x inside the window. This
/// ordering is the contract binding local tokens, prior tokens, and windows.
pub fn window_partition<E: Elem>(x: &Tensor<E>, w: usize) -> Result<Tensor<E>> {
    let (c, h, wd) = dims3(x, "window_partition")?;
    if w == 0 || h % w != 0 {
        return Err(Error::NonDivisible { what: "window_partition height", extent: h, divisor: w.max(1) });
    }
    if wd % w != 0 {
        return Err(Error::NonDivisible { what: "window_partition width", extent: wd, divisor: w });
    }
    let cols = wd / w;
    let rows = h / w;
    let nw = rows * cols;
    let xd = x.data();
    let mut out = vec![E::ZERO; nw * w * w * c];
    for wy in 0..rows {
        for wx in 0..cols {
            let j = wy * cols + wx;
            for ty in 0..w {
                for tx in 0..w {
                    let orow = (j * w * w + ty * w + tx) * c;
                    let (y, xx) = (wy * w + ty, wx * w + tx);
                    for ci in 0..c {
                        out[orow + ci] = xd[chw(ci, y, xx, h, wd)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw * w * w, c], out)
}

/// Exact inverse of `window_partition`.
pub fn window_merge<E: Elem>(tokens: &Tensor<E>, w: usize, c: usize, h: usize, wd: usize) -> Result<Tensor<E>> {
    let cols = wd / w;
    let rows = h / w;
    let nw = rows * cols;
    if tokens.rank() != 2 || tokens.shape()[0] != nw * w * w || tokens.shape()[1] != c || h % w != 0 || wd % w != 0
    {
        return Err(Error::ShapeMismatch {
            op: "window_merge",
            detail: format!("tokens {:?} for (C={c}, H={h}, W={wd}, w={w})", tokens.shape()),
        });
    }
    let td = tokens.data();
    let mut out = vec![E::ZERO; c * h * wd];
    for wy in 0..rows {
        for wx in 0..cols {
            let j = wy * cols + wx;
            for ty in 0..w {
                for tx in 0..w {
                    let trow = (j * w * w + ty * w + tx) * c;
                    let (y, xx) = (wy * w + ty, wx * w + tx);
                    for ci in 0..c {
                        out[chw(ci, y, xx, h, wd)] = td[trow + ci];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, wd], out)
}

/// (C, rows*q, cols*q) pooled map -> (rows*cols*q^2, C) tokens in window-major
/// order: window j, then the q x q sub-grid inside the window. q = 1 is the
/// plain grid-to-token transpose.
pub fn pooled_to_tokens<E: Elem>(x: &Tensor<E>, q: usize) -> Result<Tensor<E>> {
    let (c, gh, gw) = dims3(x, "pooled_to_tokens")?;
    if q == 0 || gh % q != 0 || gw % q != 0 {
        return Err(Error::NonDivisible { what: "pooled_to_tokens grid", extent: gh.max(gw), divisor: q.max(1) });
    }
    let rows = gh / q;
    let cols = gw / q;
    let xd = x.data();
    let mut out = vec![E::ZERO; gh * gw * c];
    for wy in 0..rows {
        for wx in 0..cols {
            let j = wy * cols + wx;
            for ly in 0..q {
                for lx in 0..q {
                    let orow = (j * q * q + ly * q + lx) * c;
                    for ci in 0..c {
                        out[orow + ci] = xd[chw(ci, wy * q + ly, wx * q + lx, gh, gw)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows * cols * q * q, c], out)
}

/// Inverse of `pooled_to_tokens`: tokens back to the (C, rows*q, cols*q) grid.
pub fn tokens_to_pooled<E: Elem>(t: &Tensor<E>, rows: usize, cols: usize, q: usize) -> Result<Tensor<E>> {
    let c = t.last_dim();
    if t.rank() != 2 || t.shape()[0] != rows * cols * q * q {
        return Err(Error::ShapeMismatch {
            op: "tokens_to_pooled",
            detail: format!("tokens {:?} for ({rows} x {cols}) windows, q={q}", t.shape()),
        });
    }
    let (gh, gw) = (rows * q, cols * q);
    let td = t.data();
    let mut out = vec![E::ZERO; c * gh * gw];
    for wy in 0..rows {
        for wx in 0..cols {
            let j = wy * cols + wx;
            for ly in 0..q {
                for lx in 0..q {
                    let trow = (j * q * q + ly * q + lx) * c;
                    for ci in 0..c {
                        out[chw(ci, wy * q + ly, wx * q + lx, gh, gw)] = td[trow + ci];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

/// Prepend k dynamic-token rows to each window's s token rows:
/// (nw*k, C) + (nw*s, C) -> (nw*(k+s), C).
pub fn interleave_rows<E: Elem>(
    d: &Tensor<E>,
    x: &Tensor<E>,
    nw: usize,
    k: usize,
    s: usize,
) -> Result<Tensor<E>> {
    let c = x.last_dim();
    if d.rank() != 2 || x.rank() != 2 || d.shape()[0] != nw * k || x.shape()[0] != nw * s || d.last_dim() != c
    {
        return Err(Error::ShapeMismatch {
            op: "interleave_rows",
            detail: format!("d {:?}, x {:?} for nw={nw}, k={k}, s={s}", d.shape(), x.shape()),
        });
    }
    let mut out = Vec::with_capacity(nw * (k + s) * c);
    for j in 0..nw {
        out.extend_from_slice(&d.data()[j * k * c..(j + 1) * k * c]);
        out.extend_from_slice(&x.data()[j * s * c..(j + 1) * s * c]);
    }
    Tensor::new(vec![nw * (k + s), c], out)
}

/// Split an interleaved stack back into its (dynamic, window) row groups.
pub fn deinterleave_rows<E: Elem>(
    z: &Tensor<E>,
    nw: usize,
    k: usize,
    s: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let c = z.last_dim();
    if z.rank() != 2 || z.shape()[0] != nw * (k + s) {
        return Err(Error::ShapeMismatch {
            op: "deinterleave_rows",
            detail: format!("z {:?} for nw={nw}, k={k}, s={s}", z.shape()),
        });
    }
    let mut d = Vec::with_capacity(nw * k * c);
    let mut x = Vec::with_capacity(nw * s * c);
    for j in 0..nw {
        let base = j * (k + s) * c;
        d.extend_from_slice(&z.data()[base..base + k * c]);
        x.extend_from_slice(&z.data()[base + k * c..base + (k + s) * c]);
    }
    Ok((Tensor::new(vec![nw * k, c], d)?, Tensor::new(vec![nw * s, c], x)?))
}

/// Keep only the trailing s window-token rows of each window; the k dynamic
/// rows are discarded.
pub fn strip_rows<E: Elem>(z: &Tensor<E>, nw: usize, k: usize, s: usize) -> Result<Tensor<E>> {
    let (_, x) = deinterleave_rows(z, nw, k, s)?;
    Ok(x)
}

/// Backward of `strip_rows`: window-token gradients flow back, dynamic rows get zero.
pub fn strip_rows_backward<E: Elem>(dy: &Tensor<E>, nw: usize, k: usize, s: usize) -> Result<Tensor<E>> {
    let c = dy.last_dim();
    let zero = Tensor::zeros(&[nw * k, c]);
    interleave_rows(&zero, dy, nw, k, s)
}

/// Reflect-pad the bottom/right of a (C, H, W) map (mirror without repeating
/// the border sample, periodized so pads larger than the extent still work).
pub fn reflect_pad<E: Elem>(x: &Tensor<E>, ph: usize, pw: usize) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(x, "reflect_pad")?;
    if h == 0 || w == 0 {
        return Err(Error::TooSmall(format!("reflect_pad on empty map {:?}", x.shape())));
    }
    let (hp, wp) = (h + ph, w + pw);
    let xd = x.data();
    let mut out = vec![E::ZERO; c * hp * wp];
    for ci in 0..c {
        for y in 0..hp {
            let ys = reflect_index(y, h);
            let orow = &mut out[(ci * hp + y) * wp..(ci * hp + y + 1) * wp];
            let xrow = &xd[(ci * h + ys) * w..(ci * h + ys + 1) * w];
            orow[..w].copy_from_slice(xrow);
            for (xx, o) in orow.iter_mut().enumerate().skip(w) {
                *o = xrow[reflect_index(xx, w)];
            }
        }
    }
    Tensor::new(vec![c, hp, wp], out)
}

/// Backward of `reflect_pad`: fold padded gradients onto their source cells.
pub fn reflect_pad_backward<E: Elem>(dy: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (c, hp, wp) = dims3(dy, "reflect_pad_backward")?;
    let dyd = dy.data();
    let mut out = vec![E::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..hp {
            let ys = reflect_index(y, h);
            let drow = &dyd[(ci * hp + y) * wp..(ci * hp + y + 1) * wp];
            for (xx, &v) in drow.iter().enumerate() {
                out[chw(ci, ys, reflect_index(xx, w), h, w)] += v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Map an index beyond [0, n) back inside by repeated edge-exclusive reflection.
#[inline]
pub fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        return i;
    }
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Top-left crop of a (C, H, W) map.
pub fn crop<E: Elem>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (c, hp, wp) = dims3(x, "crop")?;
    if h > hp || w > wp {
        return Err(Error::ShapeMismatch {
            op: "crop",
            detail: format!("crop ({h}, {w}) from ({hp}, {wp})"),
        });
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            out.extend_from_slice(&xd[(ci * hp + y) * wp..(ci * hp + y) * wp + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Backward of `crop`: zero-extend gradients to the padded extents.
pub fn crop_backward<E: Elem>(dy: &Tensor<E>, hp: usize, wp: usize) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(dy, "crop_backward")?;
    let dyd = dy.data();
    let mut out = vec![E::ZERO; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            out[(ci * hp + y) * wp..(ci * hp + y) * wp + w]
                .copy_from_slice(&dyd[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    Tensor::new(vec![c, hp, wp], out)
}

/// Bilinear resample of a token grid (r0*c0 rows, C) to (r1*c1 rows, C),
/// align-corners mapping, rows in grid row-major order.
pub fn bilinear_grid<E: Elem>(
    x: &Tensor<E>,
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
) -> Result<Tensor<E>> {
    let c = x.last_dim();
    if x.rank() != 2 || x.shape()[0] != r0 * c0 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_grid",
            detail: format!("grid {:?} for {r0} x {c0}", x.shape()),
        });
    }
    let xd = x.data();
    let mut out = vec![E::ZERO; r1 * c1 * c];
    for y in 0..r1 {
        let (y0, y1, fy) = axis_taps(y, r1, r0);
        for xx in 0..c1 {
            let (x0, x1, fx) = axis_taps(xx, c1, c0);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            let orow = &mut out[(y * c1 + xx) * c..(y * c1 + xx + 1) * c];
            for (ci, o) in orow.iter_mut().enumerate() {
                *o = w00 * xd[(y0 * c0 + x0) * c + ci]
                    + w01 * xd[(y0 * c0 + x1) * c + ci]
                    + w10 * xd[(y1 * c0 + x0) * c + ci]
                    + w11 * xd[(y1 * c0 + x1) * c + ci];
            }
        }
    }
    Tensor::new(vec![r1 * c1, c], out)
}

/// Backward of `bilinear_grid`: scatter with the same tap weights.
pub fn bilinear_grid_backward<E: Elem>(
    dy: &Tensor<E>,
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
) -> Result<Tensor<E>> {
    let c = dy.last_dim();
    let dyd = dy.data();
    let mut out = vec![E::ZERO; r0 * c0 * c];
    for y in 0..r1 {
        let (y0, y1, fy) = axis_taps(y, r1, r0);
        for xx in 0..c1 {
            let (x0, x1, fx) = axis_taps(xx, c1, c0);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            let drow = &dyd[(y * c1 + xx) * c..(y * c1 + xx + 1) * c];
            for (ci, &g) in drow.iter().enumerate() {
                out[(y0 * c0 + x0) * c + ci] += w00 * g;
                out[(y0 * c0 + x1) * c + ci] += w01 * g;
                out[(y1 * c0 + x0) * c + ci] += w10 * g;
                out[(y1 * c0 + x1) * c + ci] += w11 * g;
            }
        }
    }
    Tensor::new(vec![r0 * c0, c], out)
}

/// Align-corners source taps for one axis: dst index -> (lo, hi, frac).
fn axis_taps(dst: usize, n_dst: usize, n_src: usize) -> (usize, usize, f64) {
    if n_dst <= 1 || n_src <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64;
    let lo = (libm::floor(pos) as usize).min(n_src - 1);
    let hi = (lo + 1).min(n_src - 1);
    (lo, hi, pos - lo as f64)
}
