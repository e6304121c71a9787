//! Window tokenization: partition feature maps into non-overlapping w x w
//! windows and merge back. Window index j = row * cols + col and token index
//! t = y * w + x are the ordering contract shared with the dynamic tokens.

use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::Result;
use crate::ops::layout;
use crate::tensor::{chw, Tensor};

/// Crop record produced by `pad_to_multiple`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

/// Reflect-pad bottom/right so both spatial extents become multiples of `w`.
pub fn pad_to_multiple<E: Elem>(f: &Tensor<E>, w: usize) -> Result<(Tensor<E>, PadRecord)> {
    let (h, wd) = (f.shape()[1], f.shape()[2]);
    let ph = (w - h % w) % w;
    let pw = (w - wd % w) % w;
    let rec = PadRecord { orig_h: h, orig_w: wd, pad_h: ph, pad_w: pw };
    if ph == 0 && pw == 0 {
        return Ok((f.clone(), rec));
    }
    Ok((layout::reflect_pad(f, ph, pw)?, rec))
}

/// Undo `pad_to_multiple`.
pub fn crop_to_record<E: Elem>(f: &Tensor<E>, rec: &PadRecord) -> Result<Tensor<E>> {
    if rec.pad_h == 0 && rec.pad_w == 0 {
        return Ok(f.clone());
    }
    layout::crop(f, rec.orig_h, rec.orig_w)
}

/// A feature map partitioned into windows: `tokens` holds N_w stacked
/// (w^2, C) matrices in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<E: Elem> {
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    pub tokens: Tensor<E>,
}

impl<E: Elem> WindowGrid<E> {
    pub fn n_windows(&self) -> usize {
        self.rows * self.cols
    }

    /// Token matrix of window j as a flat (w^2 * C) slice.
    pub fn window(&self, j: usize) -> &[E] {
        let c = self.tokens.last_dim();
        let stride = self.w * self.w * c;
        &self.tokens.data()[j * stride..(j + 1) * stride]
    }
}

/// Partition (C, H, W) into non-overlapping w x w windows. Pure permutation.
pub fn window_partition<E: Elem>(f: &Tensor<E>, w: usize) -> Result<WindowGrid<E>> {
    let tokens = layout::window_partition(f, w)?;
    Ok(WindowGrid { w, rows: f.shape()[1] / w, cols: f.shape()[2] / w, tokens })
}

/// Exact inverse of `window_partition`.
pub fn window_merge<E: Elem>(g: &WindowGrid<E>, c: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    layout::window_merge(&g.tokens, g.w, c, h, w)
}

/// Circularly shift a (C, H, W) map by (dy, dx); used by the translation
/// equivariance oracles.
pub fn circular_shift<E: Elem>(f: &Tensor<E>, dy: usize, dx: usize) -> Tensor<E> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let fd = f.data();
    let mut out = Vec::with_capacity(fd.len());
    for ci in 0..c {
        for y in 0..h {
            let ys = (y + h - dy % h) % h;
            for x in 0..w {
                let xs = (x + w - dx % w) % w;
                out.push(fd[chw(ci, ys, xs, h, w)]);
            }
        }
    }
    Tensor::new(f.shape().to_vec(), out).expect("circular_shift shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn no_padding_when_divisible() {
        let f = Tensor::<f64>::zeros(&[2, 128, 128]);
        let (p, rec) = pad_to_multiple(&f, 8).unwrap();
        assert_eq!(p.shape(), &[2, 128, 128]);
        assert_eq!(rec, PadRecord { orig_h: 128, orig_w: 128, pad_h: 0, pad_w: 0 });
    }

    #[test]
    fn pads_130_to_136_and_records() {
        let mut rng = Rng::new(5);
        let f = Tensor::<f64>::rand_uniform(&[1, 130, 130], &mut rng);
        let (p, rec) = pad_to_multiple(&f, 8).unwrap();
        assert_eq!(p.shape(), &[1, 136, 136]);
        assert_eq!((rec.pad_h, rec.pad_w), (6, 6));
        assert_eq!(crop_to_record(&p, &rec).unwrap(), f);
    }

    #[test]
    fn window_one_is_identity_pad() {
        let mut rng = Rng::new(6);
        let f = Tensor::<f64>::rand_uniform(&[3, 5, 7], &mut rng);
        let (p, rec) = pad_to_multiple(&f, 1).unwrap();
        assert_eq!(p, f);
        assert_eq!((rec.pad_h, rec.pad_w), (0, 0));
    }

    #[test]
    fn partition_counts_windows() {
        let f = Tensor::<f64>::zeros(&[4, 128, 128]);
        let g = window_partition(&f, 8).unwrap();
        assert_eq!(g.n_windows(), 256);
        assert_eq!(g.tokens.shape(), &[256 * 64, 4]);
    }

    #[test]
    fn single_window_is_flattened_map() {
        let mut rng = Rng::new(7);
        let f = Tensor::<f64>::rand_uniform(&[3, 8, 8], &mut rng);
        let g = window_partition(&f, 8).unwrap();
        assert_eq!(g.n_windows(), 1);
        // Token t = y*8+x carries pixel (y, x) across all channels.
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(g.tokens.data()[(y * 8 + x) * 3 + c], f.data()[chw(c, y, x, 8, 8)]);
                }
            }
        }
    }

    #[test]
    fn partition_merge_round_trip_bitwise() {
        let mut rng = Rng::new(8);
        for &(c, h, w, win) in &[(3usize, 16usize, 24usize, 4usize), (5, 8, 8, 8), (1, 12, 6, 2)] {
            let f = Tensor::<f64>::rand_uniform(&[c, h, w], &mut rng);
            let g = window_partition(&f, win).unwrap();
            assert_eq!(window_merge(&g, c, h, w).unwrap(), f);
        }
    }

    #[test]
    fn permuting_tokens_in_one_window_is_local() {
        let mut rng = Rng::new(9);
        let (c, h, w, win) = (2, 8, 8, 4);
        let f = Tensor::<f64>::rand_uniform(&[c, h, w], &mut rng);
        let mut g = window_partition(&f, win).unwrap();
        // Swap two tokens inside window 3.
        let cdim = c;
        let stride = win * win * cdim;
        let base = 3 * stride;
        for ci in 0..cdim {
            g.tokens.data_mut().swap(base + ci, base + cdim + ci);
        }
        let back = window_merge(&g, c, h, w).unwrap();
        let mut diff_outside = 0;
        for y in 0..h {
            for x in 0..w {
                let in_window3 = (y / win, x / win) == (1, 1);
                for ci in 0..c {
                    let idx = chw(ci, y, x, h, w);
                    if (back.data()[idx] != f.data()[idx]) && !in_window3 {
                        diff_outside += 1;
                    }
                }
            }
        }
        assert_eq!(diff_outside, 0);
        assert_ne!(back, f);
    }

    #[test]
    fn cyclic_shift_permutes_window_contents() {
        // Shifting by (w, w) must permute windows without changing any
        // window's content multiset.
        let mut rng = Rng::new(10);
        let (c, h, w, win) = (2, 12, 12, 4);
        let f = Tensor::<f64>::rand_uniform(&[c, h, w], &mut rng);
        let shifted = circular_shift(&f, win, win);
        let ga = window_partition(&f, win).unwrap();
        let gb = window_partition(&shifted, win).unwrap();
        let sorted = |g: &WindowGrid<f64>, j: usize| {
            let mut v: Vec<u64> = g.window(j).iter().map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v
        };
        // Window (r, c) of the shifted map holds window (r-1, c-1) of the original.
        for r in 0..3 {
            for cc in 0..3 {
                let j_shifted = r * 3 + cc;
                let j_orig = ((r + 2) % 3) * 3 + (cc + 2) % 3;
                assert_eq!(sorted(&gb, j_shifted), sorted(&ga, j_orig));
            }
        }
    }
}
