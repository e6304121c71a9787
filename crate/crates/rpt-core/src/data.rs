//! Data pipeline: images in [0, 1], bicubic degradation, paired patch
//! sampling, the synthetic fixed-layout scene generator, and the
//! layout-anisotropy diagnostic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Dataset;

/// Floating-point image, 1 or 3 channels, values clamped to [0, 1] on
/// construction (channel-major layout like the tensors).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, h: usize, w: usize, mut data: Vec<f64>) -> Result<Image> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Format(format!("images are 1- or 3-channel, got {channels}")));
        }
        if data.len() != channels * h * w {
            return Err(Error::ShapeMismatch {
                op: "image",
                detail: format!("{channels}x{h}x{w} needs {} values, got {}", channels * h * w, data.len()),
            });
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image { channels, h, w, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Image {
        Image { channels, h, w, data: vec![0.0; channels * h * w] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// 3-channel tensor for the model; grayscale sources are replicated.
    pub fn to_tensor<E: Elem>(&self) -> Tensor<E> {
        let mut data = Vec::with_capacity(3 * self.h * self.w);
        for c in 0..3 {
            let src = if self.channels == 3 { c } else { 0 };
            data.extend(
                self.data[src * self.h * self.w..(src + 1) * self.h * self.w]
                    .iter()
                    .map(|&v| E::from_f64(v)),
            );
        }
        Tensor::new(vec![3, self.h, self.w], data).expect("image tensor shape")
    }

    /// Clamp a (3, H, W) tensor back into an image.
    pub fn from_tensor<E: Elem>(t: &Tensor<E>) -> Result<Image> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "image",
                detail: format!("expected (3, H, W), got {:?}", t.shape()),
            });
        }
        Image::new(3, t.shape()[1], t.shape()[2], t.data().iter().map(|v| v.to_f64()).collect())
    }

    /// Collapse to one channel by the channel mean.
    pub fn gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.h * self.w;
        let mut data = vec![0.0; n];
        for c in 0..3 {
            for (o, &v) in data.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *o += v / 3.0;
            }
        }
        Image { channels: 1, h: self.h, w: self.w, data }
    }

    /// Replicate one channel to three.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.h * self.w);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image { channels: 3, h: self.h, w: self.w, data }
    }
}

/// Paired HR/LR sample; HR extents are exactly scale x LR extents.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub hr: Image,
    pub lr: Image,
    pub scale: usize,
}

impl ScenePair {
    pub fn new(hr: Image, lr: Image, scale: usize) -> Result<ScenePair> {
        if hr.h != lr.h * scale || hr.w != lr.w * scale || hr.channels != lr.channels {
            return Err(Error::ShapeMismatch {
                op: "scene_pair",
                detail: format!(
                    "hr {}x{}x{} vs lr {}x{}x{} at scale {scale}",
                    hr.channels, hr.h, hr.w, lr.channels, lr.h, lr.w
                ),
            });
        }
        Ok(ScenePair { hr, lr, scale })
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// One separable pass with half-pixel centers (src = (dst + 0.5) * ratio -
/// 0.5) and edge clamping. No antialias prefilter; the four-tap kernel is
/// used at every scale, which pins the fixture values.
fn resample_axis(src: &[f64], n_src: usize, n_dst: usize, stride: usize, out: &mut [f64], out_stride: usize) {
    let ratio = n_src as f64 / n_dst as f64;
    for d in 0..n_dst {
        let pos = (d as f64 + 0.5) * ratio - 0.5;
        let base = libm::floor(pos) as isize;
        let mut acc = 0.0;
        for tap in -1..=2isize {
            let idx = (base + tap).clamp(0, n_src as isize - 1) as usize;
            let wgt = cubic(pos - (base + tap) as f64);
            acc += wgt * src[idx * stride];
        }
        out[d * out_stride] = acc;
    }
}

/// Separable bicubic resize (horizontal pass, then vertical).
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::TooSmall(String::from("bicubic target extents must be positive")));
    }
    let (c, h, w) = (img.channels, img.h, img.w);
    let mut mid = vec![0.0; c * h * out_w];
    for ci in 0..c {
        for y in 0..h {
            let row = &img.data[(ci * h + y) * w..(ci * h + y + 1) * w];
            resample_axis(row, w, out_w, 1, &mut mid[(ci * h + y) * out_w..(ci * h + y + 1) * out_w], 1);
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        for x in 0..out_w {
            let col = &mid[ci * h * out_w + x..];
            let dst = &mut out[ci * out_h * out_w + x..];
            resample_axis(col, h, out_h, out_w, dst, out_w);
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Random aligned HR crop plus its bicubic LR counterpart. Crop offsets are
/// multiples of the scale so the LR grid aligns with HR pixels.
pub fn sample_pair(hr_source: &Image, patch: usize, scale: usize, rng: &mut Rng) -> Result<ScenePair> {
    if scale == 0 || patch % scale != 0 {
        return Err(Error::NonDivisible { what: "patch", extent: patch, divisor: scale.max(1) });
    }
    if hr_source.h < patch || hr_source.w < patch {
        return Err(Error::TooSmall(format!(
            "source {}x{} smaller than patch {patch}",
            hr_source.h, hr_source.w
        )));
    }
    let max_y = (hr_source.h - patch) / scale;
    let max_x = (hr_source.w - patch) / scale;
    let y0 = rng.below(max_y + 1) * scale;
    let x0 = rng.below(max_x + 1) * scale;
    let mut crop = Vec::with_capacity(hr_source.channels * patch * patch);
    for c in 0..hr_source.channels {
        for y in 0..patch {
            let base = (c * hr_source.h + y0 + y) * hr_source.w + x0;
            crop.extend_from_slice(&hr_source.data[base..base + patch]);
        }
    }
    let hr = Image::new(hr_source.channels, patch, patch, crop)?;
    let lr = bicubic_resize(&hr, patch / scale, patch / scale)?;
    ScenePair::new(hr, lr, scale)
}

/// Texture law of one horizontal band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandLaw {
    /// Low-frequency vertical gradient with a small per-frame offset.
    SmoothGradient,
    /// Seeded-phase high-frequency stripes plus seeded rectangles.
    HighFreqStripes,
    /// Seeded mid-frequency blob texture.
    MidFreqBlobs,
}

/// Fixed-viewpoint scene layout: band boundaries (fractions of H) are shared
/// by every frame of a dataset; within-band content varies per frame.
#[derive(Clone, Debug)]
pub struct LayoutSpec {
    pub boundaries: Vec<f64>,
    pub laws: Vec<BandLaw>,
    pub seed: u64,
}

impl LayoutSpec {
    /// Sky-gradient / structured-midground / textured-ground default.
    pub fn three_band(seed: u64) -> LayoutSpec {
        LayoutSpec {
            boundaries: vec![0.3, 0.65],
            laws: vec![BandLaw::SmoothGradient, BandLaw::HighFreqStripes, BandLaw::MidFreqBlobs],
            seed,
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if h < 8 || w < 8 {
            return Err(Error::TooSmall(format!("synthetic frames need extents >= 8, got {h}x{w}")));
        }
        if self.laws.len() != self.boundaries.len() + 1 {
            return Err(Error::BadConfig(format!(
                "{} band laws for {} boundaries",
                self.laws.len(),
                self.boundaries.len()
            )));
        }
        let mut prev = 0.0;
        for &b in &self.boundaries {
            if b <= prev || b >= 1.0 {
                return Err(Error::BadConfig(String::from("band boundaries must be ascending in (0, 1)")));
            }
            prev = b;
        }
        Ok(())
    }

    /// Band index of a row, identical for every frame.
    pub fn band_of_row(&self, y: usize, h: usize) -> usize {
        let f = y as f64 / h as f64;
        self.boundaries.iter().take_while(|&&b| f >= b).count()
    }
}

/// Deterministic single-channel frame: layout fixed by the `LayoutSpec`, detail
/// varying with `frame_seed`. A per-frame global illumination gain makes
/// frame content visible to window-mean summaries (thermal contrast varies
/// frame to frame even when the layout does not).
pub fn synth_scene(spec: &LayoutSpec, frame_seed: u64, h: usize, w: usize) -> Result<Image> {
    spec.validate(h, w)?;
    let mut frame_rng = Rng::new(spec.seed).fork(0x6672616d65).fork(frame_seed.wrapping_mul(0x1000_0001) + 1);
    let gain = 0.9 + 0.2 * frame_rng.uniform();
    let mut data = vec![0.0; h * w];
    for (band, &law) in spec.laws.iter().enumerate() {
        let y_lo = if band == 0 { 0 } else { libm::ceil(spec.boundaries[band - 1] * h as f64) as usize };
        let y_hi = if band == spec.laws.len() - 1 {
            h
        } else {
            libm::ceil(spec.boundaries[band] * h as f64) as usize
        };
        if y_lo >= y_hi {
            continue;
        }
        // Structural draws (texture frequencies) come from the layout seed
        // and are shared by every frame; phases, rectangles, and offsets are
        // frame detail.
        let mut layout_rng = Rng::new(spec.seed).fork(0x6c61796f + band as u64);
        let mut band_rng = Rng::new(spec.seed)
            .fork(0x62616e64 + band as u64)
            .fork(frame_seed.wrapping_mul(0x1000_0001) + 1);
        match law {
            BandLaw::SmoothGradient => {
                let offset = 0.2 * (band_rng.uniform() - 0.5);
                let span = y_hi - y_lo;
                for y in y_lo..y_hi {
                    let v = 0.25 + 0.4 * (y - y_lo) as f64 / span.max(1) as f64 + offset;
                    for x in 0..w {
                        data[y * w + x] = v;
                    }
                }
            }
            BandLaw::HighFreqStripes => {
                // A layout-fixed high-frequency carrier plus a low-frequency
                // modulation; both phases are frame detail, so the band's
                // energy profile is stable while its content is not.
                let freq = 0.30 + 0.10 * layout_rng.uniform();
                let freq_lo = 0.08 + 0.04 * layout_rng.uniform();
                let phase = band_rng.uniform() * core::f64::consts::TAU;
                let phase_lo = band_rng.uniform() * core::f64::consts::TAU;
                for y in y_lo..y_hi {
                    for x in 0..w {
                        let s = libm::sin(core::f64::consts::TAU * freq * x as f64 + phase);
                        let m = libm::sin(core::f64::consts::TAU * freq_lo * x as f64 + phase_lo);
                        data[y * w + x] = 0.48 + 0.35 * s + 0.12 * m;
                    }
                }
                // Seeded rectangles: frame-specific structures in the band,
                // small enough to leave the band's energy profile stable.
                for _ in 0..2 {
                    let ry = y_lo + band_rng.below((y_hi - y_lo).max(1));
                    let rx = band_rng.below(w);
                    let rh = 1 + band_rng.below(((y_hi - y_lo) / 3).max(1));
                    let rw = 1 + band_rng.below((w / 8).max(1));
                    let val = 0.15 + 0.7 * band_rng.uniform();
                    for y in ry..(ry + rh).min(y_hi) {
                        for x in rx..(rx + rw).min(w) {
                            data[y * w + x] = val;
                        }
                    }
                }
            }
            BandLaw::MidFreqBlobs => {
                let fx = 0.05 + 0.04 * layout_rng.uniform();
                let fy = 0.05 + 0.04 * layout_rng.uniform();
                let px = band_rng.uniform() * core::f64::consts::TAU;
                let py = band_rng.uniform() * core::f64::consts::TAU;
                for y in y_lo..y_hi {
                    for x in 0..w {
                        let v = libm::sin(core::f64::consts::TAU * fx * x as f64 + px)
                            * libm::cos(core::f64::consts::TAU * fy * y as f64 + py);
                        data[y * w + x] = 0.45 + 0.25 * v;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v *= gain;
    }
    Image::new(1, h, w, data)
}

/// Per-pixel statistic for the anisotropy diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stat {
    /// Variance of the 3x3 neighborhood (edge-clamped).
    LocalVar3,
    /// Squared deviation from the 3x3 box mean (edge-clamped).
    HighPassEnergy,
}

/// Per-pixel statistic map of the single-channel view of an image.
pub fn stat_map(img: &Image, stat: Stat) -> Vec<f64> {
    let gray = img.gray();
    let (h, w) = (gray.h, gray.w);
    let at = |y: isize, x: isize| -> f64 {
        let yc = y.clamp(0, h as isize - 1) as usize;
        let xc = x.clamp(0, w as isize - 1) as usize;
        gray.data[yc * w + xc]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut mean = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    mean += at(y as isize + dy, x as isize + dx);
                }
            }
            mean /= 9.0;
            out[y * w + x] = match stat {
                Stat::LocalVar3 => {
                    let mut var = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let d = at(y as isize + dy, x as isize + dx) - mean;
                            var += d * d;
                        }
                    }
                    var / 9.0
                }
                Stat::HighPassEnergy => {
                    let d = gray.data[y * w + x] - mean;
                    d * d
                }
            };
        }
    }
    out
}

/// Spatial variance of the dataset-mean statistic map:
/// Var over pixels of (mean over images of stat(img)[pixel]).
/// Large values mean position-conditioned statistics; ~0 means none. The
/// one-pixel border is excluded from the variance: its clamped neighborhoods
/// carry a layout-independent edge artifact that would mask the floor.
pub fn layout_anisotropy(images: &[Image], stat: Stat) -> Result<f64> {
    let first = images.first().ok_or_else(|| Error::BadConfig(String::from("empty dataset")))?;
    let (h, w) = (first.h, first.w);
    if h < 3 || w < 3 {
        return Err(Error::TooSmall(format!("anisotropy needs >= 3x3 frames, got {h}x{w}")));
    }
    let mut mean_map = vec![0.0; h * w];
    for img in images {
        if img.h != h || img.w != w {
            return Err(Error::ShapeMismatch {
                op: "layout_anisotropy",
                detail: format!("{}x{} vs {h}x{w}", img.h, img.w),
            });
        }
        for (acc, v) in mean_map.iter_mut().zip(stat_map(img, stat)) {
            *acc += v;
        }
    }
    let n = images.len() as f64;
    for v in mean_map.iter_mut() {
        *v /= n;
    }
    let mut interior = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            interior.push(mean_map[y * w + x]);
        }
    }
    let mu = interior.iter().sum::<f64>() / interior.len() as f64;
    Ok(interior.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / interior.len() as f64)
}

/// Fixed-layout synthetic dataset with precomputed bicubic LR counterparts.
/// Frame i uses frame seed `frame_seed_base + i`.
pub struct SynthDataset<E: Elem> {
    pairs: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Elem> SynthDataset<E> {
    pub fn generate(
        spec: &LayoutSpec,
        frames: usize,
        hr_size: usize,
        scale: usize,
        frame_seed_base: u64,
    ) -> Result<SynthDataset<E>> {
        if hr_size % scale != 0 {
            return Err(Error::NonDivisible { what: "hr_size", extent: hr_size, divisor: scale });
        }
        let mut pairs = Vec::with_capacity(frames);
        for i in 0..frames {
            let hr = synth_scene(spec, frame_seed_base + i as u64, hr_size, hr_size)?;
            let lr = bicubic_resize(&hr, hr_size / scale, hr_size / scale)?;
            pairs.push((lr.to_tensor::<E>(), hr.to_tensor::<E>()));
        }
        Ok(SynthDataset { pairs })
    }

    /// The HR frames as images (for eval and diagnostics).
    pub fn hr_images(spec: &LayoutSpec, frames: usize, hr_size: usize, frame_seed_base: u64) -> Result<Vec<Image>> {
        (0..frames)
            .map(|i| synth_scene(spec, frame_seed_base + i as u64, hr_size, hr_size))
            .collect()
    }
}

impl<E: Elem> Dataset<E> for SynthDataset<E> {
    fn len(&self) -> usize {
        self.pairs.len()
    }
    fn pair(&self, index: usize) -> (Tensor<E>, Tensor<E>) {
        self.pairs[index].clone()
    }
}

/// In-memory paired dataset (the CLI's directory loader builds this).
pub struct PairedDataset<E: Elem> {
    pub pairs: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Elem> Dataset<E> for PairedDataset<E> {
    fn len(&self) -> usize {
        self.pairs.len()
    }
    fn pair(&self, index: usize) -> (Tensor<E>, Tensor<E>) {
        self.pairs[index].clone()
    }
}
