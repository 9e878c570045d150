use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Planar CHW image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::Invalid(format!(
                "{channels}x{height}x{width} image with {} values",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    /// Brightness, contrast, saturation and hue strengths.
    pub jitter: [f64; 4],
    pub jitter_p: f64,
    pub gray_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_p: 0.8,
            gray_p: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Full-image crop and no photometric change.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter: [0.0; 4],
            jitter_p: 0.0,
            gray_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        let probs = [self.flip_p, self.jitter_p, self.gray_p];
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Invalid("crop scale must satisfy 0 < lo <= hi <= 1".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.jitter.iter().any(|j| *j < 0.0) || self.jitter[3] > 0.5 {
            return Err(Error::Invalid("augmentation probabilities or jitter out of range".into()));
        }
        Ok(())
    }
}

/// Crop box `(top, left, height, width)`, sampled the usual way: ten tries
/// at a random area and aspect ratio, then a centre crop.
fn crop_box<R: Rng>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        ((w as f64 / cfg.crop_ratio.0).round() as usize, w)
    } else if in_ratio > cfg.crop_ratio.1 {
        (h, (h as f64 * cfg.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resize of a crop, half-pixel centres, edge clamped.
fn resized_crop(img: &Image, (top, left, ch, cw): (usize, usize, usize, usize), size: usize) -> Image {
    let mut out = Vec::with_capacity(img.channels * size * size);
    let (sy, sx) = (ch as f64 / size as f64, cw as f64 / size as f64);
    let coord = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..size).map(|y| coord(y, sy, ch)).collect();
    let xs: Vec<_> = (0..size).map(|x| coord(x, sx, cw)).collect();
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| img.at(c, top + y, left + x);
                let a = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let b = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(a + (b - a) * fy);
            }
        }
    }
    Image { channels: img.channels, height: size, width: size, data: out }
}

fn flip(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale(img: &mut Image) {
    let n = img.plane();
    for i in 0..n {
        let y = luma(img.data[i], img.data[n + i], img.data[2 * n + i]);
        for c in 0..3 {
            img.data[c * n + i] = y;
        }
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn blend_towards(img: &mut Image, factor: f32, other: impl Fn(usize) -> f32) {
    let n = img.plane();
    for (j, v) in img.data.iter_mut().enumerate() {
        let o = other(j % n);
        *v = clamp01(o + (*v - o) * factor);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize).min(5);
    let f = h6 - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(img: &mut Image, shift: f32) {
    let n = img.plane();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img.data[i] = clamp01(r);
        img.data[n + i] = clamp01(g);
        img.data[2 * n + i] = clamp01(b);
    }
}

fn color_jitter<R: Rng>(img: &mut Image, strength: [f64; 4], rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |s: f64, rng: &mut R| rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
    let factors = [
        factor(strength[0], rng),
        factor(strength[1], rng),
        factor(strength[2], rng),
        rng.gen_range(-strength[3]..=strength[3]) as f32,
    ];
    let n = img.plane();
    for k in order {
        match k {
            0 => blend_towards(img, factors[0], |_| 0.0),
            1 => {
                let mean = (0..n).map(|i| luma(img.data[i], img.data[n + i], img.data[2 * n + i])).sum::<f32>() / n as f32;
                blend_towards(img, factors[1], |_| mean);
            }
            2 => {
                let gray: Vec<f32> = (0..n).map(|i| luma(img.data[i], img.data[n + i], img.data[2 * n + i])).collect();
                blend_towards(img, factors[2], |i| gray[i]);
            }
            _ => {
                if factors[3] != 0.0 {
                    shift_hue(img, factors[3]);
                }
            }
        }
    }
}

/// Random resized crop to `size`, horizontal flip, colour jitter and
/// grayscale, each gated by its probability. Values stay in `[0, 1]`.
pub fn augment_view<R: Rng>(img: &Image, size: usize, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let bx = crop_box(img.height, img.width, cfg, rng);
    let mut out = resized_crop(img, bx, size);
    if rng.gen::<f64>() < cfg.flip_p {
        flip(&mut out);
    }
    if out.channels == 3 {
        if rng.gen::<f64>() < cfg.jitter_p {
            color_jitter(&mut out, cfg.jitter, rng);
        }
        if rng.gen::<f64>() < cfg.gray_p {
            grayscale(&mut out);
        }
    }
    for v in &mut out.data {
        *v = clamp01(*v);
    }
    out
}

/// `count` patches of side `size`, each cropped and augmented on its own.
pub fn sample_patches_independent<R: Rng>(
    img: &Image,
    count: usize,
    size: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<Image>> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::Invalid(format!(
            "patch size {size} for a {}x{} image",
            img.height, img.width
        )));
    }
    Ok((0..count).map(|_| augment_view(img, size, cfg, rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MulticropMode {
    None,
    /// One more full-resolution view per image.
    ExtraFullCrop,
}

pub fn multicrop_extra<R: Rng>(img: &Image, cfg: &AugmentConfig, mode: MulticropMode, rng: &mut R) -> Option<Image> {
    match mode {
        MulticropMode::None => None,
        MulticropMode::ExtraFullCrop => Some(augment_view(img, img.height, cfg, rng)),
    }
}
