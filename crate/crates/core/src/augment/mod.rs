//! Stochastic image transforms applied on the fly during training.
//!
//! Every transform maps `[0, 1]` images to `[0, 1]` images. All randomness
//! is drawn from the caller's generator, so a [`SampleRng`](crate::rng::SampleRng)
//! keyed by `(seed, image_id, epoch)` makes [`augment_sample`] reproducible.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RasterImage;
use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub gamma_range: (f64, f64),
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub jitter_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Hue rotation in turns.
    pub hue_range: (f64, f64),
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub translate_prob: f64,
    /// Largest shift `(Δx, Δy)` in pixels.
    pub translate_max: (usize, usize),
    /// Output `(height, width)`.
    pub target: (usize, usize),
}

impl AugmentationConfig {
    /// Default ranges for a given output size; shifts up to 10% per axis.
    pub fn default_for(height: usize, width: usize) -> Self {
        AugmentationConfig {
            gamma_range: (0.7, 1.5),
            crop_scale_range: (0.7, 1.0),
            crop_aspect_range: (0.9, 1.1),
            flip_h_prob: 0.5,
            flip_v_prob: 0.2,
            jitter_prob: 0.8,
            brightness_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
            saturation_range: (0.8, 1.2),
            hue_range: (-0.05, 0.05),
            grayscale_prob: 0.1,
            blur_prob: 0.3,
            blur_sigma_range: (0.1, 1.5),
            translate_prob: 0.5,
            translate_max: (width / 10, height / 10),
            target: (height, width),
        }
    }

    /// Every transform switched off; the crop covers any source with the
    /// target's aspect ratio, so a source already at `target` passes through.
    pub fn disabled(height: usize, width: usize) -> Self {
        let aspect = width as f64 / height as f64;
        AugmentationConfig {
            gamma_range: (1.0, 1.0),
            crop_scale_range: (1.0, 1.0),
            crop_aspect_range: (aspect, aspect),
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            jitter_prob: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            hue_range: (0.0, 0.0),
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: (1.0, 1.0),
            translate_prob: 0.0,
            translate_max: (0, 0),
            target: (height, width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("gamma_range", self.gamma_range),
            ("crop_scale_range", self.crop_scale_range),
            ("crop_aspect_range", self.crop_aspect_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
            ("hue_range", self.hue_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("augment.{name}: need lo ≤ hi, got ({lo}, {hi})")));
            }
        }
        let positive = [
            ("gamma_range", self.gamma_range.0),
            ("crop_scale_range", self.crop_scale_range.0),
            ("crop_aspect_range", self.crop_aspect_range.0),
            ("blur_sigma_range", self.blur_sigma_range.0),
        ];
        for (name, lo) in positive {
            if lo <= 0.0 {
                return Err(Error::invalid(format!("augment.{name} must be positive")));
            }
        }
        if self.crop_scale_range.1 > 1.0 {
            return Err(Error::invalid("augment.crop_scale_range must lie in (0, 1]"));
        }
        for (name, lo) in [
            ("brightness_range", self.brightness_range.0),
            ("contrast_range", self.contrast_range.0),
            ("saturation_range", self.saturation_range.0),
        ] {
            if lo < 0.0 {
                return Err(Error::invalid(format!("augment.{name} must be nonnegative")));
            }
        }
        let probs = [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("translate_prob", self.translate_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("augment.{name} = {p} is not a probability")));
            }
        }
        if self.target.0 == 0 || self.target.1 == 0 {
            return Err(Error::invalid("augment.target must be positive"));
        }
        Ok(())
    }
}

fn map_pixels(img: &RasterImage, f: impl Fn(f64) -> f64) -> RasterImage {
    let pixels = img.pixels().iter().map(|&p| f(p)).collect();
    RasterImage::from_clamped(img.height(), img.width(), img.channels(), pixels).expect("same geometry")
}

/// `p → p^γ`
pub fn gamma_correct(img: &RasterImage, gamma: f64) -> Result<RasterImage> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    Ok(map_pixels(img, |p| p.powf(gamma)))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &RasterImage, height: usize, width: usize) -> Result<RasterImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let taps = |out: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let xtaps: Vec<_> = (0..width).map(|x| taps(x, sx, w)).collect();
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = taps(y, sy, h);
        for &(x0, x1, fx) in &xtaps {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    RasterImage::from_clamped(height, width, c, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws a region whose area fraction lies in `scale` and whose
/// width/height ratio lies in `aspect`; after 10 misses, the largest centred
/// region with an admissible ratio.
pub fn sample_crop_box<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
) -> CropBox {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let s = rng.gen_range(scale.0..=scale.1);
        let a = rng.gen_range(aspect.0..=aspect.1);
        let cw = (area * s * a).sqrt().round() as usize;
        let ch = (area * s / a).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= width && ch <= height {
            let top = rng.gen_range(0..=height - ch);
            let left = rng.gen_range(0..=width - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let ratio = width as f64 / height as f64;
    let (ch, cw) = if ratio < aspect.0 {
        (((width as f64 / aspect.0).round() as usize).clamp(1, height), width)
    } else if ratio > aspect.1 {
        (height, ((height as f64 * aspect.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropBox {
        top: (height - ch) / 2,
        left: (width - cw) / 2,
        height: ch,
        width: cw,
    }
}

pub fn crop(img: &RasterImage, b: CropBox) -> Result<RasterImage> {
    if b.height == 0 || b.width == 0 || b.top + b.height > img.height() || b.left + b.width > img.width() {
        return Err(Error::invalid(format!(
            "crop {b:?} outside {}×{} image",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let mut out = Vec::with_capacity(b.height * b.width * c);
    for y in b.top..b.top + b.height {
        let row = (y * img.width() + b.left) * c;
        out.extend_from_slice(&img.pixels()[row..row + b.width * c]);
    }
    RasterImage::new(b.height, b.width, c, out)
}

pub fn random_crop_resize<R: Rng + ?Sized>(
    img: &RasterImage,
    rng: &mut R,
    scale: (f64, f64),
    aspect: (f64, f64),
    target: (usize, usize),
) -> Result<RasterImage> {
    let b = sample_crop_box(rng, img.height(), img.width(), scale, aspect);
    resize_bilinear(&crop(img, b)?, target.0, target.1)
}

pub fn flip_h(img: &RasterImage) -> RasterImage {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            out.extend_from_slice(&img.pixels()[i..i + c]);
        }
    }
    RasterImage::new(h, w, c, out).expect("same geometry")
}

pub fn flip_v(img: &RasterImage) -> RasterImage {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in (0..h).rev() {
        out.extend_from_slice(&img.pixels()[y * w * c..(y + 1) * w * c]);
    }
    RasterImage::new(h, w, c, out).expect("same geometry")
}

/// One concrete draw of the colour-jitter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Turns.
    pub hue: f64,
    /// Application order: 0 brightness, 1 contrast, 2 saturation, 3 hue.
    pub order: [u8; 4],
}

impl JitterParams {
    pub const NEUTRAL: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        order: [0, 1, 2, 3],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentationConfig) -> Self {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        JitterParams {
            brightness: rng.gen_range(cfg.brightness_range.0..=cfg.brightness_range.1),
            contrast: rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1),
            saturation: rng.gen_range(cfg.saturation_range.0..=cfg.saturation_range.1),
            hue: rng.gen_range(cfg.hue_range.0..=cfg.hue_range.1),
            order,
        }
    }
}

fn luma(px: &[f64]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

/// RGB in `[0,1]` → (hue in turns `[0,1)`, saturation, value).
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies the four colour perturbations in `params.order`, clamping after each.
pub fn jitter_with(img: &RasterImage, params: &JitterParams) -> Result<RasterImage> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("color jitter needs 3 channels, got {}", img.channels())));
    }
    let mut px = img.pixels().to_vec();
    for step in params.order {
        match step {
            0 => px.iter_mut().for_each(|p| *p = (params.brightness * *p).clamp(0.0, 1.0)),
            1 => {
                let mean = px.chunks(3).map(luma).sum::<f64>() / (px.len() / 3) as f64;
                px.iter_mut()
                    .for_each(|p| *p = (mean + params.contrast * (*p - mean)).clamp(0.0, 1.0));
            }
            2 => {
                for chunk in px.chunks_mut(3) {
                    let l = luma(chunk);
                    for p in chunk {
                        *p = (l + params.saturation * (*p - l)).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                for chunk in px.chunks_mut(3) {
                    let [h, s, v] = rgb_to_hsv([chunk[0], chunk[1], chunk[2]]);
                    let rgb = hsv_to_rgb([h + params.hue, s, v]);
                    for (p, q) in chunk.iter_mut().zip(rgb) {
                        *p = q.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    RasterImage::from_clamped(img.height(), img.width(), 3, px)
}

pub fn color_jitter<R: Rng + ?Sized>(img: &RasterImage, rng: &mut R, cfg: &AugmentationConfig) -> Result<RasterImage> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("color jitter needs 3 channels, got {}", img.channels())));
    }
    let params = JitterParams::sample(rng, cfg);
    jitter_with(img, &params)
}

/// BT.601 luma, single channel.
pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("grayscale conversion needs 3 channels, got {}", img.channels())));
    }
    let px = img.pixels().chunks(3).map(luma).collect();
    RasterImage::from_clamped(img.height(), img.width(), 1, px)
}

/// Discretized, renormalized 2-D Gaussian on a `(2r+1)²` grid, `r = ⌈3σ⌉`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let radius = kernel_radius(sigma)?;
        let n = 2 * radius + 1;
        let r = radius as isize;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let mut weights = Vec::with_capacity(n * n);
        for v in -r..=r {
            for u in -r..=r {
                let d2 = (u * u + v * v) as f64;
                weights.push(norm * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(BlurKernel { radius, weights })
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(u, v)` from the centre.
    pub fn at(&self, u: isize, v: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((v + r) as usize) * self.side() + (u + r) as usize]
    }
}

fn kernel_radius(sigma: f64) -> Result<usize> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    Ok((3.0 * sigma).ceil() as usize)
}

/// Normalized 1-D Gaussian taps; the outer product equals [`BlurKernel::gaussian`].
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    let r = kernel_radius(sigma)? as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|u| (-((u * u) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    let taps = gaussian_taps(sigma)?;
    let r = (taps.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - r, w);
                    acc += t * img.get(y, sx, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - r, h);
                    acc += t * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    RasterImage::from_clamped(h, w, c, out)
}

/// Direct 2-D convolution with the full kernel; reference for [`gaussian_blur`].
pub fn gaussian_blur_2d(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    let k = BlurKernel::gaussian(sigma)?;
    let r = k.radius as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for v in -r..=r {
                    let sy = reflect_index(y as isize + v, h);
                    for u in -r..=r {
                        let sx = reflect_index(x as isize + u, w);
                        acc += k.at(u, v) * img.get(sy, sx, ch);
                    }
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    RasterImage::from_clamped(h, w, c, out)
}

/// Output `(x, y)` = input `(x − dx, y − dy)`; uncovered pixels are zero.
pub fn translate(img: &RasterImage, dx: isize, dy: isize) -> RasterImage {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&img.pixels()[src..src + c]);
        }
    }
    RasterImage::new(h, w, c, out).expect("same geometry")
}

/// gamma → crop/resize → flips → jitter → grayscale → blur → translate, each
/// gated by its probability. Colour jitter only touches three-channel images.
pub fn augment_sample<R: Rng + ?Sized>(img: &RasterImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<RasterImage> {
    cfg.validate()?;
    let gamma = rng.gen_range(cfg.gamma_range.0..=cfg.gamma_range.1);
    let mut out = gamma_correct(img, gamma)?;
    out = random_crop_resize(&out, rng, cfg.crop_scale_range, cfg.crop_aspect_range, cfg.target)?;
    if rng.gen_bool(cfg.flip_h_prob) {
        out = flip_h(&out);
    }
    if rng.gen_bool(cfg.flip_v_prob) {
        out = flip_v(&out);
    }
    if rng.gen_bool(cfg.jitter_prob) {
        let params = JitterParams::sample(rng, cfg);
        if out.channels() == 3 {
            out = jitter_with(&out, &params)?;
        }
    }
    if rng.gen_bool(cfg.grayscale_prob) && out.channels() == 3 {
        out = to_grayscale(&out)?;
    }
    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
        out = gaussian_blur(&out, sigma)?;
    }
    if rng.gen_bool(cfg.translate_prob) {
        let (mx, my) = (cfg.translate_max.0 as isize, cfg.translate_max.1 as isize);
        let dx = rng.gen_range(-mx..=mx);
        let dy = rng.gen_range(-my..=my);
        out = translate(&out, dx, dy);
    }
    Ok(out)
}
