//! Raster kernels over 8-bit RGB buffers.
//!
//! Rotations and crops are exact pixel permutations/copies. Brightness,
//! blur and noise clamp to [0, 255] after rounding half away from zero.
//! Every kernel is deterministic given its inputs and seed.

use std::io::Cursor;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid dimensions {width}x{height} for {len} bytes")]
    InvalidDimensions { width: u32, height: u32, len: usize },
    #[error("brightness factor must be finite and >= 0, got {0}")]
    NegativeFactor(f64),
    #[error("blur sigma must be finite and > 0, got {0}")]
    NonPositiveSigma(f64),
    #[error("noise sigma must be finite and >= 0, got {0}")]
    NegativeNoise(f64),
    #[error("crop {x},{y} {w}x{h} outside {width}x{height} image")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("median radius must be >= 1")]
    InvalidRadius,
    #[error("invalid distortion spec: {0}")]
    InvalidSpec(String),
    #[error("png: {0}")]
    Png(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit RGB image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize * 3 {
            return Err(ImageError::InvalidDimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let pixels = rgb.repeat(width as usize * height as usize);
        Self::new(width, height, pixels)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Decodes a PNG; alpha is dropped and gray is expanded to RGB.
    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        Self::decode_png(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    fn map_values(&self, mut f: impl FnMut(u8) -> u8) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| f(*v)).collect(),
        }
    }
}

fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Rotates clockwise by `quarter_turns` × 90°; any integer is taken mod 4.
pub fn rotate(img: &ImageBuffer, quarter_turns: i32) -> ImageBuffer {
    let turns = quarter_turns.rem_euclid(4);
    if turns == 0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let (nw, nh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut pixels = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = match turns {
                1 => (h - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, w - 1 - x),
            };
            let src = img.idx(x, y);
            let dst = (ny as usize * nw as usize + nx as usize) * 3;
            pixels[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
        }
    }
    ImageBuffer {
        width: nw,
        height: nh,
        pixels,
    }
}

/// `v → clamp(round(v × factor))` on every channel.
pub fn adjust_brightness(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer, ImageError> {
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(ImageError::NegativeFactor(factor));
    }
    Ok(img.map_values(|v| clamp_round(f64::from(v) * factor)))
}

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders. Both passes run in
/// floating point and values are rounded once at the end.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer, ImageError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(ImageError::NonPositiveSigma(sigma));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let at = |x: i64, y: i64| ((y * w + x) * 3) as usize;

    let mut horizontal = vec![0f64; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += wt * f64::from(img.pixels[at(sx, y) + c]);
                }
                horizontal[at(x, y) + c] = acc;
            }
        }
    }
    let mut pixels = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += wt * horizontal[at(x, sy) + c];
                }
                pixels[at(x, y) + c] = clamp_round(acc);
            }
        }
    }
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        pixels,
    })
}

/// Standard normal samples from a seeded ChaCha8 stream via Box–Muller.
/// Each pair of uniforms yields the cosine sample first, then the sine one.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in (0, 1].
    fn uniform(&mut self) -> f64 {
        1.0 - (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Adds independent N(0, σ²) noise to every channel value.
pub fn add_gaussian_noise(img: &ImageBuffer, sigma: f64, seed: u64) -> Result<ImageBuffer, ImageError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ImageError::NegativeNoise(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut stream = GaussianStream::new(seed);
    Ok(img.map_values(|v| clamp_round(f64::from(v) + sigma * stream.next_sample())))
}

pub fn crop(img: &ImageBuffer, x: u32, y: u32, w: u32, h: u32) -> Result<ImageBuffer, ImageError> {
    let fits = w >= 1 && h >= 1 && x.checked_add(w).is_some_and(|r| r <= img.width) && y.checked_add(h).is_some_and(|b| b <= img.height);
    if !fits {
        return Err(ImageError::CropOutOfBounds {
            x,
            y,
            w,
            h,
            width: img.width,
            height: img.height,
        });
    }
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    for row in y..y + h {
        let start = img.idx(x, row);
        pixels.extend_from_slice(&img.pixels[start..start + w as usize * 3]);
    }
    Ok(ImageBuffer { width: w, height: h, pixels })
}

/// Per-channel median over the clamp-to-edge `(2r+1)²` window.
pub fn median_denoise(img: &ImageBuffer, radius: u32) -> Result<ImageBuffer, ImageError> {
    if radius == 0 {
        return Err(ImageError::InvalidRadius);
    }
    let r = radius as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut window = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    let mut pixels = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w - 1);
                        let sy = (y + dy).clamp(0, h - 1);
                        window.push(img.pixels[((sy * w + sx) * 3) as usize + c]);
                    }
                }
                let mid = window.len() / 2;
                pixels[((y * w + x) * 3) as usize + c] = *window.select_nth_unstable(mid).1;
            }
        }
    }
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        pixels,
    })
}

/// One recorded distortion step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionOp {
    Rotate90,
    Rotate180,
    Darken { factor: f64 },
    Overexpose { factor: f64 },
    Blur { sigma: f64 },
    Noise { sigma: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Rotate90,
    Rotate180,
    Darken,
    Overexpose,
    Blur,
    Noise,
    None,
}

impl DistortionOp {
    pub fn kind(&self) -> DistortionKind {
        match self {
            DistortionOp::Rotate90 => DistortionKind::Rotate90,
            DistortionOp::Rotate180 => DistortionKind::Rotate180,
            DistortionOp::Darken { .. } => DistortionKind::Darken,
            DistortionOp::Overexpose { .. } => DistortionKind::Overexpose,
            DistortionOp::Blur { .. } => DistortionKind::Blur,
            DistortionOp::Noise { .. } => DistortionKind::Noise,
            DistortionOp::None => DistortionKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub ops: Vec<DistortionOp>,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.ops.is_empty() {
            return Err(ImageError::InvalidSpec("empty op list".into()));
        }
        for op in &self.ops {
            let ok = match *op {
                DistortionOp::Darken { factor } => factor.is_finite() && (0.0..1.0).contains(&factor),
                DistortionOp::Overexpose { factor } => factor.is_finite() && factor > 1.0,
                DistortionOp::Blur { sigma } => sigma.is_finite() && sigma > 0.0,
                DistortionOp::Noise { sigma } => sigma.is_finite() && sigma >= 0.0,
                _ => true,
            };
            if !ok {
                return Err(ImageError::InvalidSpec(format!("bad parameters in {op:?}")));
            }
        }
        Ok(())
    }

    /// Kinds other than `None`, in application order.
    pub fn effective_kinds(&self) -> Vec<DistortionKind> {
        self.ops.iter().map(DistortionOp::kind).filter(|k| *k != DistortionKind::None).collect()
    }
}

/// Applies the ops left to right. The n-th noise op draws from
/// `seed + n` so repeated noise steps are independent.
pub fn apply_spec(img: &ImageBuffer, spec: &DistortionSpec) -> Result<ImageBuffer, ImageError> {
    spec.validate()?;
    let mut out = img.clone();
    let mut noise_ops = 0u64;
    for op in &spec.ops {
        out = match *op {
            DistortionOp::Rotate90 => rotate(&out, 1),
            DistortionOp::Rotate180 => rotate(&out, 2),
            DistortionOp::Darken { factor } | DistortionOp::Overexpose { factor } => adjust_brightness(&out, factor)?,
            DistortionOp::Blur { sigma } => gaussian_blur(&out, sigma)?,
            DistortionOp::Noise { sigma } => {
                let seeded = spec.seed.wrapping_add(noise_ops);
                noise_ops += 1;
                add_gaussian_noise(&out, sigma, seeded)?
            }
            DistortionOp::None => out,
        };
    }
    Ok(out)
}
