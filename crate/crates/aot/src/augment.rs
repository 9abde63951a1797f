//! Negative-branch image augmentations: forward-diffusion noising at a fixed
//! step, random horizontal flip, and random erase (random crop available
//! behind a flag), all deterministic functions of (image, descriptor).
//!
//! Images are processed as float buffers scaled to [-1, 1]; values are
//! clamped only at the final 8-bit re-quantization.

use std::io::Cursor;
use std::path::Path;

use image::ImageReader;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::dataset::AugmentationDescriptor;
use crate::error::Error;
use crate::seed::derive_seed;
use crate::Result;

/// RGB image as row-major f32 channel values in [-1, 1] (pre-noise).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    /// Length `width * height * 3`, pixel-major then channel.
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(Error::Validation(format!(
                "image buffer length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(FloatImage { width, height, data })
    }

    /// Decode an 8-bit RGB raster file and scale to [-1, 1].
    pub fn load(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .decode()
            .map_err(|e| Error::Validation(format!("cannot decode image {}: {e}", path.display())))?
            .to_rgb8();
        let (width, height) = (img.width(), img.height());
        let data = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        Ok(FloatImage { width, height, data })
    }

    /// Re-quantize to 8-bit RGB (the only place values are clamped) and
    /// encode as PNG. Pure function of the pixel values.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&v| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.width, self.height, raw).expect("length checked");
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("png encode failed: {e}")))?;
        Ok(bytes)
    }

    fn pixel_index(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * 3) as usize
    }
}

/// Forward-diffusion variance schedule: per-step variances from a linear ramp
/// and their cumulative signal-retention products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    total_steps: usize,
    beta: Vec<f64>,
    /// `alpha_bar[t]` for t in 0..=total_steps, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Default variance-ramp endpoints for [`NoiseSchedule::standard`].
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// The usual ramp endpoints over a configurable step count.
    pub fn standard(total_steps: usize) -> Result<Self> {
        NoiseSchedule::linear(total_steps, BETA_START, BETA_END)
    }

    /// Linear variance ramp from `beta_start` to `beta_end` over `total_steps`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        let mut beta = Vec::with_capacity(total_steps);
        for t in 1..=total_steps {
            let b = if total_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (total_steps - 1) as f64
            };
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Validation(format!("beta_{t} = {b} outside (0, 1)")));
            }
            beta.push(b);
        }
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        for (i, b) in beta.iter().enumerate() {
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        Ok(NoiseSchedule { total_steps, beta, alpha_bar })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn beta(&self, t: usize) -> Option<f64> {
        if t >= 1 && t <= self.total_steps {
            Some(self.beta[t - 1])
        } else {
            None
        }
    }

    /// Cumulative signal retention at step `t` (1 at t = 0).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Validation(format!("step {t} exceeds schedule total {}", self.total_steps)))
    }
}

impl Default for NoiseSchedule {
    /// The standard linear schedule: 1000 steps ramping 1e-4 to 0.02.
    fn default() -> Self {
        NoiseSchedule::standard(1000).expect("standard schedule is valid")
    }
}

/// Diffuse `image` forward to step `t`: retains sqrt(alpha_bar_t) of the
/// signal and adds Gaussian noise with variance 1 - alpha_bar_t per channel.
/// t = 0 is an exact identity.
pub fn forward_noise(
    image: &FloatImage,
    t: usize,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<FloatImage> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Ok(image.clone());
    }
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let data = image
        .data
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample(StandardNormal);
            (signal * x as f64 + noise * eps) as f32
        })
        .collect();
    Ok(FloatImage { width: image.width, height: image.height, data })
}

/// Mirror the image horizontally with probability `p`.
pub fn random_flip(image: &FloatImage, p: f64, rng_seed: u64) -> Result<FloatImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("flip probability {p} outside [0,1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    if rng.random::<f64>() >= p {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let src = image.pixel_index(image.width - 1 - x, y);
            let dst = out.pixel_index(x, y);
            out.data[dst..dst + 3].copy_from_slice(&image.data[src..src + 3]);
        }
    }
    Ok(out)
}

/// Rectangle geometry shared by erase and crop: a roughly square region whose
/// area fraction is uniform in `area_range`, uniformly placed.
fn draw_rect(
    rng: &mut ChaCha12Rng,
    width: u32,
    height: u32,
    area_range: (f64, f64),
) -> (u32, u32, u32, u32) {
    let (lo, hi) = area_range;
    let frac = rng.random_range(lo..=hi);
    let target = frac * (width as f64) * (height as f64);
    let side = target.sqrt();
    let rect_w = (side.round() as u32).clamp(1, width);
    let rect_h = ((target / rect_w as f64).round() as u32).clamp(1, height);
    let x0 = rng.random_range(0..=width - rect_w);
    let y0 = rng.random_range(0..=height - rect_h);
    (x0, y0, rect_w, rect_h)
}

fn check_area_range(area_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = area_range;
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(Error::Validation(format!(
            "area range ({lo}, {hi}) must satisfy 0 < min <= max < 1"
        )));
    }
    Ok(())
}

/// With probability `p`, fill a random rectangle (area fraction uniform in
/// `area_range`) with per-pixel uniform noise in [-1, 1].
pub fn random_erase(
    image: &FloatImage,
    p: f64,
    area_range: (f64, f64),
    rng_seed: u64,
) -> Result<FloatImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("erase probability {p} outside [0,1]")));
    }
    check_area_range(area_range)?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    if rng.random::<f64>() >= p {
        return Ok(image.clone());
    }
    let (x0, y0, rect_w, rect_h) = draw_rect(&mut rng, image.width, image.height, area_range);
    let mut out = image.clone();
    for y in y0..y0 + rect_h {
        for x in x0..x0 + rect_w {
            let idx = out.pixel_index(x, y);
            for c in 0..3 {
                out.data[idx + c] = rng.random_range(-1.0f32..=1.0);
            }
        }
    }
    Ok(out)
}

/// With probability `p`, crop a random rectangle (same geometry as erase) and
/// resize it back to the original dimensions with nearest-neighbor sampling.
/// This is the documented alternative to erase, enabled by a config flag.
pub fn random_crop(
    image: &FloatImage,
    p: f64,
    area_range: (f64, f64),
    rng_seed: u64,
) -> Result<FloatImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("crop probability {p} outside [0,1]")));
    }
    check_area_range(area_range)?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    if rng.random::<f64>() >= p {
        return Ok(image.clone());
    }
    let (x0, y0, rect_w, rect_h) = draw_rect(&mut rng, image.width, image.height, area_range);
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let src_x = x0 + ((x as u64 * rect_w as u64) / image.width as u64) as u32;
            let src_y = y0 + ((y as u64 * rect_h as u64) / image.height as u64) as u32;
            let src = image.pixel_index(src_x.min(x0 + rect_w - 1), src_y.min(y0 + rect_h - 1));
            let dst = out.pixel_index(x, y);
            let pixel = [image.data[src], image.data[src + 1], image.data[src + 2]];
            out.data[dst..dst + 3].copy_from_slice(&pixel);
        }
    }
    Ok(out)
}

/// Apply the full augmentation chain in the fixed order flip then erase (or
/// crop when `use_crop` is set) then noise, each stage drawing from an
/// independent sub-seed of `descriptor.rng_seed`.
pub fn apply(
    descriptor: &AugmentationDescriptor,
    image: &FloatImage,
    schedule: &NoiseSchedule,
) -> Result<FloatImage> {
    descriptor.validate(schedule.total_steps()).map_err(Error::Validation)?;
    let area = (descriptor.erase_area[0], descriptor.erase_area[1]);
    let flipped = random_flip(image, descriptor.flip_prob, derive_seed(descriptor.rng_seed, &["flip"]))?;
    let occluded = if descriptor.use_crop {
        random_crop(&flipped, descriptor.erase_prob, area, derive_seed(descriptor.rng_seed, &["crop"]))?
    } else {
        random_erase(&flipped, descriptor.erase_prob, area, derive_seed(descriptor.rng_seed, &["erase"]))?
    };
    forward_noise(
        &occluded,
        descriptor.noise_step,
        schedule,
        derive_seed(descriptor.rng_seed, &["noise"]),
    )
}
