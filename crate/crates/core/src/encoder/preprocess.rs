//! Image preprocessing: scale to [0, 1], bicubic resize to the model
//! resolution, channel-wise standardization.

use image::DynamicImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};

/// Standard CLIP channel means (RGB, on [0, 1] pixels).
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
/// Standard CLIP channel standard deviations.
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Square output resolution.
    pub resolution: usize,
    /// Per-channel mean subtracted after scaling pixels to [0, 1].
    pub mean: [f64; 3],
    /// Per-channel divisor applied after mean subtraction.
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resolution: 240,
            mean: CLIP_MEAN,
            std: CLIP_STD,
        }
    }
}

impl PreprocessConfig {
    /// No-op standardization; pixels stay on [0, 1].
    pub fn identity(resolution: usize) -> Self {
        Self {
            resolution,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Decode-agnostic preprocessing: grayscale is replicated to 3 channels,
/// pixels are scaled to [0, 1], resized to `resolution` with bicubic
/// (Catmull-Rom) interpolation, then standardized per channel.
pub fn preprocess_image(raw: &DynamicImage, config: &PreprocessConfig) -> Result<ImageTensor> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::InvalidInput("zero-sized image".into()));
    }
    if config.resolution == 0 {
        return Err(Error::InvalidInput("zero output resolution".into()));
    }
    if config.std.iter().any(|&s| s <= 0.0 || !s.is_finite())
        || config.mean.iter().any(|m| !m.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "invalid standardization constants mean={:?} std={:?}",
            config.mean, config.std
        )));
    }

    // RGB upfront; grayscale sources replicate into all three channels.
    let rgb = raw.to_rgb8();
    let (src_w, src_h) = (rgb.width() as usize, rgb.height() as usize);
    let mut channels = Array3::<f64>::zeros((3, src_h, src_w));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            channels[(c, y as usize, x as usize)] = pixel.0[c] as f64 / 255.0;
        }
    }

    let res = config.resolution;
    let resized = if src_h == res && src_w == res {
        channels
    } else {
        let mut out = Array3::<f64>::zeros((3, res, res));
        for c in 0..3 {
            resize_bicubic_channel(&channels, c, src_h, src_w, res, &mut out);
        }
        out
    };

    let mut standardized = resized;
    for c in 0..3 {
        let mean = config.mean[c];
        let std = config.std[c];
        standardized
            .index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
    if standardized.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite pixel after standardization".into()));
    }
    ImageTensor::new(standardized)
}

/// Catmull-Rom kernel, a bicubic interpolation filter with a = -0.5.
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn resize_bicubic_channel(
    src: &Array3<f64>,
    channel: usize,
    src_h: usize,
    src_w: usize,
    res: usize,
    out: &mut Array3<f64>,
) {
    let scale_y = src_h as f64 / res as f64;
    let scale_x = src_w as f64 / res as f64;
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    for oy in 0..res {
        // Pixel-center alignment.
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor() as i64;
        let fy = sy - y0 as f64;
        for ox in 0..res {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor() as i64;
            let fx = sx - x0 as f64;
            let mut acc = 0.0;
            let mut weight_sum = 0.0;
            for dy in -1i64..=2 {
                let wy = catmull_rom(dy as f64 - fy);
                if wy == 0.0 {
                    continue;
                }
                let yy = clamp(y0 + dy, src_h);
                for dx in -1i64..=2 {
                    let wx = catmull_rom(dx as f64 - fx);
                    if wx == 0.0 {
                        continue;
                    }
                    let xx = clamp(x0 + dx, src_w);
                    acc += wy * wx * src[(channel, yy, xx)];
                    weight_sum += wy * wx;
                }
            }
            out[(channel, oy, ox)] = acc / weight_sum;
        }
    }
}
