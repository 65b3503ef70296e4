//! Sensor-side plumbing: RGGB mosaic, bilinear demosaic and a minimal ISP.

use crate::condition::{bayer_color, RawFrame};
use crate::error::{Error, Result};
use crate::image::ImagePlanes;

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const RAW_BITS: u32 = 14;
pub const SRGB_BITS: u32 = 8;

/// Round to the nearest code of a `bits`-deep unsigned format, ties to even.
pub fn quantize(v: f64, bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    (v.clamp(0.0, 1.0) * levels).round_ties_even() / levels
}

/// Sample a `[1, 3, H, W]` image on the RGGB lattice.
pub fn mosaic(rgb: &ImagePlanes) -> Result<RawFrame> {
    let [n, c, h, w] = rgb.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("mosaic expects [1, 3, h, w], got {:?}", rgb.shape())));
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(rgb.get(0, bayer_color(y, x), y, x));
        }
    }
    RawFrame::new(h, w, data)
}

const KERNEL_G: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
const KERNEL_RB: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];

/// Bilinear demosaic as a normalized convolution, so the frame border needs
/// no special casing. Sampled sites pass through unchanged.
pub fn demosaic(raw: &RawFrame) -> ImagePlanes {
    let (h, w) = (raw.height(), raw.width());
    let mut out = ImagePlanes::zeros([1, 3, h, w]);
    for c in 0..3 {
        let k = if c == 1 { &KERNEL_G } else { &KERNEL_RB };
        for y in 0..h {
            for x in 0..w {
                let (mut num, mut den) = (0.0, 0.0);
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kw) in row.iter().enumerate() {
                        let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                        if kw == 0.0 || sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        if bayer_color(sy, sx) == c {
                            num += kw * raw.get(sy, sx);
                            den += kw;
                        }
                    }
                }
                out.set(0, c, y, x, num / den);
            }
        }
    }
    out
}

/// Demosaic, white balance, clamp, then `v^(1/gamma)`.
pub fn f_isp(raw: &RawFrame, wb_gains: [f64; 3], gamma: f64) -> Result<ImagePlanes> {
    if let Some(g) = wb_gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(Error::OutOfRange { what: "white-balance gain", detail: format!("{g} must be positive") });
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::OutOfRange { what: "gamma", detail: format!("{gamma} must be positive") });
    }
    let mut rgb = demosaic(raw);
    let hw = raw.height() * raw.width();
    for (c, gain) in wb_gains.iter().enumerate() {
        for v in &mut rgb.data_mut()[c * hw..(c + 1) * hw] {
            *v = (*v * gain).clamp(0.0, 1.0).powf(1.0 / gamma);
        }
    }
    Ok(rgb)
}
