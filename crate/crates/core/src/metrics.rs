//! PSNR and SSIM on the luma channel.

use crate::error::{Error, Result};
use crate::image::ImagePlanes;

pub const PSNR_CEILING_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// BT.601 full-range luma.
pub fn rgb_to_y(image: &ImagePlanes) -> Result<ImagePlanes> {
    let [n, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::Shape(format!("luma needs 3 channels, got {c}")));
    }
    let mut out = ImagePlanes::zeros([n, 1, h, w]);
    for b in 0..n {
        let (r, g, bl) = (image.plane(b, 0), image.plane(b, 1), image.plane(b, 2));
        let dst = &mut out.data_mut()[b * h * w..(b + 1) * h * w];
        for i in 0..h * w {
            dst[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
        }
    }
    Ok(out)
}

/// Luma of a 3-channel image; 1-channel input is taken to be luma already.
pub fn luma(image: &ImagePlanes) -> Result<ImagePlanes> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => rgb_to_y(image),
        c => Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

pub fn psnr_y(a: &ImagePlanes, b: &ImagePlanes) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (ya, yb) = (luma(a)?, luma(b)?);
    let mse = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CEILING_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CEILING_DB))
}

/// Single-scale SSIM, averaged over valid window positions and batch items.
pub fn ssim_y(a: &ImagePlanes, b: &ImagePlanes) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (ya, yb) = (luma(a)?, luma(b)?);
    let [n, _, h, w] = ya.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for item in 0..n {
        let (pa, pb) = (ya.plane(item, 0), yb.plane(item, 0));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &kernel);
        let mu_b = filter_valid(pb, h, w, &kernel);
        let aa = filter_valid(&prod(&|x, _| x * x), h, w, &kernel);
        let bb = filter_valid(&prod(&|_, y| y * y), h, w, &kernel);
        let ab = filter_valid(&prod(&|x, y| x * y), h, w, &kernel);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / n as f64)
}

pub fn evaluate(a: &ImagePlanes, b: &ImagePlanes) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr_y(a, b)?,
        ssim: ssim_y(a, b)?,
    })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering, keeping only positions where the window fits.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}
