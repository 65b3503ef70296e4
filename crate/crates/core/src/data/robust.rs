//! Ground-truth construction from a burst: crop, sigma-clipped mean,
//! intensity matching and spatial alignment.

use super::align::{spatial_align, AlignOutcome};
use crate::error::{Error, Result};
use crate::image::ImagePlanes;

pub const DEFAULT_CLIP_SIGMA: f64 = 2.5;
pub const DEFAULT_CLIP_ITERS: usize = 3;

/// Per-pixel mean after iteratively discarding samples more than
/// `clip_sigma` population standard deviations from the running mean.
pub fn robust_mean(stack: &[ImagePlanes], clip_sigma: f64, iters: usize) -> Result<ImagePlanes> {
    let first = stack.first().ok_or_else(|| Error::Input("empty stack".into()))?;
    if stack.len() < 2 {
        return Err(Error::Input("robust mean needs at least two images".into()));
    }
    if !(clip_sigma > 0.0) {
        return Err(Error::OutOfRange { what: "clip_sigma", detail: format!("{clip_sigma} must be positive") });
    }
    for img in &stack[1..] {
        first.ensure_same_shape(img)?;
    }
    let mut out = first.clone();
    let mut samples = Vec::with_capacity(stack.len());
    let mut keep = vec![true; stack.len()];
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        samples.clear();
        samples.extend(stack.iter().map(|img| img.data()[i]));
        keep.fill(true);
        let mut mean = masked_mean(&samples, &keep);
        for _ in 0..iters {
            let n = keep.iter().filter(|k| **k).count() as f64;
            let var = samples.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| (v - mean).powi(2)).sum::<f64>() / n;
            let bound = clip_sigma * var.sqrt();
            let next: Vec<bool> = samples.iter().map(|v| (v - mean).abs() <= bound).collect();
            if next == keep || !next.iter().any(|k| *k) {
                break;
            }
            keep.copy_from_slice(&next);
            mean = masked_mean(&samples, &keep);
        }
        *o = mean;
    }
    Ok(out)
}

/// Accumulates deviations from the first kept sample, so equal samples
/// return that sample exactly.
fn masked_mean(v: &[f64], keep: &[bool]) -> f64 {
    let mut kept = v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x);
    let pivot = kept.next().unwrap_or(0.0);
    let (s, n) = kept.fold((0.0, 1usize), |(s, n), x| (s + (x - pivot), n + 1));
    pivot + s / n as f64
}

/// `j_m - mu_m + mu_1`.
pub fn intensity_align(j_m: &ImagePlanes, mu_m: f64, mu_1: f64) -> ImagePlanes {
    j_m.map(|v| v - mu_m + mu_1)
}

/// Centered crop keeping `fraction` of each side.
pub fn center_crop(image: &ImagePlanes, fraction: f64) -> Result<ImagePlanes> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::OutOfRange { what: "crop fraction", detail: format!("{fraction} not in (0, 1]") });
    }
    let [n, c, h, w] = image.shape();
    let (ch, cw) = (((h as f64 * fraction).round() as usize).max(1), ((w as f64 * fraction).round() as usize).max(1));
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    Ok(ImagePlanes::from_fn([n, c, ch, cw], |b, k, y, x| image.get(b, k, y + oy, x + ox)))
}

#[derive(Clone, Debug)]
pub struct GroundTruthParams {
    pub crop_fraction: f64,
    pub clip_sigma: f64,
    pub clip_iters: usize,
}

impl Default for GroundTruthParams {
    fn default() -> Self {
        Self { crop_fraction: 1.0, clip_sigma: DEFAULT_CLIP_SIGMA, clip_iters: DEFAULT_CLIP_ITERS }
    }
}

/// `align(mean(crop(stack)) - mu_m + mu_1)` with `reference` supplying both
/// `mu_1` and the alignment target.
pub fn construct_ground_truth(stack: &[ImagePlanes], reference: &ImagePlanes, params: &GroundTruthParams) -> Result<AlignOutcome> {
    let cropped = stack.iter().map(|img| center_crop(img, params.crop_fraction)).collect::<Result<Vec<_>>>()?;
    let mean = robust_mean(&cropped, params.clip_sigma, params.clip_iters)?;
    let leveled = intensity_align(&mean, mean.mean(), reference.mean());
    spatial_align(&leveled, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_stack_is_returned_exactly() {
        let img = ImagePlanes::from_fn([1, 1, 3, 4], |_, _, y, x| 0.1 * y as f64 + 0.03 * x as f64);
        let out = robust_mean(&vec![img.clone(); 10], 2.5, 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn single_outlier_is_clipped() {
        // mean 0.55, population std 0.15; the outlier sits at 3 sigma.
        let mut stack = vec![ImagePlanes::full([1, 1, 2, 2], 0.5); 9];
        stack.push(ImagePlanes::full([1, 1, 2, 2], 1.0));
        let out = robust_mean(&stack, 2.5, 3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        // Without clipping iterations the outlier leaks in.
        assert!((robust_mean(&stack, 2.5, 0).unwrap().data()[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_stacks() {
        assert!(robust_mean(&[], 2.5, 3).is_err());
        assert!(robust_mean(&[ImagePlanes::zeros([1, 1, 2, 2])], 2.5, 3).is_err());
        let bad = [ImagePlanes::zeros([1, 1, 2, 2]), ImagePlanes::zeros([1, 1, 2, 3])];
        assert_eq!(robust_mean(&bad, 2.5, 3).unwrap_err().code(), "E_SHAPE");
    }

    proptest! {
        #[test]
        fn robust_mean_ignores_order(seed in 0u64..1000, rot in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut stack: Vec<_> = (0..7).map(|_| ImagePlanes::from_fn([1, 1, 3, 3], |_, _, _, _| rng.gen())).collect();
            let a = robust_mean(&stack, 1.5, 3).unwrap();
            stack.rotate_left(rot);
            stack.swap(0, 6);
            let b = robust_mean(&stack, 1.5, 3).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn intensity_align_hits_target_mean(seed in 0u64..1000, mu_1 in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImagePlanes::from_fn([1, 3, 5, 7], |_, _, _, _| rng.gen());
            let mu_m: f64 = img.data().iter().sum::<f64>() / img.data().len() as f64;
            let out = intensity_align(&img, mu_m, mu_1);
            let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
            prop_assert!((mean - mu_1).abs() < 1e-6);
        }
    }

    #[test]
    fn intensity_align_trivia() {
        let img = ImagePlanes::full([1, 1, 2, 2], 0.3);
        assert_eq!(intensity_align(&img, 0.2, 0.2), img);
        assert!(intensity_align(&img, 0.3, 0.7).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn crop_keeps_the_center() {
        let img = ImagePlanes::from_fn([1, 1, 8, 8], |_, _, y, x| (y * 8 + x) as f64);
        let c = center_crop(&img, 0.5).unwrap();
        assert_eq!(c.shape(), [1, 1, 4, 4]);
        assert_eq!(c.get(0, 0, 0, 0), 18.0);
        assert_eq!(center_crop(&img, 1.0).unwrap(), img);
    }
}
