//! Procedural clean images: gradients, flat shapes and a little texture.

use rand::Rng;

use super::synth::scene_rng;
use crate::image::ImagePlanes;

/// Deterministic `[1, 3, size, size]` image in `[0.05, 0.95]`.
pub fn procedural_image(index: u64, size: usize, seed: u64) -> ImagePlanes {
    let mut rng = scene_rng(seed ^ 0x5eed_c0de, index);
    let s = size as f64;
    let base: [f64; 3] = [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)];
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let mut img = ImagePlanes::from_fn([1, 3, size, size], |_, c, y, x| {
        base[c] + gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5)
    });

    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.08..0.3) * s, rng.gen_range(0.08..0.3) * s);
        let disk = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if disk { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        img.set(0, c, y, x, *v);
                    }
                }
            }
        }
    }

    let freq = rng.gen_range(0.2..0.9);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let amp = rng.gen_range(0.0..0.08);
    let (ct, st) = (theta.cos(), theta.sin());
    ImagePlanes::from_fn([1, 3, size, size], |_, c, y, x| {
        let t = (freq * (ct * x as f64 + st * y as f64)).sin();
        (img.get(0, c, y, x) + amp * t).clamp(0.05, 0.95)
    })
}

/// Single-channel image with dense corners, for registration checks.
pub fn textured_gray(size: usize, seed: u64) -> ImagePlanes {
    let a = procedural_image(2 * seed, size, seed);
    let b = procedural_image(2 * seed + 1, size, seed);
    ImagePlanes::from_fn([1, 1, size, size], |_, _, y, x| {
        let checker = if (x / 6 + y / 6) % 2 == 0 { 0.15 } else { -0.15 };
        (0.5 * a.get(0, 0, y, x) + 0.5 * b.get(0, 1, y, x) + checker * a.get(0, 2, y, x)).clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = procedural_image(4, 24, 1);
        assert_eq!(a, procedural_image(4, 24, 1));
        assert_ne!(a, procedural_image(5, 24, 1));
        assert!(a.data().iter().all(|v| (0.05..=0.95).contains(v)));
    }
}
