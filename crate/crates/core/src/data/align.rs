//! Similarity registration: Harris corners with normalized patch
//! descriptors, mutual nearest-neighbour matching and two-point RANSAC.
//! Falls back to phase correlation when too few matches survive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::metrics::luma;

/// Maps reference pixel coordinates to moving-image coordinates:
/// `p_m = scale * R(rotation) * p_r + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Similarity {
    pub scale: f64,
    /// Radians, counter-clockwise in `(x, y)` with y pointing down.
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { scale: 1.0, rotation: 0.0, tx: 0.0, ty: 0.0 };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    /// Scaling by `scale` about `(cx, cy)`.
    pub fn scaling_about(scale: f64, cx: f64, cy: f64) -> Self {
        Self { scale, rotation: 0.0, tx: cx - scale * cx, ty: cy - scale * cy }
    }

    fn from_complex(a: Complex64, b: Complex64) -> Self {
        Self { scale: a.norm(), rotation: a.arg(), tx: b.re, ty: b.im }
    }

    fn a(&self) -> Complex64 {
        Complex64::from_polar(self.scale, self.rotation)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.a() * Complex64::new(x, y) + Complex64::new(self.tx, self.ty);
        (p.re, p.im)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    Keypoints,
    PhaseCorrelation,
    /// Nothing reliable was found; the identity transform was used.
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AlignDiagnostics {
    pub keypoints_moving: usize,
    pub keypoints_reference: usize,
    pub matches: usize,
    pub inliers: usize,
    /// RMS inlier reprojection error in pixels.
    pub residual_px: Option<f64>,
    /// Correlation peak over the strongest competing peak.
    pub peak_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    /// Moving image resampled onto the reference grid.
    pub image: ImagePlanes,
    pub transform: Similarity,
    pub method: AlignMethod,
    pub diagnostics: AlignDiagnostics,
}

#[derive(Clone, Debug)]
pub struct AlignParams {
    pub max_keypoints: usize,
    pub patch_radius: usize,
    pub min_ncc: f64,
    pub ratio: f64,
    pub inlier_px: f64,
    pub min_inliers: usize,
    pub ransac_iters: usize,
    pub min_peak_ratio: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            max_keypoints: 256,
            patch_radius: 4,
            min_ncc: 0.7,
            ratio: 0.8,
            inlier_px: 1.5,
            min_inliers: 5,
            ransac_iters: 2000,
            min_peak_ratio: 2.0,
        }
    }
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn blur(&self, sigma: f64) -> Plane {
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = k.iter().sum();
        let pass = |src: &Plane, horizontal: bool| {
            let mut v = vec![0.0; src.h * src.w];
            for y in 0..src.h as isize {
                for x in 0..src.w as isize {
                    let mut acc = 0.0;
                    for (j, kw) in k.iter().enumerate() {
                        let d = j as isize - r;
                        acc += kw * if horizontal { src.at(y, x + d) } else { src.at(y + d, x) };
                    }
                    v[y as usize * src.w + x as usize] = acc / norm;
                }
            }
            Plane { h: src.h, w: src.w, v }
        };
        pass(&pass(self, true), false)
    }
}

fn gray_plane(image: &ImagePlanes) -> Result<Plane> {
    if image.batch() != 1 {
        return Err(Error::Shape(format!("alignment takes one image, got batch {}", image.batch())));
    }
    let y = luma(image)?;
    Ok(Plane { h: y.height(), w: y.width(), v: y.data().to_vec() })
}

struct Keypoint {
    x: f64,
    y: f64,
    desc: Vec<f64>,
}

fn harris_keypoints(img: &Plane, p: &AlignParams) -> Vec<Keypoint> {
    let s = img.blur(1.0);
    let (h, w) = (s.h, s.w);
    let (mut ixx, mut iyy, mut ixy) = (vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (s.at(y, x + 1) - s.at(y, x - 1)) / 2.0;
            let gy = (s.at(y + 1, x) - s.at(y - 1, x)) / 2.0;
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (
        Plane { h, w, v: ixx }.blur(1.5),
        Plane { h, w, v: iyy }.blur(1.5),
        Plane { h, w, v: ixy }.blur(1.5),
    );
    let resp = Plane {
        h,
        w,
        v: (0..h * w)
            .map(|i| {
                let (a, b, c) = (sxx.v[i], syy.v[i], sxy.v[i]);
                a * b - c * c - 0.04 * (a + b) * (a + b)
            })
            .collect(),
    };
    let max = resp.v.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let margin = p.patch_radius as isize + 1;
    let mut cands = Vec::new();
    for y in margin..h as isize - margin {
        for x in margin..w as isize - margin {
            let r = resp.at(y, x);
            if r <= 0.01 * max {
                continue;
            }
            let is_max = (-2..=2).all(|dy: isize| {
                (-2..=2).all(|dx: isize| {
                    let q = resp.at(y + dy, x + dx);
                    (dy == 0 && dx == 0) || q < r || (q == r && (dy, dx) > (0, 0))
                })
            });
            if is_max {
                cands.push((r, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    cands.truncate(p.max_keypoints);

    let pr = p.patch_radius as isize;
    cands
        .into_iter()
        .filter_map(|(r, y, x)| {
            let mut desc: Vec<f64> = (-pr..=pr).flat_map(|dy| (-pr..=pr).map(move |dx| (dy, dx))).map(|(dy, dx)| s.at(y + dy, x + dx)).collect();
            let mean = desc.iter().sum::<f64>() / desc.len() as f64;
            desc.iter_mut().for_each(|d| *d -= mean);
            let norm = desc.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return None;
            }
            desc.iter_mut().for_each(|d| *d /= norm);
            let offset = |lo: f64, hi: f64| {
                let den = lo - 2.0 * r + hi;
                if den < 0.0 { (0.5 * (lo - hi) / den).clamp(-0.5, 0.5) } else { 0.0 }
            };
            let ox = offset(resp.at(y, x - 1), resp.at(y, x + 1));
            let oy = offset(resp.at(y - 1, x), resp.at(y + 1, x));
            Some(Keypoint { x: x as f64 + ox, y: y as f64 + oy, desc })
        })
        .collect()
}

/// Mutual nearest neighbours by NCC that also pass the ratio test.
fn match_keypoints(reference: &[Keypoint], moving: &[Keypoint], p: &AlignParams) -> Vec<(usize, usize)> {
    if reference.is_empty() || moving.len() < 2 {
        return Vec::new();
    }
    let ncc: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| moving.iter().map(|m| r.desc.iter().zip(&m.desc).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let best_ref_for_moving: Vec<usize> = (0..moving.len())
        .map(|j| (0..reference.len()).max_by(|&a, &b| ncc[a][j].total_cmp(&ncc[b][j])).unwrap())
        .collect();
    let dist = |c: f64| (2.0 - 2.0 * c).max(0.0).sqrt();
    let mut out = Vec::new();
    for (i, row) in ncc.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let (j, second) = (order[0], order[1]);
        if row[j] >= p.min_ncc && best_ref_for_moving[j] == i && dist(row[j]) < p.ratio * dist(row[second]) {
            out.push((i, j));
        }
    }
    out
}

fn fit_least_squares(pairs: &[(Complex64, Complex64)]) -> Option<Similarity> {
    let n = pairs.len() as f64;
    let rbar = pairs.iter().map(|p| p.0).sum::<Complex64>() / n;
    let mbar = pairs.iter().map(|p| p.1).sum::<Complex64>() / n;
    let den: f64 = pairs.iter().map(|p| (p.0 - rbar).norm_sqr()).sum();
    if den < 1e-12 {
        return None;
    }
    let a = pairs.iter().map(|p| (p.1 - mbar) * (p.0 - rbar).conj()).sum::<Complex64>() / den;
    Some(Similarity::from_complex(a, mbar - a * rbar))
}

fn inliers(model: &Similarity, pairs: &[(Complex64, Complex64)], tol: f64) -> Vec<usize> {
    let (a, b) = (model.a(), Complex64::new(model.tx, model.ty));
    (0..pairs.len()).filter(|&i| (a * pairs[i].0 + b - pairs[i].1).norm() <= tol).collect()
}

fn ransac(pairs: &[(Complex64, Complex64)], p: &AlignParams) -> Option<(Similarity, Vec<usize>)> {
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    if n * (n - 1) / 2 <= p.ransac_iters {
        for i in 0..n {
            for j in i + 1..n {
                candidates.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while candidates.len() < p.ransac_iters {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i != j {
                candidates.push((i, j));
            }
        }
    }
    let mut best: Option<(Similarity, Vec<usize>)> = None;
    for (i, j) in candidates {
        let dr = pairs[j].0 - pairs[i].0;
        if dr.norm() < 2.0 {
            continue;
        }
        let a = (pairs[j].1 - pairs[i].1) / dr;
        if !(0.5..=2.0).contains(&a.norm()) {
            continue;
        }
        let model = Similarity::from_complex(a, pairs[i].1 - a * pairs[i].0);
        let inl = inliers(&model, pairs, p.inlier_px);
        if best.as_ref().map_or(true, |(_, b)| inl.len() > b.len()) {
            best = Some((model, inl));
        }
    }
    let (mut model, mut inl) = best?;
    for _ in 0..3 {
        let subset: Vec<_> = inl.iter().map(|&i| pairs[i]).collect();
        let Some(refit) = fit_least_squares(&subset) else { break };
        let next = inliers(&refit, pairs, p.inlier_px);
        if next.len() < inl.len() {
            break;
        }
        model = refit;
        inl = next;
    }
    Some((model, inl))
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Translation `(dx, dy)` with `moving(p) ~ reference(p - d)`, plus the peak ratio.
pub fn phase_correlation(moving: &ImagePlanes, reference: &ImagePlanes) -> Result<(f64, f64, f64)> {
    moving.ensure_same_shape(reference)?;
    let (m, r) = (gray_plane(moving)?, gray_plane(reference)?);
    let (h, w) = (m.h, m.w);
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
    let windowed = |p: &Plane| -> Vec<Complex64> {
        let mean = p.v.iter().sum::<f64>() / p.v.len() as f64;
        (0..h * w).map(|i| Complex64::new((p.v[i] - mean) * hann(i / w, h) * hann(i % w, w), 0.0)).collect()
    };
    let (mut fm, mut fr) = (windowed(&m), windowed(&r));
    fft2(&mut fm, h, w, false);
    fft2(&mut fr, h, w, false);
    let mut cross: Vec<Complex64> = fm
        .iter()
        .zip(&fr)
        .map(|(a, b)| {
            let c = a * b.conj();
            let n = c.norm();
            if n > 1e-12 { c / n } else { Complex64::default() }
        })
        .collect();
    fft2(&mut cross, h, w, true);
    let surf: Vec<f64> = cross.iter().map(|c| c.re / (h * w) as f64).collect();
    let at = |y: isize, x: isize| surf[y.rem_euclid(h as isize) as usize * w + x.rem_euclid(w as isize) as usize];
    let peak = (0..h * w).max_by(|&a, &b| surf[a].total_cmp(&surf[b])).unwrap();
    let (py, px) = ((peak / w) as isize, (peak % w) as isize);
    let circ = |d: isize, n: usize| {
        let d = d.rem_euclid(n as isize);
        d.min(n as isize - d)
    };
    let rival = (0..h * w)
        .filter(|&i| circ(i as isize / w as isize - py, h) > 2 || circ(i as isize % w as isize - px, w) > 2)
        .map(|i| surf[i])
        .fold(f64::MIN, f64::max);
    let vertex = |lo: f64, c: f64, hi: f64| {
        let den = lo - 2.0 * c + hi;
        if den < 0.0 { (0.5 * (lo - hi) / den).clamp(-0.5, 0.5) } else { 0.0 }
    };
    let p0 = at(py, px);
    let mut dy = py as f64 + vertex(at(py - 1, px), p0, at(py + 1, px));
    let mut dx = px as f64 + vertex(at(py, px - 1), p0, at(py, px + 1));
    if dy > h as f64 / 2.0 {
        dy -= h as f64;
    }
    if dx > w as f64 / 2.0 {
        dx -= w as f64;
    }
    let ratio = if rival > 0.0 { p0 / rival } else { f64::INFINITY };
    Ok((dx, dy, ratio))
}

/// Resample `moving` onto the reference grid: `out(p) = moving(T p)`,
/// bilinear with edge clamping.
pub fn warp_similarity(moving: &ImagePlanes, t: &Similarity) -> ImagePlanes {
    let [n, c, h, w] = moving.shape();
    let sample = |b: usize, ch: usize, x: f64, y: f64| {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = moving.get(b, ch, y0, x0) * (1.0 - fx) + moving.get(b, ch, y0, x1) * fx;
        let bot = moving.get(b, ch, y1, x0) * (1.0 - fx) + moving.get(b, ch, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    ImagePlanes::from_fn([n, c, h, w], |b, ch, y, x| {
        let (mx, my) = t.apply(x as f64, y as f64);
        sample(b, ch, mx, my)
    })
}

pub fn spatial_align(moving: &ImagePlanes, reference: &ImagePlanes) -> Result<AlignOutcome> {
    spatial_align_with(moving, reference, &AlignParams::default())
}

pub fn spatial_align_with(moving: &ImagePlanes, reference: &ImagePlanes, p: &AlignParams) -> Result<AlignOutcome> {
    moving.ensure_same_shape(reference)?;
    let (m, r) = (gray_plane(moving)?, gray_plane(reference)?);
    let (km, kr) = (harris_keypoints(&m, p), harris_keypoints(&r, p));
    let matches = match_keypoints(&kr, &km, p);
    let pairs: Vec<(Complex64, Complex64)> = matches
        .iter()
        .map(|&(i, j)| (Complex64::new(kr[i].x, kr[i].y), Complex64::new(km[j].x, km[j].y)))
        .collect();
    let mut diagnostics = AlignDiagnostics {
        keypoints_moving: km.len(),
        keypoints_reference: kr.len(),
        matches: pairs.len(),
        ..Default::default()
    };
    if let Some((model, inl)) = ransac(&pairs, p) {
        diagnostics.inliers = inl.len();
        if inl.len() >= p.min_inliers {
            let (a, b) = (model.a(), Complex64::new(model.tx, model.ty));
            let sq: f64 = inl.iter().map(|&i| (a * pairs[i].0 + b - pairs[i].1).norm_sqr()).sum();
            diagnostics.residual_px = Some((sq / inl.len() as f64).sqrt());
            return Ok(AlignOutcome { image: warp_similarity(moving, &model), transform: model, method: AlignMethod::Keypoints, diagnostics });
        }
    }
    let (dx, dy, ratio) = phase_correlation(moving, reference)?;
    diagnostics.peak_ratio = Some(ratio);
    if ratio >= p.min_peak_ratio {
        let t = Similarity::translation(dx, dy);
        return Ok(AlignOutcome { image: warp_similarity(moving, &t), transform: t, method: AlignMethod::PhaseCorrelation, diagnostics });
    }
    Ok(AlignOutcome { image: moving.clone(), transform: Similarity::IDENTITY, method: AlignMethod::Failed, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::textured_gray;

    fn scene(size: usize) -> ImagePlanes {
        textured_gray(size, 3)
    }

    #[test]
    fn identity_for_identical_images() {
        let r = scene(64);
        let out = spatial_align(&r, &r).unwrap();
        assert_eq!(out.method, AlignMethod::Keypoints);
        assert!(out.transform.tx.hypot(out.transform.ty) < 0.1, "{:?}", out.transform);
    }

    #[test]
    fn recovers_integer_shift() {
        let r = scene(64);
        let moving = warp_similarity(&r, &Similarity::translation(-3.0, 5.0));
        let out = spatial_align(&moving, &r).unwrap();
        assert_eq!(out.method, AlignMethod::Keypoints);
        assert!((out.transform.tx - 3.0).abs() < 0.5 && (out.transform.ty + 5.0).abs() < 0.5, "{:?}", out.transform);
        assert!((out.transform.scale - 1.0).abs() < 0.01);
    }

    #[test]
    fn recovers_five_percent_scale() {
        let r = scene(64);
        // Magnify the content by 1.05 about the center.
        let moving = warp_similarity(&r, &Similarity::scaling_about(1.0 / 1.05, 31.5, 31.5));
        let out = spatial_align(&moving, &r).unwrap();
        assert_eq!(out.method, AlignMethod::Keypoints);
        assert!((out.transform.scale / 1.05 - 1.0).abs() < 0.01, "{:?}", out.transform);
    }

    #[test]
    fn phase_correlation_fallback_recovers_shift() {
        let r = scene(64);
        let moving = warp_similarity(&r, &Similarity::translation(-3.0, 5.0));
        let params = AlignParams { min_inliers: usize::MAX, ..AlignParams::default() };
        let out = spatial_align_with(&moving, &r, &params).unwrap();
        assert_eq!(out.method, AlignMethod::PhaseCorrelation);
        assert!((out.transform.tx - 3.0).abs() < 0.5 && (out.transform.ty + 5.0).abs() < 0.5, "{:?}", out.transform);
        assert!(out.diagnostics.peak_ratio.unwrap() > 2.0);
    }

    #[test]
    fn unrelated_images_report_failure() {
        let r = scene(48);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = ImagePlanes::from_fn([1, 1, 48, 48], |_, _, _, _| rng.gen());
        let out = spatial_align(&noise, &r).unwrap();
        assert_eq!(out.method, AlignMethod::Failed, "{:?}", out.diagnostics);
        assert_eq!(out.transform, Similarity::IDENTITY);
        assert_eq!(out.image, noise);
    }

    #[test]
    fn warped_output_matches_reference_in_the_interior() {
        let r = scene(64);
        let moving = warp_similarity(&r, &Similarity::translation(-2.0, 4.0));
        let out = spatial_align(&moving, &r).unwrap();
        let mut worst: f64 = 0.0;
        for y in 8..56 {
            for x in 8..56 {
                worst = worst.max((out.image.get(0, 0, y, x) - r.get(0, 0, y, x)).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
    }
}
