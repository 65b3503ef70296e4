//! Forward corruption and the DDIM reverse update.
//!
//! Everything here is elementwise arithmetic on [`ImagePlanes`]. How `eps_hat`
//! was produced (conditioning, time-melding) is the denoiser's business.

use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::schedule::{DiffusionSchedule, RADICAND_TOLERANCE};

/// Inputs of one reverse step.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub x_t: &'a ImagePlanes,
    pub eps_hat: &'a ImagePlanes,
    pub t: usize,
    /// Fresh draw for `sigma_t * noise`; `None` acts as zero.
    pub noise: Option<&'a ImagePlanes>,
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`.
pub fn diffuse(x0: &ImagePlanes, t: usize, eps: &ImagePlanes, schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| sa * x + sb * e)
}

/// Same as [`diffuse`] with a per-item step, for mixed-`t` training batches.
pub fn diffuse_batch(x0: &ImagePlanes, t: &[usize], eps: &ImagePlanes, schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    x0.ensure_same_shape(eps)?;
    check_batch_steps(x0, t, schedule)?;
    let per = x0.data().len() / x0.batch().max(1);
    let mut out = x0.clone();
    for (n, &tn) in t.iter().enumerate() {
        let a = schedule.alpha(tn);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let range = n * per..(n + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = sa * *o + sb * e;
        }
    }
    Ok(out)
}

/// Clean-image estimate `(x_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t)`.
pub fn predict_x0(x_t: &ImagePlanes, eps_hat: &ImagePlanes, t: usize, schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)
}

pub fn predict_x0_batch(x_t: &ImagePlanes, eps_hat: &ImagePlanes, t: &[usize], schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    x_t.ensure_same_shape(eps_hat)?;
    check_batch_steps(x_t, t, schedule)?;
    let per = x_t.data().len() / x_t.batch().max(1);
    let mut out = x_t.clone();
    for (n, &tn) in t.iter().enumerate() {
        let a = schedule.alpha(tn);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let range = n * per..(n + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps_hat.data()[range]) {
            *o = (*o - sb * e) / sa;
        }
    }
    Ok(out)
}

/// Coefficient of the residual term, `sqrt(1 - alpha_{t-1} - sigma_t^2)`.
pub fn residual_coefficient(t: usize, schedule: &DiffusionSchedule) -> Result<f64> {
    schedule.check_step(t)?;
    let sigma = schedule.sigma(t);
    let radicand = 1.0 - schedule.alpha(t - 1) - sigma * sigma;
    if radicand < -RADICAND_TOLERANCE {
        return Err(Error::Schedule(format!(
            "negative residual radicand {radicand} at t = {t}"
        )));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// `sqrt(1 - alpha_{t-1} - sigma_t^2) eps_hat`.
pub fn residual_term(eps_hat: &ImagePlanes, t: usize, schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    let c = residual_coefficient(t, schedule)?;
    Ok(eps_hat.map(|e| c * e))
}

/// `x_{t-1} = sqrt(alpha_{t-1}) x0_hat + residual + sigma_t noise`.
pub fn ddim_step(inputs: StepInputs<'_>, schedule: &DiffusionSchedule) -> Result<ImagePlanes> {
    let StepInputs { x_t, eps_hat, t, noise } = inputs;
    let mu = predict_x0(x_t, eps_hat, t, schedule)?;
    ddim_step_from_x0(&mu, eps_hat, t, noise, schedule)
}

/// Reverse step when the clean estimate is already at hand.
pub fn ddim_step_from_x0(
    mu: &ImagePlanes,
    eps_hat: &ImagePlanes,
    t: usize,
    noise: Option<&ImagePlanes>,
    schedule: &DiffusionSchedule,
) -> Result<ImagePlanes> {
    let c = residual_coefficient(t, schedule)?;
    let sa_prev = schedule.alpha(t - 1).sqrt();
    let mut out = mu.zip_map(eps_hat, |m, e| sa_prev * m + c * e)?;
    let sigma = schedule.sigma(t);
    if let Some(z) = noise {
        out.ensure_same_shape(z)?;
        if sigma != 0.0 {
            for (o, n) in out.data_mut().iter_mut().zip(z.data()) {
                *o += sigma * n;
            }
        }
    }
    Ok(out)
}

fn check_batch_steps(x: &ImagePlanes, t: &[usize], schedule: &DiffusionSchedule) -> Result<()> {
    if t.len() != x.batch() {
        return Err(Error::Shape(format!(
            "{} step indices for batch of {}",
            t.len(),
            x.batch()
        )));
    }
    t.iter().try_for_each(|&tn| schedule.check_step(tn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(v: f64) -> ImagePlanes {
        ImagePlanes::full([1, 1, 2, 3], v)
    }

    /// alpha = [1, 0.9, 0.25]
    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.25], 0.0).unwrap()
    }

    #[test]
    fn diffuse_examples() {
        let s = sched();
        let x0 = plane(1.0);
        let out = diffuse(&x0, 2, &plane(0.5), &s).unwrap();
        // 0.5 + sqrt(0.75) * 0.5
        assert!(out.data().iter().all(|&v| (v - 0.933_012_701_892_219_3).abs() < 1e-15));
        let zero = diffuse(&x0, 1, &plane(0.0), &s).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.9f64.sqrt()));
        assert!(diffuse(&x0, 3, &plane(0.0), &s).is_err());
        assert!(diffuse(&x0, 0, &plane(0.0), &s).is_err());
        assert!(diffuse(&x0, 1, &ImagePlanes::zeros([1, 1, 3, 2]), &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_example() {
        let s = sched();
        let out = predict_x0(&plane(0.933_012_701_892_219_3), &plane(0.5), 2, &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn residual_examples() {
        let s = sched();
        assert!(residual_term(&plane(3.0), 1, &s).unwrap().data().iter().all(|&v| v == 0.0));
        let r = residual_term(&plane(1.0), 2, &s).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.316_227_766_016_837_93).abs() < 1e-15));
        assert!(residual_term(&plane(0.0), 2, &s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddim_step_examples() {
        let s = sched();
        let x0 = plane(1.0);
        let eps = plane(0.5);
        let x_t = diffuse(&x0, 2, &eps, &s).unwrap();
        let prev = ddim_step(StepInputs { x_t: &x_t, eps_hat: &eps, t: 2, noise: None }, &s).unwrap();
        // sqrt(0.9) + sqrt(0.1) * 0.5
        assert!(prev.data().iter().all(|&v| (v - 1.106_797_181_058_932_8).abs() < 1e-12));

        let x1 = diffuse(&x0, 1, &eps, &s).unwrap();
        let last = ddim_step(StepInputs { x_t: &x1, eps_hat: &eps, t: 1, noise: None }, &s).unwrap();
        assert!(last.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn noise_enters_scaled_by_sigma() {
        let s = DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.25], 1.0).unwrap();
        let x = plane(0.3);
        let e = plane(-0.2);
        let base = ddim_step(StepInputs { x_t: &x, eps_hat: &e, t: 2, noise: None }, &s).unwrap();
        let noisy = ddim_step(StepInputs { x_t: &x, eps_hat: &e, t: 2, noise: Some(&plane(1.0)) }, &s).unwrap();
        for (a, b) in base.data().iter().zip(noisy.data()) {
            assert!((b - a - s.sigma(2)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_marginal_moments() {
        let s = make_schedule(50, 2e-3, 0.3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = ImagePlanes::from_fn([1, 1, 2, 2], |_, _, y, x| 0.2 + 0.3 * (y * 2 + x) as f64 / 3.0);
        for t in [1, 25, 50] {
            let draws = 10_000;
            let mut sum = vec![0.0; 4];
            let mut sq = vec![0.0; 4];
            for _ in 0..draws {
                let eps = ImagePlanes::randn([1, 1, 2, 2], &mut rng);
                let x = diffuse(&x0, t, &eps, &s).unwrap();
                for (i, v) in x.data().iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            let var_true = 1.0 - s.alpha(t);
            for i in 0..4 {
                let mean = sum[i] / draws as f64;
                let var = sq[i] / draws as f64 - mean * mean;
                let se = (var_true / draws as f64).sqrt();
                assert!((mean - s.alpha(t).sqrt() * x0.data()[i]).abs() < 3.0 * se, "t={t}");
                assert!((var / var_true - 1.0).abs() < 0.05, "t={t}");
            }
        }
    }

    fn planes(seed: u64, shape: [usize; 4]) -> (ImagePlanes, ImagePlanes, ImagePlanes) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            ImagePlanes::randn(shape, &mut rng),
            ImagePlanes::randn(shape, &mut rng),
            ImagePlanes::randn(shape, &mut rng),
        )
    }

    proptest! {
        #[test]
        fn roundtrip_and_reconstruction(seed in any::<u64>(), t in 1usize..=50) {
            let s = make_schedule(50, 2e-3, 0.3, 0.0).unwrap();
            let (x0, eps, other) = planes(seed, [2, 1, 3, 3]);
            let x_t = diffuse(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&x_t, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) / s.alpha(t).sqrt());
            }
            let mu = predict_x0(&x_t, &other, t, &s).unwrap();
            let (sa, sb) = (s.alpha(t).sqrt(), (1.0 - s.alpha(t)).sqrt());
            for ((m, e), x) in mu.data().iter().zip(other.data()).zip(x_t.data()) {
                prop_assert!((sa * m + sb * e - x).abs() < 1e-12);
            }
        }

        #[test]
        fn step_is_affine(seed in any::<u64>(), t in 1usize..=20, k in -2.0f64..2.0) {
            let s = make_schedule(20, 1e-3, 0.2, 0.7).unwrap();
            let (x1, e1, n1) = planes(seed, [1, 2, 2, 2]);
            let (x2, e2, n2) = planes(seed ^ 0x9e37, [1, 2, 2, 2]);
            let step = |x: &ImagePlanes, e: &ImagePlanes, n: &ImagePlanes| {
                ddim_step(StepInputs { x_t: x, eps_hat: e, t, noise: Some(n) }, &s).unwrap()
            };
            let mix = |a: &ImagePlanes, b: &ImagePlanes| a.zip_map(b, |u, v| u + k * v).unwrap();
            let f1 = step(&x1, &e1, &n1);
            let f2 = step(&x2, &e2, &n2);
            let f0 = step(&ImagePlanes::zeros([1, 2, 2, 2]), &ImagePlanes::zeros([1, 2, 2, 2]), &ImagePlanes::zeros([1, 2, 2, 2]));
            let fm = step(&mix(&x1, &x2), &mix(&e1, &e2), &mix(&n1, &n2));
            for i in 0..fm.data().len() {
                let expect = f1.data()[i] + k * (f2.data()[i] - f0.data()[i]);
                prop_assert!((fm.data()[i] - expect).abs() < 1e-9);
            }
        }

        #[test]
        fn deterministic_without_sigma(seed in any::<u64>(), t in 1usize..=50) {
            let s = make_schedule(50, 2e-3, 0.3, 0.0).unwrap();
            let (x, e, _) = planes(seed, [1, 1, 4, 4]);
            let a = ddim_step(StepInputs { x_t: &x, eps_hat: &e, t, noise: None }, &s).unwrap();
            let b = ddim_step(StepInputs { x_t: &x, eps_hat: &e, t, noise: None }, &s).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_variants_match_scalar_ones() {
        let s = make_schedule(10, 1e-3, 0.2, 0.0).unwrap();
        let (x0, eps, _) = planes(9, [3, 1, 2, 2]);
        let ts = [1, 5, 10];
        let xb = diffuse_batch(&x0, &ts, &eps, &s).unwrap();
        let pb = predict_x0_batch(&xb, &eps, &ts, &s).unwrap();
        for (n, &t) in ts.iter().enumerate() {
            let xs = diffuse(&x0.item(n), t, &eps.item(n), &s).unwrap();
            assert_eq!(xs, xb.item(n));
            assert_eq!(predict_x0(&xs, &eps.item(n), t, &s).unwrap(), pb.item(n));
        }
        assert!(diffuse_batch(&x0, &[1, 2], &eps, &s).is_err());
    }
}
