use super::*;
use rand::{Rng, SeedableRng};
use crate::condition::{ConditionSpec, PiRawConfig};
use crate::diffusion::{diffuse, predict_x0};
use crate::net::DenoiserConfig;
use crate::schedule::make_schedule;
use proptest::prelude::*;

fn small_denoiser(tmc: bool, steps: usize) -> DenoiserModel {
    let cfg = DenoiserConfig {
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        time_embed_dim: 8,
        attn_heads: 1,
        attn_head_dim: 4,
        diffusion_steps: steps,
        ..DenoiserConfig::toy(tmc)
    };
    DenoiserModel::new(cfg, 21).unwrap()
}

fn small_raw() -> ConditionSpec {
    ConditionSpec::Raw(PiRawConfig {
        base_channels: 4,
        attn_head_dim: 4,
        channel_multipliers: vec![1],
        ..PiRawConfig::toy(1, 1)
    })
}

fn toy_set(n: usize, seed: u64, raw: bool) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::new();
    let mut inputs = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.gen_range(0.2..0.8);
        let gx: f64 = rng.gen_range(-0.05..0.05);
        let x0 = ImagePlanes::from_fn([1, 1, 8, 8], |_, _, y, x| a + gx * (x as f64 - y as f64));
        let input = if raw {
            ImagePlanes::from_fn([1, 4, 4, 4], |_, c, y, x| (x0.get(0, 0, 2 * y + c / 2, 2 * x + c % 2) / 8.0).clamp(0.0, 1.0))
        } else {
            x0.map(|v| (v / 8.0).clamp(0.0, 1.0))
        };
        targets.push(x0);
        inputs.push(input);
    }
    TrainingSet::new(targets, inputs).unwrap()
}

fn state(tmc: bool, raw: bool, steps: usize, config: &TrainConfig) -> TrainState {
    let cond = if raw { small_raw() } else { ConditionSpec::Srgb { channels: 1 } };
    TrainState::new(small_denoiser(tmc, steps), cond.build(4).unwrap(), config)
}

#[test]
fn gradient_matches_finite_differences() {
    let schedule = make_schedule(10, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig { tmc_mode: "unrolled_depth1".into(), ..TrainConfig::default() };
    let st = state(true, true, 10, &config);
    let data = toy_set(4, 1, true);
    let batch = data.batch(&[0, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = StepDraws { t: vec![3, 10, 7], eps: ImagePlanes::randn(batch.x0.shape(), &mut rng) };
    let prepared = prepare_step(&st, &batch, draws, &UnrolledDepth1, &schedule).unwrap();
    let (dp, cp) = (st.denoiser.params().to_vec(), st.condition.params().to_vec());
    let eval = evaluate_loss(&st, &dp, &cp, &prepared, true).unwrap();
    let loss_at = |d: &[f64], c: &[f64]| evaluate_loss(&st, d, c, &prepared, false).unwrap().loss;
    let h = 1e-5;
    for k in 0..16 {
        let on_condition = k % 2 == 1;
        let (len, analytic) = if on_condition { (cp.len(), &eval.grad_condition) } else { (dp.len(), &eval.grad_denoiser) };
        let i = rng.gen_range(0..len);
        let (mut d, mut c) = (dp.clone(), cp.clone());
        let target = if on_condition { &mut c } else { &mut d };
        target[i] += h;
        let up = loss_at(&d, &c);
        let target = if on_condition { &mut c } else { &mut d };
        target[i] -= 2.0 * h;
        let down = loss_at(&d, &c);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < 1e-4, "param {i} (condition: {on_condition}): fd {fd}, analytic {}", analytic[i]);
    }
}

#[test]
fn loss_is_zero_when_prediction_equals_noise() {
    let schedule = make_schedule(5, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig { tmc_mode: "disabled".into(), ..TrainConfig::default() };
    let mut st = state(false, false, 5, &config);
    // Zero the output convolution so the prediction is exactly zero.
    let names: Vec<_> = st.denoiser.layout().names().filter(|(n, _)| n.starts_with("final_conv")).map(|(_, s)| s.clone()).collect();
    for s in names {
        st.denoiser.params_mut()[s.offset..s.offset + s.len()].fill(0.0);
    }
    let batch = toy_set(2, 3, false).batch(&[0, 1]).unwrap();
    let draws = StepDraws { t: vec![1, 5], eps: ImagePlanes::zeros(batch.x0.shape()) };
    let prepared = prepare_step(&st, &batch, draws, &TmcDisabled, &schedule).unwrap();
    let eval = evaluate_loss(&st, st.denoiser.params(), st.condition.params(), &prepared, false).unwrap();
    assert_eq!(eval.loss, 0.0);
}

#[test]
fn teacher_forcing_feeds_the_target() {
    let schedule = make_schedule(5, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig::default();
    let st = state(true, false, 5, &config);
    let batch = toy_set(3, 4, false).batch(&[0, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = StepDraws::draw(&mut rng, batch.x0.shape(), 5);
    let p = prepare_step(&st, &batch, draws, &TeacherForced, &schedule).unwrap();
    assert_eq!(p.tmc.unwrap(), batch.x0);
}

#[test]
fn unrolled_estimate_matches_manual_replay() {
    let schedule = make_schedule(5, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig::default();
    let st = state(true, false, 5, &config);
    let batch = toy_set(2, 5, false).batch(&[0, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = ImagePlanes::randn(batch.x0.shape(), &mut rng);
    let p = prepare_step(&st, &batch, StepDraws { t: vec![2, 5], eps: eps.clone() }, &UnrolledDepth1, &schedule).unwrap();
    let tmc = p.tmc.unwrap();
    let cond = st.condition.condition(&batch.cond_input, (8, 8)).unwrap().image;
    let x3 = diffuse(&batch.x0.item(0), 3, &eps.item(0), &schedule).unwrap();
    let e3 = st.denoiser.forward(&x3, &cond.item(0), Some(&batch.x0.item(0)), 3).unwrap();
    let mu = predict_x0(&x3, &e3, 3, &schedule).unwrap();
    for (a, b) in tmc.item(0).data().iter().zip(mu.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(tmc.item(1), cond.item(1));
}

#[test]
fn mode_and_architecture_must_agree() {
    let schedule = make_schedule(5, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig::default();
    let batch = toy_set(1, 7, false).batch(&[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = StepDraws::draw(&mut rng, batch.x0.shape(), 5);
    assert!(prepare_step(&state(true, false, 5, &config), &batch, draws.clone(), &TmcDisabled, &schedule).is_err());
    assert!(prepare_step(&state(false, false, 5, &config), &batch, draws, &TeacherForced, &schedule).is_err());
}

#[test]
fn non_finite_loss_reports_diagnostics() {
    let schedule = make_schedule(5, 1e-2, 0.3, 0.0).unwrap();
    let config = TrainConfig { tmc_mode: "disabled".into(), ..TrainConfig::default() };
    let mut st = state(false, false, 5, &config);
    st.denoiser.params_mut()[0] = f64::NAN;
    let batch = toy_set(2, 8, false).batch(&[0, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = training_step(&mut st, &batch, &schedule, &config, &mut rng).unwrap_err();
    match err {
        Error::NonFinite { step, t_draws, .. } => {
            assert_eq!(step, 0);
            assert_eq!(t_draws.len(), 2);
        }
        other => panic!("unexpected {other}"),
    }
}

/// Cycle boundaries accumulated explicitly rather than by subtraction.
fn sgdr_oracle(step: usize, hi: f64, lo: f64, period: usize, mult: usize) -> f64 {
    let mut start = 0;
    let mut len = period;
    while start + len <= step {
        start += len;
        len *= mult;
    }
    let frac = (step - start) as f64 / len as f64;
    lo + (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

proptest! {
    #[test]
    fn sgdr_matches_oracle(step in 0usize..5000, period in 1usize..300, mult in 1usize..4) {
        let a = sgdr_lr(step, 2e-4, 1e-6, period, mult);
        let b = sgdr_oracle(step, 2e-4, 1e-6, period, mult);
        prop_assert!((a - b).abs() < 1e-18);
    }
}

fn fit_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        lr_min: 1e-5,
        batch_size: 2,
        steps,
        sgdr_period: 60,
        sgdr_mult: 2,
        tmc_mode: "teacher_forced".into(),
        seed: 11,
        ..TrainConfig::default()
    }
}

fn sched_params() -> ScheduleParams {
    ScheduleParams { steps: 8, beta_min: 1e-2, beta_max: 0.3, eta: 0.0 }
}

#[test]
fn fit_writes_one_row_per_step_with_closed_form_lr() {
    let dir = tempfile::tempdir().unwrap();
    let config = fit_config(200);
    let mut st = state(true, false, 8, &config);
    let data = toy_set(64, 9, false);
    let out = fit(&mut st, &data, &sched_params(), &config, dir.path(), |_, _, _| {}).unwrap();
    let text = std::fs::read_to_string(out.loss_csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 200);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, i + 1);
        assert!(cols[1] >= 0.0);
        assert!((cols[2] - sgdr_oracle(i, 1e-3, 1e-5, 60, 2)).abs() < 1e-15);
    }
    let ck = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ck.state.step, 200);
    assert_eq!(ck.state.denoiser.params(), st.denoiser.params());
}

#[test]
fn resume_continues_bitwise() {
    let data = toy_set(16, 10, true);
    let full_dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { tmc_mode: "unrolled_depth1".into(), checkpoint_every: 5, ..fit_config(15) };
    let mut full = state(true, true, 8, &config);
    fit(&mut full, &data, &sched_params(), &config, full_dir.path(), |_, _, _| {}).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let first = TrainConfig { steps: 10, ..config.clone() };
    let mut part = state(true, true, 8, &first);
    fit(&mut part, &data, &sched_params(), &first, part_dir.path(), |_, _, _| {}).unwrap();
    let mut resumed = load_checkpoint(&part_dir.path().join("checkpoint_000010.ckpt")).unwrap().state;
    fit(&mut resumed, &data, &sched_params(), &config, part_dir.path(), |_, _, _| {}).unwrap();

    assert_eq!(resumed.denoiser.params(), full.denoiser.params());
    assert_eq!(resumed.condition.params(), full.condition.params());
    assert_eq!(resumed.adam, full.adam);
    let a = std::fs::read_to_string(full_dir.path().join("loss.csv")).unwrap();
    let b = std::fs::read_to_string(part_dir.path().join("loss.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_steps_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let config = fit_config(0);
    let mut st = state(true, false, 8, &config);
    let init = st.denoiser.params().to_vec();
    let out = fit(&mut st, &toy_set(4, 1, false), &sched_params(), &config, dir.path(), |_, _, _| {}).unwrap();
    assert_eq!(std::fs::read_to_string(out.loss_csv).unwrap(), "step,loss,lr\n");
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap().state.denoiser.params(), &init[..]);
}

#[test]
fn checkpoint_rejects_other_versions_and_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let config = fit_config(0);
    let st = state(false, true, 8, &config);
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &Checkpoint { state: st, schedule: sched_params(), tmc_mode: "disabled".into() }).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.tmc_mode, "disabled");
    assert_eq!(back.state.condition.name(), "raw");

    let bytes = std::fs::read(&path).unwrap();
    let mut v2 = b"TMCDIFF-CKPT v2".to_vec();
    v2.extend_from_slice(&bytes[b"TMCDIFF-CKPT v1".len()..]);
    std::fs::write(&path, &v2).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().code(), "E_CHECKPOINT");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().code(), "E_FORMAT");
    std::fs::write(&path, b"hello").unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().code(), "E_FORMAT");
}

#[test]
fn training_lowers_loss_on_a_tiny_problem() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { steps: 150, batch_size: 4, sgdr_period: 150, ..fit_config(150) };
    let mut st = state(true, false, 8, &config);
    let mut losses = Vec::new();
    fit(&mut st, &toy_set(32, 2, false), &sched_params(), &config, dir.path(), |_, l, _| losses.push(l)).unwrap();
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[120..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "head {head} tail {tail}");
}
