mod common;

use common::{batch_tensor, draws, forward_moments, oracle, rng, symmetric, toy_gradient_error, ScriptedDenoiser, ToyDenoiser};
use platesr::diffusion::{
    iterate_forward_with, loss_with_draws, normal_image, p_sample_step, posterior_mean, predict_x0_from_eps,
    predicted_mean, q_sample, super_resolve, super_resolve_batch,
};
use platesr::{ImageTensor, NoiseSchedule, Range};
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn q_sample_degenerate_cases() {
    let s = NoiseSchedule::standard();
    let x0 = symmetric(1, 6, 5, 3);
    let eps = normal_image(&mut rng(2), 6, 5, 3);
    let zeros = ImageTensor::zeros(6, 5, 3, Range::Symmetric);
    let ab = s.alpha_bars()[40];

    let signal = q_sample(&x0, 41, &zeros, &s).unwrap();
    for (v, x) in signal.values().iter().zip(x0.values()) {
        assert!((v - ab.sqrt() * x).abs() < 1e-15);
    }
    let noise = q_sample(&zeros, 41, &eps, &s).unwrap();
    for (v, e) in noise.values().iter().zip(eps.values()) {
        assert!((v - (1.0 - ab).sqrt() * e).abs() < 1e-15);
    }

    let ones = ImageTensor::filled(4, 4, 3, Range::Symmetric, 1.0);
    let last = q_sample(&ones, 1000, &ImageTensor::zeros(4, 4, 3, Range::Unbounded), &s).unwrap();
    assert!(last.values().iter().all(|&v| v < 0.011));
    assert!((last.values()[0] - oracle("schedule.sqrt_alpha_bar_1000")).abs() < 1e-12);

    assert!(q_sample(&x0, 0, &eps, &s).is_err());
    assert!(q_sample(&x0, 1001, &eps, &s).is_err());
    assert!(q_sample(&x0, 3, &normal_image(&mut rng(2), 5, 5, 3), &s).is_err());
}

#[test]
fn iterated_kernel_without_noise_scales_by_root_alpha_bar() {
    let s = NoiseSchedule::standard();
    let x0 = symmetric(3, 4, 4, 3);
    let one = iterate_forward_with(&x0, 1, &s, |e| e.fill(0.0)).unwrap();
    let three = iterate_forward_with(&x0, 3, &s, |e| e.fill(0.0)).unwrap();
    let b1 = s.betas()[0];
    for ((a, b), x) in one.values().iter().zip(three.values()).zip(x0.values()) {
        assert!((a - (1.0 - b1).sqrt() * x).abs() < 1e-15);
        assert!((b - s.alpha_bars()[2].sqrt() * x).abs() < 1e-14);
    }
}

#[test]
fn iterated_kernel_matches_closed_form_moments() {
    let s = NoiseSchedule::standard();
    let x0 = symmetric(4, 8, 8, 1);
    for t in [1, 10, 50] {
        let m = forward_moments(&x0, t, 20_000, &s, 100 + t as u64);
        assert!(m.pooled_mean_z < 3.0 && m.pooled_var_z < 3.0, "t={t}: {m:?}");
        assert!(m.max_mean_z < 4.0 && m.max_var_z < 4.0, "t={t}: {m:?}");
    }
    let zero = ImageTensor::zeros(8, 8, 1, Range::Symmetric);
    let m = forward_moments(&zero, 10, 20_000, &s, 7);
    assert!(m.max_var_rel < 0.05, "{m:?}");
    let expected = 1.0 - oracle("schedule.alpha_bar_10");
    assert!((expected - (1.0 - s.alpha_bars()[9])).abs() < 1e-15);
}

#[test]
fn x0_prediction_inverts_forward_sample() {
    let s = NoiseSchedule::standard();
    let x0 = symmetric(5, 8, 8, 3);
    let eps = normal_image(&mut rng(6), 8, 8, 3);
    let xt = q_sample(&x0, 17, &eps, &s).unwrap();
    assert!(max_abs_diff(&predict_x0_from_eps(&xt, 17, &eps, &s, false).unwrap(), &x0) < 1e-12);

    let ab = s.alpha_bars()[16];
    let pure = ImageTensor::from_planar(8, 8, 3, Range::Unbounded, eps.values().iter().map(|e| e * (1.0 - ab).sqrt()).collect()).unwrap();
    let zero = predict_x0_from_eps(&pure, 17, &eps, &s, false).unwrap();
    assert!(zero.values().iter().all(|v| v.abs() < 1e-12));

    let wild = ImageTensor::filled(8, 8, 3, Range::Unbounded, 5.0);
    let clamped = predict_x0_from_eps(&wild, 900, &eps, &s, true).unwrap();
    assert!(clamped.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(clamped.range(), Range::Symmetric);
}

#[test]
fn posterior_mean_identities_hold_on_random_instances() {
    let s = NoiseSchedule::standard();
    let mut r = rng(8);
    for i in 0..100 {
        let t = r.random_range(1..=1000);
        let x0 = symmetric(1000 + i, 6, 6, 3);
        let eps = normal_image(&mut r, 6, 6, 3);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let back = predict_x0_from_eps(&xt, t, &eps, &s, false).unwrap();
        assert!(max_abs_diff(&back, &x0) <= 1e-5, "round trip at t={t}");
        let via_x0 = posterior_mean(&x0, &xt, t, &s).unwrap();
        let via_eps = predicted_mean(&xt, t, &eps, &s).unwrap();
        assert!(max_abs_diff(&via_x0, &via_eps) <= 1e-5, "mean identity at t={t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn round_trip_for_any_step(t in 1usize..=1000, seed in 0u64..10_000) {
        let s = NoiseSchedule::standard();
        let x0 = symmetric(seed, 4, 4, 3);
        let eps = normal_image(&mut rng(seed + 1), 4, 4, 3);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        prop_assert!(max_abs_diff(&predict_x0_from_eps(&xt, t, &eps, &s, false).unwrap(), &x0) <= 1e-5);
    }
}

#[test]
fn loss_is_zero_for_the_true_noise_and_one_for_zero() {
    let s = NoiseSchedule::standard();
    let (x0, cond, t, eps) = draws(11, 4, 32);
    let mut oracle_net = ScriptedDenoiser { channels: 3, outputs: vec![batch_tensor(&eps)] };
    let exact = loss_with_draws(&mut oracle_net, &x0, &cond, &t, &eps, &s).unwrap();
    assert!(exact < 1e-12, "{exact}");
    let mut zero_net = ScriptedDenoiser { channels: 3, outputs: Vec::new() };
    let zero = loss_with_draws(&mut zero_net, &x0, &cond, &t, &eps, &s).unwrap();
    assert!(4 * 32 * 32 * 3 >= 10_000);
    assert!((zero - 1.0).abs() < 0.05, "{zero}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in [1, 2, 3] {
        let err = toy_gradient_error(seed);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

fn toy_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(8, 1e-3, 0.3).unwrap()
}

fn unit_lr(seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(12, 12, 3, Range::Unit, |_, _, _| r.random::<f64>())
}

#[test]
fn sampling_is_a_pure_function_of_seed() {
    let s = toy_schedule();
    let net = ToyDenoiser::new(6, 3, 8, 4);
    let lr = unit_lr(1);
    let (a, trace) = super_resolve(&net, &lr, &s, &mut rng(9), Some(3)).unwrap();
    let (b, _) = super_resolve(&net, &lr, &s, &mut rng(9), None).unwrap();
    let (c, _) = super_resolve(&net, &lr, &s, &mut rng(10), None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.dims(), (48, 48, 3));
    assert_eq!(a.range(), Range::Unit);
    assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));

    let trace = trace.unwrap();
    let ts: Vec<usize> = trace.steps.iter().map(|(t, _)| *t).collect();
    assert_eq!(ts, vec![8, 5, 2, 0]);
    assert_eq!(trace.steps.last().unwrap().1, a);

    let lrs = [lr.clone(), unit_lr(2)];
    let mut rngs = [rng(9), rng(11)];
    let (batch, _) = super_resolve_batch(&net, &lrs, &s, &mut rngs, None).unwrap();
    assert_eq!(batch[0], a);
    assert_eq!(batch[1], super_resolve(&net, &lrs[1], &s, &mut rng(11), None).unwrap().0);
}

#[test]
fn final_reverse_step_is_deterministic() {
    let s = toy_schedule();
    let net = ToyDenoiser::new(6, 3, 8, 5);
    let lr = unit_lr(3);
    let xt = normal_image(&mut rng(4), 48, 48, 3);
    let a = p_sample_step(&net, &xt, 1, &lr, &s, &mut rng(1)).unwrap();
    let b = p_sample_step(&net, &xt, 1, &lr, &s, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    let c = p_sample_step(&net, &xt, 2, &lr, &s, &mut rng(1)).unwrap();
    let d = p_sample_step(&net, &xt, 2, &lr, &s, &mut rng(2)).unwrap();
    assert_ne!(c, d);
}

#[test]
fn sampling_rejects_unusable_inputs() {
    let s = toy_schedule();
    let net = ToyDenoiser::new(6, 3, 8, 5);
    let tiny = ImageTensor::filled(8, 8, 3, Range::Unit, 0.5);
    assert!(super_resolve(&net, &tiny, &s, &mut rng(1), None).is_err());
    let gray = ImageTensor::filled(12, 12, 1, Range::Unit, 0.5);
    assert!(super_resolve(&net, &gray, &s, &mut rng(1), None).is_err());
    assert!(super_resolve(&net, &unit_lr(1), &s, &mut rng(1), Some(0)).is_err());
}

/// Exact noise predictor for a data distribution concentrated on one image.
struct PointMass {
    target: ImageTensor,
    schedule: NoiseSchedule,
}

impl platesr::diffusion::NoisePredictor for PointMass {
    fn in_channels(&self) -> usize {
        6
    }

    fn out_channels(&self) -> usize {
        3
    }

    fn predict(&self, input: &platesr::nn::Tensor, t: &[usize]) -> platesr::Result<platesr::nn::Tensor> {
        let plane = self.target.len();
        let mut out = Vec::with_capacity(input.n * plane);
        for (i, &step) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bars()[step - 1];
            let x = &input.sample(i)[..plane];
            out.extend(x.iter().zip(self.target.values()).map(|(&v, &x0)| ((v as f64 - ab.sqrt() * x0) / (1.0 - ab).sqrt()) as f32));
        }
        Ok(platesr::nn::Tensor::from_vec(input.n, 3, input.h, input.w, out))
    }
}

#[test]
fn exact_predictor_recovers_its_image() {
    let s = NoiseSchedule::rescaled(200).unwrap();
    let unit = unit_lr(7);
    let target = platesr::resample::upsample_bicubic(&unit, 4).unwrap().quantized();
    let net = PointMass { target: target.convert(Range::Symmetric), schedule: s.clone() };
    let (out, _) = super_resolve(&net, &unit_lr(8), &s, &mut rng(3), None).unwrap();
    let err = max_abs_diff(&out, &target);
    assert!(err < 1e-3, "{err}");
}
