mod common;

use ambi_upscale::sde::{
    draw_dsm, dsm_loss, dsm_loss_with_draws, perturb, predictor_step_with_noise, prior_sample, standard_normal,
    SigmaGrid,
};
use ambi_upscale::{pc_sample, NoiseSchedule, PcSamplerConfig};
use common::*;
use ndarray::ArrayD;
use proptest::prelude::*;

type Batch = Vec<(ArrayD<f64>, ArrayD<f64>)>;

fn batch(items: usize, shape: &[usize], seed: u64) -> Batch {
    let mut r = rng(seed);
    (0..items)
        .map(|_| (standard_normal(shape, &mut r), standard_normal(&[2, shape[1], shape[2]], &mut r)))
        .collect()
}

#[test]
fn squared_diffusion_is_variance_growth_rate() {
    let sched = NoiseSchedule::default();
    let h = 1e-5;
    for i in 0..100 {
        let t = 0.005 + 0.99 * i as f64 / 99.0;
        let fd = (sched.sigma(t + h).unwrap().powi(2) - sched.sigma(t - h).unwrap().powi(2)) / (2.0 * h);
        let g2 = sched.diffusion_coeff(t).unwrap().powi(2);
        assert!(((g2 - fd) / g2).abs() < 1e-6, "t={t}: {g2} vs {fd}");
    }
}

#[test]
fn gaussian_target_moments() {
    for seed in 0..3 {
        let (m, s) = gaussian_sampler_moments(seed, 0.5, 0.2, 10_000);
        assert!((m - 0.5).abs() < 0.02, "mean {m}");
        assert!((s / 0.2 - 1.0).abs() < 0.15, "std {s}");
    }
}

#[test]
fn point_mass_target_keeps_final_noise_level() {
    // Exact score of a point mass at 0.7: the last predictor step lands on
    // 0.7 plus N(0, σ(t_eps)²) noise.
    let sched = NoiseSchedule::default();
    let mut r = rng(1);
    let x = prior_sample(&[20_000], &sched, &mut r);
    let mut score = |x: &ArrayD<f64>, t: f64| -> ambi_upscale::Result<ArrayD<f64>> {
        let s2 = sched.sigma(t)?.powi(2);
        Ok(x.mapv(|v| -(v - 0.7) / s2))
    };
    let out = pc_sample(x, &mut score, &PcSamplerConfig::default(), &sched, &mut r).unwrap();
    let mean = out.mean().unwrap();
    let sd = out.std(0.0);
    let want = sched.sigma(sched.t_eps).unwrap();
    assert!((mean - 0.7).abs() < 0.002);
    assert!((sd / want - 1.0).abs() < 0.03, "{sd} vs {want}");
}

#[test]
fn predictor_with_exact_point_mass_score_is_exact() {
    let sched = NoiseSchedule::default();
    let grid = SigmaGrid::geometric(&sched, 30).unwrap();
    let x = ArrayD::from_elem(vec![3], 2.0);
    let zero = ArrayD::zeros(vec![3]);
    let mut score = |x: &ArrayD<f64>, t: f64| -> ambi_upscale::Result<ArrayD<f64>> {
        let s2 = sched.sigma(t)?.powi(2);
        Ok(x.mapv(|v| -v / s2))
    };
    let out = predictor_step_with_noise(&x, 1, &mut score, &grid, &zero).unwrap();
    assert!(out.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn prior_has_sigma_max_std() {
    let sched = NoiseSchedule::default();
    let x = prior_sample(&[100_000], &sched, &mut rng(4));
    assert!((x.std(0.0) / sched.sigma_max - 1.0).abs() < 0.01);
}

#[test]
fn oracle_score_gives_exactly_zero_loss() {
    let sched = NoiseSchedule::default();
    let b = batch(6, &[10, 5, 7], 2);
    let draws = draw_dsm(&b, &sched, &mut rng(3));
    let mut k = 0;
    let mut oracle = |_x: &ArrayD<f64>, _y: &ArrayD<f64>, t: f64| -> ambi_upscale::Result<ArrayD<f64>> {
        let d = &draws[k];
        k += 1;
        assert_eq!(d.t, t);
        let sigma = sched.sigma(t)?;
        Ok(d.z.mapv(|z| -(z / sigma)))
    };
    assert_eq!(dsm_loss_with_draws(&mut oracle, &b, &draws, &sched).unwrap(), 0.0);
}

#[test]
fn zero_score_loss_is_element_count() {
    let sched = NoiseSchedule::default();
    let b = batch(200, &[10, 8, 8], 5);
    let d: f64 = 640.0;
    let mut zero = |x: &ArrayD<f64>, _y: &ArrayD<f64>, _t: f64| -> ambi_upscale::Result<ArrayD<f64>> { Ok(ArrayD::zeros(x.shape())) };
    let loss = dsm_loss(&mut zero, &b, &mut rng(6), &sched).unwrap();
    let mc_std = (2.0 * d / 200.0).sqrt();
    assert!((loss - d).abs() < 3.0 * mc_std, "{loss}");
}

#[test]
fn loss_errors() {
    let sched = NoiseSchedule::default();
    let mut zero = |x: &ArrayD<f64>, _y: &ArrayD<f64>, _t: f64| -> ambi_upscale::Result<ArrayD<f64>> { Ok(ArrayD::zeros(x.shape())) };
    assert!(dsm_loss(&mut zero, &[], &mut rng(0), &sched).is_err());
    let mut wrong = |_x: &ArrayD<f64>, _y: &ArrayD<f64>, _t: f64| -> ambi_upscale::Result<ArrayD<f64>> { Ok(ArrayD::zeros(vec![1])) };
    assert!(dsm_loss(&mut wrong, &batch(1, &[2, 2, 2], 0), &mut rng(0), &sched).is_err());
}

#[test]
fn schedule_rejects_bad_values() {
    assert!(NoiseSchedule::new(0.5, 0.05, 1e-3).is_err());
    assert!(NoiseSchedule::new(0.0, 0.5, 1e-3).is_err());
    assert!(NoiseSchedule::new(0.05, 0.5, 0.0).is_err());
    assert!(NoiseSchedule::default().sigma(1.5).is_err());
}

proptest! {
    #[test]
    fn sigma_is_increasing_and_invertible(a in 0.0..1.0f64, b in 0.0..1.0f64, lo in 0.001..0.1f64, ratio in 1.5..1000.0f64) {
        let sched = NoiseSchedule::new(lo, lo * ratio, 1e-3).unwrap();
        let (sa, sb) = (sched.sigma(a).unwrap(), sched.sigma(b).unwrap());
        if a < b { prop_assert!(sa < sb); }
        prop_assert!((sched.time_of_sigma(sa) - a).abs() < 1e-9);
    }

    #[test]
    fn perturbation_is_affine_in_noise(t in 0.0..1.0f64, seed in 0u64..500) {
        let sched = NoiseSchedule::default();
        let mut r = rng(seed);
        let x0 = standard_normal(&[4, 3], &mut r);
        let z = standard_normal(&[4, 3], &mut r);
        let xt = perturb(&x0, t, &z, &sched).unwrap();
        let sigma = sched.sigma(t).unwrap();
        for ((a, b), c) in xt.iter().zip(&x0).zip(&z) {
            prop_assert!((a - b - sigma * c).abs() < 1e-12);
        }
    }

    #[test]
    fn training_times_stay_in_range(seed in 0u64..500) {
        let sched = NoiseSchedule::default();
        let t = sched.sample_time(&mut rng(seed));
        prop_assert!(t >= sched.t_eps && t <= 1.0);
    }
}
