//! Predictor-corrector sampling with the exact score of a Gaussian target:
//! the samples should come out with the target's mean and spread.

use ambi_upscale::sde::prior_sample;
use ambi_upscale::{pc_sample, NoiseSchedule, PcSamplerConfig};
use ndarray::ArrayD;
use rand::SeedableRng;

fn main() -> ambi_upscale::Result<()> {
    let (mu, s) = (0.5, 0.2);
    let sched = NoiseSchedule::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x_t = prior_sample(&[10_000], &sched, &mut rng);
    let mut score = |x: &ArrayD<f64>, t: f64| -> ambi_upscale::Result<ArrayD<f64>> {
        let sigma = sched.sigma(t)?;
        Ok(x.mapv(|v| -(v - mu) / (s * s + sigma * sigma)))
    };
    let out = pc_sample(x_t, &mut score, &PcSamplerConfig::default(), &sched, &mut rng)?;
    let mean = out.mean().unwrap_or(f64::NAN);
    println!("target N({mu}, {s}²): sample mean {mean:.4}, std {:.4}", out.std(0.0));
    Ok(())
}
