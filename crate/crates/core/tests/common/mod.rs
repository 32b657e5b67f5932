#![allow(dead_code)]

use ambi_upscale::{
    encode_scene, AmbisonicsSignal, Direction, PlaneWaveScene, PlaneWaveSource,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SR: u32 = 16_000;
pub const CLIP: usize = 32_768;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn noise_channels(ch: usize, len: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((ch, len), || rng.sample(StandardNormal))
}

pub fn scene(dirs: &[Direction], len: usize, rng: &mut ChaCha8Rng) -> PlaneWaveScene {
    let sources = dirs
        .iter()
        .map(|d| PlaneWaveSource {
            direction: *d,
            waveform: noise(len, rng),
            gain: 1.0,
        })
        .collect();
    PlaneWaveScene::new(sources, SR).unwrap()
}

pub fn encoded(dirs: &[Direction], len: usize, order: usize, seed: u64) -> AmbisonicsSignal {
    encode_scene(&scene(dirs, len, &mut rng(seed)), order).unwrap()
}

pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let dp = {
                    let (mut p0, mut p1) = (1.0, z);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    n as f64 * (z * p1 - p0) / (z * z - 1.0)
                };
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
    }
    (x, w)
}

/// Product quadrature on the sphere exact for polynomials of degree < 2n:
/// Gauss-Legendre in cos(colatitude), uniform in azimuth. Returns directions
/// and weights summing to 4π.
pub fn sphere_quadrature(n: usize) -> Vec<(Direction, f64)> {
    let (x, w) = gauss_legendre(n);
    let n_az = 2 * n;
    let mut out = Vec::new();
    for (xi, wi) in x.iter().zip(&w) {
        for j in 0..n_az {
            let az = 2.0 * std::f64::consts::PI * j as f64 / n_az as f64;
            out.push((
                Direction::new(az, xi.acos()).unwrap(),
                wi * 2.0 * std::f64::consts::PI / n_az as f64,
            ));
        }
    }
    out
}

/// Runs the PC sampler on `chains` scalar chains (one tensor) with the exact
/// score of the VE-perturbed target `N(mu, s²)`; returns sample mean and std.
pub fn gaussian_sampler_moments(seed: u64, mu: f64, s: f64, chains: usize) -> (f64, f64) {
    use ambi_upscale::sde::prior_sample;
    use ambi_upscale::{pc_sample, NoiseSchedule, PcSamplerConfig};
    use ndarray::ArrayD;
    let sched = NoiseSchedule::default();
    let mut r = rng(seed);
    let x_t = prior_sample(&[chains], &sched, &mut r);
    let mut score = |x: &ArrayD<f64>, t: f64| -> ambi_upscale::Result<ArrayD<f64>> {
        let sigma = sched.sigma(t)?;
        Ok(x.mapv(|v| -(v - mu) / (s * s + sigma * sigma)))
    };
    let out = pc_sample(x_t, &mut score, &PcSamplerConfig::default(), &sched, &mut r).unwrap();
    let n = chains as f64;
    let mean = out.sum() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
