//! Variance-exploding SDE: geometric noise schedule, single-step forward
//! perturbation, the denoising score-matching objective, and the
//! predictor-corrector sampler (reverse-diffusion predictor, annealed Langevin
//! corrector).
//!
//! Tensors are `ndarray::ArrayD<f64>`; a whole tensor is one sample, so the
//! corrector's step size uses whole-tensor norms.

use ndarray::{ArrayD, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_eps: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, t_eps: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            t_eps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return Err(config(format!(
                "need 0 < sigma_min ({}) < sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(config(format!("t_eps {} outside (0, 1)", self.t_eps)));
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("diffusion time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Perturbation kernel std `σ(t) = σ_min (σ_max/σ_min)^t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Diffusion coefficient `g(t) = σ(t) sqrt(2 ln(σ_max/σ_min))`; the drift is zero.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        self.validate()?;
        Self::check_t(t)?;
        Ok(self.sigma_unchecked(t) * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt())
    }

    /// Drift `f(x, t)`, identically zero for this SDE.
    pub fn drift(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    /// Inverse of [`Self::sigma`].
    pub fn time_of_sigma(&self, sigma: f64) -> f64 {
        (sigma / self.sigma_min).ln() / (self.sigma_max / self.sigma_min).ln()
    }

    /// Training time drawn uniformly on `[t_eps, 1]`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.t_eps + (1.0 - self.t_eps) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcSamplerConfig {
    pub predictor_steps: usize,
    pub corrector_steps_per_predictor: usize,
    pub snr: f64,
}

impl Default for PcSamplerConfig {
    fn default() -> Self {
        Self {
            predictor_steps: 30,
            corrector_steps_per_predictor: 1,
            snr: 0.5,
        }
    }
}

impl PcSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.predictor_steps == 0 {
            return Err(config("predictor_steps must be at least 1"));
        }
        if !(self.snr > 0.0) || !self.snr.is_finite() {
            return Err(config(format!("snr {} must be positive", self.snr)));
        }
        Ok(())
    }

    /// Score evaluations per sampled tensor.
    pub fn score_evaluations(&self) -> usize {
        self.predictor_steps * (1 + self.corrector_steps_per_predictor)
    }
}

/// A score model `s(x, t)`.
pub trait ScoreFn {
    fn score(&mut self, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>>;
}

impl<F> ScoreFn for F
where
    F: FnMut(&ArrayD<f64>, f64) -> Result<ArrayD<f64>>,
{
    fn score(&mut self, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        self(x, t)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.sample(StandardNormal))
}

fn norm(x: &ArrayD<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `x0 + σ(t) z`.
pub fn perturb(
    x0: &ArrayD<f64>,
    t: f64,
    z: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    if x0.shape() != z.shape() {
        return Err(invalid(format!(
            "perturb: shapes {:?} and {:?} differ",
            x0.shape(),
            z.shape()
        )));
    }
    let sigma = sched.sigma(t)?;
    Ok(x0 + &(z * sigma))
}

/// One draw of the denoising score-matching objective.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub t: f64,
    pub z: ArrayD<f64>,
}

/// Residual `σ s + z`, written as `σ (s + z/σ)` so a score equal to `-z/σ`
/// cancels exactly.
pub fn dsm_residual(score: &ArrayD<f64>, z: &ArrayD<f64>, sigma: f64) -> ArrayD<f64> {
    let mut r = score.clone();
    Zip::from(&mut r).and(z).for_each(|r, &z| *r = (*r + z / sigma) * sigma);
    r
}

/// Denoising score-matching loss with explicit draws:
/// `(1/D) Σ_i ‖ s(x_{t_i}, y_i, t_i) σ_{t_i} + z_i ‖²`, squared norm summed over
/// all tensor elements.
pub fn dsm_loss_with_draws<S>(
    score_fn: &mut S,
    batch: &[(ArrayD<f64>, ArrayD<f64>)],
    draws: &[DsmDraw],
    sched: &NoiseSchedule,
) -> Result<f64>
where
    S: FnMut(&ArrayD<f64>, &ArrayD<f64>, f64) -> Result<ArrayD<f64>>,
{
    if batch.is_empty() {
        return Err(invalid("dsm_loss needs a non-empty batch"));
    }
    if draws.len() != batch.len() {
        return Err(invalid("one draw per batch item is required"));
    }
    let mut total = 0.0;
    for ((x0, y), draw) in batch.iter().zip(draws) {
        let xt = perturb(x0, draw.t, &draw.z, sched)?;
        let s = score_fn(&xt, y, draw.t)?;
        if s.shape() != x0.shape() {
            return Err(invalid("score output shape differs from x0"));
        }
        let sigma = sched.sigma(draw.t)?;
        total += dsm_residual(&s, &draw.z, sigma).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Draws `t_i ~ U[t_eps, 1]`, `z_i ~ N(0, I)` for every item in `batch`.
pub fn draw_dsm<R: Rng + ?Sized>(
    batch: &[(ArrayD<f64>, ArrayD<f64>)],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Vec<DsmDraw> {
    batch
        .iter()
        .map(|(x0, _)| {
            let t = sched.sample_time(rng);
            DsmDraw {
                t,
                z: standard_normal(x0.shape(), rng),
            }
        })
        .collect()
}

pub fn dsm_loss<S, R>(
    score_fn: &mut S,
    batch: &[(ArrayD<f64>, ArrayD<f64>)],
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<f64>
where
    S: FnMut(&ArrayD<f64>, &ArrayD<f64>, f64) -> Result<ArrayD<f64>>,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(invalid("dsm_loss needs a non-empty batch"));
    }
    let draws = draw_dsm(batch, sched, rng);
    dsm_loss_with_draws(score_fn, batch, &draws, sched)
}

/// Noise levels visited by the sampler, ascending: `levels[0] = 0` and
/// `levels[i] = σ(t_i)` for `i = 1..=steps`, with `t_steps = 1` down to `t_1 = t_eps`
/// uniformly spaced.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaGrid {
    times: Vec<f64>,
    sigmas: Vec<f64>,
}

impl SigmaGrid {
    pub fn geometric(sched: &NoiseSchedule, steps: usize) -> Result<Self> {
        sched.validate()?;
        if steps == 0 {
            return Err(config("sigma grid needs at least one step"));
        }
        let mut times = vec![0.0];
        let mut sigmas = vec![0.0];
        for i in 1..=steps {
            let t = if steps == 1 {
                1.0
            } else {
                sched.t_eps + (1.0 - sched.t_eps) * (i - 1) as f64 / (steps - 1) as f64
            };
            times.push(t);
            sigmas.push(sched.sigma(t)?);
        }
        Self::new(times, sigmas)
    }

    /// Explicit grid; `sigmas` must be strictly increasing from index 0.
    pub fn new(times: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if times.len() != sigmas.len() || sigmas.len() < 2 {
            return Err(config("sigma grid needs matching times and at least two levels"));
        }
        if sigmas[0] < 0.0 || sigmas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(config("sigma grid must be strictly monotone"));
        }
        Ok(Self { times, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }
}

/// Reverse-diffusion predictor with explicit noise `z`:
/// `x + (σ_i² − σ_{i−1}²) s(x, t_i) + sqrt(σ_i² − σ_{i−1}²) z`.
pub fn predictor_step_with_noise<S: ScoreFn + ?Sized>(
    x: &ArrayD<f64>,
    i: usize,
    score_fn: &mut S,
    grid: &SigmaGrid,
    z: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    if i == 0 || i > grid.steps() {
        return Err(invalid(format!("predictor index {i} outside 1..={}", grid.steps())));
    }
    let var = grid.sigma(i).powi(2) - grid.sigma(i - 1).powi(2);
    let s = score_fn.score(x, grid.time(i))?;
    if s.shape() != x.shape() || z.shape() != x.shape() {
        return Err(invalid("predictor: score/noise shape differs from x"));
    }
    let sd = var.sqrt();
    let mut out = x.clone();
    Zip::from(&mut out)
        .and(&s)
        .and(z)
        .for_each(|o, &s, &z| *o += var * s + sd * z);
    Ok(out)
}

pub fn predictor_step<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    x: &ArrayD<f64>,
    i: usize,
    score_fn: &mut S,
    grid: &SigmaGrid,
    rng: &mut R,
) -> Result<ArrayD<f64>> {
    let z = standard_normal(x.shape(), rng);
    predictor_step_with_noise(x, i, score_fn, grid, &z)
}

/// Langevin step size `2 (snr ‖z‖ / ‖s‖)²`.
pub fn langevin_step_size(noise_norm: f64, score_norm: f64, snr: f64) -> f64 {
    2.0 * (snr * noise_norm / score_norm).powi(2)
}

/// Annealed Langevin corrector step. A zero score leaves `x` unchanged.
pub fn corrector_step<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    x: &ArrayD<f64>,
    t: f64,
    score_fn: &mut S,
    snr: f64,
    rng: &mut R,
) -> Result<ArrayD<f64>> {
    if !(snr > 0.0) {
        return Err(invalid(format!("snr {snr} must be positive")));
    }
    let s = score_fn.score(x, t)?;
    if s.shape() != x.shape() {
        return Err(invalid("corrector: score shape differs from x"));
    }
    let z = standard_normal(x.shape(), rng);
    let s_norm = norm(&s);
    if s_norm == 0.0 {
        return Ok(x.clone());
    }
    let eps = langevin_step_size(norm(&z), s_norm, snr);
    let sd = (2.0 * eps).sqrt();
    let mut out = x.clone();
    Zip::from(&mut out)
        .and(&s)
        .and(&z)
        .for_each(|o, &s, &z| *o += eps * s + sd * z);
    Ok(out)
}

/// Predictor-corrector sampling from `x_T` down to `t_eps`: at each level the
/// corrector runs first, then the predictor moves to the next lower level.
/// The final predictor step lands on σ = 0.
pub fn pc_sample<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    x_t: ArrayD<f64>,
    score_fn: &mut S,
    cfg: &PcSamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ArrayD<f64>> {
    cfg.validate()?;
    let grid = SigmaGrid::geometric(sched, cfg.predictor_steps)?;
    let mut x = x_t;
    for i in (1..=grid.steps()).rev() {
        for _ in 0..cfg.corrector_steps_per_predictor {
            x = corrector_step(&x, grid.time(i), score_fn, cfg.snr, rng)?;
        }
        x = predictor_step(&x, i, score_fn, &grid, rng)?;
    }
    Ok(x)
}

/// Initial state `x_T ~ N(0, σ_max² I)`.
pub fn prior_sample<R: Rng + ?Sized>(
    shape: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> ArrayD<f64> {
    standard_normal(shape, rng) * sched.sigma_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_endpoints() {
        let s = NoiseSchedule::default();
        assert_relative_eq!(s.sigma(0.0).unwrap(), 0.05, max_relative = 1e-15);
        assert_relative_eq!(s.sigma(1.0).unwrap(), 0.5, max_relative = 1e-15);
        assert_relative_eq!(s.sigma(0.5).unwrap(), (0.05f64 * 0.5).sqrt(), max_relative = 1e-14);
        assert!(s.sigma(1.01).is_err());
        assert!(s.sigma(-0.1).is_err());
    }

    #[test]
    fn diffusion_coeff_values() {
        let s = NoiseSchedule::default();
        let g0 = s.diffusion_coeff(0.0).unwrap();
        assert_relative_eq!(g0, 0.05 * (2.0 * 10f64.ln()).sqrt(), max_relative = 1e-15);
        let g1 = s.diffusion_coeff(1.0).unwrap();
        assert_relative_eq!(g1 / g0, 10.0, max_relative = 1e-14);
        let degenerate = NoiseSchedule {
            sigma_min: 0.3,
            sigma_max: 0.3,
            t_eps: 1e-3,
        };
        assert!(degenerate.diffusion_coeff(0.5).is_err());
        assert_eq!(s.drift(1.0, 0.3), 0.0);
    }

    #[test]
    fn perturb_cases() {
        let s = NoiseSchedule::default();
        let x0 = ArrayD::from_elem(IxDyn(&[3]), 2.0);
        let zero = ArrayD::zeros(IxDyn(&[3]));
        assert_eq!(perturb(&x0, 0.4, &zero, &s).unwrap(), x0);
        let z = ArrayD::from_elem(IxDyn(&[3]), -1.5);
        assert_eq!(perturb(&zero, 1.0, &z, &s).unwrap(), &z * 0.5);
        assert!(perturb(&x0, 0.4, &ArrayD::zeros(IxDyn(&[2])), &s).is_err());
    }

    #[test]
    fn perturb_std_matches_sigma() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let z = standard_normal(&[n], &mut rng);
        let x = perturb(&ArrayD::zeros(IxDyn(&[n])), 0.7, &z, &s).unwrap();
        let std = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let expect = s.sigma(0.7).unwrap();
        assert!((std / expect - 1.0).abs() < 0.02);
    }

    #[test]
    fn empty_batch_rejected() {
        let s = NoiseSchedule::default();
        let mut f = |x: &ArrayD<f64>, _: &ArrayD<f64>, _: f64| Ok(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dsm_loss(&mut f, &[], &mut rng, &s).is_err());
    }

    #[test]
    fn zero_score_predictor_without_noise_is_identity() {
        let s = NoiseSchedule::default();
        let grid = SigmaGrid::geometric(&s, 5).unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let mut zero = |x: &ArrayD<f64>, _t: f64| Ok(ArrayD::zeros(x.raw_dim()));
        let z = ArrayD::zeros(IxDyn(&[3]));
        assert_eq!(predictor_step_with_noise(&x, 3, &mut zero, &grid, &z).unwrap(), x);
    }

    #[test]
    fn non_monotone_grid_rejected() {
        assert!(SigmaGrid::new(vec![0.0, 0.5, 1.0], vec![0.0, 0.3, 0.2]).is_err());
        assert!(SigmaGrid::new(vec![0.0, 1.0], vec![0.0, 0.2]).is_ok());
    }

    #[test]
    fn zero_score_corrector_is_identity() {
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, 0.4]).unwrap();
        let mut zero = |x: &ArrayD<f64>, _t: f64| Ok(ArrayD::zeros(x.raw_dim()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrector_step(&x, 0.5, &mut zero, 0.5, &mut rng).unwrap(), x);
    }

    #[test]
    fn step_size_scales_with_snr_squared() {
        let a = langevin_step_size(3.0, 2.0, 0.5);
        let b = langevin_step_size(3.0, 2.0, 1.0);
        assert_relative_eq!(b / a, 4.0, max_relative = 1e-15);
    }

    #[test]
    fn score_evaluation_count() {
        let s = NoiseSchedule::default();
        let cfg = PcSamplerConfig::default();
        let mut calls = 0usize;
        let mut f = |x: &ArrayD<f64>, _t: f64| {
            calls += 1;
            Ok(-x.clone())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        pc_sample(ArrayD::zeros(IxDyn(&[4])), &mut f, &cfg, &s, &mut rng).unwrap();
        assert_eq!(calls, 60);
        assert_eq!(cfg.score_evaluations(), 60);
    }
}
