//! Plane-wave decomposition baseline: per time-frequency bin, a sparse set of
//! plane waves on a fixed direction grid is fitted to the first-order
//! channels and re-encoded to third order.

use std::thread;

use log::warn;
use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ambisonics::{sh_matrix, AmbisonicsSignal, Direction, ShMatrix};
use crate::error::{config, invalid, Result};
use crate::tf::{istft_ambisonics, stft, StftConfig, TfSignal};

/// Dictionary of plane-wave directions with their first- and third-order
/// spherical-harmonic rows.
#[derive(Debug, Clone)]
pub struct DirectionGrid {
    directions: Vec<Direction>,
    sh_low: ShMatrix,
    sh_high: ShMatrix,
}

impl DirectionGrid {
    /// Fibonacci lattice of `count` nearly uniform directions.
    pub fn fibonacci(count: usize) -> Result<Self> {
        if count < 16 {
            return Err(invalid(format!("direction grid needs at least 16 points, got {count}")));
        }
        let golden = std::f64::consts::PI * (1.0 + 5f64.sqrt());
        let directions = (0..count)
            .map(|i| {
                let k = i as f64 + 0.5;
                let colatitude = (1.0 - 2.0 * k / count as f64).acos();
                Direction::new(golden * k, colatitude)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_directions(directions)
    }

    pub fn from_directions(directions: Vec<Direction>) -> Result<Self> {
        if directions.len() < 16 {
            return Err(invalid(format!(
                "direction grid needs at least 16 points, got {}",
                directions.len()
            )));
        }
        Ok(Self {
            sh_low: sh_matrix(1, &directions)?,
            sh_high: sh_matrix(3, &directions)?,
            directions,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn sh_low(&self) -> &ShMatrix {
        &self.sh_low
    }

    pub fn sh_high(&self) -> &ShMatrix {
        &self.sh_high
    }
}

/// Solver settings. The penalty is `λ‖a‖^(2−p) Σ (|s_l|² + (δ‖a‖)²)^(p/2)`,
/// which scales like the fit term, so the solution scales with the input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsConfig {
    /// Sparsity weight λ, relative to the bin norm.
    pub lambda: f64,
    /// Relative change of the iterate below which the solver stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Penalty exponent `p` in `(0, 1]`.
    pub exponent: f64,
    /// Smoothing δ, relative to the bin norm.
    pub smoothing: f64,
    /// Bins whose energy is below this fraction of the clip's strongest bin
    /// are left at zero.
    pub skip_below: f64,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tolerance: 1e-4,
            max_iterations: 100,
            exponent: 0.5,
            smoothing: 1e-6,
            skip_below: 1e-10,
        }
    }
}

impl CsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(config("cs tolerance must be > 0 and max_iterations >= 1"));
        }
        if !(self.lambda > 0.0) || !(self.smoothing > 0.0) {
            return Err(config("cs lambda and smoothing must be > 0"));
        }
        if !(self.exponent > 0.0 && self.exponent <= 1.0) {
            return Err(config("cs exponent must lie in (0, 1]"));
        }
        if !(self.skip_below >= 0.0) {
            return Err(config("cs skip_below must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub coefficients: Vec<Complex64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration.
    pub objective: Vec<f64>,
}

impl SparseSolution {
    fn zero(len: usize) -> Self {
        Self {
            coefficients: vec![Complex64::new(0.0, 0.0); len],
            iterations: 0,
            converged: true,
            objective: Vec::new(),
        }
    }
}

/// `‖A s − a‖² + λ_eff Σ (|s|² + δ²)^(p/2)` with the scale-relative λ and δ.
pub fn cs_objective(a: &[Complex64; 4], s: &[Complex64], grid: &DirectionGrid, cfg: &CsConfig) -> f64 {
    let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let lam = cfg.lambda * norm.powf(2.0 - cfg.exponent);
    let delta2 = (cfg.smoothing * norm).powi(2);
    let fit = residual(a, s, grid.sh_low.values());
    let penalty: f64 = s
        .iter()
        .map(|c| (c.norm_sqr() + delta2).powf(cfg.exponent / 2.0))
        .sum();
    fit + lam * penalty
}

fn residual(a: &[Complex64; 4], s: &[Complex64], low: &Array2<f64>) -> f64 {
    let mut r = *a;
    for (l, c) in s.iter().enumerate() {
        for k in 0..4 {
            r[k] -= low[[l, k]] * c;
        }
    }
    r.iter().map(|c| c.norm_sqr()).sum()
}

/// Cholesky solve of a symmetric positive definite 4×4 system with a complex
/// right-hand side.
fn solve_spd4(m: &[[f64; 4]; 4], b: &[Complex64; 4]) -> [Complex64; 4] {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut sum = m[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            l[i][j] = if i == j { sum.max(f64::MIN_POSITIVE).sqrt() } else { sum / l[j][j] };
        }
    }
    let mut y = [Complex64::new(0.0, 0.0); 4];
    for i in 0..4 {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [Complex64::new(0.0, 0.0); 4];
    for i in (0..4).rev() {
        let mut sum = y[i];
        for k in i + 1..4 {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

/// Sparse plane-wave amplitudes for one bin of first-order data by
/// majorize-minimize reweighted least squares. Each iteration solves
/// `min ‖A s − a‖² + (λ_eff/2) Σ w_l |s_l|²` in closed form through a 4×4
/// system, so the objective never increases.
pub fn solve_sparse_bin(a: &[Complex64; 4], grid: &DirectionGrid, cfg: &CsConfig) -> Result<SparseSolution> {
    cfg.validate()?;
    if a.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(invalid("sparse solver input must be finite"));
    }
    let len = grid.len();
    let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(SparseSolution::zero(len));
    }
    let low = grid.sh_low.values();
    let rows = low.as_slice().map(|v| v.chunks_exact(4)).expect("grid matrix is contiguous");
    let rows: Vec<&[f64]> = rows.collect();
    let p = cfg.exponent;
    let lam = cfg.lambda * norm.powf(2.0 - p);
    let mu = lam / 2.0;
    let delta2 = (cfg.smoothing * norm).powi(2);
    // u^(p/2), with the default p = 0.5 special-cased off the slow powf path.
    let pow = |u: f64| if p == 0.5 { u.sqrt().sqrt() } else { u.powf(p / 2.0) };

    // Start from the weights of a flat spread of size ‖a‖.
    let mut inv_weight = vec![norm.powf(2.0 - p); len];
    let mut s = vec![Complex64::new(0.0, 0.0); len];
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut m = [[0.0; 4]; 4];
        for (row, &w) in rows.iter().zip(&inv_weight) {
            for i in 0..4 {
                let wi = w * row[i];
                for j in 0..=i {
                    m[i][j] += wi * row[j];
                }
            }
        }
        for i in 0..4 {
            m[i][i] += mu;
            for j in 0..i {
                m[j][i] = m[i][j];
            }
        }
        let v = solve_spd4(&m, a);
        let mut change = 0.0;
        let mut size = 0.0;
        let mut penalty = 0.0;
        let mut r = *a;
        for ((row, w), sl) in rows.iter().zip(inv_weight.iter_mut()).zip(s.iter_mut()) {
            let c = (v[0] * row[0] + v[1] * row[1] + v[2] * row[2] + v[3] * row[3]) * *w;
            for k in 0..4 {
                r[k] -= row[k] * c;
            }
            change += (c - *sl).norm_sqr();
            let cn = c.norm_sqr();
            size += cn;
            *sl = c;
            let u = cn + delta2;
            let phi = pow(u);
            penalty += phi;
            *w = u / (p * phi);
        }
        objective.push(r.iter().map(|c| c.norm_sqr()).sum::<f64>() + lam * penalty);
        if iterations > 1 && change <= cfg.tolerance * cfg.tolerance * size {
            converged = true;
            break;
        }
    }
    Ok(SparseSolution {
        coefficients: s,
        iterations,
        converged,
        objective,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsStats {
    pub bins_total: usize,
    pub bins_solved: usize,
    pub bins_unconverged: usize,
}

fn solve_frames(
    tf: &TfSignal,
    frames: std::ops::Range<usize>,
    threshold: f64,
    grid: &DirectionGrid,
    cfg: &CsConfig,
) -> Result<(Array3<Complex64>, CsStats)> {
    let bins = tf.data.dim().1;
    let high = grid.sh_high.values();
    let mut out = Array3::zeros((16, bins, frames.len()));
    let mut stats = CsStats::default();
    for (j, frame) in frames.enumerate() {
        for bin in 0..bins {
            stats.bins_total += 1;
            let a = [
                tf.data[[0, bin, frame]],
                tf.data[[1, bin, frame]],
                tf.data[[2, bin, frame]],
                tf.data[[3, bin, frame]],
            ];
            let energy: f64 = a.iter().map(|c| c.norm_sqr()).sum();
            if energy == 0.0 || energy < threshold {
                continue;
            }
            let sol = solve_sparse_bin(&a, grid, cfg)?;
            stats.bins_solved += 1;
            if !sol.converged {
                stats.bins_unconverged += 1;
            }
            for (l, c) in sol.coefficients.iter().enumerate() {
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                for ch in 4..16 {
                    out[[ch, bin, j]] += high[[l, ch]] * c;
                }
            }
            for ch in 0..4 {
                out[[ch, bin, j]] = a[ch];
            }
        }
    }
    Ok((out, stats))
}

/// First-order to third-order upscaling by per-bin sparse plane-wave
/// decomposition. Channels 1–4 of the output carry the input spectrogram.
/// Frames are split across `jobs` worker threads.
pub fn cs_upscale(
    foa: &AmbisonicsSignal,
    grid: &DirectionGrid,
    cfg: &CsConfig,
    stft_cfg: &StftConfig,
    jobs: usize,
) -> Result<(AmbisonicsSignal, CsStats)> {
    cfg.validate()?;
    if foa.order() != 1 {
        return Err(invalid(format!("baseline input must be first order, got order {}", foa.order())));
    }
    let tf = stft(foa, stft_cfg)?;
    let (_, bins, frames) = tf.data.dim();
    let peak = (0..bins)
        .flat_map(|b| (0..frames).map(move |f| (b, f)))
        .map(|(b, f)| (0..4).map(|c| tf.data[[c, b, f]].norm_sqr()).sum::<f64>())
        .fold(0.0, f64::max);
    let threshold = cfg.skip_below * peak;

    let jobs = jobs.clamp(1, frames.max(1));
    let chunk = frames.div_ceil(jobs).max(1);
    let ranges: Vec<_> = (0..frames).step_by(chunk).map(|a| a..(a + chunk).min(frames)).collect();
    let parts = thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|r| {
                let tf = &tf;
                let r = r.clone();
                scope.spawn(move || solve_frames(tf, r, threshold, grid, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("baseline worker panicked"))
            .collect::<Vec<_>>()
    });

    let mut data = Array3::zeros((16, bins, frames));
    data.slice_mut(s![..4, .., ..]).assign(&tf.data);
    let mut stats = CsStats::default();
    for (range, part) in ranges.into_iter().zip(parts) {
        let (block, st) = part?;
        data.slice_mut(s![4.., .., range]).assign(&block.slice(s![4.., .., ..]));
        stats.bins_total += st.bins_total;
        stats.bins_solved += st.bins_solved;
        stats.bins_unconverged += st.bins_unconverged;
    }
    if stats.bins_unconverged > 0 {
        warn!(
            "sparse solver hit the iteration limit on {} of {} bins",
            stats.bins_unconverged, stats.bins_solved
        );
    }
    let out = TfSignal { data, ..tf };
    Ok((istft_ambisonics(&out, foa.sample_rate())?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_unit_and_sized() {
        let g = DirectionGrid::fibonacci(400).unwrap();
        assert_eq!(g.len(), 400);
        assert_eq!(g.sh_low().values().dim(), (400, 4));
        assert_eq!(g.sh_high().values().dim(), (400, 16));
        assert!(DirectionGrid::fibonacci(15).is_err());
    }

    #[test]
    fn zero_bin_gives_zero() {
        let g = DirectionGrid::fibonacci(64).unwrap();
        let sol = solve_sparse_bin(&[Complex64::new(0.0, 0.0); 4], &g, &CsConfig::default()).unwrap();
        assert!(sol.coefficients.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn spd_solve_matches_product() {
        let m = [
            [4.0, 1.0, 0.5, 0.0],
            [1.0, 3.0, 0.2, 0.1],
            [0.5, 0.2, 2.0, 0.3],
            [0.0, 0.1, 0.3, 1.5],
        ];
        let b = [
            Complex64::new(1.0, -1.0),
            Complex64::new(0.5, 2.0),
            Complex64::new(-3.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        let x = solve_spd4(&m, &b);
        for i in 0..4 {
            let r: Complex64 = (0..4).map(|j| m[i][j] * x[j]).sum();
            assert!((r - b[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let g = DirectionGrid::fibonacci(64).unwrap();
        let mut a = [Complex64::new(1.0, 0.0); 4];
        a[2] = Complex64::new(f64::NAN, 0.0);
        assert!(solve_sparse_bin(&a, &g, &CsConfig::default()).is_err());
    }
}
