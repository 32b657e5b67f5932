//! Real spherical harmonics (ACN ordering, N3D normalization, no
//! Condon-Shortley phase), free-field plane-wave encoding, order truncation
//! and directional energy analysis.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of Ambisonics channels of order `order`.
pub const fn channel_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// ACN channel index of degree `n`, index `m`.
pub const fn acn(n: usize, m: i64) -> usize {
    ((n * n + n) as i64 + m) as usize
}

/// Inverse of [`acn`].
pub fn acn_to_nm(channel: usize) -> (usize, i64) {
    let n = (channel as f64).sqrt().floor() as usize;
    let n = if (n + 1) * (n + 1) <= channel { n + 1 } else { n };
    (n, channel as i64 - (n * n + n) as i64)
}

/// Recover the order from a channel count, if it is a perfect square.
pub fn order_from_channels(channels: usize) -> Option<usize> {
    let n = (channels as f64).sqrt().round() as usize;
    (n >= 1 && n * n == channels).then(|| n - 1)
}

/// Direction of arrival. Azimuth in `[0, 2π)`, colatitude in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    azimuth: f64,
    colatitude: f64,
}

impl Direction {
    /// Azimuth is wrapped into `[0, 2π)`; colatitude must lie in `[0, π]`.
    pub fn new(azimuth: f64, colatitude: f64) -> Result<Self> {
        if !azimuth.is_finite() || !colatitude.is_finite() {
            return Err(invalid("direction angles must be finite"));
        }
        if !(0.0..=PI).contains(&colatitude) {
            return Err(invalid(format!("colatitude {colatitude} outside [0, π]")));
        }
        let mut azimuth = azimuth.rem_euclid(2.0 * PI);
        if azimuth >= 2.0 * PI {
            azimuth = 0.0;
        }
        Ok(Self {
            azimuth,
            colatitude,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn colatitude(&self) -> f64 {
        self.colatitude
    }

    /// Elevation above the horizontal plane, `π/2 - colatitude`.
    pub fn elevation(&self) -> f64 {
        0.5 * PI - self.colatitude
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.colatitude.sin_cos();
        let (sp, cp) = self.azimuth.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Great-circle angle to `other`, radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        dot.clamp(-1.0, 1.0).acos()
    }
}

/// Uniform direction on the sphere: azimuth uniform on `[0, 2π)` and
/// `cos(colatitude)` uniform on `[-1, 1]`.
pub fn sample_doa<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    let azimuth = rng.random::<f64>() * 2.0 * PI;
    let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
    Direction::new(azimuth, z.clamp(-1.0, 1.0).acos()).expect("angles are in range")
}

/// Associated Legendre values `P_n^m(x)` for `0 <= m <= n <= order`, without the
/// Condon-Shortley phase. Indexed as `p[n][m]`.
fn legendre_table(order: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    let sx = (1.0 - x * x).max(0.0).sqrt();
    p[0][0] = 1.0;
    for m in 1..=order {
        p[m][m] = (2 * m - 1) as f64 * sx * p[m - 1][m - 1];
    }
    for m in 0..order {
        p[m + 1][m] = (2 * m + 1) as f64 * x * p[m][m];
    }
    for m in 0..=order {
        for n in (m + 2)..=order {
            p[n][m] = ((2 * n - 1) as f64 * x * p[n - 1][m] - (n + m - 1) as f64 * p[n - 2][m])
                / (n - m) as f64;
        }
    }
    p
}

fn n3d_norm(n: usize, m: usize) -> f64 {
    // (n-m)!/(n+m)! as a running product keeps it exact enough for small n.
    let mut ratio = 1.0;
    for k in (n - m + 1)..=(n + m) {
        ratio /= k as f64;
    }
    let delta = if m == 0 { 1.0 } else { 2.0 };
    ((2 * n + 1) as f64 * delta * ratio).sqrt()
}

/// Real N3D spherical harmonic of degree `n` and index `m` at `dir`.
pub fn real_sh(n: i64, m: i64, dir: &Direction) -> Result<f64> {
    if n < 0 || m.abs() > n {
        return Err(Error::Domain {
            degree: n,
            index: m,
        });
    }
    let n = n as usize;
    let am = m.unsigned_abs() as usize;
    let p = legendre_table(n, dir.colatitude.cos());
    Ok(sh_from_table(&p, n, m, am, dir.azimuth))
}

fn sh_from_table(p: &[Vec<f64>], n: usize, m: i64, am: usize, azimuth: f64) -> f64 {
    let base = n3d_norm(n, am) * p[n][am];
    match m.signum() {
        0 => base,
        1 => base * (am as f64 * azimuth).cos(),
        _ => base * (am as f64 * azimuth).sin(),
    }
}

/// All `(order+1)²` real SH values at one direction, ACN order.
pub fn sh_row(order: usize, dir: &Direction) -> Vec<f64> {
    let p = legendre_table(order, dir.colatitude.cos());
    let mut row = Vec::with_capacity(channel_count(order));
    for n in 0..=order {
        for m in -(n as i64)..=(n as i64) {
            row.push(sh_from_table(&p, n, m, m.unsigned_abs() as usize, dir.azimuth));
        }
    }
    row
}

/// Spherical-harmonic matrix: one row per direction, one ACN column per term.
#[derive(Debug, Clone, PartialEq)]
pub struct ShMatrix {
    order: usize,
    values: Array2<f64>,
}

impl ShMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, q: usize) -> ArrayView1<'_, f64> {
        self.values.row(q)
    }
}

pub fn sh_matrix(order: usize, directions: &[Direction]) -> Result<ShMatrix> {
    if directions.is_empty() {
        return Err(invalid("sh_matrix needs at least one direction"));
    }
    let k = channel_count(order);
    let mut values = Array2::zeros((directions.len(), k));
    for (q, dir) in directions.iter().enumerate() {
        for (c, v) in sh_row(order, dir).into_iter().enumerate() {
            values[[q, c]] = v;
        }
    }
    Ok(ShMatrix { order, values })
}

/// A plane-wave source: direction, mono waveform and a gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveSource {
    pub direction: Direction,
    pub waveform: Vec<f64>,
    pub gain: f64,
}

/// Free-field scene of `Q >= 1` plane waves with equal-length waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveScene {
    sources: Vec<PlaneWaveSource>,
    sample_rate: u32,
}

impl PlaneWaveScene {
    pub fn new(sources: Vec<PlaneWaveSource>, sample_rate: u32) -> Result<Self> {
        if sources.is_empty() {
            return Err(invalid("a scene needs at least one source"));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        let len = sources[0].waveform.len();
        if sources.iter().any(|s| s.waveform.len() != len) {
            return Err(invalid("all source waveforms must share one length"));
        }
        Ok(Self {
            sources,
            sample_rate,
        })
    }

    pub fn sources(&self) -> &[PlaneWaveSource] {
        &self.sources
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.sources[0].waveform.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same scene with every azimuth advanced by `delta` radians.
    pub fn rotated_azimuth(&self, delta: f64) -> Result<Self> {
        let sources = self
            .sources
            .iter()
            .map(|s| {
                Ok(PlaneWaveSource {
                    direction: Direction::new(
                        s.direction.azimuth + delta,
                        s.direction.colatitude,
                    )?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sources, self.sample_rate)
    }
}

/// Time-domain Ambisonics signal, ACN channel order, N3D normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbisonicsSignal {
    order: usize,
    channels: Array2<f64>,
    sample_rate: u32,
}

impl AmbisonicsSignal {
    pub fn new(order: usize, channels: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if channels.nrows() != channel_count(order) {
            return Err(invalid(format!(
                "order {order} needs {} channels, got {}",
                channel_count(order),
                channels.nrows()
            )));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if channels.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Ambisonics samples must be finite"));
        }
        Ok(Self {
            order,
            channels,
            sample_rate,
        })
    }

    /// Infers the order from the channel count.
    pub fn from_channels(channels: Array2<f64>, sample_rate: u32) -> Result<Self> {
        let order = order_from_channels(channels.nrows()).ok_or_else(|| {
            invalid(format!(
                "{} channels is not a valid Ambisonics channel count",
                channels.nrows()
            ))
        })?;
        Self::new(order, channels, sample_rate)
    }

    pub fn zeros(order: usize, len: usize, sample_rate: u32) -> Self {
        Self {
            order,
            channels: Array2::zeros((channel_count(order), len)),
            sample_rate,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn channels(&self) -> &Array2<f64> {
        &self.channels
    }

    pub fn into_channels(self) -> Array2<f64> {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.nrows()
    }

    /// Samples per channel (τ_max).
    pub fn len(&self) -> usize {
        self.channels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            channels: &self.channels * c,
            ..self.clone()
        }
    }
}

/// Plane-wave encoding `a(τ) = Yᵀ s(τ)`. Real SH turn the Hermitian
/// transpose into a plain transpose, and free-field plane-wave amplitudes are
/// frequency-flat, so encoding is a per-sample matrix product.
pub fn encode_scene(scene: &PlaneWaveScene, order: usize) -> Result<AmbisonicsSignal> {
    let len = scene.len();
    if scene.sources.iter().any(|s| s.waveform.len() != len) {
        return Err(invalid("all source waveforms must share one length"));
    }
    let k = channel_count(order);
    let mut channels = Array2::zeros((k, len));
    for src in &scene.sources {
        let y = sh_row(order, &src.direction);
        for (c, &yc) in y.iter().enumerate() {
            let coef = yc * src.gain;
            let mut row = channels.row_mut(c);
            for (out, &x) in row.iter_mut().zip(&src.waveform) {
                *out += coef * x;
            }
        }
    }
    AmbisonicsSignal::new(order, channels, scene.sample_rate)
}

/// Keep the first `(target_order+1)²` channels, i.e. `F·a` with `F = [I | 0]`.
pub fn truncate(sig: &AmbisonicsSignal, target_order: usize) -> Result<AmbisonicsSignal> {
    if target_order > sig.order {
        return Err(invalid(format!(
            "cannot truncate order {} to higher order {target_order}",
            sig.order
        )));
    }
    let k = channel_count(target_order);
    Ok(AmbisonicsSignal {
        order: target_order,
        channels: sig.channels.slice(s![..k, ..]).to_owned(),
        sample_rate: sig.sample_rate,
    })
}

/// Energy on an azimuth × colatitude grid.
///
/// `values[[row, col]]` holds colatitude `colatitudes[row]` (ascending from the
/// north pole, so the first row is elevation +90°) and azimuth
/// `azimuths[col]` (ascending from 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub azimuths: Vec<f64>,
    pub colatitudes: Vec<f64>,
    pub values: Array2<f64>,
}

impl EnergyMap {
    /// Grid cell `(row, col)` holding the maximum value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }

    pub fn direction_at(&self, row: usize, col: usize) -> Direction {
        Direction::new(self.azimuths[col], self.colatitudes[row]).expect("grid angles are valid")
    }
}

fn steps_in(range: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid("grid step must be positive"));
    }
    let n = (range / step).round();
    if n < 1.0 || ((n * step) - range).abs() > 1e-9 * range {
        return Err(invalid(format!("step {step} does not divide {range}")));
    }
    Ok(n as usize)
}

/// Directional energy `E(Ω) = Σ_τ (Y(Ω)ᵀ a(τ))²`, normalized to a maximum of 1
/// unless the signal is silent. Uses a plain SH steering beam.
pub fn directional_energy_map(
    sig: &AmbisonicsSignal,
    az_step: f64,
    col_step: f64,
) -> Result<EnergyMap> {
    let n_az = steps_in(2.0 * PI, az_step)?;
    let n_col = steps_in(PI, col_step)? + 1;
    let azimuths: Vec<f64> = (0..n_az).map(|i| i as f64 * az_step).collect();
    let colatitudes: Vec<f64> = (0..n_col)
        .map(|j| (j as f64 * col_step).min(PI))
        .collect();

    // Spatial covariance C = A Aᵀ, so E(Ω) = yᵀ C y.
    let a = &sig.channels;
    let cov = a.dot(&a.t());
    let k = sig.num_channels();
    let mut values = Array2::zeros((n_col, n_az));
    for (r, &col) in colatitudes.iter().enumerate() {
        for (c, &az) in azimuths.iter().enumerate() {
            let y = sh_row(sig.order, &Direction::new(az, col)?);
            let mut e = 0.0;
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += cov[[i, j]] * y[j];
                }
                e += y[i] * acc;
            }
            values[[r, c]] = e.max(0.0);
        }
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.mapv_inplace(|v| v / max);
    }
    Ok(EnergyMap {
        azimuths,
        colatitudes,
        values,
    })
}
