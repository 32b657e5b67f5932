//! STFT/ISTFT, the magnitude-compression transform applied before the score
//! network, and the real/complex channel stacking maps.

use std::sync::Arc;

use ndarray::{s, Array, Array2, Array3, Axis, Dimension};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::ambisonics::AmbisonicsSignal;
use crate::error::{config, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Square root of the periodic Hann window, applied at analysis and at
    /// synthesis.
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 512,
            hop: 128,
            fft_size: 512,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_length || self.window_length > self.fft_size {
            return Err(config(format!(
                "need 0 < hop ({}) <= window_length ({}) <= fft_size ({})",
                self.hop, self.window_length, self.fft_size
            )));
        }
        // Overlap-add needs every interior sample covered by a non-zero window value.
        if self.window_length < 2 * self.hop {
            return Err(config("sqrt-Hann synthesis needs at least 50% overlap"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples: one frame per hop plus one,
    /// with half a window of zero padding at the head.
    pub fn frames(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop)
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length;
        match self.window {
            WindowKind::SqrtHann => (0..n)
                .map(|i| {
                    let h = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                    h.sqrt()
                })
                .collect(),
        }
    }
}

/// Complex spectrogram, shape `channels × bins × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfSignal {
    pub data: Array3<Complex64>,
    pub config: StftConfig,
    pub original_length: usize,
}

impl TfSignal {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

struct Plans {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

fn plans(fft_size: usize) -> Plans {
    let mut planner = RealFftPlanner::<f64>::new();
    Plans {
        forward: planner.plan_fft_forward(fft_size),
        inverse: planner.plan_fft_inverse(fft_size),
    }
}

/// STFT of each row of `channels`. Spectra are scaled by `1/sqrt(fft_size)`.
pub fn stft_channels(channels: &Array2<f64>, cfg: &StftConfig) -> Result<TfSignal> {
    cfg.validate()?;
    let len = channels.ncols();
    if len < cfg.window_length {
        return Err(invalid(format!(
            "signal of {len} samples is shorter than one window ({})",
            cfg.window_length
        )));
    }
    let frames = cfg.frames(len);
    let bins = cfg.bins();
    let pad = cfg.window_length / 2;
    let padded_len = (frames - 1) * cfg.hop + cfg.window_length;
    let window = cfg.window();
    let scale = 1.0 / (cfg.fft_size as f64).sqrt();
    let plan = plans(cfg.fft_size);

    let mut data = Array3::zeros((channels.nrows(), bins, frames));
    let mut buf = vec![0.0; padded_len];
    let mut frame = plan.forward.make_input_vec();
    let mut spec = plan.forward.make_output_vec();
    let mut scratch = plan.forward.make_scratch_vec();
    for (c, row) in channels.outer_iter().enumerate() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (i, &v) in row.iter().enumerate() {
            buf[pad + i] = v;
        }
        for t in 0..frames {
            let start = t * cfg.hop;
            frame.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..cfg.window_length {
                frame[i] = buf[start + i] * window[i];
            }
            plan.forward
                .process_with_scratch(&mut frame, &mut spec, &mut scratch)
                .map_err(|e| invalid(format!("fft failed: {e}")))?;
            for (f, v) in spec.iter().enumerate() {
                data[[c, f, t]] = v * scale;
            }
        }
    }
    Ok(TfSignal {
        data,
        config: *cfg,
        original_length: len,
    })
}

pub fn stft(sig: &AmbisonicsSignal, cfg: &StftConfig) -> Result<TfSignal> {
    stft_channels(sig.channels(), cfg)
}

/// Weighted overlap-add inverse. Divides by the summed analysis×synthesis
/// window envelope, so reconstruction is exact wherever that envelope is
/// non-zero (every retained sample).
pub fn istft(tf: &TfSignal) -> Result<Array2<f64>> {
    let cfg = &tf.config;
    cfg.validate()?;
    let (channels, bins, frames) = tf.data.dim();
    if bins != cfg.bins() {
        return Err(invalid(format!(
            "spectrogram has {bins} bins, config expects {}",
            cfg.bins()
        )));
    }
    if frames != cfg.frames(tf.original_length) {
        return Err(invalid(format!(
            "spectrogram has {frames} frames, original length {} implies {}",
            tf.original_length,
            cfg.frames(tf.original_length)
        )));
    }
    let pad = cfg.window_length / 2;
    let padded_len = (frames - 1) * cfg.hop + cfg.window_length;
    let window = cfg.window();
    let plan = plans(cfg.fft_size);
    // Undo the forward 1/sqrt(n) and realfft's unnormalized inverse.
    let scale = (cfg.fft_size as f64).sqrt() / cfg.fft_size as f64;

    let mut envelope = vec![0.0; padded_len];
    for t in 0..frames {
        for i in 0..cfg.window_length {
            envelope[t * cfg.hop + i] += window[i] * window[i];
        }
    }

    let mut out = Array2::zeros((channels, tf.original_length));
    let mut acc = vec![0.0; padded_len];
    let mut spec = plan.inverse.make_input_vec();
    let mut frame = plan.inverse.make_output_vec();
    let mut scratch = plan.inverse.make_scratch_vec();
    for c in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..frames {
            for f in 0..bins {
                spec[f] = tf.data[[c, f, t]];
            }
            // DC and Nyquist must be real for a real-valued inverse.
            spec[0].im = 0.0;
            if cfg.fft_size % 2 == 0 {
                spec[bins - 1].im = 0.0;
            }
            plan.inverse
                .process_with_scratch(&mut spec, &mut frame, &mut scratch)
                .map_err(|e| invalid(format!("inverse fft failed: {e}")))?;
            let start = t * cfg.hop;
            for i in 0..cfg.window_length {
                acc[start + i] += frame[i] * scale * window[i];
            }
        }
        let mut row = out.row_mut(c);
        for (i, v) in row.iter_mut().enumerate() {
            let e = envelope[pad + i];
            *v = if e > 1e-12 { acc[pad + i] / e } else { 0.0 };
        }
    }
    Ok(out)
}

/// ISTFT into an Ambisonics signal, inferring the order from the channel count.
pub fn istft_ambisonics(tf: &TfSignal, sample_rate: u32) -> Result<AmbisonicsSignal> {
    AmbisonicsSignal::from_channels(istft(tf)?, sample_rate)
}

/// Parameters of the magnitude compression `|x|^α / β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplitudeTransformParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AmplitudeTransformParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.15,
        }
    }
}

impl AmplitudeTransformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(config(format!("beta {} must be positive", self.beta)));
        }
        Ok(())
    }

    pub fn compress(&self, x: Complex64) -> Complex64 {
        let r = x.norm();
        if r == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        x * (r.powf(self.alpha) / self.beta / r)
    }

    /// Algebraic inverse of [`Self::compress`]: `(β|x|)^{1/α} e^{i arg x}`.
    pub fn expand(&self, x: Complex64) -> Complex64 {
        let r = x.norm();
        if r == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        x * ((self.beta * r).powf(1.0 / self.alpha) / r)
    }
}

/// Elementwise magnitude compression; phase is kept and `0 ↦ 0`.
pub fn amp_compress<D: Dimension>(
    x: &Array<Complex64, D>,
    p: &AmplitudeTransformParams,
) -> Array<Complex64, D> {
    x.mapv(|v| p.compress(v))
}

/// Elementwise inverse of [`amp_compress`].
pub fn amp_expand<D: Dimension>(
    x: &Array<Complex64, D>,
    p: &AmplitudeTransformParams,
) -> Array<Complex64, D> {
    x.mapv(|v| p.expand(v))
}

/// `c × f × t` complex to `2c × f × t` real: real parts first, then imaginary.
pub fn real_stack(x: &Array3<Complex64>) -> Array3<f64> {
    let (c, f, t) = x.dim();
    let mut out = Array3::zeros((2 * c, f, t));
    out.slice_mut(s![..c, .., ..]).assign(&x.mapv(|v| v.re));
    out.slice_mut(s![c.., .., ..]).assign(&x.mapv(|v| v.im));
    out
}

/// Inverse of [`real_stack`].
pub fn complex_merge(x: &Array3<f64>) -> Result<Array3<Complex64>> {
    let (c2, f, t) = x.dim();
    if c2 % 2 != 0 {
        return Err(invalid(format!("cannot merge an odd channel count ({c2})")));
    }
    let c = c2 / 2;
    let mut out = Array3::zeros((c, f, t));
    ndarray::Zip::from(&mut out)
        .and(x.slice(s![..c, .., ..]))
        .and(x.slice(s![c.., .., ..]))
        .for_each(|o, &re, &im| *o = Complex64::new(re, im));
    Ok(out)
}
