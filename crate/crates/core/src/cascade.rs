//! Training-pair construction, per-block score-matching training, and the
//! cascaded upscaler (order 1 → 2 → 3).

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use ndarray::{s, Array3, ArrayD, Axis, Ix3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ambisonics::{channel_count, truncate, AmbisonicsSignal};
use crate::error::{config, invalid, Error, Result};
use crate::model::{init_params, per_item_sum_sq, ModelMeta, ScoreModel, ScoreModelConfig};
use crate::sde::{pc_sample, prior_sample, standard_normal, PcSamplerConfig};
use crate::tf::{
    amp_compress, amp_expand, complex_merge, istft_ambisonics, real_stack, stft, TfSignal,
};

/// One training example for block `N`: compressed, stacked order-`N` channels
/// and the `2N+3` channels that complete order `N+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub condition: Array3<f64>,
    pub target: Array3<f64>,
}

/// `R(H(STFT(sig)))` together with the raw spectrogram.
pub fn condition_features(sig: &AmbisonicsSignal, meta: &ModelMeta) -> Result<(TfSignal, Array3<f64>)> {
    let tf = stft(sig, &meta.stft)?;
    let y = real_stack(&amp_compress(&tf.data, &meta.amplitude));
    Ok((tf, y))
}

pub fn make_pairs(clips: &[AmbisonicsSignal], block_order: usize, meta: &ModelMeta) -> Result<Vec<TrainingPair>> {
    meta.amplitude.validate()?;
    let lo = channel_count(block_order);
    let hi = channel_count(block_order + 1);
    clips
        .iter()
        .map(|clip| {
            if clip.order() < block_order + 1 {
                return Err(invalid(format!(
                    "block {block_order} needs clips of order >= {}, got {}",
                    block_order + 1,
                    clip.order()
                )));
            }
            let tf = stft(&truncate(clip, block_order + 1)?, &meta.stft)?;
            let compressed = amp_compress(&tf.data, &meta.amplitude);
            Ok(TrainingPair {
                condition: real_stack(&compressed.slice(s![..lo, .., ..]).to_owned()),
                target: real_stack(&compressed.slice(s![lo..hi, .., ..]).to_owned()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub block_order: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Validation loss is computed every this many steps (0 disables it).
    pub validation_every: usize,
    /// Random crop size in frequency bins (`None` uses the full height).
    pub crop_bins: Option<usize>,
    /// Random crop size in frames (`None` uses the full width).
    pub crop_frames: Option<usize>,
}

impl TrainConfig {
    pub fn for_block(block_order: usize) -> Self {
        Self {
            block_order,
            batch_size: 8,
            learning_rate: 1e-4,
            total_steps: 5_000,
            seed: 0,
            validation_every: 250,
            crop_bins: Some(64),
            crop_frames: Some(64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(config("batch_size and total_steps must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config("learning rate must be finite and non-negative"));
        }
        if self.crop_bins == Some(0) || self.crop_frames == Some(0) {
            return Err(config("crop sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss, one entry per optimizer step (continues across resumes).
    pub loss_history: Vec<f64>,
    /// `(step, loss)` on the validation set.
    pub validation: Vec<(usize, f64)>,
}

/// A minibatch of crops, stacked as `(B, C, F, T)`.
struct Batch {
    x0: Tensor,
    y: Tensor,
    t: Tensor,
    z: Tensor,
    sigma: Tensor,
}

fn stack(items: Vec<Array3<f64>>, dtype: DType) -> Result<Tensor> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    let arr = ndarray::stack(Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
    let shape = arr.shape().to_vec();
    let data: Vec<f64> = arr.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn draw_batch<R: Rng>(
    pairs: &[TrainingPair],
    indices: &[usize],
    crop: (Option<usize>, Option<usize>),
    meta: &ModelMeta,
    dtype: DType,
    rng: &mut R,
) -> Result<Batch> {
    let mut xs = Vec::with_capacity(indices.len());
    let mut ys = Vec::with_capacity(indices.len());
    let mut zs = Vec::with_capacity(indices.len());
    let mut ts = Vec::with_capacity(indices.len());
    let mut sigmas = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &pairs[i];
        let (_, f, t) = p.target.dim();
        let cf = crop.0.unwrap_or(f).min(f);
        let ct = crop.1.unwrap_or(t).min(t);
        let f0 = rng.random_range(0..=f - cf);
        let t0 = rng.random_range(0..=t - ct);
        let x0 = p.target.slice(s![.., f0..f0 + cf, t0..t0 + ct]).to_owned();
        let y = p.condition.slice(s![.., f0..f0 + cf, t0..t0 + ct]).to_owned();
        let time = meta.schedule.sample_time(rng);
        let z = standard_normal(x0.shape(), rng)
            .into_dimensionality::<Ix3>()
            .expect("3-D shape");
        sigmas.push(meta.schedule.sigma(time)?);
        ts.push(time);
        xs.push(x0);
        ys.push(y);
        zs.push(z);
    }
    let b = indices.len();
    Ok(Batch {
        x0: stack(xs, dtype)?,
        y: stack(ys, dtype)?,
        z: stack(zs, dtype)?,
        t: Tensor::from_vec(ts, b, &Device::Cpu)?.to_dtype(dtype)?,
        sigma: Tensor::from_vec(sigmas, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?,
    })
}

/// Score-matching loss on a batch: `(1/B) Σ_i ‖σ_i (s_i + z_i/σ_i)‖²`.
fn batch_loss(model: &ScoreModel, batch: &Batch) -> Result<Tensor> {
    let x_t = batch.x0.add(&batch.z.broadcast_mul(&batch.sigma)?)?;
    let s = model.forward(&x_t, &batch.y, &batch.t)?;
    let residual = s
        .add(&batch.z.broadcast_div(&batch.sigma)?)?
        .broadcast_mul(&batch.sigma)?;
    Ok(per_item_sum_sq(&residual)?.mean_all()?)
}

/// Differentiable score-matching loss on the given pairs with draws from
/// `rng`, full-size (no cropping). Used for validation and gradient checks.
pub fn dsm_loss_tensor<R: Rng>(
    model: &ScoreModel,
    pairs: &[TrainingPair],
    rng: &mut R,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(invalid("dsm loss needs a non-empty batch"));
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let batch = draw_batch(pairs, &idx, (None, None), model.meta(), model.dtype(), rng)?;
    batch_loss(model, &batch)
}

fn validation_loss(model: &ScoreModel, pairs: &[TrainingPair], seed: u64, crop: (Option<usize>, Option<usize>)) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76A1_1DA7E);
    let mut total = 0.0;
    for (i, _) in pairs.iter().enumerate() {
        let batch = draw_batch(pairs, &[i], crop, model.meta(), model.dtype(), &mut rng)?;
        total += batch_loss(model, &batch)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / pairs.len() as f64)
}

fn check_pairs(pairs: &[TrainingPair], model_cfg: &ScoreModelConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(invalid("training needs at least one pair"));
    }
    for p in pairs {
        if p.condition.dim().0 != model_cfg.cond_channels() || p.target.dim().0 != model_cfg.out_channels() {
            return Err(invalid(format!(
                "pair channels ({}, {}) do not match block {} ({}, {})",
                p.condition.dim().0,
                p.target.dim().0,
                model_cfg.block_order,
                model_cfg.cond_channels(),
                model_cfg.out_channels()
            )));
        }
        if p.condition.dim().1 != p.target.dim().1 || p.condition.dim().2 != p.target.dim().2 {
            return Err(invalid("condition and target differ in TF shape"));
        }
    }
    Ok(())
}

/// Train a fresh block from seeded initial parameters.
pub fn train_block(
    pairs: &[TrainingPair],
    validation: &[TrainingPair],
    cfg: &TrainConfig,
    model_cfg: &ScoreModelConfig,
    meta: &ModelMeta,
) -> Result<(ScoreModel, TrainReport)> {
    cfg.validate()?;
    if cfg.block_order != model_cfg.block_order {
        return Err(config("train config and model config disagree on block order"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_params(model_cfg, meta, &mut rng)?;
    continue_training(model, TrainReport::default(), pairs, validation, cfg)
}

/// Continue training `model`, appending to `report`.
pub fn continue_training(
    model: ScoreModel,
    mut report: TrainReport,
    pairs: &[TrainingPair],
    validation: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainReport)> {
    cfg.validate()?;
    check_pairs(pairs, model.config())?;
    if !validation.is_empty() {
        check_pairs(validation, model.config())?;
    }
    let offset = report.loss_history.len();
    // A resumed run draws from a different stream than the run it continues.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9 * (offset as u64 + 1)));
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut opt = AdamW::new(model.params().vars(), params)?;
    let crop = (cfg.crop_bins, cfg.crop_frames);
    for step in 0..cfg.total_steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..pairs.len()))
            .collect();
        let batch = draw_batch(pairs, &indices, crop, model.meta(), model.dtype(), &mut rng)?;
        let loss = batch_loss(&model, &batch)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let global = offset + step;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: global,
                loss: value,
            });
        }
        opt.backward_step(&loss)?;
        report.loss_history.push(value);
        if cfg.validation_every > 0 && (step + 1) % cfg.validation_every == 0 {
            let val_set = if validation.is_empty() { pairs } else { validation };
            let v = validation_loss(&model, val_set, cfg.seed, crop)?;
            info!("block {} step {}: train {value:.4}, validation {v:.4}", cfg.block_order, global + 1);
            report.validation.push((global + 1, v));
        }
    }
    Ok((model, report))
}

/// One cascade stage with an arbitrary conditioned score `score(x, y, t)`:
/// STFT → H → R → `x_T ~ N(0, σ_max² I)` → PC sampling → C → H⁻¹ →
/// concatenate with the input spectrogram → ISTFT.
pub fn upscale_block_with<S, R>(
    a_n: &AmbisonicsSignal,
    meta: &ModelMeta,
    mut score: S,
    sampler: &PcSamplerConfig,
    rng: &mut R,
) -> Result<AmbisonicsSignal>
where
    S: FnMut(&ArrayD<f64>, &Array3<f64>, f64) -> Result<ArrayD<f64>>,
    R: Rng,
{
    let n = a_n.order();
    let (tf, y) = condition_features(a_n, meta)?;
    let (_, bins, frames) = tf.data.dim();
    let added = 2 * n + 3;
    let x_t = prior_sample(&[2 * added, bins, frames], &meta.schedule, rng);
    let mut conditioned = |x: &ArrayD<f64>, t: f64| score(x, &y, t);
    let x0 = pc_sample(x_t, &mut conditioned, sampler, &meta.schedule, rng)?
        .into_dimensionality::<Ix3>()
        .map_err(|e| invalid(e.to_string()))?;
    let predicted = amp_expand(&complex_merge(&x0)?, &meta.amplitude);
    let mut data = Array3::<Complex64>::zeros((channel_count(n + 1), bins, frames));
    data.slice_mut(s![..channel_count(n), .., ..]).assign(&tf.data);
    data.slice_mut(s![channel_count(n).., .., ..]).assign(&predicted);
    let out = TfSignal { data, ..tf };
    istft_ambisonics(&out, a_n.sample_rate())
}

/// One learned cascade stage: order `N` in, order `N+1` out.
pub fn upscale_block<R: Rng>(
    a_n: &AmbisonicsSignal,
    model: &ScoreModel,
    sampler: &PcSamplerConfig,
    rng: &mut R,
) -> Result<AmbisonicsSignal> {
    if a_n.order() != model.config().block_order {
        return Err(invalid(format!(
            "block {} model cannot upscale an order-{} signal",
            model.config().block_order,
            a_n.order()
        )));
    }
    let score = |x: &ArrayD<f64>, y: &Array3<f64>, t: f64| {
        let x3 = x
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| invalid(e.to_string()))?
            .to_owned();
        Ok(model.score_eval(&x3, y, t)?.into_dyn())
    };
    upscale_block_with(a_n, model.meta(), score, sampler, rng)
}

/// First-order input to third order through the two learned blocks.
pub fn cascade_upscale<R: Rng>(
    foa: &AmbisonicsSignal,
    block1: &ScoreModel,
    block2: &ScoreModel,
    sampler: &PcSamplerConfig,
    rng: &mut R,
) -> Result<AmbisonicsSignal> {
    if foa.order() != 1 {
        return Err(invalid(format!("cascade input must be first order, got order {}", foa.order())));
    }
    let second = upscale_block(foa, block1, sampler, rng)?;
    upscale_block(&second, block2, sampler, rng)
}
