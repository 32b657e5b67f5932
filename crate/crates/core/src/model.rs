//! Conditional score network: a small time-conditioned U-Net over stacked
//! real/imaginary STFT channels.
//!
//! Input is the noisy target `x_t` (`2(2N+3)` channels) concatenated with the
//! conditioning signal `y` (`2(N+1)²` channels). The raw network output is
//! divided by `σ(t)`, so it predicts a noise-like quantity and the returned
//! tensor is the score.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{GroupNorm, Linear, Module};
use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ambisonics::channel_count;
use crate::error::{config, invalid, Error, Result};
use crate::sde::NoiseSchedule;
use crate::tf::{AmplitudeTransformParams, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelConfig {
    /// Order `N` of the conditioning signal; the block predicts order `N+1`.
    pub block_order: usize,
    pub base_width: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub res_units_per_level: usize,
    pub time_embed_dim: usize,
    pub precision: Precision,
}

impl ScoreModelConfig {
    pub fn for_block(block_order: usize) -> Self {
        Self {
            block_order,
            base_width: 32,
            depth: 3,
            res_units_per_level: 2,
            time_embed_dim: 64,
            precision: Precision::F32,
        }
    }

    /// Real channels of the conditioning input, `2(N+1)²`.
    pub fn cond_channels(&self) -> usize {
        2 * channel_count(self.block_order)
    }

    /// Real channels of the predicted target, `2(2N+3)`.
    pub fn out_channels(&self) -> usize {
        2 * (2 * self.block_order + 3)
    }

    pub fn in_channels(&self) -> usize {
        self.cond_channels() + self.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.block_order) {
            return Err(config(format!(
                "block order {} not supported (1 or 2)",
                self.block_order
            )));
        }
        if self.base_width < 4 || self.base_width % 4 != 0 {
            return Err(config("base_width must be a positive multiple of 4"));
        }
        if self.depth == 0 || self.depth > 5 {
            return Err(config("depth must be in 1..=5"));
        }
        if self.res_units_per_level == 0 {
            return Err(config("at least one residual unit per level is required"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(config("time_embed_dim must be even and at least 2"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes are padded to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Transform and schedule settings the model was trained with; stored in
/// checkpoints so inference uses the same front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub stft: StftConfig,
    pub amplitude: AmplitudeTransformParams,
    pub schedule: NoiseSchedule,
}

/// Named trainable tensors, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    fn insert(&mut self, name: String, var: Var) -> Tensor {
        let t = var.as_tensor().clone();
        self.names.push(name.clone());
        self.vars.insert(name, var);
        t
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.names.iter().map(|n| self.vars[n].clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Deterministic parameter initializer.
struct Init<'a, R: Rng> {
    rng: &'a mut R,
    store: ParamStore,
    dtype: DType,
}

impl<R: Rng> Init<'_, R> {
    fn tensor(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(self.store.insert(name, Var::from_tensor(&t)?))
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.tensor(name, shape, values)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.tensor(name, shape, vec![v; n])
    }
}

fn groups_for(channels: usize) -> usize {
    (channels / 4).clamp(1, 8)
}

#[derive(Debug, Clone)]
struct Conv {
    /// `(out, in * k * k)`
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv {
    fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        zero: bool,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let std = if zero { 0.0 } else { (2.0 / fan_in).sqrt() };
        let weight = init.normal(format!("{name}.weight"), &[cout, cin * kernel * kernel], std)?;
        let bias = init.constant(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let cout = self.weight.dim(0)?;
        let cols = if self.kernel == 1 {
            x.reshape((b, c, h * w))?
        } else {
            // im2col with zero padding; faster than the native conv backward on CPU.
            let p = self.kernel / 2;
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(self.kernel * self.kernel);
            for dy in 0..self.kernel {
                for dx in 0..self.kernel {
                    taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            Tensor::stack(&taps, 2)?.reshape((b, c * self.kernel * self.kernel, h * w))?
        };
        let y = self.weight.broadcast_matmul(&cols)?;
        y.broadcast_add(&self.bias.reshape((1, cout, 1))?)?
            .reshape((b, cout, h, w))
    }
}

fn group_norm<R: Rng>(init: &mut Init<R>, name: &str, channels: usize) -> Result<GroupNorm> {
    let weight = init.constant(format!("{name}.weight"), &[channels], 1.0)?;
    let bias = init.constant(format!("{name}.bias"), &[channels], 0.0)?;
    Ok(GroupNorm::new(
        weight,
        bias,
        channels,
        groups_for(channels),
        1e-5,
    )?)
}

fn linear<R: Rng>(init: &mut Init<R>, name: &str, din: usize, dout: usize) -> Result<Linear> {
    let std = (1.0 / din as f64).sqrt();
    let weight = init.normal(format!("{name}.weight"), &[dout, din], std)?;
    let bias = init.constant(format!("{name}.bias"), &[dout], 0.0)?;
    Ok(Linear::new(weight, Some(bias)))
}

#[derive(Debug, Clone)]
struct ResUnit {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResUnit {
    fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(init, &format!("{name}.norm1"), cin)?,
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, false)?,
            time: linear(init, &format!("{name}.time"), temb, cout)?,
            norm2: group_norm(init, &format!("{name}.norm2"), cout)?,
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, false)?,
            skip: if cin != cout {
                Some(Conv::new(init, &format!("{name}.skip"), cin, cout, 1, false)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
struct UNet {
    temb_dim: usize,
    temb1: Linear,
    temb2: Linear,
    input: Conv,
    down: Vec<Vec<ResUnit>>,
    up: Vec<Vec<ResUnit>>,
    out_norm: GroupNorm,
    output: Conv,
}

impl UNet {
    fn new<R: Rng>(cfg: &ScoreModelConfig, init: &mut Init<R>) -> Result<Self> {
        let te = cfg.time_embed_dim;
        let temb1 = linear(init, "temb.0", te, 2 * te)?;
        let temb2 = linear(init, "temb.1", 2 * te, te)?;
        let input = Conv::new(init, "input", cfg.in_channels(), cfg.width(0), 3, false)?;
        let mut down = Vec::new();
        for level in 0..cfg.depth {
            let mut units = Vec::new();
            let mut cin = if level == 0 { cfg.width(0) } else { cfg.width(level - 1) };
            for u in 0..cfg.res_units_per_level {
                units.push(ResUnit::new(
                    init,
                    &format!("down.{level}.{u}"),
                    cin,
                    cfg.width(level),
                    te,
                )?);
                cin = cfg.width(level);
            }
            down.push(units);
        }
        let mut up = Vec::new();
        for level in (0..cfg.depth.saturating_sub(1)).rev() {
            let mut units = Vec::new();
            let mut cin = cfg.width(level + 1) + cfg.width(level);
            for u in 0..cfg.res_units_per_level {
                units.push(ResUnit::new(
                    init,
                    &format!("up.{level}.{u}"),
                    cin,
                    cfg.width(level),
                    te,
                )?);
                cin = cfg.width(level);
            }
            up.push(units);
        }
        let out_norm = group_norm(init, "out.norm", cfg.width(0))?;
        let output = Conv::new(init, "out.conv", cfg.width(0), cfg.out_channels(), 3, true)?;
        Ok(Self {
            temb_dim: te,
            temb1,
            temb2,
            input,
            down,
            up,
            out_norm,
            output,
        })
    }

    fn embed_time(&self, t: &Tensor) -> candle_core::Result<Tensor> {
        // Sinusoidal features of 1000·t.
        let half = self.temb_dim / 2;
        let dtype = t.dtype();
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp() * 1000.0)
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(dtype)?;
        let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
        let emb = Tensor::cat(&[args.sin()?, args.cos()?], 1)?;
        self.temb2.forward(&self.temb1.forward(&emb)?.silu()?)
    }

    fn forward(&self, x: &Tensor, t: &Tensor) -> candle_core::Result<Tensor> {
        let emb = self.embed_time(t)?;
        let mut h = self.input.forward(x)?;
        let mut skips = Vec::new();
        for (level, units) in self.down.iter().enumerate() {
            if level > 0 {
                h = h.avg_pool2d(2)?;
            }
            for u in units {
                h = u.forward(&h, &emb)?;
            }
            skips.push(h.clone());
        }
        skips.pop();
        for units in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = skip.dims4()?;
            h = Tensor::cat(&[h.upsample_nearest2d(sh, sw)?, skip], 1)?;
            for u in units {
                h = u.forward(&h, &emb)?;
            }
        }
        self.output.forward(&self.out_norm.forward(&h)?.silu()?)
    }
}

/// Trainable parameters `θ_N` of one cascade block with their configuration.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    config: ScoreModelConfig,
    meta: ModelMeta,
    params: ParamStore,
    net: UNet,
}

/// Parameters plus everything needed to interpret them.
pub type ScoreModelParams = ScoreModel;

pub fn init_params<R: Rng>(
    cfg: &ScoreModelConfig,
    meta: &ModelMeta,
    rng: &mut R,
) -> Result<ScoreModel> {
    cfg.validate()?;
    meta.schedule.validate()?;
    let mut init = Init {
        rng,
        store: ParamStore::default(),
        dtype: cfg.precision.dtype(),
    };
    let net = UNet::new(cfg, &mut init)?;
    Ok(ScoreModel {
        config: *cfg,
        meta: *meta,
        params: init.store,
        net,
    })
}

impl ScoreModel {
    pub fn config(&self) -> &ScoreModelConfig {
        &self.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Batched score: `x_t` is `(B, out, F, T)`, `y` is `(B, cond, F, T)`, `t` is `(B,)`.
    /// `F` and `T` are zero-padded to the model's size multiple and cropped back.
    pub fn forward(&self, x_t: &Tensor, y: &Tensor, t: &Tensor) -> Result<Tensor> {
        let (b, cx, f, tt) = x_t.dims4()?;
        let (by, cy, fy, ty) = y.dims4()?;
        if cx != self.config.out_channels()
            || cy != self.config.cond_channels()
            || (b, f, tt) != (by, fy, ty)
            || t.dims() != [b]
        {
            return Err(invalid(format!(
                "score model for block {} expects x ({}, F, T), y ({}, F, T), t (B): got {:?}, {:?}, {:?}",
                self.config.block_order,
                self.config.out_channels(),
                self.config.cond_channels(),
                x_t.dims(),
                y.dims(),
                t.dims()
            )));
        }
        let m = self.config.size_multiple();
        let pf = (m - f % m) % m;
        let pt = (m - tt % m) % m;
        let input = Tensor::cat(&[x_t, y], 1)?
            .pad_with_zeros(2, 0, pf)?
            .pad_with_zeros(3, 0, pt)?;
        let raw = self.net.forward(&input, t)?.narrow(2, 0, f)?.narrow(3, 0, tt)?;
        let sched = &self.meta.schedule;
        let ln_ratio = (sched.sigma_max / sched.sigma_min).ln();
        let sigma = ((t * ln_ratio)?.exp()? * sched.sigma_min)?;
        let inv = sigma.recip()?.reshape((b, 1, 1, 1))?;
        Ok(raw.broadcast_mul(&inv)?)
    }

    /// Single-item score on `ndarray` tensors.
    pub fn score_eval(&self, x_t: &Array3<f64>, y: &Array3<f64>, t: f64) -> Result<Array3<f64>> {
        if !(self.meta.schedule.t_eps..=1.0).contains(&t) {
            return Err(invalid(format!("time {t} outside [t_eps, 1]")));
        }
        let dtype = self.dtype();
        let xt = array_to_tensor(x_t, dtype)?.unsqueeze(0)?;
        let yt = array_to_tensor(y, dtype)?.unsqueeze(0)?;
        let tt = Tensor::from_vec(vec![t], 1, &Device::Cpu)?.to_dtype(dtype)?;
        let out = self.forward(&xt, &yt, &tt)?.squeeze(0)?;
        tensor_to_array3(&out)
    }

    /// Score function closure over a fixed conditioning input, for the sampler.
    pub fn conditioned<'a>(
        &'a self,
        y: &'a Array3<f64>,
    ) -> impl FnMut(&ArrayD<f64>, f64) -> Result<ArrayD<f64>> + 'a {
        move |x, t| {
            let x3 = x
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| invalid(format!("sampler state must be 3-D: {e}")))?
                .to_owned();
            Ok(self.score_eval(&x3, y, t)?.into_dyn())
        }
    }
}

pub(crate) fn array_to_tensor(a: &Array3<f64>, dtype: DType) -> Result<Tensor> {
    let (c, f, t) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (c, f, t), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let (c, f, n) = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec((c, f, n), data).map_err(|e| invalid(e.to_string()))?)
}

const CHECKPOINT_FORMAT: &str = "ambi-upscale-score-model";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "ambi-upscale";

/// Everything a checkpoint stores besides tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ScoreModelConfig,
    pub meta: ModelMeta,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(invalid(format!("unsupported parameter dtype {other:?}"))),
    })
}

/// Serialize to a single safetensors container. The metadata holds one key,
/// `ambi-upscale`, whose JSON value carries `format`, `format_version` and the
/// [`CheckpointHeader`] fields. A single key keeps the bytes deterministic.
pub fn checkpoint_bytes(model: &ScoreModel, loss_history: &[f64]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config,
        meta: model.meta,
        loss_history: loss_history.to_vec(),
    };
    let mut doc = serde_json::to_value(&header)?;
    doc["format"] = CHECKPOINT_FORMAT.into();
    doc["format_version"] = CHECKPOINT_VERSION.into();
    let mut metadata = std::collections::HashMap::new();
    metadata.insert(METADATA_KEY.to_string(), serde_json::to_string(&doc)?);
    let dtype = match model.dtype() {
        DType::F64 => safetensors::Dtype::F64,
        _ => safetensors::Dtype::F32,
    };
    let mut buffers = Vec::new();
    for name in model.params.names() {
        let var = &model.params.vars[name];
        buffers.push((name.clone(), var.dims().to_vec(), tensor_bytes(var.as_tensor())?));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| invalid(format!("tensor view for {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, Some(metadata))
        .map_err(|e| invalid(format!("checkpoint serialization failed: {e}")))
}

pub fn save_checkpoint(model: &ScoreModel, loss_history: &[f64], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint_bytes(model, loss_history)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ScoreModel, Vec<f64>)> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    let (_, st_meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let doc: serde_json::Value = st_meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| corrupt("not a score-model checkpoint".into()))
        .and_then(|text| serde_json::from_str(text).map_err(|e| corrupt(format!("bad header: {e}"))))?;
    if doc["format"].as_str() != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("not a score-model checkpoint".into()));
    }
    match doc["format_version"].as_u64() {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => {
            return Err(Error::CheckpointVersion {
                found: v.to_string(),
                expected: CHECKPOINT_VERSION,
            })
        }
        None => return Err(corrupt("missing format_version".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(doc).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let tensors = safetensors::SafeTensors::deserialize(bytes)
        .map_err(|e| corrupt(format!("unreadable tensors: {e}")))?;

    // Rebuild the architecture, then overwrite every parameter.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = init_params(&header.model, &header.meta, &mut rng)?;
    let dtype = model.dtype();
    for name in model.params.names() {
        let view = tensors
            .tensor(name)
            .map_err(|_| corrupt(format!("missing parameter {name}")))?;
        let var = &model.params.vars[name];
        if view.shape() != var.dims() {
            return Err(corrupt(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                view.shape(),
                var.dims()
            )));
        }
        let t = match view.dtype() {
            safetensors::Dtype::F32 => Tensor::from_raw_buffer(
                view.data(),
                DType::F32,
                view.shape(),
                &Device::Cpu,
            )?,
            safetensors::Dtype::F64 => Tensor::from_raw_buffer(
                view.data(),
                DType::F64,
                view.shape(),
                &Device::Cpu,
            )?,
            other => return Err(corrupt(format!("unsupported dtype {other:?} for {name}"))),
        };
        var.set(&t.to_dtype(dtype)?)?;
    }
    if tensors.len() != model.params.names().len() {
        return Err(corrupt("unexpected extra parameters".into()));
    }
    Ok((model, header.loss_history))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScoreModel, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Load a checkpoint that must belong to cascade block `block_order`.
pub fn load_block_checkpoint(path: &Path, block_order: usize) -> Result<(ScoreModel, Vec<f64>)> {
    let (model, history) = load_checkpoint(path)?;
    if model.config.block_order != block_order {
        return Err(config(format!(
            "checkpoint {} is for block {}, expected block {block_order}",
            path.display(),
            model.config.block_order
        )));
    }
    Ok((model, history))
}


/// Mean over the trailing dimensions; used by the training loss.
pub(crate) fn per_item_sum_sq(t: &Tensor) -> candle_core::Result<Tensor> {
    t.sqr()?.flatten_from(1)?.sum(D::Minus1)
}
