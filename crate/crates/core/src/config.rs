//! One TOML file configures every command. Missing keys take defaults; every
//! section is validated before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::CsConfig;
use crate::cascade::TrainConfig;
use crate::dataset::SplitSpec;
use crate::error::{config, Result};
use crate::model::{ModelMeta, Precision, ScoreModelConfig};
use crate::sde::{NoiseSchedule, PcSamplerConfig};
use crate::tf::{AmplitudeTransformParams, StftConfig};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "AMBI_UPSCALE_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
    pub res_units_per_level: usize,
    pub time_embed_dim: usize,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ScoreModelConfig::for_block(1);
        Self {
            base_width: c.base_width,
            depth: c.depth,
            res_units_per_level: c.res_units_per_level,
            time_embed_dim: c.time_embed_dim,
            precision: c.precision,
        }
    }
}

impl ModelSection {
    pub fn for_block(&self, block_order: usize) -> ScoreModelConfig {
        ScoreModelConfig {
            block_order,
            base_width: self.base_width,
            depth: self.depth,
            res_units_per_level: self.res_units_per_level,
            time_embed_dim: self.time_embed_dim,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub validation_every: usize,
    pub crop_bins: Option<usize>,
    pub crop_frames: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::for_block(1);
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            total_steps: t.total_steps,
            validation_every: t.validation_every,
            crop_bins: t.crop_bins,
            crop_frames: t.crop_frames,
        }
    }
}

impl TrainingSection {
    /// Block `N` trains with seed `seed + N`.
    pub fn for_block(&self, block_order: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            block_order,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            seed: seed.wrapping_add(block_order as u64),
            validation_every: self.validation_every,
            crop_bins: self.crop_bins,
            crop_frames: self.crop_frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSections<T> {
    pub block1: T,
    pub block2: T,
}

impl<T: Default> Default for BlockSections<T> {
    fn default() -> Self {
        Self {
            block1: T::default(),
            block2: T::default(),
        }
    }
}

impl<T> BlockSections<T> {
    pub fn get(&self, block_order: usize) -> Result<&T> {
        match block_order {
            1 => Ok(&self.block1),
            2 => Ok(&self.block2),
            n => Err(config(format!("block order {n} not supported (1 or 2)"))),
        }
    }

    pub fn get_mut(&mut self, block_order: usize) -> Result<&mut T> {
        match block_order {
            1 => Ok(&mut self.block1),
            2 => Ok(&mut self.block2),
            n => Err(config(format!("block order {n} not supported (1 or 2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_clips: usize,
    pub split: SplitSpec,
    /// Speakers in a generated corpus (`synth-data --synthetic`).
    pub synthetic_speakers: usize,
    /// Length of each generated corpus recording in seconds.
    pub synthetic_seconds: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_clips: 100,
            split: SplitSpec::default(),
            synthetic_speakers: 40,
            synthetic_seconds: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub grid_points: usize,
    pub solver: CsConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            grid_points: 400,
            solver: CsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub azimuth_step_deg: f64,
    pub colatitude_step_deg: f64,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self {
            azimuth_step_deg: 5.0,
            colatitude_step_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for parallel stages.
    pub jobs: usize,
    pub stft: StftConfig,
    pub amplitude: AmplitudeTransformParams,
    pub schedule: NoiseSchedule,
    pub sampler: PcSamplerConfig,
    pub model: BlockSections<ModelSection>,
    pub training: BlockSections<TrainingSection>,
    pub dataset: DatasetSection,
    pub baseline: BaselineSection,
    pub plot: PlotSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            stft: StftConfig::default(),
            amplitude: AmplitudeTransformParams::default(),
            schedule: NoiseSchedule::default(),
            sampler: PcSamplerConfig::default(),
            model: BlockSections::default(),
            training: BlockSections::default(),
            dataset: DatasetSection::default(),
            baseline: BaselineSection::default(),
            plot: PlotSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// `path` if given, else the file named by the environment variable, else
    /// defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(e.to_string()))
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            stft: self.stft,
            amplitude: self.amplitude,
            schedule: self.schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(config("jobs must be at least 1"));
        }
        self.stft.validate()?;
        self.amplitude.validate()?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        for n in [1, 2] {
            self.model.get(n)?.for_block(n).validate()?;
            self.training.get(n)?.for_block(n, self.seed).validate()?;
        }
        self.dataset.split.validate()?;
        if self.dataset.n_clips == 0 {
            return Err(config("dataset.n_clips must be positive"));
        }
        if self.dataset.synthetic_speakers == 0 || !(self.dataset.synthetic_seconds > 0.0) {
            return Err(config("synthetic corpus needs speakers and a positive duration"));
        }
        self.baseline.solver.validate()?;
        if self.baseline.grid_points < 16 {
            return Err(config("baseline.grid_points must be at least 16"));
        }
        for step in [self.plot.azimuth_step_deg, self.plot.colatitude_step_deg] {
            if !(step > 0.0) {
                return Err(config("plot steps must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[schedule]\nsigma_max = 2.0\n[training.block2]\ntotal_steps = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.sigma_max, 2.0);
        assert_eq!(cfg.schedule.sigma_min, NoiseSchedule::default().sigma_min);
        assert_eq!(cfg.training.block2.total_steps, 10);
        assert_eq!(cfg.training.block1, TrainingSection::default());
    }

    #[test]
    fn invalid_sections_are_rejected() {
        assert!(RunConfig::from_toml("[schedule]\nsigma_min = 1.0\nsigma_max = 0.5\n").is_err());
        assert!(RunConfig::from_toml("[model.block1]\nbase_width = 6\n").is_err());
        assert!(RunConfig::from_toml("unknown = 1\n").is_err());
        assert!(RunConfig::from_toml("[dataset]\nn_clips = 0\n").is_err());
    }
}
