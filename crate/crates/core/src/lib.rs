//! Learned upscaling of first-order Ambisonics to third order with a cascade
//! of conditional score-based diffusion models, plus a compressed-sensing
//! plane-wave baseline and the tooling around both.

pub mod ambisonics;
pub mod baseline;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod sde;
pub mod tf;

pub use ambisonics::{
    channel_count, directional_energy_map, encode_scene, real_sh, sh_matrix, truncate,
    AmbisonicsSignal, Direction, EnergyMap, PlaneWaveScene, PlaneWaveSource,
};
pub use baseline::{cs_upscale, CsConfig, DirectionGrid};
pub use cascade::{cascade_upscale, make_pairs, train_block, upscale_block, TrainConfig, TrainingPair};
pub use error::{Error, Result};
pub use eval::{stft_sdr, EvalReport};
pub use model::{init_params, load_checkpoint, save_checkpoint, ScoreModel, ScoreModelConfig};
pub use sde::{pc_sample, NoiseSchedule, PcSamplerConfig};
pub use tf::{istft, stft, AmplitudeTransformParams, StftConfig};
