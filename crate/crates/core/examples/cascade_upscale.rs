//! First order to third order through two (untrained, hence silent) blocks.
//! Shows the channel bookkeeping and that observed channels pass through.

use ambi_upscale::model::{ModelMeta, Precision};
use ambi_upscale::{
    cascade_upscale, encode_scene, init_params, truncate, Direction, PcSamplerConfig, PlaneWaveScene,
    PlaneWaveSource, ScoreModelConfig,
};
use rand::SeedableRng;

fn main() -> ambi_upscale::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let block = |n| ScoreModelConfig {
        base_width: 8,
        depth: 2,
        res_units_per_level: 1,
        time_embed_dim: 8,
        precision: Precision::F32,
        ..ScoreModelConfig::for_block(n)
    };
    let m1 = init_params(&block(1), &ModelMeta::default(), &mut rng)?;
    let m2 = init_params(&block(2), &ModelMeta::default(), &mut rng)?;

    let waveform: Vec<f64> = (0..8192).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
    let src = PlaneWaveSource { direction: Direction::new(1.0, 1.2)?, waveform, gain: 1.0 };
    let foa = truncate(&encode_scene(&PlaneWaveScene::new(vec![src], 16_000)?, 3)?, 1)?;

    let sampler = PcSamplerConfig { predictor_steps: 5, ..PcSamplerConfig::default() };
    let hoa = cascade_upscale(&foa, &m1, &m2, &sampler, &mut rng)?;
    let kept = truncate(&hoa, 1)?;
    let diff = (kept.channels() - foa.channels()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("{} -> {} channels; first-order channels changed by at most {diff:.1e}", foa.num_channels(), hoa.num_channels());
    Ok(())
}
