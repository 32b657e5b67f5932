//! Sparse plane-wave upscaling of a single on-grid source, scored on the
//! higher-order channels.

use ambi_upscale::{
    cs_upscale, encode_scene, stft_sdr, truncate, CsConfig, DirectionGrid, PlaneWaveScene, PlaneWaveSource,
    StftConfig,
};
use rand::{Rng, SeedableRng};

fn main() -> ambi_upscale::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let grid = DirectionGrid::fibonacci(400)?;
    let waveform = (0..8192).map(|_| rng.random_range(-0.5..0.5)).collect();
    let src = PlaneWaveSource { direction: grid.directions()[57], waveform, gain: 1.0 };
    let hoa = encode_scene(&PlaneWaveScene::new(vec![src], 16_000)?, 3)?;

    let (est, stats) = cs_upscale(&truncate(&hoa, 1)?, &grid, &CsConfig::default(), &StftConfig::default(), 2)?;
    let sdr = stft_sdr(&est, &hoa, &StftConfig::default())?;
    println!("{} of {} bins solved; STFT-SDR {sdr:.1} dB", stats.bins_solved, stats.bins_total);
    Ok(())
}
