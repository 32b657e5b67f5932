//! Encode a two-source plane-wave scene to third order and locate the sources
//! on a directional energy map.

use ambi_upscale::eval::emit_energy_plot;
use ambi_upscale::{encode_scene, truncate, Direction, PlaneWaveScene, PlaneWaveSource};
use rand::{Rng, SeedableRng};

fn main() -> ambi_upscale::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let step = 10f64.to_radians();
    let dirs = [Direction::new(4.0 * step, 6.0 * step)?, Direction::new(20.0 * step, 12.0 * step)?];
    let sources = dirs
        .iter()
        .map(|&direction| PlaneWaveSource {
            direction,
            waveform: (0..4096).map(|_| rng.random_range(-0.5..0.5)).collect(),
            gain: 1.0,
        })
        .collect();
    let hoa = encode_scene(&PlaneWaveScene::new(sources, 16_000)?, 3)?;
    let foa = truncate(&hoa, 1)?;
    println!("encoded {} channels, first order keeps {}", hoa.num_channels(), foa.num_channels());

    let out = std::env::temp_dir().join("ambi-upscale-energy");
    let map = emit_energy_plot(&hoa, &out, step, step)?;
    let (row, col) = map.argmax();
    let peak = map.direction_at(row, col);
    println!(
        "brightest cell at azimuth {:.0}°, colatitude {:.0}°; wrote {}.png",
        peak.azimuth().to_degrees(),
        peak.colatitude().to_degrees(),
        out.display()
    );
    Ok(())
}
