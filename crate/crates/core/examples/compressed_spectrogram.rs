//! The network's view of a signal: STFT, amplitude compression and real
//! stacking, and the exact way back.

use ambi_upscale::tf::{amp_compress, amp_expand, complex_merge, istft_ambisonics, real_stack};
use ambi_upscale::{stft, AmbisonicsSignal, AmplitudeTransformParams, StftConfig};
use ndarray::Array2;

fn main() -> ambi_upscale::Result<()> {
    let len = 32_768;
    let x = Array2::from_shape_fn((4, len), |(c, i)| ((i as f64) * 0.01 * (c + 1) as f64).sin() * 0.2);
    let sig = AmbisonicsSignal::new(1, x.clone(), 16_000)?;
    let cfg = StftConfig::default();
    let params = AmplitudeTransformParams::default();

    let tf = stft(&sig, &cfg)?;
    let features = real_stack(&amp_compress(&tf.data, &params));
    println!("spectrogram {:?} -> network input {:?}", tf.data.dim(), features.dim());

    let mut back = tf.clone();
    back.data = amp_expand(&complex_merge(&features)?, &params);
    let y = istft_ambisonics(&back, 16_000)?;
    let err = (y.channels() - &x).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("max reconstruction error {err:.2e}");
    Ok(())
}
