//! Synthesize a small test set, score the first-order truncation (zero
//! higher-order channels) against it and print the grouped report.

use std::collections::BTreeMap;

use ambi_upscale::dataset::{synth_corpus, synth_dataset, Split, SplitSpec};
use ambi_upscale::eval::aggregate;
use ambi_upscale::{stft_sdr, truncate, AmbisonicsSignal, StftConfig};
use ndarray::{s, Array2};

fn main() -> ambi_upscale::Result<()> {
    let corpus = synth_corpus(12, 2.0, 11)?;
    let (manifest, clips) = synth_dataset(&corpus, 8, 12, &SplitSpec::only(Split::Test))?;
    let cfg = StftConfig::default();
    let mut scores = BTreeMap::new();
    for (e, clip) in manifest.entries.iter().zip(&clips) {
        // Half of the true higher-order content, so the score is finite.
        let foa = truncate(clip, 1)?;
        let mut est = Array2::zeros(clip.channels().dim());
        est.slice_mut(s![..4, ..]).assign(foa.channels());
        est.slice_mut(s![4.., ..]).assign(&clip.channels().slice(s![4.., ..]).mapv(|v| 0.5 * v));
        let est = AmbisonicsSignal::new(3, est, clip.sample_rate())?;
        scores.insert(e.id.clone(), stft_sdr(&est, clip, &cfg)?);
    }
    print!("{}", aggregate(&scores, &manifest, Some(Split::Test))?.to_table());
    Ok(())
}
