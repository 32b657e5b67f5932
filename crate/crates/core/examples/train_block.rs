//! Train a small block-1 score model for a few steps, save it and load it back.

use ambi_upscale::dataset::{synth_corpus, synth_dataset, Split, SplitSpec};
use ambi_upscale::model::{ModelMeta, Precision};
use ambi_upscale::{load_checkpoint, make_pairs, save_checkpoint, train_block, ScoreModelConfig, TrainConfig};

fn main() -> ambi_upscale::Result<()> {
    let corpus = synth_corpus(8, 2.0, 1)?;
    let (_, clips) = synth_dataset(&corpus, 4, 2, &SplitSpec::only(Split::Train))?;
    let meta = ModelMeta::default();
    let pairs = make_pairs(&clips, 1, &meta)?;
    let model_cfg = ScoreModelConfig {
        base_width: 8,
        depth: 2,
        res_units_per_level: 1,
        time_embed_dim: 16,
        precision: Precision::F32,
        ..ScoreModelConfig::for_block(1)
    };
    let train_cfg = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        total_steps: 40,
        validation_every: 0,
        crop_bins: Some(32),
        crop_frames: Some(32),
        ..TrainConfig::for_block(1)
    };
    let (model, report) = train_block(&pairs, &[], &train_cfg, &model_cfg, &meta)?;
    let h = &report.loss_history;
    println!("{} parameters; loss {:.3} -> {:.3}", model.params().parameter_count(), h[0], h[h.len() - 1]);

    let path = std::env::temp_dir().join("ambi-upscale-block1.safetensors");
    save_checkpoint(&model, h, &path)?;
    let (_, history) = load_checkpoint(&path)?;
    println!("checkpoint {} holds {} loss entries", path.display(), history.len());
    Ok(())
}
