mod common;

use ambi_upscale::cascade::{condition_features, upscale_block_with};
use ambi_upscale::model::{ModelMeta, Precision};
use ambi_upscale::tf::{amp_compress, real_stack};
use ambi_upscale::{
    cascade_upscale, init_params, make_pairs, stft, train_block, truncate, upscale_block, AmbisonicsSignal,
    Direction, NoiseSchedule, PcSamplerConfig, ScoreModel, ScoreModelConfig, TrainConfig,
};
use common::*;
use ndarray::{s, Array2, Array3, ArrayD, Ix3};

fn hoa(seed: u64, len: usize) -> AmbisonicsSignal {
    let dirs = [Direction::new(0.4, 1.0).unwrap(), Direction::new(3.0, 2.2).unwrap()];
    encoded(&dirs, len, 3, seed)
}

fn tiny_model(block: usize, seed: u64) -> ScoreModel {
    let cfg = ScoreModelConfig {
        block_order: block,
        base_width: 8,
        depth: 2,
        res_units_per_level: 1,
        time_embed_dim: 8,
        precision: Precision::F32,
    };
    init_params(&cfg, &ModelMeta::default(), &mut rng(seed)).unwrap()
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    rel_err(a, b)
}

#[test]
fn pair_channel_counts() {
    let meta = ModelMeta::default();
    let clips = vec![hoa(1, 2048)];
    let p1 = make_pairs(&clips, 1, &meta).unwrap();
    assert_eq!((p1[0].condition.dim().0, p1[0].target.dim().0), (8, 10));
    let p2 = make_pairs(&clips, 2, &meta).unwrap();
    assert_eq!((p2[0].condition.dim().0, p2[0].target.dim().0), (18, 14));
    assert_eq!(p1[0].condition.dim().1, 257);

    // Target of block 1 is the compressed, stacked channels 5-9.
    let tf = stft(&clips[0], &meta.stft).unwrap();
    let want = real_stack(&amp_compress(&tf.data.slice(s![4..9, .., ..]).to_owned(), &meta.amplitude));
    assert_eq!(p1[0].target, want);

    let zero = make_pairs(&[AmbisonicsSignal::zeros(3, 1024, SR)], 1, &meta).unwrap();
    assert!(zero[0].condition.iter().chain(zero[0].target.iter()).all(|&v| v == 0.0));

    assert!(make_pairs(&[truncate(&clips[0], 1).unwrap()], 1, &meta).is_err());
}

#[test]
fn block_preserves_conditioning_channels() {
    let foa = truncate(&hoa(2, 4096), 1).unwrap();
    let model = tiny_model(1, 3);
    let out = upscale_block(&foa, &model, &PcSamplerConfig { predictor_steps: 3, ..Default::default() }, &mut rng(4)).unwrap();
    assert_eq!(out.num_channels(), 9);
    assert_eq!(out.len(), foa.len());
    assert!(max_rel(&out.channels().slice(s![..4, ..]).to_owned(), foa.channels()) < 1e-6);
    assert!(upscale_block(&out, &model, &PcSamplerConfig::default(), &mut rng(4)).is_err());
}

#[test]
fn oracle_score_reproduces_second_order() {
    // Teacher-forced score pointing at the true compressed channels; with a
    // vanishing σ_min the sampler's final noise is negligible.
    let clip = hoa(5, 4096);
    let meta = ModelMeta {
        schedule: NoiseSchedule::new(1e-9, 0.5, 1e-3).unwrap(),
        ..ModelMeta::default()
    };
    let truth = make_pairs(&[clip.clone()], 1, &meta).unwrap().remove(0).target.into_dyn();
    let sched = meta.schedule;
    let oracle = |x: &ArrayD<f64>, _y: &Array3<f64>, t: f64| {
        let s2 = sched.sigma(t)?.powi(2);
        Ok((&truth - x) / s2)
    };
    let foa = truncate(&clip, 1).unwrap();
    let out = upscale_block_with(&foa, &meta, oracle, &PcSamplerConfig::default(), &mut rng(6)).unwrap();
    let want = truncate(&clip, 2).unwrap();
    let err = max_rel(&out.channels().slice(s![4.., ..]).to_owned(), &want.channels().slice(s![4.., ..]).to_owned());
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn cascade_is_seed_deterministic() {
    let foa = truncate(&hoa(7, 2048), 1).unwrap();
    let (b1, b2) = (tiny_model(1, 8), tiny_model(2, 9));
    let sampler = PcSamplerConfig { predictor_steps: 2, ..Default::default() };
    let a = cascade_upscale(&foa, &b1, &b2, &sampler, &mut rng(10)).unwrap();
    let b = cascade_upscale(&foa, &b1, &b2, &sampler, &mut rng(10)).unwrap();
    assert_eq!(a.num_channels(), 16);
    assert_eq!(a, b);
    assert!(max_rel(&a.channels().slice(s![..4, ..]).to_owned(), foa.channels()) < 1e-6);
    assert!(cascade_upscale(&truncate(&hoa(7, 2048), 2).unwrap(), &b1, &b2, &sampler, &mut rng(10)).is_err());
}

#[test]
fn training_is_reproducible_and_decreases_loss() {
    let meta = ModelMeta::default();
    let clips: Vec<_> = (0..2).map(|i| hoa(20 + i, 4096)).collect();
    let pairs = make_pairs(&clips, 1, &meta).unwrap();
    let model_cfg = ScoreModelConfig { base_width: 8, depth: 2, res_units_per_level: 1, time_embed_dim: 8, ..ScoreModelConfig::for_block(1) };
    let tc = TrainConfig {
        total_steps: 200,
        batch_size: 4,
        learning_rate: 1e-3,
        crop_bins: Some(32),
        crop_frames: Some(16),
        validation_every: 100,
        seed: 1,
        block_order: 1,
    };
    let (_, r1) = train_block(&pairs, &[], &tc, &model_cfg, &meta).unwrap();
    let (_, r2) = train_block(&pairs, &[], &tc, &model_cfg, &meta).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.loss_history.len(), 200);
    assert_eq!(r1.validation.len(), 2);
    let head: f64 = r1.loss_history[..40].iter().sum();
    let tail: f64 = r1.loss_history[160..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn training_rejects_mismatched_pairs() {
    let meta = ModelMeta::default();
    let pairs = make_pairs(&[hoa(1, 2048)], 2, &meta).unwrap();
    let tc = TrainConfig { total_steps: 1, ..TrainConfig::for_block(1) };
    assert!(train_block(&pairs, &[], &tc, &ScoreModelConfig::for_block(1), &meta).is_err());
    assert!(train_block(&[], &[], &tc, &ScoreModelConfig::for_block(1), &meta).is_err());
    let bad = TrainConfig { batch_size: 0, ..tc };
    assert!(bad.validate().is_err());
}

#[test]
fn conditioning_features_match_pairs() {
    let meta = ModelMeta::default();
    let clip = hoa(3, 2048);
    let (_, y) = condition_features(&truncate(&clip, 1).unwrap(), &meta).unwrap();
    assert_eq!(y, make_pairs(&[clip], 1, &meta).unwrap()[0].condition);
    let _ = Ix3;
}
