//! Command-line surface. Exit codes: 0 success, 2 usage or validation error,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ambisonics::{truncate, AmbisonicsSignal};
use crate::baseline::{cs_upscale, DirectionGrid};
use crate::cascade::{cascade_upscale, continue_training, make_pairs, train_block, TrainReport};
use crate::config::{RunConfig, CONFIG_ENV};
use crate::dataset::{
    clip_path, ingest_corpus, load_dataset, manifest_path, plan_dataset, synth_corpus, write_dataset,
    DatasetManifest, Split, SAMPLE_RATE,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{aggregate, emit_energy_plot, stft_sdr};
use crate::io::{read_ambisonics, write_ambisonics, write_atomic};
use crate::model::{load_block_checkpoint, save_checkpoint, ScoreModel};

#[derive(Debug, Parser)]
#[command(name = "ambi-upscale", version, about = "First-order to third-order Ambisonics upscaling")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a multi-speaker third-order dataset from a mono corpus.
    SynthData(SynthDataArgs),
    /// Train one cascade block on a dataset.
    Train(TrainArgs),
    /// Upscale first-order audio to third order with two trained blocks.
    Upscale(UpscaleArgs),
    /// Upscale with the sparse plane-wave baseline.
    Baseline(BaselineArgs),
    /// Score estimates against references and write a report.
    Eval(EvalArgs),
    /// Write a directional energy image and grid table.
    PlotEnergy(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Directory of mono WAV files.
    #[arg(long, required_unless_present = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Generate a speech-like corpus instead of reading one.
    #[arg(long, conflicts_with = "corpus")]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Block order N (1 or 2).
    #[arg(long)]
    pub block: usize,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Train on every clip instead of the train split.
    #[arg(long)]
    pub all_splits: bool,
}

#[derive(Debug, Args)]
pub struct UpscaleArgs {
    /// First-order WAV, or a dataset directory (clips are truncated to first order).
    #[arg(long)]
    pub input: PathBuf,
    /// Output WAV, or output directory in dataset mode.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub block1: PathBuf,
    #[arg(long)]
    pub block2: PathBuf,
    /// Split used in dataset mode.
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// First-order WAV, or a dataset directory (clips are truncated to first order).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<clip id>.wav` estimates.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Dataset directory holding the reference clips and manifest.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output path stem; `.png` and `.tsv` are added.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Domain { .. }
        | Error::UndefinedMetric(_)
        | Error::CorruptCheckpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::MissingScores(_) => 2,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    match &cli.command {
        Command::SynthData(a) => {
            if let Some(n) = a.n_clips {
                cfg.dataset.n_clips = n;
            }
        }
        Command::Train(a) => {
            if let Some(steps) = a.steps {
                cfg.training.get_mut(a.block)?.total_steps = steps;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Upscale(a) => cmd_upscale(&cfg, &a),
        Command::Baseline(a) => cmd_baseline(&cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::PlotEnergy(a) => cmd_plot_energy(&cfg, &a),
    }
}

/// Write the effective configuration next to a command's outputs.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("run-config.toml"), cfg.to_toml()?.as_bytes())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn cmd_synth_data(cfg: &RunConfig, a: &SynthDataArgs) -> Result<()> {
    let corpus = if a.synthetic {
        synth_corpus(cfg.dataset.synthetic_speakers, cfg.dataset.synthetic_seconds, cfg.seed)?
    } else {
        let dir = a
            .corpus
            .as_deref()
            .or(cfg.paths.corpus.as_deref())
            .ok_or_else(|| invalid("no corpus directory given"))?;
        ingest_corpus(dir)?
    };
    let manifest = plan_dataset(&corpus, cfg.dataset.n_clips, cfg.seed, &cfg.dataset.split)?;
    write_dataset(&a.out, &corpus, &manifest, cfg.jobs)?;
    echo_config(cfg, &a.out)?;
    let mut counts = BTreeMap::new();
    for e in &manifest.entries {
        *counts.entry((e.split, e.speakers)).or_insert(0usize) += 1;
    }
    println!("{} clips from {} sources in {}", manifest.entries.len(), corpus.len(), a.out.display());
    for ((split, speakers), n) in counts {
        println!("  {split:?} {speakers} speaker(s): {n}");
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let n = a.block;
    let model_cfg = cfg.model.get(n)?.for_block(n);
    let train_cfg = cfg.training.get(n)?.for_block(n, cfg.seed);
    let (manifest, clips) = load_dataset(&a.dataset, None)?;
    let mut train_clips = Vec::new();
    let mut val_clips = Vec::new();
    for (e, c) in manifest.entries.iter().zip(clips) {
        if a.all_splits || e.split == Split::Train {
            train_clips.push(c);
        } else if e.split == Split::Val {
            val_clips.push(c);
        }
    }
    if train_clips.is_empty() {
        return Err(invalid("dataset has no training clips"));
    }
    let pairs = make_pairs(&train_clips, n, &cfg.meta())?;
    let val_pairs = make_pairs(&val_clips, n, &cfg.meta())?;
    info!("block {n}: {} training and {} validation clips", pairs.len(), val_pairs.len());

    let (model, report) = match &a.resume {
        Some(path) => {
            let (model, history) = load_block_checkpoint(path, n)?;
            let report = TrainReport {
                loss_history: history,
                validation: Vec::new(),
            };
            continue_training(model, report, &pairs, &val_pairs, &train_cfg)?
        }
        None => train_block(&pairs, &val_pairs, &train_cfg, &model_cfg, &cfg.meta())?,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &report.loss_history, &a.out)?;
    let mut log = String::from("# step\ttrain_loss\n");
    for (i, l) in report.loss_history.iter().enumerate() {
        log.push_str(&format!("{}\t{l}\n", i + 1));
    }
    for (step, v) in &report.validation {
        log.push_str(&format!("# validation {step}\t{v}\n"));
    }
    write_atomic(&a.out.with_extension("loss.txt"), log.as_bytes())?;
    echo_config(cfg, parent_dir(&a.out))?;
    println!(
        "block {n}: {} steps, final loss {:.4}, checkpoint {}",
        report.loss_history.len(),
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn check_foa(sig: &AmbisonicsSignal, what: &Path) -> Result<()> {
    if sig.num_channels() != 4 {
        return Err(invalid(format!(
            "{}: expected 4 first-order channels, found {}",
            what.display(),
            sig.num_channels()
        )));
    }
    if sig.sample_rate() != SAMPLE_RATE {
        return Err(invalid(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
            what.display(),
            sig.sample_rate()
        )));
    }
    Ok(())
}

/// First-order inputs: one file, or the truncated clips of a dataset split.
fn foa_inputs(input: &Path, split: Split) -> Result<Vec<(String, AmbisonicsSignal)>> {
    if input.is_dir() {
        let (manifest, clips) = load_dataset(input, Some(split))?;
        manifest
            .split(split)
            .zip(clips)
            .map(|(e, c)| Ok((e.id.clone(), truncate(&c, 1)?)))
            .collect()
    } else {
        let sig = read_ambisonics(input)?;
        check_foa(&sig, input)?;
        Ok(vec![(String::new(), sig)])
    }
}

fn output_path(input: &Path, out: &Path, id: &str) -> PathBuf {
    if input.is_dir() {
        out.join(format!("{id}.wav"))
    } else {
        out.to_path_buf()
    }
}

fn output_dir(input: &Path, out: &Path) -> PathBuf {
    if input.is_dir() {
        out.to_path_buf()
    } else {
        parent_dir(out).to_path_buf()
    }
}

pub fn cmd_upscale(cfg: &RunConfig, a: &UpscaleArgs) -> Result<()> {
    let (m1, _): (ScoreModel, _) = load_block_checkpoint(&a.block1, 1)?;
    let (m2, _): (ScoreModel, _) = load_block_checkpoint(&a.block2, 2)?;
    let inputs = foa_inputs(&a.input, a.split)?;
    let dir = output_dir(&a.input, &a.out);
    fs::create_dir_all(&dir)?;
    for (i, (id, foa)) in inputs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let hoa = cascade_upscale(foa, &m1, &m2, &cfg.sampler, &mut rng)?;
        let path = output_path(&a.input, &a.out, id);
        write_ambisonics(&path, &hoa)?;
        info!("wrote {}", path.display());
    }
    echo_config(cfg, &dir)?;
    println!("upscaled {} file(s) into {}", inputs.len(), dir.display());
    Ok(())
}

pub fn cmd_baseline(cfg: &RunConfig, a: &BaselineArgs) -> Result<()> {
    let grid = DirectionGrid::fibonacci(cfg.baseline.grid_points)?;
    let inputs = foa_inputs(&a.input, a.split)?;
    let dir = output_dir(&a.input, &a.out);
    fs::create_dir_all(&dir)?;
    for (id, foa) in &inputs {
        let (hoa, stats) = cs_upscale(foa, &grid, &cfg.baseline.solver, &cfg.stft, cfg.jobs)?;
        let path = output_path(&a.input, &a.out, id);
        write_ambisonics(&path, &hoa)?;
        info!(
            "wrote {} ({} of {} bins solved, {} at the iteration limit)",
            path.display(),
            stats.bins_solved,
            stats.bins_total,
            stats.bins_unconverged
        );
    }
    echo_config(cfg, &dir)?;
    println!("baseline upscaled {} file(s) into {}", inputs.len(), dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&manifest_path(&a.references))?;
    let mut found: Vec<String> = fs::read_dir(&a.estimates)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    found.sort();
    let expected: Vec<&str> = manifest.split(a.split).map(|e| e.id.as_str()).collect();
    let unknown: Vec<&str> = found
        .iter()
        .map(String::as_str)
        .filter(|id| !expected.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(invalid(format!(
            "estimates without a {:?} reference: {}",
            a.split,
            unknown.join(", ")
        )));
    }
    let mut scores = BTreeMap::new();
    for id in &found {
        let est = read_ambisonics(&a.estimates.join(format!("{id}.wav")))?;
        let reference = read_ambisonics(&clip_path(&a.references, id))?;
        scores.insert(id.clone(), stft_sdr(&est, &reference, &cfg.stft)?);
    }
    let report = aggregate(&scores, &manifest, Some(a.split))?;
    report.write(&a.out, "report")?;
    echo_config(cfg, &a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_plot_energy(cfg: &RunConfig, a: &PlotArgs) -> Result<()> {
    let sig = read_ambisonics(&a.input)?;
    emit_energy_plot(
        &sig,
        &a.out,
        cfg.plot.azimuth_step_deg.to_radians(),
        cfg.plot.colatitude_step_deg.to_radians(),
    )?;
    echo_config(cfg, parent_dir(&a.out))?;
    println!("wrote {} and {}", a.out.with_extension("png").display(), a.out.with_extension("tsv").display());
    Ok(())
}
