//! Source corpora, free-field multi-speaker scene synthesis and the on-disk
//! dataset format (one 16-channel float WAV per clip plus a JSON-lines
//! manifest).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use log::warn;
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rubato::audioadapter_buffers::direct::SequentialSliceOfVecs;
use rubato::{Fft, FixedSync, Resampler};
use serde::{Deserialize, Serialize};

use crate::ambisonics::{encode_scene, sample_doa, AmbisonicsSignal, Direction, PlaneWaveScene, PlaneWaveSource};
use crate::error::{config, invalid, Result};
use crate::io::{read_ambisonics, read_wav, write_ambisonics, write_atomic, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
/// 2.048 s at 16 kHz.
pub const CLIP_SAMPLES: usize = 32_768;
pub const MAX_SPEAKERS: usize = 4;
/// Crossfade used when looping short sources (10 ms).
pub const LOOP_CROSSFADE: usize = 160;
const INGEST_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub samples: Vec<f64>,
}

/// Mono source recordings at 16 kHz, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn new(mut items: Vec<CorpusItem>) -> Result<Self> {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        for w in items.windows(2) {
            if w[0].id == w[1].id {
                return Err(invalid(format!("duplicate corpus id {}", w[0].id)));
            }
        }
        if let Some(it) = items.iter().find(|it| it.samples.is_empty()) {
            return Err(invalid(format!("corpus item {} is empty", it.id)));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusItem> {
        self.items
            .binary_search_by(|it| it.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.items[i])
    }

    /// Write each item as `<id>.wav` (mono, float).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for it in &self.items {
            let ch = Array2::from_shape_vec((1, it.samples.len()), it.samples.clone())
                .expect("row vector shape");
            write_wav(&dir.join(format!("{}.wav", it.id)), &ch, SAMPLE_RATE)?;
        }
        Ok(())
    }
}

/// Resample a mono signal with an FFT-based synchronous resampler.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(invalid("sample rates must be positive"));
    }
    if from == to || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let mut resampler = Fft::<f64>::new(from as usize, to as usize, 1024, 1, FixedSync::Input)
        .map_err(|e| invalid(format!("resampler: {e}")))?;
    let data = vec![samples.to_vec()];
    let input = SequentialSliceOfVecs::new(&data, 1, samples.len())
        .map_err(|e| invalid(format!("resampler input: {e}")))?;
    let out = resampler
        .process_all(&input, samples.len(), None)
        .map_err(|e| invalid(format!("resampling failed: {e}")))?;
    Ok(out.take_data())
}

fn peak_normalize(x: &mut [f64], peak: f64) -> bool {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return false;
    }
    let g = peak / max;
    x.iter_mut().for_each(|v| *v *= g);
    true
}

/// Read every `*.wav` in `dir` (not recursive). Files are resampled to 16 kHz
/// and peak-normalized to 0.9; the id is the file stem. Unreadable,
/// multichannel or silent files are skipped with a warning.
pub fn ingest_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(invalid(format!("corpus directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for path in paths {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (channels, sr) = match read_wav(&path) {
            Ok(v) => v,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if channels.nrows() != 1 {
            warn!("skipping {}: {} channels, expected mono", path.display(), channels.nrows());
            continue;
        }
        let mut samples = resample(&channels.row(0).to_vec(), sr, SAMPLE_RATE)?;
        if !peak_normalize(&mut samples, INGEST_PEAK) {
            warn!("skipping {}: silent", path.display());
            continue;
        }
        items.push(CorpusItem { id, samples });
    }
    if items.is_empty() {
        return Err(invalid(format!("no usable mono WAV files in {}", dir.display())));
    }
    Corpus::new(items)
}

/// Voiced, speech-like test signals: syllables of harmonic tones with a
/// per-speaker pitch range and formant envelope, separated by short pauses
/// and occasional noise bursts. Each speaker gets one recording of
/// `seconds` duration.
pub fn synth_corpus(speakers: usize, seconds: f64, seed: u64) -> Result<Corpus> {
    if speakers == 0 || !(seconds > 0.0) {
        return Err(invalid("synthetic corpus needs speakers > 0 and a positive duration"));
    }
    let len = (seconds * SAMPLE_RATE as f64).round() as usize;
    let items = (0..speakers)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut samples = synth_speaker(len, &mut rng);
            peak_normalize(&mut samples, INGEST_PEAK);
            CorpusItem {
                id: format!("spk{k:03}"),
                samples,
            }
        })
        .collect();
    Corpus::new(items)
}

fn synth_speaker<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let base_f0 = if rng.random_bool(0.5) {
        rng.random_range(90.0..150.0)
    } else {
        rng.random_range(170.0..260.0)
    };
    let formant_shift = rng.random_range(0.85..1.2);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; len];
    let mut pos = 0usize;
    let mut phase = 0.0f64;
    while pos < len {
        let pause = (rng.random_range(0.02..0.12) * sr) as usize;
        pos += pause;
        let dur = (rng.random_range(0.08..0.28) * sr) as usize;
        let end = (pos + dur).min(len);
        if pos >= end {
            break;
        }
        if rng.random_bool(0.2) {
            // Unvoiced burst: differentiated noise.
            let mut prev = 0.0;
            for (i, v) in out[pos..end].iter_mut().enumerate() {
                let w = noise.sample(rng);
                let env = (std::f64::consts::PI * i as f64 / (end - pos) as f64).sin();
                *v += 0.3 * env * (w - prev);
                prev = w;
            }
        } else {
            let f_start = base_f0 * rng.random_range(0.85..1.15);
            let f_end = base_f0 * rng.random_range(0.85..1.15);
            let vowel = [
                rng.random_range(300.0..850.0) * formant_shift,
                rng.random_range(850.0..2300.0) * formant_shift,
                rng.random_range(2300.0..3200.0) * formant_shift,
            ];
            let n = end - pos;
            for i in 0..n {
                let u = i as f64 / n as f64;
                let f0 = f_start + (f_end - f_start) * u;
                phase += 2.0 * std::f64::consts::PI * f0 / sr;
                let env = (std::f64::consts::PI * u).sin().powf(0.7);
                let mut s = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 4000.0 {
                    let fh = h as f64 * f0;
                    let gain: f64 = vowel
                        .iter()
                        .enumerate()
                        .map(|(k, &fc)| {
                            let bw = 80.0 + 60.0 * k as f64;
                            1.0 / (1.0 + ((fh - fc) / bw).powi(2)) / (1.0 + k as f64)
                        })
                        .sum::<f64>()
                        + 0.02;
                    s += gain * (h as f64 * phase).sin() / (h as f64).sqrt();
                    h += 1;
                }
                out[pos + i] += env * s;
            }
        }
        pos = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Fractions of speakers and of clips assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn only(split: Split) -> Self {
        let mut s = Self {
            train: 0.0,
            val: 0.0,
            test: 0.0,
        };
        match split {
            Split::Train => s.train = 1.0,
            Split::Val => s.val = 1.0,
            Split::Test => s.test = 1.0,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(*v >= 0.0)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(config("split fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    fn fraction(&self, s: Split) -> f64 {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Split `total` items by the fractions; rounding remainders go to train.
    fn counts(&self, total: usize) -> [usize; 3] {
        let val = (self.val * total as f64).round() as usize;
        let test = ((self.test * total as f64).round() as usize).min(total - val.min(total));
        [total - val.min(total) - test, val.min(total), test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub source_id: String,
    /// Radians.
    pub azimuth: f64,
    /// Radians from the north pole.
    pub colatitude: f64,
    pub gain: f64,
    /// First sample taken from the source recording.
    pub offset: usize,
}

/// One manifest line. `seed` drove every random choice of the clip; together
/// with the corpus the entry is enough to re-render the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub speakers: usize,
    pub sources: Vec<SourcePlacement>,
}

impl ManifestEntry {
    pub fn speaker_count(&self) -> usize {
        self.sources.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut owner: std::collections::BTreeMap<&str, Split> = Default::default();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(invalid(format!("duplicate clip id {}", e.id)));
            }
            if e.speakers != e.sources.len() || !(1..=MAX_SPEAKERS).contains(&e.speakers) {
                return Err(invalid(format!("clip {} has an invalid speaker count", e.id)));
            }
            for s in &e.sources {
                if let Some(prev) = owner.insert(&s.source_id, e.split) {
                    if prev != e.split {
                        return Err(invalid(format!(
                            "source {} appears in both {prev:?} and {:?}",
                            s.source_id, e.split
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Draw the clip plan: speaker-disjoint source pools per split, then per clip
/// a speaker count uniform on 1..=4, distinct sources, DOAs uniform on the
/// sphere and random start offsets.
pub fn plan_dataset(corpus: &Corpus, n_clips: usize, seed: u64, split: &SplitSpec) -> Result<DatasetManifest> {
    split.validate()?;
    if n_clips == 0 {
        return Err(invalid("n_clips must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&CorpusItem> = corpus.items.iter().collect();
    ids.shuffle(&mut rng);
    let pool_sizes = split.counts(ids.len());
    let clip_counts = split.counts(n_clips);
    let mut pools = Vec::new();
    let mut start = 0;
    for k in 0..3 {
        pools.push(&ids[start..start + pool_sizes[k]]);
        start += pool_sizes[k];
    }
    for (k, s) in Split::ALL.iter().enumerate() {
        if clip_counts[k] > 0 && pools[k].len() < MAX_SPEAKERS {
            return Err(invalid(format!(
                "split {s:?} has {} distinct speakers; at least {MAX_SPEAKERS} are needed (corpus has {}, fraction {})",
                pools[k].len(),
                corpus.len(),
                split.fraction(*s)
            )));
        }
    }
    let mut entries = Vec::with_capacity(n_clips);
    for (k, s) in Split::ALL.iter().enumerate() {
        for _ in 0..clip_counts[k] {
            let clip_seed = rng.next_u64();
            let index = entries.len();
            entries.push(plan_clip(format!("clip{index:05}"), *s, clip_seed, pools[k])?);
        }
    }
    Ok(DatasetManifest { entries })
}

fn plan_clip(id: String, split: Split, seed: u64, pool: &[&CorpusItem]) -> Result<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = rng.random_range(1..=MAX_SPEAKERS);
    let chosen = index::sample(&mut rng, pool.len(), speakers);
    let gain = 1.0 / speakers as f64;
    let sources = chosen
        .iter()
        .map(|i| {
            let item = pool[i];
            let dir = sample_doa(&mut rng);
            let offset = if item.samples.len() > CLIP_SAMPLES {
                rng.random_range(0..=item.samples.len() - CLIP_SAMPLES)
            } else {
                0
            };
            SourcePlacement {
                source_id: item.id.clone(),
                azimuth: dir.azimuth(),
                colatitude: dir.colatitude(),
                gain,
                offset,
            }
        })
        .collect();
    Ok(ManifestEntry {
        id,
        split,
        seed,
        speakers,
        sources,
    })
}

/// `len` samples of `x` starting at `offset`; a short source is looped with a
/// linear crossfade of `crossfade` samples at every seam.
pub fn cut_or_loop(x: &[f64], offset: usize, len: usize, crossfade: usize) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; len];
    }
    if offset + len <= x.len() {
        return x[offset..offset + len].to_vec();
    }
    let x = &x[offset.min(x.len() - 1)..];
    let xf = crossfade.min(x.len() / 2);
    let mut out: Vec<f64> = x.to_vec();
    while out.len() < len {
        let n = out.len();
        for i in 0..xf {
            let w = (i as f64 + 0.5) / xf as f64;
            out[n - xf + i] = out[n - xf + i] * (1.0 - w) + x[i] * w;
        }
        out.extend_from_slice(&x[xf..]);
    }
    out.truncate(len);
    out
}

/// Re-create a clip's third-order signal from its manifest entry.
pub fn render_clip(entry: &ManifestEntry, corpus: &Corpus) -> Result<AmbisonicsSignal> {
    let sources = entry
        .sources
        .iter()
        .map(|s| {
            let item = corpus
                .get(&s.source_id)
                .ok_or_else(|| invalid(format!("clip {}: source {} not in corpus", entry.id, s.source_id)))?;
            let mut waveform = cut_or_loop(&item.samples, s.offset, CLIP_SAMPLES, LOOP_CROSSFADE);
            peak_normalize(&mut waveform, 1.0);
            Ok(PlaneWaveSource {
                direction: Direction::new(s.azimuth, s.colatitude)?,
                waveform,
                gain: s.gain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    encode_scene(&PlaneWaveScene::new(sources, SAMPLE_RATE)?, 3)
}

/// Plan and render in memory.
pub fn synth_dataset(
    corpus: &Corpus,
    n_clips: usize,
    seed: u64,
    split: &SplitSpec,
) -> Result<(DatasetManifest, Vec<AmbisonicsSignal>)> {
    let manifest = plan_dataset(corpus, n_clips, seed, split)?;
    let clips = manifest
        .entries
        .iter()
        .map(|e| render_clip(e, corpus))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

pub fn clip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("clips").join(format!("{id}.wav"))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

/// Render every clip to `<dir>/clips/<id>.wav` using up to `jobs` threads,
/// then write `<dir>/manifest.jsonl`.
pub fn write_dataset(dir: &Path, corpus: &Corpus, manifest: &DatasetManifest, jobs: usize) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir.join("clips"))?;
    let jobs = jobs.max(1);
    let entries = &manifest.entries;
    let chunk = entries.len().div_ceil(jobs).max(1);
    thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<()> {
                    for e in part {
                        write_ambisonics(&clip_path(dir, &e.id), &render_clip(e, corpus)?)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("dataset worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;
    write_atomic(&manifest_path(dir), manifest.to_jsonl()?.as_bytes())
}

/// Manifest plus the stored clips of one split (all when `None`).
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<(DatasetManifest, Vec<AmbisonicsSignal>)> {
    let manifest = DatasetManifest::load(&manifest_path(dir))?;
    let clips = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| read_ambisonics(&clip_path(dir, &e.id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}
