//! STFT-domain SDR on the higher-order channels, per-speaker-count
//! aggregation, and directional energy plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::ambisonics::{directional_energy_map, AmbisonicsSignal, EnergyMap};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::tf::{stft_channels, StftConfig};

/// Scores at or above this value mean "no measurable error".
pub const SDR_CAP_DB: f64 = 100.0;

/// Overall STFT-SDR (mean, std in dB) reported for the full-scale diffusion
/// cascade trained for many hours per block. Shown for context only.
pub const REFERENCE_OVERALL_DB: (f64, f64) = (24.7, 6.2);

/// `10 log10(‖R‖² / ‖R − E‖²)` over the raw STFTs of channels 5–16.
pub fn stft_sdr(est: &AmbisonicsSignal, reference: &AmbisonicsSignal, cfg: &StftConfig) -> Result<f64> {
    if est.order() != 3 || reference.order() != 3 {
        return Err(invalid(format!(
            "stft_sdr compares third-order signals, got orders {} and {}",
            est.order(),
            reference.order()
        )));
    }
    if est.len() != reference.len() || est.sample_rate() != reference.sample_rate() {
        return Err(invalid("estimate and reference differ in length or sample rate"));
    }
    let r = stft_channels(&reference.channels().slice(s![4.., ..]).to_owned(), cfg)?;
    let e = stft_channels(&est.channels().slice(s![4.., ..]).to_owned(), cfg)?;
    let signal: f64 = r.data.iter().map(|c| c.norm_sqr()).sum();
    if signal == 0.0 {
        return Err(Error::UndefinedMetric(
            "reference has no energy in channels 5-16".into(),
        ));
    }
    let error: f64 = r
        .data
        .iter()
        .zip(e.data.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    if error == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).min(SDR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub speakers: usize,
    pub sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean_db: f64,
    pub std_db: f64,
}

impl GroupStats {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            count: values.len(),
            mean_db: mean,
            std_db: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    /// Keyed by speaker count.
    pub by_speakers: BTreeMap<usize, GroupStats>,
    pub overall: GroupStats,
    /// `(mean, std)` of the full-scale reference result; not reproducible at
    /// desk scale.
    pub reference_overall_db: (f64, f64),
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>6}  {:>18}", "speakers", "clips", "STFT-SDR [dB]");
        for (k, g) in &self.by_speakers {
            let _ = writeln!(out, "{:<10} {:>6}  {:>9.2} ± {:<6.2}", k, g.count, g.mean_db, g.std_db);
        }
        let g = &self.overall;
        let _ = writeln!(out, "{:<10} {:>6}  {:>9.2} ± {:<6.2}", "overall", g.count, g.mean_db, g.std_db);
        let (m, sd) = self.reference_overall_db;
        let _ = writeln!(
            out,
            "reference overall {m:.1} ± {sd:.1} dB after full-scale training (context only, not reproducible at desk scale)"
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{stem}.txt")), self.to_table().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())
    }
}

/// Aggregate per-clip scores over the manifest clips of `split` (all clips
/// when `None`). Every selected clip needs a score and every score needs a
/// selected clip.
pub fn aggregate(
    scores: &BTreeMap<String, f64>,
    manifest: &DatasetManifest,
    split: Option<Split>,
) -> Result<EvalReport> {
    let selected: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    let missing: Vec<String> = selected
        .iter()
        .filter(|e| !scores.contains_key(&e.id))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let unknown: Vec<&str> = scores
        .keys()
        .filter(|id| !selected.iter().any(|e| &e.id == *id))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(invalid(format!("scores for clips not in the manifest: {}", unknown.join(", "))));
    }
    if selected.is_empty() {
        return Err(invalid("no clips to aggregate"));
    }
    let clips: Vec<ClipScore> = selected
        .iter()
        .map(|e| ClipScore {
            id: e.id.clone(),
            speakers: e.speaker_count(),
            sdr_db: scores[&e.id],
        })
        .collect();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in &clips {
        groups.entry(c.speakers).or_default().push(c.sdr_db);
    }
    let by_speakers = groups
        .into_iter()
        .map(|(k, v)| (k, GroupStats::of(&v).expect("group is non-empty")))
        .collect();
    let all: Vec<f64> = clips.iter().map(|c| c.sdr_db).collect();
    Ok(EvalReport {
        overall: GroupStats::of(&all).expect("non-empty"),
        clips,
        by_speakers,
        reference_overall_db: REFERENCE_OVERALL_DB,
    })
}

/// Render an energy map as an 8-bit grayscale image: azimuth along x, elevation
/// along y with +90° at the top.
pub fn energy_image(map: &EnergyMap) -> GrayImage {
    let (rows, cols) = map.values.dim();
    GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = map.values[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Plain-text grid: header row of azimuths, one row per colatitude, all in
/// radians with round-trip precision.
pub fn energy_grid_text(map: &EnergyMap) -> String {
    let mut out = String::from("# directional energy; rows: colatitude [rad], columns: azimuth [rad]\n");
    out.push_str("colatitude\\azimuth");
    for az in &map.azimuths {
        let _ = write!(out, "\t{az:?}");
    }
    out.push('\n');
    for (r, col) in map.colatitudes.iter().enumerate() {
        let _ = write!(out, "{col:?}");
        for v in map.values.row(r) {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_energy_grid(text: &str) -> Result<EnergyMap> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| invalid("energy grid is empty"))?;
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| invalid(format!("bad number {s:?} in energy grid: {e}")))
    };
    let azimuths = header.split('\t').skip(1).map(parse).collect::<Result<Vec<_>>>()?;
    let mut colatitudes = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        let mut fields = line.split('\t');
        colatitudes.push(parse(fields.next().unwrap_or(""))?);
        let row = fields.map(parse).collect::<Result<Vec<_>>>()?;
        if row.len() != azimuths.len() {
            return Err(invalid("energy grid row length differs from header"));
        }
        values.extend(row);
    }
    let values = Array2::from_shape_vec((colatitudes.len(), azimuths.len()), values)
        .map_err(|e| invalid(e.to_string()))?;
    Ok(EnergyMap {
        azimuths,
        colatitudes,
        values,
    })
}

/// Write `<out>.png` and `<out>.tsv` for the directional energy of `sig`.
pub fn emit_energy_plot(sig: &AmbisonicsSignal, out: &Path, az_step: f64, col_step: f64) -> Result<EnergyMap> {
    let map = directional_energy_map(sig, az_step, col_step)?;
    let png = out.with_extension("png");
    let tsv = out.with_extension("tsv");
    let mut bytes = std::io::Cursor::new(Vec::new());
    energy_image(&map).write_to(&mut bytes, image::ImageFormat::Png)?;
    write_atomic(&png, bytes.get_ref())?;
    write_atomic(&tsv, energy_grid_text(&map).as_bytes())?;
    Ok(map)
}
