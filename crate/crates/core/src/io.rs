//! File helpers: atomic writes and float WAV I/O.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

use crate::ambisonics::AmbisonicsSignal;
use crate::error::{invalid, Result};

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Encode channels (rows) as a 32-bit float WAV in memory.
pub fn wav_bytes(channels: &Array2<f64>, sample_rate: u32) -> Result<Vec<u8>> {
    let (n_ch, len) = channels.dim();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(invalid(format!("cannot write a WAV with {n_ch} channels")));
    }
    let spec = WavSpec {
        channels: n_ch as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut cursor, spec)?;
        for i in 0..len {
            for c in 0..n_ch {
                writer.write_sample(channels[[c, i]] as f32)?;
            }
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, channels: &Array2<f64>, sample_rate: u32) -> Result<()> {
    write_atomic(path, &wav_bytes(channels, sample_rate)?)
}

pub fn write_ambisonics(path: &Path, sig: &AmbisonicsSignal) -> Result<()> {
    write_wav(path, sig.channels(), sig.sample_rate())
}

/// Read any PCM or float WAV as `channels × samples` in `[-1, 1]` scale.
pub fn read_wav(path: &Path) -> Result<(Array2<f64>, u32)> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let len = samples.len() / n_ch.max(1);
    let interleaved = Array2::from_shape_vec((len, n_ch), samples)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((interleaved.t().to_owned(), spec.sample_rate))
}

pub fn read_ambisonics(path: &Path) -> Result<AmbisonicsSignal> {
    let (channels, sr) = read_wav(path)?;
    AmbisonicsSignal::from_channels(channels, sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wav_round_trip_is_float_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let ch = array![[0.5, -0.25, 0.125], [1.0, 0.0, -1.0]];
        write_wav(&p, &ch, 16_000).unwrap();
        let (back, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(back, ch);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
