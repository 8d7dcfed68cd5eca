use std::path::Path;

use log::warn;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

/// Reads 16-bit PCM mono audio at 16 kHz, scaled to [-1, 1).
pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.into(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let reject = |reason: String| Error::Audio {
        path: path.into(),
        reason,
    };
    if spec.sample_rate != SAMPLE_RATE {
        return Err(reject(format!("sample rate {} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate)));
    }
    if spec.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(reject(format!("{}-bit {:?}, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples)
}

/// Writes 16-bit PCM mono. Samples outside [-1, 1) saturate with a warning.
pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio {
            path: path.into(),
            reason: format!("sample rate {} Hz, expected {SAMPLE_RATE} Hz", w.sample_rate),
        });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    let mut clipped = 0usize;
    for &x in &w.samples {
        let q = (x * FULL_SCALE).round();
        if !(i16::MIN as f64..=i16::MAX as f64).contains(&q) {
            clipped += 1;
        }
        writer.write_sample(q.clamp(i16::MIN as f64, i16::MAX as f64) as i16)?;
    }
    writer.finalize()?;
    if clipped > 0 {
        warn!("{}: {clipped} samples saturated", path.display());
    }
    Ok(())
}
