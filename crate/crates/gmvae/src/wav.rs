//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use gmvae_core::dsp::{Waveform, SAMPLE_RATE};

use crate::error::{AppError, AppResult};

/// Reads a 16-bit mono file at any rate, resampled to the analysis rate.
pub fn read(path: &Path) -> AppResult<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => AppError::io(path)(source),
        other => AppError::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AppError::Format {
            path: path.to_path_buf(),
            detail: format!("expected 16-bit PCM mono, found {spec:?}"),
        });
    }
    let samples = reader.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate).resampled(SAMPLE_RATE))
}

pub fn write(path: &Path, w: &Waveform) -> AppResult<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
