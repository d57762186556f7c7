//! 16-bit PCM mono WAV files.

use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate used throughout the reference setup.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// A mono waveform with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("audio signal must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Errors unless the signal is at `expected` Hz; no resampling is done.
    pub fn require_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::SampleRateMismatch {
                expected,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::AudioFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a RIFF/WAVE PCM 16-bit mono file into samples in `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        other => format_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!("expected 16-bit integer PCM, found {:?} with {} bits", spec.sample_format, spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(format_err(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| format_err(path, format!("truncated or corrupt sample data: {e}")))?;
    if samples.len() != expected {
        return Err(format_err(path, format!("truncated data chunk: {} of {expected} samples", samples.len())));
    }
    if samples.is_empty() {
        return Err(format_err(path, "data chunk is empty"));
    }
    AudioSignal::new(samples, spec.sample_rate)
}

/// Quantizes a sample to 16 bits with rounding and saturation.
pub fn quantize(v: f32) -> i16 {
    (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| format_err(path, e.to_string()))?;
    for &s in &audio.samples {
        writer.write_sample(quantize(s)).map_err(|e| format_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}
