//! 16-bit mono PCM WAV reading and writing.

use std::path::Path;

use thiserror::Error;

use crate::dsp::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Hound {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: expected 16-bit mono PCM, found {channels} channel(s) at {bits} bits")]
    Unsupported { path: String, channels: u16, bits: u16 },
}

pub fn read_wav(path: &Path) -> Result<Waveform, WavError> {
    let wrap = |source| WavError::Hound {
        path: path.display().to_string(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(WavError::Unsupported {
            path: path.display().to_string(),
            channels: spec.channels,
            bits: spec.bits_per_sample,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(wrap)?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes with clipping to the 16-bit range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), WavError> {
    let wrap = |source| WavError::Hound {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Rounds samples to the 16-bit grid so in-memory audio matches what a
/// write/read round trip would give.
pub fn quantize_16bit(samples: &mut [f32]) {
    for s in samples {
        *s = (*s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0;
    }
}
