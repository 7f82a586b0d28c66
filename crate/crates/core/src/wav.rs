//! Multichannel WAV input/output. Samples are normalized to `[-1, 1]`.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::MultichannelSignal;

pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<MultichannelSignal<T>> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "unsupported sample format {fmt:?} at {bits} bits"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let mut samples = vec![Vec::with_capacity(frames); channels];
    for chunk in interleaved.chunks_exact(channels) {
        for (c, &v) in samples.iter_mut().zip(chunk) {
            c.push(T::lit(v));
        }
    }
    MultichannelSignal::new(samples, T::lit(spec.sample_rate as f64))
}

/// Read a WAV file and require exactly `channels` channels.
pub fn read_wav_channels<T: Real>(
    path: impl AsRef<Path>,
    channels: usize,
) -> Result<MultichannelSignal<T>> {
    let sig = read_wav(path)?;
    if sig.channels() != channels {
        return Err(Error::Dimension(format!(
            "expected {channels} channels, file has {}",
            sig.channels()
        )));
    }
    Ok(sig)
}

/// Write 32-bit float WAV.
pub fn write_wav<T: Real>(path: impl AsRef<Path>, signal: &MultichannelSignal<T>) -> Result<()> {
    let spec = WavSpec {
        channels: signal.channels() as u16,
        sample_rate: signal.sample_rate().as_f64().round() as u32,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for n in 0..signal.len() {
        for m in 0..signal.channels() {
            writer.write_sample(signal.channel(m)[n].as_f64() as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}
