use std::io::Cursor;
use std::path::Path;

use codetts::audio::Waveform;
use codetts::persist::write_atomic;
use codetts::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads 16-bit PCM mono audio, scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!("{}: only 16-bit PCM mono is supported", path.display())));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn wav_bytes(wave: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    let fail = |e: hound::Error| Error::Format(format!("WAV encoding failed: {e}"));
    let mut w = hound::WavWriter::new(&mut buf, spec).map_err(fail)?;
    for &s in &wave.samples {
        w.write_sample(to_pcm16(s)).map_err(fail)?;
    }
    w.finalize().map_err(fail)?;
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    write_atomic(path, &wav_bytes(wave)?)
}
