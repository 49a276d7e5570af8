//! Mono RIFF WAV I/O: 16-bit PCM and IEEE float32.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// PCM16 samples map to `k / 32768`; writing inverts this exactly.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported sample format {fmt:?} with {bits} bits"),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other),
    })?;
    for &s in w.samples() {
        let r = match encoding {
            WavEncoding::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q)
            }
            WavEncoding::Float32 => writer.write_sample(s),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..500)
            .map(|i| ((i as f32 * 0.05).sin() * 20000.0).round() / 32768.0)
            .collect();
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back, w);
        let p2 = dir.path().join("b.wav");
        write_wav(&p2, &back, WavEncoding::Pcm16).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn float32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let w = Waveform::new(vec![0.1, -0.25, 0.3333], 16000).unwrap();
        write_wav(&p, &w, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for _ in 0..8 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        let err = read_wav(&p).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_wav("/nonexistent/x.wav").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
