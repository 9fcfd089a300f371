//! Mono PCM input from WAV and FLAC, and 16-bit WAV output.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    /// Samples scaled to [-1, 1).
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn audio_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a WAV or FLAC file, chosen by its leading magic bytes.
pub fn read_audio(path: &Path) -> Result<Audio> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(io_err(path))?;
    match &magic {
        b"RIFF" => read_wav(path),
        b"fLaC" => read_flac(path),
        _ => Err(audio_err(path, "neither a RIFF/WAVE nor a FLAC file")),
    }
}

fn read_wav(path: &Path) -> Result<Audio> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(path, format!("{} channels, mono required", spec.channels)));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<Vec<_>, _>>()
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
    }
    .map_err(|e| audio_err(path, e.to_string()))?;
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn read_flac(path: &Path) -> Result<Audio> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = claxon::FlacReader::new(BufReader::new(file)).map_err(|e| audio_err(path, e.to_string()))?;
    let info = reader.streaminfo();
    if info.channels != 1 {
        return Err(audio_err(path, format!("{} channels, mono required", info.channels)));
    }
    let scale = 1.0 / (1i64 << (info.bits_per_sample - 1)) as f64;
    let samples = reader
        .samples()
        .map(|s| s.map(|v| v as f64 * scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(path, e.to_string()))?;
    Ok(Audio {
        samples,
        sample_rate: info.sample_rate,
    })
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e.to_string()))?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| audio_err(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| audio_err(path, e.to_string()))
}
