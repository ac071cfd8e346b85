// SPDX-License-Identifier: Apache-2.0

//! RIFF/WAVE reading for 16-bit integer and 32-bit float PCM.

use std::path::Path;

use super::{AudioClip, AudioError};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Reads a WAV file, averaging channels to mono. The clip id is the file
/// stem and the label is 0.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => AudioError::NotFound { path: name.clone() },
        _ => AudioError::Io {
            path: name.clone(),
            source: e,
        },
    })?;
    let malformed = |field: &'static str, detail: String| AudioError::MalformedHeader {
        path: name.clone(),
        field,
        detail,
    };
    if bytes.len() < 12 {
        return Err(malformed("RIFF header", format!("needs 12 bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(malformed("chunk id", format!("{:?} is not \"RIFF\"", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(malformed("format", format!("{:?} is not \"WAVE\"", String::from_utf8_lossy(&bytes[8..12]))));
    }

    let mut fmt: Option<Fmt> = None;
    let mut pos = 12;
    let data = loop {
        if pos + 8 > bytes.len() {
            return Err(malformed("data chunk", "not found".into()));
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + size > bytes.len() {
                return Err(malformed("fmt chunk", format!("size {size} invalid")));
            }
            let mut format = u16_at(&bytes, body);
            if format == FORMAT_EXTENSIBLE && size >= 26 {
                format = u16_at(&bytes, body + 24);
            }
            fmt = Some(Fmt {
                format,
                channels: u16_at(&bytes, body + 2),
                sample_rate: u32_at(&bytes, body + 4),
                bits: u16_at(&bytes, body + 14),
            });
        } else if id == b"data" {
            let available = bytes.len() - body;
            if size > available {
                return Err(AudioError::Truncated {
                    path: name,
                    declared: size,
                    available,
                });
            }
            break &bytes[body..body + size];
        }
        pos = body + size + (size & 1);
    };

    let fmt = fmt.ok_or_else(|| malformed("fmt chunk", "missing before data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(malformed("channels", "is 0".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(malformed("sample_rate", "is 0".into()));
    }
    let unsupported = |field, value| AudioError::Unsupported {
        path: name.clone(),
        field,
        value,
    };
    let width = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (FORMAT_PCM | FORMAT_FLOAT, bits) => return Err(unsupported("bits_per_sample", bits as u32)),
        (format, _) => return Err(unsupported("audio_format", format as u32)),
    };
    let ch = fmt.channels as usize;
    let frame = width * ch;
    let n = data.len() / frame;
    if n == 0 {
        return Err(AudioError::InvalidClip(format!("{name}: data chunk holds no complete frame")));
    }
    let sample = |i: usize| -> f32 {
        let o = i * width;
        if width == 2 {
            i16::from_le_bytes([data[o], data[o + 1]]) as f32 / 32768.0
        } else {
            f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]).clamp(-1.0, 1.0)
        }
    };
    let samples = (0..n)
        .map(|f| (0..ch).map(|c| sample(f * ch + c)).sum::<f32>() / ch as f32)
        .collect();
    let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    AudioClip::new(samples, fmt.sample_rate, 0, id)
}

/// Writes mono 16-bit PCM. Samples are clamped to [-1, 1] and scaled by 32767.
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), AudioError> {
    let io = |e: hound::Error| AudioError::Io {
        path: path.display().to_string(),
        source: match e {
            hound::Error::IoError(e) => e,
            other => std::io::Error::other(other.to_string()),
        },
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(io)?;
    }
    w.finalize().map_err(io)
}
