//! Little-endian RIFF/WAVE reader and writer for PCM-16 and IEEE float-32.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl WavEncoding {
    fn bits(self) -> u16 {
        match self {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        }
    }

    fn tag(self) -> u16 {
        match self {
            WavEncoding::Pcm16 => FORMAT_PCM,
            WavEncoding::Float32 => FORMAT_FLOAT,
        }
    }
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

pub fn wav_write(w: &Waveform, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    fs::write(path, encode_wav(w, encoding))?;
    Ok(())
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| format_err(at, "unexpected end of file"))
}

fn read_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| format_err(at, "unexpected end of file"))
}

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Parses a complete WAV byte buffer. Mono files are duplicated to stereo.
pub fn decode_wav(b: &[u8]) -> Result<Waveform> {
    if b.len() < 12 {
        return Err(format_err(b.len(), "file shorter than RIFF header"));
    }
    if &b[0..4] != b"RIFF" {
        return Err(format_err(0, "missing RIFF magic"));
    }
    if &b[8..12] != b"WAVE" {
        return Err(format_err(8, "missing WAVE form type"));
    }
    let mut at = 12;
    let mut fmt: Option<Fmt> = None;
    while at < b.len() {
        if at + 8 > b.len() {
            return Err(format_err(at, "truncated chunk header"));
        }
        let id = &b[at..at + 4];
        let size = read_u32(b, at + 4)? as usize;
        let body = at + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > b.len() {
                    return Err(format_err(body, "truncated fmt chunk"));
                }
                let mut format = read_u16(b, body)?;
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(format_err(body, "extensible fmt chunk too short"));
                    }
                    format = read_u16(b, body + 24)?;
                }
                fmt = Some(Fmt {
                    format,
                    channels: read_u16(b, body + 2)?,
                    sample_rate: read_u32(b, body + 4)?,
                    bits: read_u16(b, body + 14)?,
                });
            }
            b"data" => {
                let f = fmt.ok_or_else(|| format_err(at, "data chunk before fmt chunk"))?;
                if body + size > b.len() {
                    return Err(format_err(
                        b.len(),
                        format!("data chunk declares {size} bytes but file ends early"),
                    ));
                }
                return decode_samples(&b[body..body + size], body, &f);
            }
            _ => {}
        }
        // chunks are word aligned
        at = body + size + (size & 1);
    }
    Err(format_err(b.len(), "no data chunk"))
}

fn decode_samples(data: &[u8], offset: usize, f: &Fmt) -> Result<Waveform> {
    let width = match (f.format, f.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(format_err(
                offset,
                format!("unsupported codec: format tag {tag} with {bits} bits"),
            ))
        }
    };
    let channels = f.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(format_err(offset, format!("unsupported channel count {channels}")));
    }
    let frame = width * channels;
    if !data.len().is_multiple_of(frame) {
        return Err(format_err(offset + data.len(), "data length is not a whole number of frames"));
    }
    let len = data.len() / frame;
    let mut chans = vec![Vec::with_capacity(len); channels];
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let v = if width == 2 {
            i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64
        };
        if !v.is_finite() {
            return Err(format_err(offset + i * width, "non-finite float sample"));
        }
        chans[i % channels].push(v);
    }
    if len == 0 {
        return Err(format_err(offset, "data chunk holds no samples"));
    }
    let mut chans = chans.into_iter();
    let left = chans.next().unwrap_or_default();
    match chans.next() {
        Some(right) => Waveform::stereo(left, right, f.sample_rate),
        None => Waveform::from_mono(&left, f.sample_rate),
    }
}

/// Serializes a stereo WAV. PCM-16 clips to `[-1, 1)`.
pub fn encode_wav(w: &Waveform, encoding: WavEncoding) -> Vec<u8> {
    let width = encoding.bits() as usize / 8;
    let data_len = w.len() * 2 * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&encoding.tag().to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2 * width as u32).to_le_bytes());
    out.extend_from_slice(&((2 * width) as u16).to_le_bytes());
    out.extend_from_slice(&encoding.bits().to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    let (l, r) = (w.channel(0), w.channel(1));
    for i in 0..w.len() {
        for s in [l[i], r[i]] {
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
            }
        }
    }
    out
}
