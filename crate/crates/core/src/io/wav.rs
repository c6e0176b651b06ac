//! RIFF/WAVE reading and writing for 16-bit PCM and 32-bit float audio.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::MultichannelWave;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn encode_wav(wave: &MultichannelWave, format: WavFormat) -> Vec<u8> {
    let ch = wave.num_channels();
    let (tag, bits) = match format {
        WavFormat::Pcm16 => (FORMAT_PCM, 16u16),
        WavFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = ch * bits as usize / 8;
    let data_len = wave.len() * block;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(ch as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate().to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate() * block as u32).to_le_bytes());
    out.extend_from_slice(&(block as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..wave.len() {
        for c in wave.channels() {
            match format {
                WavFormat::Pcm16 => {
                    let q = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavFormat::Float32 => out.extend_from_slice(&(c[i] as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn write_wav(path: &Path, wave: &MultichannelWave, format: WavFormat) -> Result<()> {
    fs::write(path, encode_wav(wave, format)).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

struct Fmt {
    format: WavFormat,
    channels: usize,
    sample_rate: u32,
}

fn parse_fmt(chunk: &[u8], bad: &dyn Fn(String) -> Error) -> Result<Fmt> {
    if chunk.len() < 16 {
        return Err(bad(format!("fmt chunk is {} bytes, need 16", chunk.len())));
    }
    let mut tag = u16_at(chunk, 0);
    let channels = u16_at(chunk, 2) as usize;
    let sample_rate = u32_at(chunk, 4);
    let bits = u16_at(chunk, 14);
    if tag == FORMAT_EXTENSIBLE {
        if chunk.len() < 26 {
            return Err(bad("extensible fmt chunk lacks a subformat".into()));
        }
        tag = u16_at(chunk, 24);
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => WavFormat::Pcm16,
        (FORMAT_FLOAT, 32) => WavFormat::Float32,
        _ => {
            return Err(bad(format!(
                "unsupported encoding (format tag {tag}, {bits} bits); only 16-bit PCM and 32-bit float are read"
            )))
        }
    };
    if channels == 0 {
        return Err(bad("fmt chunk declares zero channels".into()));
    }
    Ok(Fmt {
        format,
        channels,
        sample_rate,
    })
}

pub fn decode_wav(bytes: &[u8], origin: &Path) -> Result<MultichannelWave> {
    let bad = |msg: String| Error::format(origin, msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.saturating_add(len);
        match id {
            b"fmt " => {
                if end > bytes.len() {
                    return Err(bad("fmt chunk is truncated".into()));
                }
                fmt = Some(parse_fmt(&bytes[body..end], &bad)?);
            }
            b"data" => {
                data = Some(&bytes[body..end.min(bytes.len())]);
                if end > bytes.len() {
                    return Err(bad(format!(
                        "data chunk is truncated: header says {len} bytes, {} present",
                        bytes.len() - body
                    )));
                }
            }
            _ => {}
        }
        pos = end + (len & 1);
    }
    let fmt = fmt.ok_or_else(|| bad("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| bad("missing data chunk".into()))?;
    let width = match fmt.format {
        WavFormat::Pcm16 => 2,
        WavFormat::Float32 => 4,
    };
    let frames = data.len() / (width * fmt.channels);
    let mut chans = vec![Vec::with_capacity(frames); fmt.channels];
    for f in 0..frames {
        for (c, ch) in chans.iter_mut().enumerate() {
            let o = (f * fmt.channels + c) * width;
            ch.push(match fmt.format {
                WavFormat::Pcm16 => i16::from_le_bytes([data[o], data[o + 1]]) as f64 / 32768.0,
                WavFormat::Float32 => f32::from_le_bytes(data[o..o + 4].try_into().unwrap()) as f64,
            });
        }
    }
    MultichannelWave::new(fmt.sample_rate, chans).map_err(|e| bad(e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<MultichannelWave> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, path)
}

/// Reads a file and rejects any sample rate other than `sample_rate`.
pub fn read_wav_at(path: &Path, sample_rate: u32) -> Result<MultichannelWave> {
    let w = read_wav(path)?;
    if w.sample_rate() != sample_rate {
        return Err(Error::format(
            path,
            format!(
                "sample rate {} Hz, expected {sample_rate} Hz (no resampling is done)",
                w.sample_rate()
            ),
        ));
    }
    Ok(w)
}
