//! Minimal decoders for the supported signal files.
//!
//! All decoders take untrusted bytes and either return a decoded value or a
//! [`DecodeError`]; they never panic and never allocate more than the input
//! payload justifies.

use ndarray::Array2;
use thiserror::Error;

use super::{Modality, Signal};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(u32),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// 8-bit interleaved image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn into_signal(self) -> Signal {
        let m = self.width * self.height;
        let values = Array2::from_shape_vec(
            (m, self.channels),
            self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("payload length checked by decoder");
        Signal {
            modality: Modality::Image2d,
            values,
            resolution: vec![self.height, self.width],
            value_range: (0.0, 255.0),
        }
    }
}

/// Mono samples already mapped onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub values: Vec<f64>,
    pub value_range: (f64, f64),
}

impl Samples {
    pub fn into_signal(self) -> Signal {
        let n = self.values.len();
        Signal {
            modality: Modality::Series1d,
            values: Array2::from_shape_vec((n, 1), self.values).expect("column vector"),
            resolution: vec![n],
            value_range: self.value_range,
        }
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DecodeError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DecodeError::MalformedHeader(format!("{what} out of range")))
    }
}

/// Decodes binary PPM (`P6`) or PGM (`P5`) with `maxval = 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(DecodeError::MalformedHeader("expected P6 or P5 magic".into())),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(DecodeError::MalformedHeader("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DecodeError::MalformedHeader(format!("invalid maxval {maxval}")));
    }
    if maxval != 255 {
        let bits = 32 - maxval.leading_zeros();
        return Err(DecodeError::UnsupportedBitDepth(bits));
    }
    match bytes.get(r.pos) {
        Some(c) if c.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(DecodeError::MalformedHeader("missing whitespace after maxval".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| DecodeError::MalformedHeader("image dimensions overflow".into()))?;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(Image {
        width,
        height,
        channels,
        data: payload[..expected].to_vec(),
    })
}

/// Encodes `P6` (3 channels) or `P5` (1 channel) with `maxval = 255`.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes an 8-bit grayscale or RGB PNG. Alpha channels are dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| DecodeError::MalformedHeader(e.to_string()))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| match e {
        png::DecodingError::IoError(_) | png::DecodingError::Format(_) => DecodeError::Truncated {
            expected: height * width,
            found: bytes.len(),
        },
        other => DecodeError::MalformedHeader(other.to_string()),
    })?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(DecodeError::UnsupportedBitDepth(frame.bit_depth as u32));
    }
    let (src_channels, keep) = match frame.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(DecodeError::UnsupportedFormat("indexed PNG".into()))
        }
    };
    let mut data = Vec::with_capacity(width * height * keep);
    for px in buf[..frame.buffer_size()].chunks_exact(src_channels) {
        data.extend_from_slice(&px[..keep]);
    }
    Ok(Image {
        width,
        height,
        channels: keep,
        data,
    })
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes PCM16 mono WAV, mapping `[-32768, 32767]` affinely onto `[0, 1]`.
pub fn decode_wav(bytes: &[u8]) -> Result<Samples> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DecodeError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(DecodeError::MalformedHeader("short fmt chunk".into()));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, bits) = format
                    .ok_or_else(|| DecodeError::MalformedHeader("data before fmt chunk".into()))?;
                if tag != 1 {
                    return Err(DecodeError::UnsupportedFormat(format!("format tag {tag}")));
                }
                if bits != 16 {
                    return Err(DecodeError::UnsupportedBitDepth(bits as u32));
                }
                if channels != 1 {
                    return Err(DecodeError::UnsupportedFormat(format!("{channels} channels")));
                }
                let available = bytes.len() - body;
                if available < size {
                    return Err(DecodeError::Truncated {
                        expected: size,
                        found: available,
                    });
                }
                if size % 2 != 0 {
                    return Err(DecodeError::MalformedHeader("odd PCM16 data size".into()));
                }
                let values = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| (i16::from_le_bytes([c[0], c[1]]) as f64 + 32768.0) / 65535.0)
                    .collect();
                return Ok(Samples {
                    values,
                    value_range: (-32768.0, 32767.0),
                });
            }
            _ => {}
        }
        // chunks are padded to even length
        pos = body
            .checked_add(size)
            .and_then(|p| p.checked_add(size % 2))
            .ok_or_else(|| DecodeError::MalformedHeader("chunk size overflow".into()))?;
    }
    Err(DecodeError::MalformedHeader("no data chunk".into()))
}

/// Encodes PCM16 mono WAV at the given sample rate.
pub fn encode_wav(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Parses the text sidecar of a raw `f32` file: one decimal sample count.
pub fn parse_length_sidecar(bytes: &[u8]) -> Result<usize> {
    std::str::from_utf8(bytes)
        .ok()
        .map(str::trim)
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| DecodeError::MalformedHeader("sidecar must hold a sample count".into()))
}

/// Decodes `count` little-endian `f32` samples in `[-1, 1]` (values outside
/// are clamped), mapped onto `[0, 1]`.
pub fn decode_raw_f32(bytes: &[u8], count: usize) -> Result<Samples> {
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| DecodeError::MalformedHeader("sample count overflow".into()))?;
    if bytes.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DecodeError::MalformedHeader(format!(
            "{} trailing bytes after {count} samples",
            bytes.len() - expected
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        if !v.is_finite() {
            return Err(DecodeError::NonFinite(i));
        }
        values.push((v.clamp(-1.0, 1.0) + 1.0) / 2.0);
    }
    Ok(Samples {
        values,
        value_range: (-1.0, 1.0),
    })
}
