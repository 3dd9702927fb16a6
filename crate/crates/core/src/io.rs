//! Lossless native frame format (SPMF) and binary PGM interchange.
//!
//! SPMF layout, little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 0..4  | magic `SPMF`                              |
//! | 4     | version, currently 1                      |
//! | 5     | channel (0 height, 1 amplitude, 2 phase)  |
//! | 6..8  | reserved, zero                            |
//! | 8..12 | width (u32)                               |
//! | 12..16| height (u32)                              |
//! | 16..20| scan size in µm (f32)                     |
//! | 20..24| z scale (f32)                             |
//! | 24..  | width × height f32 pixels, row-major      |

use crate::frame::{Channel, FrameError, MaskImage, ScanFrame};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const SPMF_MAGIC: &[u8; 4] = b"SPMF";
pub const SPMF_VERSION: u8 = 1;
const SPMF_HEADER: usize = 24;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown channel code {0}")]
    BadChannel(u8),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("pixel {0} is not finite")]
    NonFinitePixel(usize),
    #[error("unsupported PGM maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("PGM header: {0}")]
    HeaderParse(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

pub fn encode_spmf(frame: &ScanFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(SPMF_HEADER + frame.len() * 4);
    out.extend_from_slice(SPMF_MAGIC);
    out.push(SPMF_VERSION);
    out.push(frame.channel().code());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&frame.width().to_le_bytes());
    out.extend_from_slice(&frame.height().to_le_bytes());
    out.extend_from_slice(&frame.scan_size_um().to_le_bytes());
    out.extend_from_slice(&frame.z_scale().to_le_bytes());
    for p in frame.pixels() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode_spmf(bytes: &[u8]) -> Result<ScanFrame, ImageIoError> {
    if bytes.len() < 4 {
        return Err(ImageIoError::TruncatedPayload {
            expected: SPMF_HEADER,
            found: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != SPMF_MAGIC {
        return Err(ImageIoError::BadMagic(magic));
    }
    if bytes.len() < SPMF_HEADER {
        return Err(ImageIoError::TruncatedPayload {
            expected: SPMF_HEADER,
            found: bytes.len(),
        });
    }
    if bytes[4] != SPMF_VERSION {
        return Err(ImageIoError::BadVersion(bytes[4]));
    }
    let channel = Channel::from_code(bytes[5]).ok_or(ImageIoError::BadChannel(bytes[5]))?;
    let width = le_u32(&bytes[8..12]);
    let height = le_u32(&bytes[12..16]);
    let scan_size = le_f32(&bytes[16..20]);
    let z_scale = le_f32(&bytes[20..24]);
    let n = width as usize * height as usize;
    let expected = SPMF_HEADER + n * 4;
    if bytes.len() < expected {
        return Err(ImageIoError::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let pixels: Vec<f32> = bytes[SPMF_HEADER..expected].chunks_exact(4).map(le_f32).collect();
    if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
        return Err(ImageIoError::NonFinitePixel(i));
    }
    Ok(ScanFrame::new(width, height, channel, scan_size, z_scale, pixels)?)
}

pub fn save_spmf(frame: &ScanFrame, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    fs::write(path, encode_spmf(frame))?;
    Ok(())
}

pub fn load_spmf(path: impl AsRef<Path>) -> Result<ScanFrame, ImageIoError> {
    decode_spmf(&fs::read(path)?)
}

/// Decoded PGM content: 16-bit files are frames, 8-bit files are masks.
#[derive(Debug, Clone, PartialEq)]
pub enum PgmImage {
    Frame(ScanFrame),
    Mask(MaskImage),
}

impl PgmImage {
    pub fn into_frame(self) -> Option<ScanFrame> {
        match self {
            PgmImage::Frame(f) => Some(f),
            PgmImage::Mask(_) => None,
        }
    }

    pub fn into_mask(self) -> Option<MaskImage> {
        match self {
            PgmImage::Mask(m) => Some(m),
            PgmImage::Frame(_) => None,
        }
    }
}

struct PgmHeader {
    width: u32,
    height: u32,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader, ImageIoError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(ImageIoError::HeaderParse("missing P5 signature".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' || c == b'\r' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageIoError::HeaderParse("header ended early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageIoError::HeaderParse(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageIoError::HeaderParse(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageIoError::HeaderParse("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageIoError::HeaderParse("zero dimension".into()));
    }
    Ok(PgmHeader {
        width,
        height,
        maxval,
        data_offset: pos,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmImage, ImageIoError> {
    let h = parse_pgm_header(bytes)?;
    let n = h.width as usize * h.height as usize;
    let data = &bytes[h.data_offset..];
    match h.maxval {
        65535 => {
            if data.len() < 2 * n {
                return Err(ImageIoError::TruncatedPayload {
                    expected: 2 * n,
                    found: data.len(),
                });
            }
            let pixels = data[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
                .collect();
            Ok(PgmImage::Frame(ScanFrame::new(h.width, h.height, Channel::Height, 1.0, 1.0, pixels)?))
        }
        255 => {
            if data.len() < n {
                return Err(ImageIoError::TruncatedPayload {
                    expected: n,
                    found: data.len(),
                });
            }
            let bits = data[..n].iter().map(|&v| v >= 128).collect();
            Ok(PgmImage::Mask(MaskImage::new(h.width, h.height, bits)?))
        }
        other => Err(ImageIoError::UnsupportedMaxval(other)),
    }
}

pub fn encode_pgm_frame(frame: &ScanFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", frame.width(), frame.height()).into_bytes();
    for &p in frame.pixels() {
        let v = (p as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_pgm_mask(mask: &MaskImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<PgmImage, ImageIoError> {
    decode_pgm(&fs::read(path)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage, ImageIoError> {
    match load_pgm(path)? {
        PgmImage::Mask(m) => Ok(m),
        PgmImage::Frame(_) => Err(ImageIoError::UnsupportedMaxval(65535)),
    }
}

pub fn save_pgm_frame(frame: &ScanFrame, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    fs::write(path, encode_pgm_frame(frame))?;
    Ok(())
}

pub fn save_mask(mask: &MaskImage, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    fs::write(path, encode_pgm_mask(mask))?;
    Ok(())
}

/// Loads a frame by extension: `.spmf` natively, `.pgm` as 16-bit PGM.
pub fn load_frame(path: impl AsRef<Path>) -> Result<ScanFrame, ImageIoError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        match load_pgm(path)? {
            PgmImage::Frame(f) => Ok(f),
            PgmImage::Mask(_) => Err(ImageIoError::UnsupportedMaxval(255)),
        }
    } else {
        load_spmf(path)
    }
}

pub fn save_frame(frame: &ScanFrame, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        save_pgm_frame(frame, path)
    } else {
        save_spmf(frame, path)
    }
}
