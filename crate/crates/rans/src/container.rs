//! The `JLLC` bitstream container.
//!
//! Layout (little-endian):
//!
//! | offset | size | field           |
//! |--------|------|-----------------|
//! | 0      | 4    | magic `"JLLC"`  |
//! | 4      | 1    | version         |
//! | 5      | 1    | quality index   |
//! | 6      | 4    | original height |
//! | 10     | 4    | original width  |
//! | 14     | 4    | z stream length |
//! | 18     | 4    | y stream length |
//! | 22     | ..   | z stream, then y stream |

use crate::{CoderError, Result};

pub const MAGIC: [u8; 4] = *b"JLLC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub version: u8,
    pub quality_index: u8,
    pub orig_h: u32,
    pub orig_w: u32,
    pub z_stream: Vec<u8>,
    pub y_stream: Vec<u8>,
}

impl Container {
    pub fn new(quality_index: u8, orig_h: u32, orig_w: u32, z_stream: Vec<u8>, y_stream: Vec<u8>) -> Self {
        Self {
            version: VERSION,
            quality_index,
            orig_h,
            orig_w,
            z_stream,
            y_stream,
        }
    }

    /// Total serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.z_stream.len() + self.y_stream.len()
    }

    /// Bits per pixel of the whole container relative to the original image size.
    pub fn bpp(&self) -> f64 {
        8.0 * self.byte_len() as f64 / (self.orig_h as f64 * self.orig_w as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.quality_index);
        out.extend_from_slice(&self.orig_h.to_le_bytes());
        out.extend_from_slice(&self.orig_w.to_le_bytes());
        out.extend_from_slice(&(self.z_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_stream);
        out.extend_from_slice(&self.y_stream);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CoderError::Format(format!(
                "container is {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(CoderError::Format("bad magic".into()));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(CoderError::Format(format!("unsupported version {version}")));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let (orig_h, orig_w) = (word(6), word(10));
        let (z_len, y_len) = (word(14) as usize, word(18) as usize);
        if bytes.len() != HEADER_LEN + z_len + y_len {
            return Err(CoderError::Format(format!(
                "declared payload {} bytes, found {}",
                z_len + y_len,
                bytes.len() - HEADER_LEN
            )));
        }
        if orig_h == 0 || orig_w == 0 {
            return Err(CoderError::Format("zero image dimension".into()));
        }
        Ok(Self {
            version,
            quality_index: bytes[5],
            orig_h,
            orig_w,
            z_stream: bytes[HEADER_LEN..HEADER_LEN + z_len].to_vec(),
            y_stream: bytes[HEADER_LEN + z_len..].to_vec(),
        })
    }
}
