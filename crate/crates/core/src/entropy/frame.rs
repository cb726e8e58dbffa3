//! `.smfc` container: fixed header, per-view latent table, range-coded
//! payloads and a trailing CRC32. All integers are little-endian.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::smfc::Variant;

pub const MAGIC: &[u8; 4] = b"SMFC";
pub const VERSION: u8 = 1;
/// Pyramid levels merged into each coded latent.
pub const SCALES: u8 = 3;
const FIXED_HEADER: usize = 4 + 4 + 16 + 4 + 1;
const ENTRY: usize = 2 + 2 + 2 + 4;

/// Per-frame metadata carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameMeta {
    pub variant: Variant,
    pub lambda_index: u8,
    pub width: u16,
    pub height: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedFrame {
    pub meta: FrameMeta,
    pub model_hash: [u8; 16],
    /// `[C, H, W]` of the left and right latents.
    pub shapes: [[u16; 3]; 2],
    pub payloads: [Vec<u8>; 2],
}

impl CodedFrame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(FIXED_HEADER + 2 * ENTRY + self.payload_bytes() + 4);
        b.extend_from_slice(MAGIC);
        b.push(VERSION);
        b.push(self.meta.variant.code());
        b.push(self.meta.lambda_index);
        b.push(0);
        b.extend_from_slice(&self.model_hash);
        b.write_u16::<LittleEndian>(self.meta.width).expect("vec write");
        b.write_u16::<LittleEndian>(self.meta.height).expect("vec write");
        b.push(SCALES);
        for (shape, payload) in self.shapes.iter().zip(&self.payloads) {
            for &d in shape {
                b.write_u16::<LittleEndian>(d).expect("vec write");
            }
            b.write_u32::<LittleEndian>(payload.len() as u32).expect("vec write");
        }
        for p in &self.payloads {
            b.extend_from_slice(p);
        }
        let crc = crc32fast::hash(&b[4..]);
        b.write_u32::<LittleEndian>(crc).expect("vec write");
        b
    }

    /// Parses and verifies a frame. Checks run in order: magic, declared
    /// lengths against the buffer, checksum, then version and variant.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Corruption("missing SMFC magic".into()));
        }
        let table_end = FIXED_HEADER + 2 * ENTRY;
        if bytes.len() < table_end + 4 {
            return Err(Error::Truncation(format!(
                "frame of {} bytes is shorter than its {}-byte header",
                bytes.len(),
                table_end + 4
            )));
        }
        let mut r = Cursor::new(&bytes[4..]);
        let version = r.read_u8()?;
        let variant = r.read_u8()?;
        let lambda_index = r.read_u8()?;
        let _reserved = r.read_u8()?;
        let mut model_hash = [0u8; 16];
        r.read_exact(&mut model_hash)?;
        let width = r.read_u16::<LittleEndian>()?;
        let height = r.read_u16::<LittleEndian>()?;
        let scales = r.read_u8()?;
        let mut shapes = [[0u16; 3]; 2];
        let mut lens = [0usize; 2];
        for v in 0..2 {
            for d in 0..3 {
                shapes[v][d] = r.read_u16::<LittleEndian>()?;
            }
            lens[v] = r.read_u32::<LittleEndian>()? as usize;
        }
        let expected = table_end + lens[0] + lens[1] + 4;
        if bytes.len() < expected {
            return Err(Error::Truncation(format!(
                "frame declares {expected} bytes but holds {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - expected
            )));
        }
        let body = &bytes[..expected - 4];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(&body[4..]) != stored {
            return Err(Error::Corruption("frame checksum mismatch".into()));
        }
        if version != VERSION {
            return Err(Error::Versioning(format!(
                "frame version {version}, this build reads {VERSION}"
            )));
        }
        if scales != SCALES {
            return Err(Error::Versioning(format!(
                "frame declares {scales} scales, expected {SCALES}"
            )));
        }
        let variant = Variant::from_code(variant)?;
        let p0 = table_end;
        let p1 = p0 + lens[0];
        Ok(Self {
            meta: FrameMeta {
                variant,
                lambda_index,
                width,
                height,
            },
            model_hash,
            shapes,
            payloads: [bytes[p0..p1].to_vec(), bytes[p1..p1 + lens[1]].to_vec()],
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }
}
