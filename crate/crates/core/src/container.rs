//! The "MBEV" tensor container.
//!
//! A file is a sequence of records. Each record is a 24-byte header of
//! little-endian `u32`s (`b"MBEV"`, version, h, w, c, tag) followed by
//! `h·w·c` little-endian `f32` values, channel-major (`[c][h][w]`).
//! For motion features `tag` is the frame index; for parameter files it is
//! the record's position in the documented layer order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::write_atomic;

pub const MAGIC: &[u8; 4] = b"MBEV";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub tag: u32,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(c: usize, h: usize, w: usize, tag: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Container(format!(
                "{} values for a {c}x{h}x{w} record",
                data.len()
            )));
        }
        Ok(Record {
            h: h as u32,
            w: w as u32,
            c: c as u32,
            tag,
            data,
        })
    }

    pub fn from_f64(c: usize, h: usize, w: usize, tag: u32, data: &[f64]) -> Result<Self> {
        Self::new(c, h, w, tag, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.h, self.w, self.c, self.tag] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        r.encode_into(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < HEADER_LEN {
            return Err(Error::Container(format!(
                "truncated header ({} bytes)",
                rest.len()
            )));
        }
        if &rest[..4] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(rest[4 * i..4 * i + 4].try_into().unwrap());
        let (version, h, w, c, tag) = (word(1), word(2), word(3), word(4), word(5));
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let n = (h as usize)
            .checked_mul(w as usize)
            .and_then(|v| v.checked_mul(c as usize))
            .ok_or_else(|| Error::Container("record size overflows".into()))?;
        let body = &rest[HEADER_LEN..];
        if body.len() < n * 4 {
            return Err(Error::Container(format!(
                "record declares {n} values, {} bytes remain",
                body.len()
            )));
        }
        let data = body[..n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(Record { h, w, c, tag, data });
        rest = &body[n * 4..];
    }
    Ok(records)
}

pub fn write_records(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(records))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
