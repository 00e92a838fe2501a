//! Binary container shared by model bundles and window stores.
//!
//! ```text
//! magic        8 bytes
//! version      u32 LE
//! header       u32 LE byte length + UTF-8 TOML text
//! records*     u32 LE name length + name
//!              u32 LE rank, rank x u32 LE extents
//!              product(extents) x f32 LE
//! checksum     u64 LE, first 8 bytes of SHA-256 over everything before it
//! ```

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32, header: &str) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        Self { buf }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.buf
            .extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf
            .extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a container. Checks run in order: magic, version, structure
/// (truncation), checksum.
pub fn read(bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<(String, Vec<Record>)> {
    let expected_magic = || Error::BadMagic {
        expected: String::from_utf8_lossy(magic).into_owned(),
    };
    if bytes.len() < 8 {
        return if magic.starts_with(bytes) {
            Err(Error::Truncated("magic".into()))
        } else {
            Err(expected_magic())
        };
    }
    if &bytes[..8] != magic {
        return Err(expected_magic());
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("version".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    if bytes.len() < 12 + 4 + 8 {
        return Err(Error::Truncated("header".into()));
    }
    let body_end = bytes.len() - 8;
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 12,
    };
    let hlen = cur.u32("header length")? as usize;
    let header = cur.take(hlen, "header")?;
    let mut records = Vec::new();
    while cur.pos < body_end {
        let nlen = cur.u32("record name length")? as usize;
        let name = cur.take(nlen, "record name")?;
        let rank = cur.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("record extent")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Malformed("tensor extent overflow".into()))?;
        let payload_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed("tensor extent overflow".into()))?;
        let payload = cur.take(payload_len, "record payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, data));
    }
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header = String::from_utf8(header.to_vec())
        .map_err(|_| Error::Malformed("header is not UTF-8".into()))?;
    let records = records
        .into_iter()
        .map(|(name, shape, data)| {
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?;
            Ok(Record { name, shape, data })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
