//! Sectioned binary container with a trailing checksum.
//!
//! Byte layout, all integers little endian:
//!
//! ```text
//! magic    4 bytes
//! version  u16
//! section* each: u64 payload length, then payload bytes
//! crc      u32 over everything before it (magic through last section)
//! ```
//!
//! The checksum is CRC-32 (IEEE 802.3): reflected polynomial 0xEDB88320,
//! initial value 0xFFFFFFFF, final xor 0xFFFFFFFF. Readers verify magic,
//! version, and checksum before any section is handed out.

use crate::error::{Error, Result};

/// CRC-32 lookup table for the reflected IEEE polynomial.
fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-32 (IEEE 802.3) of `bytes`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
    }
    crc ^ 0xFFFF_FFFF
}

/// Serializes sections into the container layout.
pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: [u8; 4], version: u16) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    /// Appends one length-prefixed section.
    pub fn section(&mut self, payload: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self
    }

    /// Appends a section of little-endian f64 values.
    pub fn section_f64(&mut self, values: &[f64]) -> &mut Self {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.section(&payload)
    }

    /// Appends a section of little-endian u32 values.
    pub fn section_u32(&mut self, values: &[u32]) -> &mut Self {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.section(&payload)
    }

    /// Appends the checksum and returns the finished byte image.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Sequential reader over a verified container image.
#[derive(Debug)]
pub struct ContainerReader<'a> {
    data: &'a [u8],
    pos: usize,
    end: usize,
    version: u16,
}

impl<'a> ContainerReader<'a> {
    /// Verifies magic, version, and checksum, and positions the cursor at
    /// the first section.
    pub fn open(data: &'a [u8], magic: [u8; 4], max_version: u16) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Truncated { section: "magic" });
        }
        let found: [u8; 4] = data[..4].try_into().expect("length checked");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        if data.len() < 6 {
            return Err(Error::Truncated { section: "version" });
        }
        let version = u16::from_le_bytes(data[4..6].try_into().expect("length checked"));
        if version > max_version {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: max_version,
            });
        }
        if data.len() < 10 {
            return Err(Error::Truncated { section: "checksum" });
        }
        let body_end = data.len() - 4;
        let stored = u32::from_le_bytes(data[body_end..].try_into().expect("length checked"));
        let computed = crc32(&data[..body_end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(Self {
            data,
            pos: 6,
            end: body_end,
            version,
        })
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    /// Next raw section payload. `name` labels truncation errors.
    pub fn section(&mut self, name: &'static str) -> Result<&'a [u8]> {
        if self.pos + 8 > self.end {
            return Err(Error::Truncated { section: name });
        }
        let len = u64::from_le_bytes(
            self.data[self.pos..self.pos + 8]
                .try_into()
                .expect("length checked"),
        ) as usize;
        self.pos += 8;
        if self.pos + len > self.end {
            return Err(Error::Truncated { section: name });
        }
        let payload = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(payload)
    }

    /// Next section decoded as little-endian f64 values.
    pub fn section_f64(&mut self, name: &'static str) -> Result<Vec<f64>> {
        let payload = self.section(name)?;
        if payload.len() % 8 != 0 {
            return Err(Error::Truncated { section: name });
        }
        Ok(payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect())
    }

    /// Next section decoded as little-endian u32 values.
    pub fn section_u32(&mut self, name: &'static str) -> Result<Vec<u32>> {
        let payload = self.section(name)?;
        if payload.len() % 4 != 0 {
            return Err(Error::Truncated { section: name });
        }
        Ok(payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk is 4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: [u8; 4] = *b"TEST";

    #[test]
    fn crc32_known_answers() {
        // Standard check value of CRC-32/ISO-HDLC.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"a"), 0xE8B7_BE43);
    }

    #[test]
    fn sections_round_trip() {
        let mut writer = ContainerWriter::new(MAGIC, 3);
        writer.section(b"hello");
        writer.section_f64(&[1.5, -2.25, 0.0]);
        writer.section_u32(&[7, 8]);
        writer.section(b"");
        let bytes = writer.finish();

        let mut reader = ContainerReader::open(&bytes, MAGIC, 3).unwrap();
        assert_eq!(reader.version(), 3);
        assert_eq!(reader.section("text").unwrap(), b"hello");
        assert_eq!(reader.section_f64("floats").unwrap(), vec![1.5, -2.25, 0.0]);
        assert_eq!(reader.section_u32("ints").unwrap(), vec![7, 8]);
        assert_eq!(reader.section("empty").unwrap(), b"");
        assert!(matches!(
            reader.section("past-the-end"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = ContainerWriter::new(MAGIC, 1).finish();
        let err = ContainerReader::open(&bytes, *b"ELSE", 1).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn newer_version_is_rejected() {
        let bytes = ContainerWriter::new(MAGIC, 2).finish();
        let err = ContainerReader::open(&bytes, MAGIC, 1).unwrap_err();
        assert!(matches!(
            err,
            Error::UnsupportedVersion {
                found: 2,
                supported: 1
            }
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let mut writer = ContainerWriter::new(MAGIC, 1);
        writer.section_f64(&[3.25; 16]);
        let mut bytes = writer.finish();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = ContainerReader::open(&bytes, MAGIC, 1).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
    }

    #[test]
    fn truncation_is_detected() {
        let mut writer = ContainerWriter::new(MAGIC, 1);
        writer.section(b"payload");
        let bytes = writer.finish();
        for cut in [0, 3, 5, 9, bytes.len() - 5] {
            let err = ContainerReader::open(&bytes[..cut], MAGIC, 1).unwrap_err();
            assert!(
                matches!(err, Error::Truncated { .. } | Error::ChecksumMismatch { .. }),
                "cut {cut}: {err:?}"
            );
        }
    }
}
