//! The `FCMH` container: fixed header plus length-prefixed payload sections.
//!
//! ```text
//! "FCMH" | version u8 | flags u8 | s f32 | c_min f32 | c_max f32
//! | image H u16 | image W u16 | latent C,H,W u16 x3
//! | u32 len + hyper payload | u32 len + main payload
//! | [u32 len + color payload, when flags bit 0 is set]
//! ```
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::params::ByteReader;

pub const MAGIC: &[u8; 4] = b"FCMH";
pub const VERSION: u8 = 1;
pub const FLAG_HUMAN: u8 = 1;
/// Bytes before the first section.
pub const HEADER_BYTES: usize = 4 + 1 + 1 + 12 + 4 + 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub s: f32,
    pub c_min: f32,
    pub c_max: f32,
    pub image_hw: (u16, u16),
    pub latent_dims: (u16, u16, u16),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
    pub color: Option<Vec<u8>>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if self.color.is_some() { FLAG_HUMAN } else { 0 });
        for v in [h.s, h.c_min, h.c_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [h.image_hw.0, h.image_hw.1, h.latent_dims.0, h.latent_dims.1, h.latent_dims.2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sections = [Some(&self.hyper), Some(&self.main), self.color.as_ref()];
        for (name, sec) in ["hyper", "main", "color"].iter().zip(sections) {
            if let Some(bytes) = sec {
                let len = u32::try_from(bytes.len())
                    .map_err(|_| Error::Encode(format!("{name} section exceeds u32 length")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES
            + 8
            + self.hyper.len()
            + self.main.len()
            + self.color.as_ref().map_or(0, |c| 4 + c.len())
    }

    /// Total size in bits, header included.
    pub fn bits(&self) -> usize {
        self.byte_len() * 8
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FCMH\"")));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_HUMAN != 0 {
            return Err(Error::format(5, format!("unknown flag bits {flags:#04x}")));
        }
        let header = Header {
            s: r.f32("scale factor")?,
            c_min: r.f32("c_min")?,
            c_max: r.f32("c_max")?,
            image_hw: (r.u16("image height")?, r.u16("image width")?),
            latent_dims: (r.u16("latent C")?, r.u16("latent H")?, r.u16("latent W")?),
        };
        let mut section = |name: &str| -> Result<Vec<u8>> {
            let at = bytes.len() - r.remaining();
            let len = r.u32(&format!("{name} section length"))? as usize;
            if len > r.remaining() {
                return Err(Error::format(
                    at,
                    format!("{name} section claims {len} bytes, {} remain", r.remaining()),
                ));
            }
            Ok(r.take(len, name)?.to_vec())
        };
        let hyper = section("hyper")?;
        let main = section("main")?;
        let color = if flags & FLAG_HUMAN != 0 {
            Some(section("color")?)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::format(
                bytes.len() - r.remaining(),
                format!("{} trailing bytes after last section", r.remaining()),
            ));
        }
        Ok(Bitstream {
            header,
            hyper,
            main,
            color,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(color: bool) -> Bitstream {
        Bitstream {
            header: Header {
                s: 0.8,
                c_min: -1.25,
                c_max: 3.5,
                image_hw: (64, 64),
                latent_dims: (48, 8, 8),
            },
            hyper: vec![1, 2, 3],
            main: (0..200).map(|i| i as u8).collect(),
            color: color.then(|| vec![9; 17]),
        }
    }

    #[test]
    fn round_trip_with_and_without_color() {
        for color in [false, true] {
            let b = sample(color);
            let bytes = b.to_bytes().unwrap();
            assert_eq!(bytes.len(), b.byte_len());
            assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample(false).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FCMH");
        assert_eq!(bytes[4], VERSION);
        assert_eq!(bytes[5], 0);
        assert_eq!(f32::from_le_bytes(bytes[6..10].try_into().unwrap()), 0.8);
        assert_eq!(u16::from_le_bytes(bytes[18..20].try_into().unwrap()), 64);
        assert_eq!(u16::from_le_bytes(bytes[22..24].try_into().unwrap()), 48);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 3);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample(true).to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Bitstream::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn oversized_section_names_the_section() {
        let mut bytes = sample(false).to_bytes().unwrap();
        let at = HEADER_BYTES + 4 + 3;
        bytes[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = Bitstream::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("main"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
