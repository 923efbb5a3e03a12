//! Binary feature files.
//!
//! ```text
//! header (12 bytes): "HATF" | version: u16 | modality: u16 | item count: u32
//! per item:          level count: u32
//! per level:         token count: u32 | dim: u32 | tokens·dim f64 values, row-major
//! ```
//!
//! Little-endian throughout, no padding. The reader rejects anything that
//! does not match the declared lengths exactly, including trailing bytes.

use std::path::Path;

use super::write_atomic;
use crate::encoders::LevelledFeatures;
use crate::error::{Error, ParseErrorKind, Result};
use crate::tensor::Mat;

pub const FEATURE_MAGIC: &[u8; 4] = b"HATF";
pub const FEATURE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureModality {
    /// Projected image token features.
    Image,
    /// Projected word features.
    Text,
    /// Raw patch-token grids (one level per item).
    PatchGrid,
}

impl FeatureModality {
    fn tag(self) -> u16 {
        match self {
            Self::Image => 0,
            Self::Text => 1,
            Self::PatchGrid => 2,
        }
    }

    fn from_tag(tag: u16) -> Option<Self> {
        match tag {
            0 => Some(Self::Image),
            1 => Some(Self::Text),
            2 => Some(Self::PatchGrid),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub modality: FeatureModality,
    pub items: Vec<LevelledFeatures>,
}

impl FeatureFile {
    pub fn new(modality: FeatureModality, items: Vec<LevelledFeatures>) -> Self {
        Self { modality, items }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.modality.tag().to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for item in &self.items {
            out.extend_from_slice(&(item.levels.len() as u32).to_le_bytes());
            for level in &item.levels {
                out.extend_from_slice(&(level.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(level.cols() as u32).to_le_bytes());
                for v in level.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            if bytes.len() < 4 && FEATURE_MAGIC.starts_with(bytes) {
                return Err(r.truncated(4));
            }
            return Err(Error::Parse {
                offset: 0,
                kind: ParseErrorKind::BadMagic,
            });
        }
        r.pos = 4;
        let version_at = r.pos;
        let version = r.u16()?;
        if version != FEATURE_VERSION {
            return Err(Error::Parse {
                offset: version_at,
                kind: ParseErrorKind::UnsupportedVersion(version as u32),
            });
        }
        let modality_at = r.pos;
        let tag = r.u16()?;
        let modality = FeatureModality::from_tag(tag).ok_or(Error::Parse {
            offset: modality_at,
            kind: ParseErrorKind::UnknownModality(tag),
        })?;
        let count = r.u32()? as usize;
        // every item needs at least its 4-byte level count
        let mut items = Vec::with_capacity(count.min(r.remaining() / 4));
        for _ in 0..count {
            let num_levels = r.u32()? as usize;
            let mut levels = Vec::with_capacity(num_levels.min(r.remaining() / 8));
            for _ in 0..num_levels {
                let dims_at = r.pos;
                let tokens = r.u32()? as usize;
                let dim = r.u32()? as usize;
                let n = tokens.checked_mul(dim).ok_or_else(|| Error::Parse {
                    offset: dims_at,
                    kind: ParseErrorKind::LengthInconsistent(format!("{tokens}x{dim} overflows")),
                })?;
                let nbytes = n.checked_mul(8).ok_or_else(|| Error::Parse {
                    offset: dims_at,
                    kind: ParseErrorKind::LengthInconsistent(format!("{tokens}x{dim} overflows")),
                })?;
                let raw = r.take(nbytes)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                levels.push(Mat::new(tokens, dim, data)?);
            }
            items.push(LevelledFeatures::new(levels));
        }
        if r.remaining() != 0 {
            return Err(Error::Parse {
                offset: r.pos,
                kind: ParseErrorKind::TrailingBytes(r.remaining()),
            });
        }
        Ok(Self { modality, items })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn truncated(&self, needed: usize) -> Error {
        Error::Parse {
            offset: self.pos,
            kind: ParseErrorKind::Truncated {
                needed,
                available: self.remaining(),
            },
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.truncated(n));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_features(path: &Path, file: &FeatureFile) -> Result<()> {
    write_atomic(path, &file.to_bytes())
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes)
}
