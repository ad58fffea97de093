//! Little-endian binary feature grid files.
//!
//! Layout: magic `PBFP`, u32 version (1), u32 level count, then per level
//! u32 rows, u32 cols, u32 d, f32 scale followed by `rows * cols * d` f32
//! values in row-major cell order.

use std::io::Write;
use std::path::Path;

use super::{FeaturePyramid, Level};
use crate::error::{Error, ParseErrorKind, Result};

pub const PYRAMID_MAGIC: &[u8; 4] = b"PBFP";
const VERSION: u32 = 1;

pub fn write_pyramid<W: Write>(pyramid: &FeaturePyramid, mut out: W) -> Result<()> {
    out.write_all(PYRAMID_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(pyramid.levels.len() as u32).to_le_bytes())?;
    for level in &pyramid.levels {
        out.write_all(&(level.rows as u32).to_le_bytes())?;
        out.write_all(&(level.cols as u32).to_le_bytes())?;
        out.write_all(&(level.dim as u32).to_le_bytes())?;
        out.write_all(&level.scale.to_le_bytes())?;
        let mut buf = Vec::with_capacity(level.data.len() * 4);
        for v in &level.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                kind: ParseErrorKind::Truncated,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_pyramid(bytes: &[u8], source_id: &str) -> Result<FeaturePyramid> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(|_| bad_magic())? != PYRAMID_MAGIC {
        return Err(bad_magic());
    }
    let version_at = cur.pos;
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: version_at,
            kind: ParseErrorKind::UnsupportedVersion(version),
        });
    }
    let n_levels = cur.u32()? as usize;
    let mut levels: Vec<Level> = Vec::with_capacity(n_levels.min(64));
    for l in 0..n_levels {
        let header_at = cur.pos;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let dim_at = cur.pos;
        let dim = cur.u32()? as usize;
        let scale = cur.f32()?;
        if let Some(first) = levels.first() {
            if dim != first.dim {
                return Err(Error::Parse {
                    offset: dim_at,
                    kind: ParseErrorKind::InconsistentDimension {
                        level: l,
                        expected: first.dim,
                        actual: dim,
                    },
                });
            }
        }
        if !(scale.is_finite() && scale > 0.0) || levels.last().is_some_and(|p| scale >= p.scale) {
            return Err(Error::Parse {
                offset: header_at + 12,
                kind: ParseErrorKind::InvalidHeader(format!("level {l} has invalid scale {scale}")),
            });
        }
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(dim))
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or(Error::Parse {
                offset: header_at,
                kind: ParseErrorKind::InvalidHeader(format!("level {l} is too large")),
            })?;
        let raw = cur.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        levels.push(Level {
            rows,
            cols,
            dim,
            scale,
            data,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            offset: cur.pos,
            kind: ParseErrorKind::InvalidHeader("trailing bytes after last level".into()),
        });
    }
    let spo = match levels.as_slice() {
        [a, b, ..] => {
            let octaves = (a.scale as f64 / b.scale as f64).log2();
            ((1.0 / octaves).round() as u32).max(1)
        }
        _ => 1,
    };
    FeaturePyramid::new(levels, spo, source_id)
}

fn bad_magic() -> Error {
    Error::Parse {
        offset: 0,
        kind: ParseErrorKind::BadMagic,
    }
}

pub fn write_pyramid_file(pyramid: &FeaturePyramid, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pyramid(pyramid, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads `<dir>/<id>.pbfp`-style files; the file stem becomes the source id.
pub fn read_pyramid_file(path: &Path) -> Result<FeaturePyramid> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_pyramid(&bytes, &id)
}
