//! Versioned binary model container and CSV export of part weights.
//!
//! Layout (little-endian): magic `PBMD`, u32 version (1); part bank as u32 m,
//! u32 window rows, u32 window cols, u32 channels, then `m × part_len` f32;
//! u32 flag for part weights, followed when set by u32 n, u32 m, u32 R and
//! `n × mR` f32; pooling grid as u32 R then per region f32 x0, y0, x1, y1 and
//! u32 layer; metadata as u32 count then length-prefixed UTF-8 key/value
//! pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{PartBank, PartWeights, PoolingGrid, Region};
use crate::error::{Error, ParseErrorKind, Result};
use crate::features::Window;

pub const MODEL_MAGIC: &[u8; 4] = b"PBMD";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub bank: PartBank,
    pub weights: Option<PartWeights>,
    pub grid: PoolingGrid,
    /// Provenance such as `whitening_hash`, `config_hash`, `stage`,
    /// `class_names`.
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_model<W: Write>(model: &ModelFile, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let bank = &model.bank;
    put_u32(&mut buf, bank.len());
    put_u32(&mut buf, bank.window().rows);
    put_u32(&mut buf, bank.window().cols);
    put_u32(&mut buf, bank.dim());
    for v in bank.to_flat() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match &model.weights {
        Some(u) => {
            put_u32(&mut buf, 1);
            put_u32(&mut buf, u.n_classes);
            put_u32(&mut buf, u.n_parts);
            put_u32(&mut buf, u.n_regions);
            for v in &u.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        None => put_u32(&mut buf, 0),
    }
    put_u32(&mut buf, model.grid.len());
    for r in &model.grid.regions {
        for v in [r.x0, r.y0, r.x1, r.y1] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, r.layer as usize);
    }
    put_u32(&mut buf, model.metadata.len());
    for (k, v) in &model.metadata {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
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
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or(Error::Parse {
            offset: self.pos,
            kind: ParseErrorKind::InvalidHeader("array too large".into()),
        })?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            kind: ParseErrorKind::InvalidHeader("metadata is not UTF-8".into()),
        })
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut rd = Reader { bytes, pos: 0 };
    let bad = |offset, s: &str| Error::Parse {
        offset,
        kind: ParseErrorKind::InvalidHeader(s.into()),
    };
    if rd.take(4).ok() != Some(&MODEL_MAGIC[..]) {
        return Err(Error::Parse {
            offset: 0,
            kind: ParseErrorKind::BadMagic,
        });
    }
    let version = rd.u32()?;
    if version != VERSION as usize {
        return Err(Error::Parse {
            offset: 4,
            kind: ParseErrorKind::UnsupportedVersion(version as u32),
        });
    }
    let at = rd.pos;
    let m = rd.u32()?;
    let window = Window::new(rd.u32()?, rd.u32()?);
    let dim = rd.u32()?;
    if m == 0 || window.cells() == 0 || dim == 0 {
        return Err(bad(at, "empty part bank"));
    }
    let flat = rd.f32s(m * window.cells() * dim)?;
    let bank = PartBank::from_flat(&flat, window, dim)?;
    let weights = match rd.u32()? {
        0 => None,
        1 => {
            let at = rd.pos;
            let (n, mp, r) = (rd.u32()?, rd.u32()?, rd.u32()?);
            if mp != m {
                return Err(bad(at, "part weights disagree with part bank size"));
            }
            Some(PartWeights::from_data(n, mp, r, rd.f32s(n * mp * r)?)?)
        }
        _ => return Err(bad(rd.pos - 4, "invalid weights flag")),
    };
    let n_regions = rd.u32()?;
    let mut regions = Vec::with_capacity(n_regions.min(1024));
    for _ in 0..n_regions {
        regions.push(Region {
            x0: rd.f32()?,
            y0: rd.f32()?,
            x1: rd.f32()?,
            y1: rd.f32()?,
            layer: rd.u32()? as u32,
        });
    }
    if let Some(u) = &weights {
        if u.n_regions != n_regions {
            return Err(bad(rd.pos, "part weights disagree with pooling grid"));
        }
    }
    let n_meta = rd.u32()?;
    let mut metadata = BTreeMap::new();
    for _ in 0..n_meta {
        let k = rd.string()?;
        let v = rd.string()?;
        metadata.insert(k, v);
    }
    if rd.pos != bytes.len() {
        return Err(bad(rd.pos, "trailing bytes"));
    }
    Ok(ModelFile {
        bank,
        weights,
        grid: PoolingGrid { regions },
        metadata,
    })
}

pub fn write_model_file(model: &ModelFile, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    read_model(&std::fs::read(path)?)
}

/// Writes `u` as CSV: a header `class,p0_r0,p0_r1,…` then one row per class.
pub fn write_weights_csv<W: Write>(u: &PartWeights, class_names: &[String], mut out: W) -> Result<()> {
    let mut header = String::from("class");
    for j in 0..u.n_parts {
        for r in 0..u.n_regions {
            header.push_str(&format!(",p{j}_r{r}"));
        }
    }
    writeln!(out, "{header}")?;
    for y in 0..u.n_classes {
        let name = class_names.get(y).cloned().unwrap_or_else(|| format!("class{y}"));
        let row: Vec<String> = u.row(y).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{name},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PartFilter;

    fn sample_model() -> ModelFile {
        let w = Window::new(2, 1);
        let parts = (0..3)
            .map(|j| PartFilter::new(vec![j as f64, 0.5, -1.25, 2.0], w, 2, j).unwrap())
            .collect();
        let bank = PartBank::new(parts).unwrap();
        let grid = PoolingGrid::default();
        let u = PartWeights::from_data(2, 3, 5, (0..30).map(|v| v as f64 * 0.25).collect()).unwrap();
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".into(), "joint".into());
        metadata.insert("config_hash".into(), "abc".into());
        ModelFile {
            bank,
            weights: Some(u),
            grid,
            metadata,
        }
    }

    #[test]
    fn model_round_trip() {
        let m = sample_model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&buf).unwrap(), m);

        let mut no_u = m.clone();
        no_u.weights = None;
        let mut buf = Vec::new();
        write_model(&no_u, &mut buf).unwrap();
        assert_eq!(read_model(&buf).unwrap(), no_u);
    }

    #[test]
    fn truncated_model_is_rejected() {
        let mut buf = Vec::new();
        write_model(&sample_model(), &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_model(&buf), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_shape() {
        let m = sample_model();
        let mut out = Vec::new();
        write_weights_csv(m.weights.as_ref().unwrap(), &["a".into(), "b".into()], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for l in &lines {
            assert_eq!(l.split(',').count(), 1 + 15);
        }
        assert!(lines[1].starts_with("a,"));
    }
}
