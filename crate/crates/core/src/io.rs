//! Binary feature/mask files, the crop-geometry sidecar and atomic writes.
//!
//! Layout shared by both binary formats (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic (`CROCFEAT` or `CROCMASK`) |
//! | 8 | 4 | version (`1`) |
//! | 12 | 4 | rows (tokens or mask height) |
//! | 16 | 4 | columns (feature dimension or mask width) |
//! | 20 | .. | row-major payload: `f32` features or `u16` labels |

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{CropGeometry, FeatureMatrix};
use crate::segeval::LabelMask;
use crate::synth::SynthPair;

pub const FEATURE_MAGIC: &[u8; 8] = b"CROCFEAT";
pub const MASK_MAGIC: &[u8; 8] = b"CROCMASK";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

struct Header {
    rows: u32,
    cols: u32,
}

fn encode_header(magic: &[u8; 8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let r = u32::try_from(rows).map_err(|_| Error::Input(format!("{rows} rows exceed the u32 header field")))?;
    let c = u32::try_from(cols).map_err(|_| Error::Input(format!("{cols} columns exceed the u32 header field")))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().expect("4 bytes"))),
        None => Err(Error::Truncated {
            what,
            offset: offset as u64,
            expected: 4,
            found: bytes.len().saturating_sub(offset) as u64,
        }),
    }
}

fn decode_header(bytes: &[u8], magic: &[u8; 8]) -> Result<Header> {
    let head = &bytes[..bytes.len().min(8)];
    if head != &magic[..head.len()] {
        return Err(Error::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(head).into_owned(),
        });
    }
    if head.len() < 8 {
        return Err(Error::Truncated {
            what: "magic",
            offset: 0,
            expected: 8,
            found: head.len() as u64,
        });
    }
    let version = u32_at(bytes, 8, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            offset: 8,
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(Header {
        rows: u32_at(bytes, 12, "row count")?,
        cols: u32_at(bytes, 16, "column count")?,
    })
}

fn payload(bytes: &[u8], rows: u32, cols: u32, elem: u64) -> Result<&[u8]> {
    let expected = rows as u64 * cols as u64 * elem;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::Truncated {
            what: "payload",
            offset: HEADER_LEN as u64,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingData {
            offset: HEADER_LEN as u64 + expected,
            extra: found - expected,
        });
    }
    Ok(&bytes[HEADER_LEN..])
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let (rows, cols) = m.dim();
    let mut out = encode_header(FEATURE_MAGIC, rows, cols)?;
    out.reserve(rows * cols * 4);
    for v in m.view().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let h = decode_header(bytes, FEATURE_MAGIC)?;
    let body = payload(bytes, h.rows, h.cols, 4)?;
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let arr =
        Array2::from_shape_vec((h.rows as usize, h.cols as usize), data).map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMatrix::new(arr)
}

pub fn encode_mask(m: &LabelMask) -> Result<Vec<u8>> {
    let mut out = encode_header(MASK_MAGIC, m.height(), m.width())?;
    out.reserve(m.len() * 2);
    for v in m.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask> {
    let h = decode_header(bytes, MASK_MAGIC)?;
    let body = payload(bytes, h.rows, h.cols, 2)?;
    let labels = body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    LabelMask::new(h.rows as usize, h.cols as usize, labels)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    decode_mask(&fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write_atomic(path, &encode_mask(m)?)
}

/// Stores an `f64` matrix (assignments, projection weights) as features.
pub fn matrix_to_features(m: &Array2<f64>) -> Result<FeatureMatrix> {
    FeatureMatrix::new(m.mapv(|v| v as f32))
}

/// Parses the single-line sidecar `x0 y0 w h grid_n hflip`, where `hflip`
/// is `0`/`1` or `false`/`true`.
pub fn parse_geometry(text: &str) -> Result<CropGeometry> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (idx, line) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "geometry sidecar is empty".into(),
    })?;
    let line_no = idx + 1;
    if let Some((extra, _)) = lines.next() {
        return Err(Error::Parse {
            line: extra + 1,
            msg: "geometry sidecar must hold a single line".into(),
        });
    }
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 6 fields (x0 y0 w h grid_n hflip), found {}", fields.len()),
        });
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        fields[i].parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("{name} is not a number: {:?}", fields[i]),
        })
    };
    let grid_n = fields[4].parse::<usize>().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("grid_n is not a positive integer: {:?}", fields[4]),
    })?;
    let hflip = match fields[5] {
        "0" | "false" => false,
        "1" | "true" => true,
        other => {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("hflip must be 0/1/false/true, found {other:?}"),
            })
        }
    };
    CropGeometry::new(num(0, "x0")?, num(1, "y0")?, num(2, "w")?, num(3, "h")?, grid_n, hflip)
}

pub fn format_geometry(g: &CropGeometry) -> String {
    format!(
        "{} {} {} {} {} {}\n",
        g.x0,
        g.y0,
        g.width,
        g.height,
        g.grid_n,
        u8::from(g.hflip)
    )
}

pub fn read_geometry(path: &Path) -> Result<CropGeometry> {
    parse_geometry(&fs::read_to_string(path)?)
}

pub fn write_geometry(path: &Path, g: &CropGeometry) -> Result<()> {
    write_atomic(path, format_geometry(g).as_bytes())
}

/// File names written by [`write_synth`].
pub mod synth_files {
    pub const FEATURES_A: &str = "view_a.feat";
    pub const FEATURES_B: &str = "view_b.feat";
    /// `2N x 1` attention weights.
    pub const ATTENTION: &str = "attention.feat";
    pub const GEOM_A: &str = "geom_a.txt";
    pub const GEOM_B: &str = "geom_b.txt";
    /// `2 grid_n x grid_n` labels: view 1 rows followed by view 2 rows, so the
    /// mask lines up with the joint token order.
    pub const LABELS: &str = "labels.mask";
}

/// Writes both views, the attention marginal, the crop sidecars and the
/// joint ground-truth labels into `dir` (created if missing).
pub fn write_synth(dir: &Path, s: &SynthPair) -> Result<()> {
    use synth_files::*;
    fs::create_dir_all(dir)?;
    write_features(&dir.join(FEATURES_A), &s.view1)?;
    write_features(&dir.join(FEATURES_B), &s.view2)?;
    let w = s.pair.marginal.weights();
    let attn = Array2::from_shape_fn((w.len(), 1), |(i, _)| w[i]);
    write_features(&dir.join(ATTENTION), &matrix_to_features(&attn)?)?;
    write_geometry(&dir.join(GEOM_A), &s.geom1)?;
    write_geometry(&dir.join(GEOM_B), &s.geom2)?;
    let labels = s
        .labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| Error::Input(format!("label {l} exceeds u16"))))
        .collect::<Result<Vec<u16>>>()?;
    let g = s.grid_n();
    write_mask(&dir.join(LABELS), &LabelMask::new(2 * g, g, labels)?)
}
