//! PFM depth maps, PPM/PGM images and the plain-text dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{DataError, Source};
use crate::tensor::Tensor;

/// Pull the next whitespace-separated header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, DataError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::MalformedHeader("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| DataError::MalformedHeader("non-ASCII header".into()))
}

fn parse_dim(tok: &str) -> Result<usize, DataError> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(DataError::MalformedHeader(format!("bad dimension {tok:?}"))),
    }
}

/// Write a single-channel `Pf` file: little-endian (scale -1.0), rows stored
/// bottom to top. Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
pub fn write_pfm(path: impl AsRef<Path>, grid: &Tensor<f32>) -> Result<(), DataError> {
    let (h, w) = plane_dims(grid)?;
    let mut out = Vec::with_capacity(32 + h * w * 4);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for row in (0..h).rev() {
        for &v in &grid.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a single-channel `Pf` file into `[1, H, W]`, top row first.
/// Positive scale means big-endian payload.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>, DataError> {
    decode_pfm(&fs::read(path)?)
}

pub(crate) fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let mut pos = 0;
    match header_token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(DataError::MalformedHeader("colour PFM is not supported".into())),
        other => return Err(DataError::MalformedHeader(format!("bad PFM magic {other:?}"))),
    }
    let w = parse_dim(header_token(bytes, &mut pos)?)?;
    let h = parse_dim(header_token(bytes, &mut pos)?)?;
    let scale: f32 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::MalformedHeader("bad PFM scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(DataError::MalformedHeader(format!("bad PFM scale {scale}")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != h * w * 4 {
        return Err(DataError::MalformedHeader(format!(
            "expected {} payload bytes, found {}",
            h * w * 4,
            payload.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; h * w];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / w, i % w);
        data[(h - 1 - file_row) * w + col] = v;
    }
    Ok(Tensor::new(vec![1, h, w], data).expect("pfm shape"))
}

fn plane_dims(t: &Tensor<f32>) -> Result<(usize, usize), DataError> {
    match t.shape() {
        &[h, w] | &[1, h, w] | &[1, 1, h, w] => Ok((h, w)),
        s => Err(DataError::ShapeMismatch(format!("expected a single plane, got {s:?}"))),
    }
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_byte(b: u8, maxval: u32) -> f32 {
    f32::from(b) / maxval as f32 * 2.0 - 1.0
}

/// Write a `[C, H, W]` image in `[-1, 1]` as binary `P6`. One channel is
/// replicated to gray RGB.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<(), DataError> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(DataError::ShapeMismatch(format!("image {s:?}: need [1|3, H, W]"))),
    };
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let hw = h * w;
    for i in 0..hw {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(to_byte(image.data()[src * hw + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read binary `P6` (returns 3 channels, or 1 when `gray` is set and the
/// channels are averaged) or `P5` (1 channel) into `[-1, 1]`.
pub fn read_ppm(path: impl AsRef<Path>, gray: bool) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path)?;
    let (channels, w, h, maxval, payload) = decode_netpbm(&bytes)?;
    let hw = h * w;
    let mut planes = vec![0.0f32; channels * hw];
    for i in 0..hw {
        for ch in 0..channels {
            planes[ch * hw + i] = from_byte(payload[i * channels + ch], maxval);
        }
    }
    if channels == 3 && gray {
        let avg = (0..hw)
            .map(|i| (planes[i] + planes[hw + i] + planes[2 * hw + i]) / 3.0)
            .collect();
        return Ok(Tensor::new(vec![1, h, w], avg).expect("gray shape"));
    }
    Ok(Tensor::new(vec![channels, h, w], planes).expect("image shape"))
}

fn decode_netpbm(bytes: &[u8]) -> Result<(usize, usize, usize, u32, &[u8]), DataError> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "P6" => 3,
        "P5" => 1,
        other => return Err(DataError::MalformedHeader(format!("unsupported netpbm magic {other:?}"))),
    };
    let w = parse_dim(header_token(bytes, &mut pos)?)?;
    let h = parse_dim(header_token(bytes, &mut pos)?)?;
    let maxval: u32 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::MalformedHeader("bad maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(DataError::MalformedHeader(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    pos += 1;
    let need = channels * w * h;
    match bytes.get(pos..pos + need) {
        Some(p) => Ok((channels, w, h, maxval, p)),
        None => Err(DataError::MalformedHeader("truncated pixel data".into())),
    }
}

/// Write a boolean mask as binary `P5` (0 / 255).
pub fn write_pgm_mask(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<(), DataError> {
    if mask.len() != height * width {
        return Err(DataError::ShapeMismatch("mask length".into()));
    }
    let mut out = Vec::with_capacity(20 + mask.len());
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

/// Read a `P5` mask; any non-zero byte is `true`. Returns `(height, width, mask)`.
pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>), DataError> {
    let bytes = fs::read(path)?;
    let (channels, w, h, _, payload) = decode_netpbm(&bytes)?;
    if channels != 1 {
        return Err(DataError::MalformedHeader("mask must be P5".into()));
    }
    Ok((h, w, payload.iter().map(|&b| b != 0).collect()))
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub source: Source,
}

/// Parse `<image_path> <depth_path> <source_tag>` lines. Relative paths are
/// resolved against the manifest's directory; blank lines and `#` comments
/// are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, DataError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let bad = |reason: String| DataError::MalformedManifest { line: i + 1, reason };
        let [image, depth, tag] = fields.as_slice() else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let source = Source::parse(tag).ok_or_else(|| bad(format!("unknown source tag {tag:?}")))?;
        out.push(ManifestRecord {
            image: base.join(image),
            depth: base.join(depth),
            source,
        });
    }
    Ok(out)
}

/// Write records with paths relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        out.push_str(&format!("{} {} {}\n", rel(&r.image), rel(&r.depth), r.source.tag()));
    }
    fs::write(path, out)?;
    Ok(())
}
