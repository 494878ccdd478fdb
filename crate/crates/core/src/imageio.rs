//! Netpbm-family dumps of rendered views: PFM depth, PGM class ids and a
//! paletted PPM preview.

use std::path::Path;

use crate::error::{Error, Result};

/// Names of the 17 default classes; index 0 is air.
pub const CLASS_NAMES: [&str; 17] = [
    "air",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

/// Fixed RGB palette used for class previews, indexed by class id.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [255, 120, 50],
    [255, 192, 203],
    [255, 255, 0],
    [0, 150, 245],
    [0, 255, 255],
    [200, 180, 0],
    [255, 0, 0],
    [255, 240, 150],
    [135, 60, 0],
    [160, 32, 240],
    [255, 0, 255],
    [139, 137, 137],
    [75, 0, 75],
    [150, 240, 80],
    [230, 230, 250],
    [0, 175, 0],
];

/// Little-endian single-channel PFM (`Pf`, scale -1.0). Rows are written
/// bottom-to-top as the format requires.
pub fn encode_pfm(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), width * height);
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_pfm`]; returns `(width, height, top-to-bottom rows)`.
pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (header, body) = split_header(bytes, 3)?;
    if header[0] != "Pf" {
        return Err(Error::CorruptHeader(format!("PFM magic {:?}", header[0])));
    }
    let (w, h) = parse_dims(&header[1])?;
    let scale: f32 = header[2]
        .parse()
        .map_err(|_| Error::CorruptHeader("PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::CorruptHeader("only little-endian PFM is supported".into()));
    }
    let need = w * h * 4;
    if body.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            found: body.len(),
        });
    }
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in body[..need].chunks_exact(4).enumerate() {
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((w, h, data))
}

/// Binary PGM (P5) of class ids with `maxval = class_count - 1`.
pub fn encode_pgm(width: usize, height: usize, labels: &[u8], class_count: usize) -> Vec<u8> {
    assert_eq!(labels.len(), width * height);
    let maxval = class_count.saturating_sub(1).max(1);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(labels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (header, body) = split_header(bytes, 3)?;
    if header[0] != "P5" {
        return Err(Error::CorruptHeader(format!("PGM magic {:?}", header[0])));
    }
    let (w, h) = parse_dims(&header[1])?;
    if body.len() < w * h {
        return Err(Error::TruncatedPayload {
            expected: w * h,
            found: body.len(),
        });
    }
    Ok((w, h, body[..w * h].to_vec()))
}

/// Binary PPM (P6) with the fixed class palette. Unknown ids render white.
pub fn encode_ppm(width: usize, height: usize, labels: &[u8]) -> Vec<u8> {
    assert_eq!(labels.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for l in labels {
        out.extend_from_slice(PALETTE.get(*l as usize).unwrap_or(&[255, 255, 255]));
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8], lines: usize) -> Result<(Vec<String>, &[u8])> {
    let mut header = Vec::with_capacity(lines);
    let mut pos = 0;
    while header.len() < lines {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::CorruptHeader("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::CorruptHeader("non-ASCII header".into()))?;
        header.push(line.trim().to_string());
        pos += end + 1;
    }
    Ok((header, &bytes[pos..]))
}

fn parse_dims(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(Error::CorruptHeader(format!("bad dimensions {line:?}"))),
    }
}
