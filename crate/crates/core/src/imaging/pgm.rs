//! 16-bit binary PGM (P5) storage with a per-file intensity scale.
//!
//! Stored sample `q` maps back to intensity `q * scale`; the scale is written
//! as a `# scale <value>` header comment.

use std::io::{Read, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

const MAXVAL: f64 = 65535.0;

pub fn encode(img: &Image) -> Vec<u8> {
    let max = img.max();
    let scale = if max > 0.0 && max.is_finite() {
        max / MAXVAL
    } else {
        1.0
    };
    let mut out = format!(
        "P5\n# scale {scale:e}\n{} {}\n65535\n",
        img.width, img.height
    )
    .into_bytes();
    out.reserve(img.data.len() * 2);
    for &v in &img.data {
        let q = (v / scale).round().clamp(0.0, MAXVAL) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

fn next_token(bytes: &[u8], pos: &mut usize, scale: &mut Option<f64>) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            let line = String::from_utf8_lossy(&bytes[start + 1..*pos]);
            let mut it = line.split_whitespace();
            if it.next() == Some("scale") {
                *scale = it.next().and_then(|s| s.parse().ok());
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
        return Err(Error::Parse("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a P5 image; returns the image (already multiplied by the scale) and the scale.
pub fn decode(bytes: &[u8]) -> Result<(Image, f64)> {
    let mut pos = 0;
    let mut scale = None;
    let magic = next_token(bytes, &mut pos, &mut scale)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("not a binary PGM (magic {magic})")));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse(format!("PGM header: {e}")))
    };
    let width = parse(next_token(bytes, &mut pos, &mut scale)?)?;
    let height = parse(next_token(bytes, &mut pos, &mut scale)?)?;
    let maxval = parse(next_token(bytes, &mut pos, &mut scale)?)?;
    pos += 1; // single whitespace after maxval
    let wide = maxval > 255;
    let bpp = if wide { 2 } else { 1 };
    let need = width * height * bpp;
    if bytes.len() < pos + need {
        return Err(Error::Parse("truncated PGM raster".into()));
    }
    let scale = scale.unwrap_or(1.0);
    let raster = &bytes[pos..pos + need];
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 * scale).collect()
    };
    Ok((
        Image {
            width,
            height,
            data,
        },
        scale,
    ))
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(decode(&buf)?.0)
}
