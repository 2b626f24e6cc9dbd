//! Binary PPM (P6, maxval 255) codec.

use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

fn parse_err(name: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: name.to_string(),
        location: format!("byte {offset}"),
        message: message.into(),
    }
}

/// Encodes an image, rounding each value to the nearest of 256 levels.
pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                let v = (image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    out
}

/// Decodes a P6 file; `name` only labels diagnostics.
pub fn decode(bytes: &[u8], name: &str) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(name, pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P6" {
        return Err(parse_err(name, 0, format!("expected magic P6, found {:?}", fields[0].1)));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse::<usize>()
            .map_err(|_| parse_err(name, fields[i].0, format!("invalid header number {:?}", fields[i].1)))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(parse_err(name, fields[3].0, format!("only maxval 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(name, fields[1].0, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(parse_err(
            name,
            bytes.len(),
            format!("raster truncated: need {need} bytes after offset {pos}"),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; need];
    let plane = width * height;
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(width, height, data)
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}
