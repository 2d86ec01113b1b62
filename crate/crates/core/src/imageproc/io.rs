//! Binary PGM (P5) and grayscale PNG. Samples are divided by the maximum of
//! their storage type (255 or 65535).

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P5".as_slice()) {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad PGM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let data: Vec<f64> = if maxval < 256 {
        if raster.len() < n {
            return Err(format_err(path, "truncated PGM raster"));
        }
        raster[..n].iter().map(|&b| b as f64 / 255.0).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(format_err(path, "truncated PGM raster"));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect()
    };
    GrayImage::new(w, h, data)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

/// 8-bit P5; values are clamped to [0, 1] and rounded.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Grayscale or gray+alpha PNG (alpha is dropped); colour images are refused.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(format_err(path, format!("expected grayscale PNG, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let px: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => data
            .chunks_exact(2 * channels)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        _ => data
            .chunks_exact(channels)
            .map(|c| c[0] as f64 / 255.0)
            .collect(),
    };
    GrayImage::new(w, h, px)
}

/// Dispatches on the file extension (`.pgm` or `.png`).
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(format_err(path, "unsupported image extension")),
    }
}
