//! Portable FloatMap codec: raw 32-bit float images with a three-token
//! header (magic, width/height, scale). The sign of the scale encodes
//! endianness (negative = little), its magnitude is a value multiplier, and
//! rows are stored bottom-up. Round trips are bit-exact for finite values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{HdrImage, SourceFormat};

/// Reads a PFM image from raw bytes. `PF` (color) stores three floats per
/// pixel; `Pf` (grayscale) is replicated across RGB.
pub fn read_pfm(bytes: &[u8]) -> Result<HdrImage> {
    read_impl(bytes).map_err(|msg| Error::codec("<memory>", msg))
}

/// Reads a PFM image from a file.
pub fn read_pfm_file(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_impl(&bytes).map_err(|msg| Error::codec(path, msg))
}

fn read_impl(bytes: &[u8]) -> std::result::Result<HdrImage, String> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("bad magic {other:?}; expected PF or Pf")),
    };
    let width: usize = token(bytes, &mut pos)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(bytes, &mut pos)?.parse().map_err(|_| "bad height".to_string())?;
    let scale: f32 = token(bytes, &mut pos)?.parse().map_err(|_| "bad scale".to_string())?;
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("scale must be finite and nonzero, got {scale}"));
    }
    let little_endian = scale < 0.0;
    let gain = scale.abs();

    let count = width * height * channels;
    if bytes.len() - pos < count * 4 {
        return Err(format!(
            "truncated payload: need {} bytes, have {}",
            count * 4,
            bytes.len() - pos
        ));
    }
    let mut data = vec![0.0f32; width * height * 3];
    for row in 0..height {
        // Rows are stored bottom-up.
        let y = height - 1 - row;
        for x in 0..width {
            let mut rgb = [0.0f32; 3];
            for (c, slot) in rgb.iter_mut().enumerate().take(channels) {
                let at = pos + ((row * width + x) * channels + c) * 4;
                let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                *slot = v * gain;
            }
            if channels == 1 {
                rgb = [rgb[0]; 3];
            }
            let i = (y * width + x) * 3;
            data[i..i + 3].copy_from_slice(&rgb);
        }
    }
    HdrImage::new(width, height, SourceFormat::Pfm, data).map_err(|e| e.to_string())
}

/// Reads one whitespace-delimited header token.
fn token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    let tok = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| "header is not UTF-8".to_string())?
        .to_string();
    // Consume exactly one trailing whitespace byte so the payload can begin
    // immediately after the scale token's newline.
    if *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Ok(tok)
}

/// Encodes an image as little-endian color PFM (scale -1.0).
pub fn write_pfm(img: &HdrImage) -> Result<Vec<u8>> {
    if img.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("write_pfm", "refusing to write NaN samples"));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(32 + w * h * 12);
    out.extend_from_slice(format!("PF\n{w} {h}\n-1.0\n").as_bytes());
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for v in img.pixel(y, x) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes a little-endian color PFM file.
pub fn write_pfm_file(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_pfm(img)?).map_err(|e| Error::io(path, e))
}
