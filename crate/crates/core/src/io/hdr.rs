//! Radiance picture (.hdr) codec. Pixels use the RGBE shared-exponent
//! encoding: three 8-bit mantissas and one 8-bit exponent per pixel, decoded
//! as (m + 0.5) * 2^(e - 136). The reader handles flat scanlines, old-style
//! repeat codes and new-style per-component run-length coding; the writer
//! emits flat scanlines, which every Radiance reader accepts.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{HdrImage, SourceFormat};

const MAGIC: &[u8] = b"#?RADIANCE";
/// Alternate magic written by some tools; accepted on read.
const MAGIC_RGBE: &[u8] = b"#?RGBE";

/// Decodes one RGBE pixel to linear RGB.
fn decode_rgbe(r: u8, g: u8, b: u8, e: u8) -> [f32; 3] {
    if e == 0 {
        return [0.0; 3];
    }
    // (m + 0.5) * 2^(e - 128 - 8): the mantissa byte is a fraction of 256
    // and the stored exponent is biased by 128.
    let scale = (e as f64 - 136.0).exp2();
    [
        ((r as f64 + 0.5) * scale) as f32,
        ((g as f64 + 0.5) * scale) as f32,
        ((b as f64 + 0.5) * scale) as f32,
    ]
}

/// Encodes one linear RGB pixel as RGBE.
fn encode_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]) as f64;
    if max < 1e-38 {
        return [0; 4];
    }
    // Normalize the largest channel into [0.5, 1) to find the shared
    // exponent, then scale all channels by 256 / 2^e.
    let mut e = 0i32;
    let mut f = max;
    while f >= 1.0 {
        f *= 0.5;
        e += 1;
    }
    while f < 0.5 {
        f *= 2.0;
        e -= 1;
    }
    if e + 128 <= 0 {
        return [0; 4];
    }
    let scale = (-(e as f64)).exp2() * 256.0;
    let quant = |v: f32| ((v as f64 * scale) as u32).min(255) as u8;
    [quant(rgb[0]), quant(rgb[1]), quant(rgb[2]), (e + 128) as u8]
}

/// Reads a Radiance picture from raw bytes.
pub fn read_radiance_hdr(bytes: &[u8]) -> Result<HdrImage> {
    read_impl(bytes).map_err(|msg| Error::codec("<memory>", msg))
}

/// Reads a Radiance picture from a file.
pub fn read_radiance_hdr_file(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_impl(&bytes).map_err(|msg| Error::codec(path, msg))
}

fn read_impl(bytes: &[u8]) -> std::result::Result<HdrImage, String> {
    let mut pos = 0usize;
    let mut line = read_line(bytes, &mut pos)?;
    if !(line.starts_with(MAGIC) || line.starts_with(MAGIC_RGBE)) {
        return Err("missing #?RADIANCE magic".into());
    }
    // Header: variable assignments until a blank line, then the resolution.
    loop {
        line = read_line(bytes, &mut pos)?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix(b"FORMAT=" as &[u8]) {
            if fmt != b"32-bit_rle_rgbe" {
                return Err(format!("unsupported FORMAT={}", String::from_utf8_lossy(fmt)));
            }
        }
    }
    let res = read_line(bytes, &mut pos)?;
    let res = std::str::from_utf8(res).map_err(|_| "resolution line is not UTF-8".to_string())?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (height, width) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>().map_err(|_| format!("bad height {h:?}"))?,
            w.parse::<usize>().map_err(|_| format!("bad width {w:?}"))?,
        ),
        _ => return Err(format!("unsupported orientation {res:?}; only -Y h +X w")),
    };
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }

    let mut data = vec![0.0f32; width * height * 3];
    let mut scanline = vec![0u8; width * 4];
    for y in 0..height {
        read_scanline(bytes, &mut pos, width, &mut scanline)?;
        for x in 0..width {
            let p = decode_rgbe(
                scanline[x * 4],
                scanline[x * 4 + 1],
                scanline[x * 4 + 2],
                scanline[x * 4 + 3],
            );
            let i = (y * width + x) * 3;
            data[i..i + 3].copy_from_slice(&p);
        }
    }
    HdrImage::new(width, height, SourceFormat::Radiance, data).map_err(|e| e.to_string())
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a [u8], String> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err("truncated header".into());
    }
    let line = &bytes[start..*pos];
    *pos += 1;
    Ok(line)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], String> {
    if *pos + n > bytes.len() {
        return Err("truncated scanline".into());
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

/// Reads one scanline of RGBE quads into `out` (len width * 4, interleaved).
fn read_scanline(
    bytes: &[u8],
    pos: &mut usize,
    width: usize,
    out: &mut [u8],
) -> std::result::Result<(), String> {
    let head = take(bytes, pos, 4)?;
    let (h0, h1, h2, h3) = (head[0], head[1], head[2], head[3]);
    if h0 == 2 && h1 == 2 && ((h2 as usize) << 8 | h3 as usize) == width && (8..=32767).contains(&width) {
        // New-style: four per-component streams, each run-length coded.
        for comp in 0..4 {
            let mut x = 0usize;
            while x < width {
                let code = take(bytes, pos, 1)?[0] as usize;
                if code > 128 {
                    let run = code - 128;
                    if x + run > width {
                        return Err("RLE run overflows scanline".into());
                    }
                    let value = take(bytes, pos, 1)?[0];
                    for _ in 0..run {
                        out[x * 4 + comp] = value;
                        x += 1;
                    }
                } else if code > 0 {
                    if x + code > width {
                        return Err("RLE literal overflows scanline".into());
                    }
                    let lit = take(bytes, pos, code)?;
                    for &value in lit {
                        out[x * 4 + comp] = value;
                        x += 1;
                    }
                } else {
                    return Err("zero-length RLE packet".into());
                }
            }
        }
        return Ok(());
    }

    // Flat or old-style: quads in order, with (1,1,1,n) repeating the
    // previous pixel n << (8 * consecutive_repeats) times.
    if head[0] == 1 && head[1] == 1 && head[2] == 1 {
        return Err("repeat code with no previous pixel".into());
    }
    out[0..4].copy_from_slice(head);
    let mut x = 1usize;
    let mut shift = 0u32;
    while x < width {
        let quad = take(bytes, pos, 4)?;
        if quad[0] == 1 && quad[1] == 1 && quad[2] == 1 {
            let count = (quad[3] as usize) << shift;
            if x + count > width {
                return Err("repeat run overflows scanline".into());
            }
            let prev: [u8; 4] = out[(x - 1) * 4..x * 4].try_into().unwrap();
            for _ in 0..count {
                out[x * 4..x * 4 + 4].copy_from_slice(&prev);
                x += 1;
            }
            shift += 8;
        } else {
            out[x * 4..x * 4 + 4].copy_from_slice(quad);
            x += 1;
            shift = 0;
        }
    }
    Ok(())
}

/// Encodes an image as a Radiance picture with flat scanlines.
pub fn write_radiance_hdr(img: &HdrImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + img.width() * img.height() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(b"\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {} +X {}\n", img.height(), img.width()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.extend_from_slice(&encode_rgbe(img.pixel(y, x)));
        }
    }
    out
}

/// Writes a Radiance picture to a file.
pub fn write_radiance_hdr_file(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_radiance_hdr(img)).map_err(|e| Error::io(path, e))
}
