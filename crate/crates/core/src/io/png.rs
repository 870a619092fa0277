//! 8-bit PNG output for display-referred images and input for LDR targets.
//!
//! Two writers cover the two domains the pipeline touches: `write_png8_srgb`
//! applies the sRGB transfer function to linear-light values, while
//! `write_png8_encoded` quantizes values that are already display-encoded
//! (the network's native output domain, since its targets come from PNG
//! bytes). The reader returns encoded values scaled to [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::quality::color;
use crate::tensor::{Scalar, Shape, Tensor};

/// Reads an 8-bit PNG into a (1, 3, h, w) tensor of encoded values in
/// [0, 1] (byte / 255, no transfer function applied).
pub fn read_png8<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_png8_file(path)
}

/// Same as [`read_png8`]; kept for symmetry with the other codecs.
pub fn read_png8_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::codec(path, e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        T::from_f64(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    }))
}

/// Writes a (1, 3, h, w) tensor of display-encoded values in [0, 1]
/// (clamped) as an 8-bit PNG, rounding half up.
pub fn write_png8_encoded<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    write_quantized(t, path, |v| v)
}

/// Writes a (1, 3, h, w) tensor of linear-light values in [0, 1] (clamped)
/// as an 8-bit PNG after applying the sRGB transfer function.
pub fn write_png8_srgb<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    write_quantized(t, path, color::linear_to_srgb)
}

fn write_quantized<T: Scalar>(
    t: &Tensor<T>,
    path: impl AsRef<Path>,
    encode: impl Fn(f64) -> f64,
) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::dim("write_png8", format!("expected a single 3-channel image, got {s}")));
    }
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let mut rgb = [0u8; 3];
        for (c, slot) in rgb.iter_mut().enumerate() {
            let v = t.plane(0, c)[y as usize * s.w + x as usize].as_f64().clamp(0.0, 1.0);
            *slot = (encode(v) * 255.0).round() as u8;
        }
        *px = Rgb(rgb);
    }
    img.save(path).map_err(|e| Error::codec(path, e.to_string()))
}
