//! Image and artifact I/O: Radiance HDR and PFM readers/writers for
//! linear-light images, 8-bit PNG for display-referred outputs, `.cube`
//! export for the tone LUTs, and percentile normalization that brings HDR
//! input into the [0, 1] working domain.

mod cube;
mod hdr;
mod normalize;
mod pfm;
mod png;

pub use cube::{export_cube, import_cube, write_cube};
pub use hdr::{read_radiance_hdr, read_radiance_hdr_file, write_radiance_hdr, write_radiance_hdr_file};
pub use normalize::{normalize_hdr, NormalizationRecord};
pub use pfm::{read_pfm, read_pfm_file, write_pfm, write_pfm_file};
pub use png::{read_png8, read_png8_file, write_png8_encoded, write_png8_srgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Container format an [`HdrImage`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    Radiance,
    Pfm,
    /// Built in memory (synthetic data, tensors on their way out).
    Generated,
}

/// A linear-light RGB image: nonnegative finite values, interleaved
/// row-major top-down.
#[derive(Clone, Debug)]
pub struct HdrImage {
    width: usize,
    height: usize,
    format: SourceFormat,
    data: Vec<f32>,
}

impl HdrImage {
    /// Validates extent, length and sample range (finite, nonnegative).
    pub fn new(width: usize, height: usize, format: SourceFormat, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("hdr_image", "image must be at least 1x1"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::contract(
                "hdr_image",
                format!("{}x{} needs {} samples, got {}", width, height, width * height * 3, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::numeric("hdr_image", "samples must be finite and nonnegative"));
        }
        Ok(HdrImage { width, height, format, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn format(&self) -> SourceFormat {
        self.format
    }

    /// Interleaved RGB samples, row-major top-down.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Converts to a (1, 3, h, w) tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            T::from_f64(self.data[(y * w + x) * 3 + c] as f64)
        })
    }

    /// Converts a (1, 3, h, w) tensor of linear-light values back to an
    /// image, tagging it [`SourceFormat::Generated`].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::dim(
                "hdr_image",
                format!("expected a single 3-channel image, got {s}"),
            ));
        }
        let mut data = vec![0.0f32; s.h * s.w * 3];
        for c in 0..3 {
            let plane = t.plane(0, c);
            for (i, &v) in plane.iter().enumerate() {
                data[i * 3 + c] = v.as_f64() as f32;
            }
        }
        HdrImage::new(s.w, s.h, SourceFormat::Generated, data)
    }
}
