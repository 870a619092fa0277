//! Procedural HDR scenes with known tone-mapped partners.
//!
//! Each scene layers a smooth color gradient, a few bright Gaussian blobs
//! spanning several decades of luminance, and a couple of rectangular
//! plateaus whose edges feed the detail path. The paired target is a plain
//! gamma curve applied to the normalized source, which a tone-mapping
//! network should be able to fit closely.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{self, HdrImage};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::dataset::{NORMALIZE_HIGH_PERCENTILE, NORMALIZE_LOW_PERCENTILE};

/// Display gamma used for synthetic targets.
pub const SYNTH_GAMMA: f64 = 2.2;

/// Builds one linear-light HDR scene. Values are nonnegative and span a
/// dynamic range of roughly four decades.
pub fn synth_hdr_scene(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));

    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.02..0.2));
    let gx: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.3));
    let gy: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.3));
    for c in 0..3 {
        let plane = img.plane_mut(0, c);
        for y in 0..h {
            let fy = y as f32 / h.max(2) as f32;
            for x in 0..w {
                let fx = x as f32 / w.max(2) as f32;
                plane[y * w + x] = (base[c] + gx[c] * fx + gy[c] * fy).max(0.005);
            }
        }
    }

    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let radius = rng.gen_range(0.06..0.25) * h.min(w) as f32;
        let peak = 10f32.powf(rng.gen_range(0.0..2.2));
        let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.4..1.0));
        for c in 0..3 {
            let plane = img.plane_mut(0, c);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    plane[y * w + x] += peak * tint[c] * (-d2 / (2.0 * radius * radius)).exp();
                }
            }
        }
    }

    let rects = rng.gen_range(1..=3);
    for _ in 0..rects {
        let rw = rng.gen_range(w / 8..=w / 2).max(1);
        let rh = rng.gen_range(h / 8..=h / 2).max(1);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let amp = 10f32.powf(rng.gen_range(-0.5..1.3));
        let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        for c in 0..3 {
            let plane = img.plane_mut(0, c);
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    plane[y * w + x] += amp * tint[c];
                }
            }
        }
    }
    img
}

/// The target operator for synthetic pairs: clamp to [0,1], then apply a
/// 1/2.2 gamma.
pub fn gamma_target<T: Scalar>(normalized: &Tensor<T>) -> Tensor<T> {
    normalized.map(|v| T::from_f64(v.as_f64().clamp(0.0, 1.0).powf(1.0 / SYNTH_GAMMA)))
}

/// Writes `count` paired files (`scene_NNN.hdr` + `scene_NNN.png`) into
/// `dir`. The target is computed from the HDR file as written, so codec
/// quantization cannot open a gap between the pair on disk.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    for i in 0..count {
        let scene = synth_hdr_scene(seed.wrapping_add(i as u64), h, w);
        let hdr_path = dir.join(format!("scene_{i:03}.hdr"));
        io::write_radiance_hdr_file(&HdrImage::from_tensor(&scene)?, &hdr_path)?;

        let decoded = io::read_radiance_hdr_file(&hdr_path)?.to_tensor::<f32>();
        let (normalized, _) =
            io::normalize_hdr(&decoded, NORMALIZE_LOW_PERCENTILE, NORMALIZE_HIGH_PERCENTILE)?;
        io::write_png8_encoded(&gamma_target(&normalized), dir.join(format!("scene_{i:03}.png")))?;
    }
    Ok(())
}
