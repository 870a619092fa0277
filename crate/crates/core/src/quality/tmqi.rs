//! Tone-mapped image quality index: full-reference quality of an LDR
//! rendering judged against the HDR source it came from.
//!
//! The score combines two terms. Structural fidelity S compares local
//! contrast between the HDR and LDR luminance across five dyadic scales,
//! after passing local standard deviations through a contrast-sensitivity
//! threshold so that invisible contrast differences stop mattering.
//! Statistical naturalness N scores the LDR's global brightness and mean
//! local contrast against density models fitted to natural images. All
//! constants are taken verbatim from the index's reference publication.

use crate::error::{Error, Result};
use crate::quality::{color, gaussian_window};
use crate::tensor::{kernels, PadMode, Scalar, Shape, Tensor};

/// Per-scale weights shared with multi-scale SSIM; renormalized when fewer
/// scales fit the image.
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Stabilizers of the two factors of the local structure comparison.
const S_C1: f64 = 0.01;
const S_C2: f64 = 10.0;

/// Beta density shape parameters for mean local contrast of natural images.
const NAT_CONTRAST_A: f64 = 4.4;
const NAT_CONTRAST_B: f64 = 10.1;
/// Local contrast is expressed in units of this standard deviation before
/// the beta density is evaluated.
const NAT_CONTRAST_SCALE: f64 = 64.29;

/// Gaussian density parameters for the global brightness of natural images,
/// on the 0..255 intensity scale.
const NAT_BRIGHTNESS_MEAN: f64 = 115.94;
const NAT_BRIGHTNESS_STD: f64 = 27.99;

/// Mixing constants of the final score Q = a*S^p + (1-a)*N^q.
const COMBINE_A: f64 = 0.8012;
const COMBINE_EXP_S: f64 = 0.3046;
const COMBINE_EXP_N: f64 = 0.7088;

/// Window size for all local statistics, both the sliding structural window
/// and the non-overlapping naturalness blocks.
const WINDOW: usize = 11;

/// The HDR luminance is spread over this range before local statistics are
/// taken, so that its contrast saturates the visibility threshold the same
/// way it would for a 32-bit sensor reading.
const HDR_RANGE: f64 = (1u64 << 32) as f64 - 1.0;

/// Breakdown of the quality index into its fidelity and naturalness terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TmqiReport {
    /// Combined quality in [0, 1].
    pub q: f64,
    /// Multi-scale structural fidelity in [0, 1].
    pub s: f64,
    /// Statistical naturalness in [0, 1].
    pub n: f64,
}

/// Scores a tone-mapped LDR image against its HDR source.
///
/// `ldr` holds display-referred values in [0, 1] (clamped internally) and
/// `hdr` holds linear scene radiance; both are single images with one or
/// three channels and matching spatial size. The smaller side must fit at
/// least one 11x11 window.
pub fn tmqi<T: Scalar>(ldr: &Tensor<T>, hdr: &Tensor<T>) -> Result<TmqiReport> {
    let ls = ldr.shape();
    let hs = hdr.shape();
    validate_image("tmqi", ls)?;
    validate_image("tmqi", hs)?;
    if (ls.h, ls.w) != (hs.h, hs.w) {
        return Err(Error::dim(
            "tmqi",
            format!("LDR is {}x{} but HDR is {}x{}", ls.h, ls.w, hs.h, hs.w),
        ));
    }
    if ls.h < WINDOW || ls.w < WINDOW {
        return Err(Error::dim(
            "tmqi",
            format!("image {}x{} cannot fit an {WINDOW}x{WINDOW} window", ls.h, ls.w),
        ));
    }

    // LDR luminance on the 0..255 display scale, HDR luminance spread over
    // the fixed sensor range.
    let lum_ldr = luminance_plane(ldr, |v| v.clamp(0.0, 1.0) * 255.0);
    let lum_hdr = rescale_full_range(luminance_plane(hdr, |v| v.max(0.0)));

    let s = structural_fidelity(&lum_hdr, &lum_ldr)?;
    let n = naturalness(&lum_ldr);
    let q = COMBINE_A * s.powf(COMBINE_EXP_S) + (1.0 - COMBINE_A) * n.powf(COMBINE_EXP_N);
    Ok(TmqiReport { q: q.clamp(0.0, 1.0), s, n })
}

fn validate_image(op: &'static str, s: Shape) -> Result<()> {
    if s.n != 1 {
        return Err(Error::contract(op, format!("expected a single image, got batch of {}", s.n)));
    }
    if s.c != 1 && s.c != 3 {
        return Err(Error::dim(op, format!("expected 1 or 3 channels, got {}", s.c)));
    }
    Ok(())
}

/// Extracts the luminance plane as an f64 tensor, applying `f` per sample.
fn luminance_plane<T: Scalar>(img: &Tensor<T>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    let s = img.shape();
    let plane = Shape::new(1, 1, s.h, s.w);
    if s.c == 1 {
        let data = img.data().iter().map(|&v| f(v.as_f64())).collect();
        return Tensor::new(plane, data).expect("luminance plane shape is consistent");
    }
    let (r, g, b) = (img.plane(0, 0), img.plane(0, 1), img.plane(0, 2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| f(color::luminance([r.as_f64(), g.as_f64(), b.as_f64()])))
        .collect();
    Tensor::new(plane, data).expect("luminance plane shape is consistent")
}

/// Affinely maps the plane onto [0, HDR_RANGE]. A constant plane maps to
/// zeros instead of dividing by zero.
fn rescale_full_range(plane: Tensor<f64>) -> Tensor<f64> {
    let lo = plane.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= f64::MIN_POSITIVE {
        return plane.map(|_| 0.0);
    }
    let gain = HDR_RANGE / range;
    plane.map(|v| (v - lo) * gain)
}

/// Multi-scale structural fidelity over as many dyadic scales (up to five)
/// as keep both sides at least one window wide.
fn structural_fidelity(hdr: &Tensor<f64>, ldr: &Tensor<f64>) -> Result<f64> {
    let shape = hdr.shape();
    let (mut h, mut w) = (shape.h, shape.w);
    let mut scales = 0;
    while scales < SCALE_WEIGHTS.len() && h >= WINDOW && w >= WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    debug_assert!(scales > 0, "caller checked the window fits");
    let weight_sum: f64 = SCALE_WEIGHTS[..scales].iter().sum();

    let window = gaussian_window(WINDOW, 1.5);
    let mut a = hdr.clone();
    let mut b = ldr.clone();
    let mut s = 1.0;
    for l in 0..scales {
        // Peak spatial frequency of this scale in cycles per degree under
        // the reference viewing geometry: 16 at the finest, halving down.
        let freq = (1u32 << (4 - l)) as f64;
        let s_l = scale_fidelity(&a, &b, &window, freq);
        s *= s_l.max(f64::EPSILON).powf(SCALE_WEIGHTS[l] / weight_sum);
        if l + 1 < scales {
            a = kernels::avgpool2_forward(&a);
            b = kernels::avgpool2_forward(&b);
        }
    }
    Ok(s)
}

/// Single-scale fidelity: mean of the thresholded structure comparison over
/// all fully valid window positions.
fn scale_fidelity(a: &Tensor<f64>, b: &Tensor<f64>, window: &[f64], freq: f64) -> f64 {
    // Contrast sensitivity at this frequency, converted to the standard
    // deviation a signal must reach to be visible; local deviations are
    // passed through a normal CDF centered on that threshold.
    let csf = 100.0 * 2.6 * (0.0192 + 0.114 * freq) * (-(0.114 * freq).powf(1.1)).exp();
    let threshold = 128.0 / (1.4 * csf);
    let spread = threshold / 3.0;

    let filt = |x: &Tensor<f64>| kernels::filter2d_forward(x, window, WINDOW, 0, PadMode::Zero);
    let mu1 = filt(a);
    let mu2 = filt(b);
    let raw11 = filt(&mul_planes(a, a));
    let raw22 = filt(&mul_planes(b, b));
    let raw12 = filt(&mul_planes(a, b));

    let mut sum = 0.0;
    for i in 0..mu1.data().len() {
        let m1 = mu1.data()[i];
        let m2 = mu2.data()[i];
        let var1 = (raw11.data()[i] - m1 * m1).max(0.0);
        let var2 = (raw22.data()[i] - m2 * m2).max(0.0);
        let cov = raw12.data()[i] - m1 * m2;
        let sd1 = var1.sqrt();
        let sd2 = var2.sqrt();
        let t1 = normal_cdf(sd1 - threshold, spread);
        let t2 = normal_cdf(sd2 - threshold, spread);
        let visibility = (2.0 * t1 * t2 + S_C1) / (t1 * t1 + t2 * t2 + S_C1);
        let correlation = (cov + S_C2) / (sd1 * sd2 + S_C2);
        sum += visibility * correlation;
    }
    sum / mu1.data().len() as f64
}

fn mul_planes(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("shapes match by construction")
}

/// CDF of a zero-mean normal with standard deviation `spread`.
fn normal_cdf(x: f64, spread: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / (spread * std::f64::consts::SQRT_2)))
}

/// Statistical naturalness of the LDR luminance: the product of a brightness
/// density and a contrast density, each normalized to peak at 1.
fn naturalness(lum: &Tensor<f64>) -> f64 {
    let s = lum.shape();
    let data = lum.data();
    let brightness = data.iter().sum::<f64>() / data.len() as f64;

    // Mean sample standard deviation over full non-overlapping 11x11 blocks.
    let (by, bx) = (s.h / WINDOW, s.w / WINDOW);
    let mut contrast = 0.0;
    if by * bx > 0 {
        let mut total = 0.0;
        for y in 0..by {
            for x in 0..bx {
                total += block_std(data, s.w, y * WINDOW, x * WINDOW);
            }
        }
        contrast = total / (by * bx) as f64;
    }

    let pb = (-(brightness - NAT_BRIGHTNESS_MEAN).powi(2)
        / (2.0 * NAT_BRIGHTNESS_STD * NAT_BRIGHTNESS_STD))
        .exp();
    // Beta density over normalized contrast, divided by its value at the
    // mode so the factor tops out at 1 and no gamma functions are needed.
    let x = contrast / NAT_CONTRAST_SCALE;
    let mode = (NAT_CONTRAST_A - 1.0) / (NAT_CONTRAST_A + NAT_CONTRAST_B - 2.0);
    let pc = if x > 0.0 && x < 1.0 {
        (x / mode).powf(NAT_CONTRAST_A - 1.0)
            * ((1.0 - x) / (1.0 - mode)).powf(NAT_CONTRAST_B - 1.0)
    } else {
        0.0
    };
    (pb * pc).clamp(0.0, 1.0)
}

/// Sample standard deviation (n-1 denominator) of one 11x11 block.
fn block_std(data: &[f64], row: usize, y0: usize, x0: usize) -> f64 {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in y0..y0 + WINDOW {
        for &v in &data[y * row + x0..y * row + x0 + WINDOW] {
            sum += v;
            sq += v * v;
        }
    }
    let n = (WINDOW * WINDOW) as f64;
    let mean = sum / n;
    ((sq - n * mean * mean).max(0.0) / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naturalness_peaks_at_reference_statistics() {
        // A plane whose mean and block contrast sit exactly at the density
        // modes scores 1; the checkerboard amplitude below yields a sample
        // std equal to the mode of the contrast density.
        let target_std = NAT_CONTRAST_SCALE * (NAT_CONTRAST_A - 1.0)
            / (NAT_CONTRAST_A + NAT_CONTRAST_B - 2.0);
        // An 11x11 block with 61 highs and 60 lows at +-d has sample std
        // sqrt((121 - 1/121) / 120) * d, within a percent of d.
        let d = target_std;
        let data: Vec<f64> = (0..22 * 22)
            .map(|i| {
                let (y, x) = (i / 22, i % 22);
                NAT_BRIGHTNESS_MEAN + if (y + x) % 2 == 0 { d } else { -d }
            })
            .collect();
        let plane = Tensor::new(Shape::new(1, 1, 22, 22), data).unwrap();
        let n = naturalness(&plane);
        assert!(n > 0.99, "naturalness at the density modes was {n}");
    }

    #[test]
    fn naturalness_of_flat_black_is_zero() {
        let plane = Tensor::zeros(Shape::new(1, 1, 22, 22));
        assert_eq!(naturalness(&plane), 0.0);
    }

    #[test]
    fn normal_cdf_is_monotone_and_bounded() {
        let mut last = 0.0;
        for i in -40..=40 {
            let v = normal_cdf(i as f64 * 0.25, 1.0);
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= last);
            last = v;
        }
        assert!((normal_cdf(0.0, 2.5) - 0.5).abs() < 1e-12);
    }
}
