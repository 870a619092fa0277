//! Full-reference evaluation metrics. These run on plain tensors in f64,
//! independent of the differentiable loss paths, so they can double as
//! oracles for the losses and be computed on saved outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::tmqi::tmqi;
use crate::quality::{color, gaussian_window};
use crate::tensor::{kernels, PadMode, Scalar, Shape, Tensor};

/// PSNR reported for a zero-error pair, and the cap for near-zero error.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Stabilizers of the SSIM comparison for unit dynamic range: (0.01)^2 and
/// (0.03)^2.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;
const SSIM_WINDOW: usize = 11;

/// Per-image quality scores; `aggregate` averages a batch of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Peak signal-to-noise ratio against the target, in dB.
    pub psnr: f64,
    /// Single-scale structural similarity against the target, in [-1, 1].
    pub ssim: f64,
    /// Tone-mapping quality against the HDR source, in [0, 1].
    pub tmqi: f64,
    /// Mean CIE76 color difference against the target, nonnegative.
    pub delta_e: f64,
}

impl MetricReport {
    /// Mean of each score over a batch; `None` for an empty batch.
    pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = reports.iter().fold([0.0; 4], |acc, r| {
            [acc[0] + r.psnr, acc[1] + r.ssim, acc[2] + r.tmqi, acc[3] + r.delta_e]
        });
        Some(MetricReport {
            psnr: sum[0] / n,
            ssim: sum[1] / n,
            tmqi: sum[2] / n,
            delta_e: sum[3] / n,
        })
    }
}

/// Scores one mapped image against its LDR target and HDR source.
pub fn evaluate_pair<T: Scalar>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    source: &Tensor<T>,
) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(output, target, 1.0)?,
        ssim: ssim(output, target)?,
        tmqi: tmqi(output, source)?.q,
        delta_e: delta_e(output, target)?,
    })
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`]. A zero MSE
/// reports the cap rather than infinity.
pub fn psnr<T: Scalar>(t: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", t.shape(), y.shape())?;
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::contract("psnr", format!("peak must be positive and finite, got {peak}")));
    }
    let mse = t
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / t.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Single-scale structural similarity with an 11-tap Gaussian window
/// (sigma 1.5). Local statistics use reflect padding, so the map covers
/// every pixel and `ssim(x, x)` is exactly 1. Works on any channel count;
/// the map is averaged over all channels.
pub fn ssim<T: Scalar>(t: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let s = t.shape();
    same_shape("ssim", s, y.shape())?;
    let pad = SSIM_WINDOW / 2;
    if s.h <= pad || s.w <= pad {
        return Err(Error::dim(
            "ssim",
            format!("image {}x{} is too small for a reflect-padded {SSIM_WINDOW}-tap window", s.h, s.w),
        ));
    }
    let a = t.cast::<f64>();
    let b = y.cast::<f64>();
    let window = gaussian_window(SSIM_WINDOW, 1.5);
    let filt = |x: &Tensor<f64>| {
        kernels::filter2d_forward(x, &window, SSIM_WINDOW, pad, PadMode::Reflect)
    };
    let mu_x = filt(&a);
    let mu_y = filt(&b);
    let raw_xx = filt(&a.map(|v| v * v));
    let raw_yy = filt(&b.map(|v| v * v));
    let raw_xy = filt(&mul_elems(&a, &b));

    let mut sum = 0.0;
    for i in 0..mu_x.data().len() {
        let mx = mu_x.data()[i];
        let my = mu_y.data()[i];
        let var_x = raw_xx.data()[i] - mx * mx;
        let var_y = raw_yy.data()[i] - my * my;
        let cov = raw_xy.data()[i] - mx * my;
        let lum = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
        let con = (2.0 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2);
        sum += lum * con;
    }
    Ok(sum / mu_x.data().len() as f64)
}

/// Mean CIE76 color difference over all pixels. Inputs are display-referred
/// sRGB in [0, 1] (clamped internally) with exactly three channels.
pub fn delta_e<T: Scalar>(t: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let s = t.shape();
    same_shape("delta_e", s, y.shape())?;
    if s.c != 3 {
        return Err(Error::dim("delta_e", format!("expected 3 channels, got {}", s.c)));
    }
    let mut sum = 0.0;
    for img in 0..s.n {
        let (tr, tg, tb) = (t.plane(img, 0), t.plane(img, 1), t.plane(img, 2));
        let (yr, yg, yb) = (y.plane(img, 0), y.plane(img, 1), y.plane(img, 2));
        for i in 0..tr.len() {
            let lab_t = color::srgb_to_lab([tr[i].as_f64(), tg[i].as_f64(), tb[i].as_f64()]);
            let lab_y = color::srgb_to_lab([yr[i].as_f64(), yg[i].as_f64(), yb[i].as_f64()]);
            sum += color::delta_e76(lab_t, lab_y);
        }
    }
    Ok(sum / (s.n * s.h * s.w) as f64)
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shape {a} does not match {b}")));
    }
    Ok(())
}

fn mul_elems(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("shapes match by construction")
}
