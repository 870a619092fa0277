//! Differentiable training losses. Every function builds nodes on the
//! caller's tape and returns a scalar variable, so the pieces compose into
//! one backward pass.
//!
//! The total objective is a weighted sum of four parts: multi-scale L1
//! reconstruction, a multi-scale structural term, an L1 match between the
//! predicted high-frequency stack and the target's band-pass pyramid, and a
//! small feature-space distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{gaussian_pyramid, laplacian_decompose, SCALES};
use crate::quality::gaussian_window;
use crate::tensor::{PadMode, Scalar, Tape, Tensor, Var};
use crate::tone::PipelineOut;

/// Published per-scale exponents of multi-scale SSIM, renormalized to the
/// scale count actually used.
const MSSSIM_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Stabilizers for unit dynamic range: (0.01)^2 and (0.03)^2.
const MSSSIM_C1: f64 = 1e-4;
const MSSSIM_C2: f64 = 9e-4;
const MSSSIM_WINDOW: usize = 11;

/// Per-scale scores are clamped here before exponentiation; keeps the
/// product real when a contrast comparison goes negative.
const MSSSIM_SCORE_FLOOR: f64 = 1e-4;

/// Weights of the four loss parts in the total objective.
///
/// Defaults keep reconstruction dominant, hold the high-frequency term at
/// parity so the detail branch must learn real band-pass content, and add a
/// small structural and feature-space pull.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Multi-scale L1 reconstruction.
    pub alpha: f64,
    /// Structural dissimilarity (1 - MS-SSIM).
    pub beta: f64,
    /// High-frequency stack match.
    pub gamma: f64,
    /// Feature-space distance.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.4, gamma: 1.0, eta: 0.05 }
    }
}

impl LossWeights {
    /// All weights must be finite and nonnegative, with at least one
    /// positive.
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.eta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// The four scalar loss variables, kept separate for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub reconstruction: Var,
    pub structural: Var,
    pub high_frequency: Var,
    pub perceptual: Var,
}

/// Multi-scale L1 reconstruction: the full-resolution output against the
/// target plus each coarser output against the matching level of the
/// target's low-pass pyramid. Every term is a mean over its own scale, so
/// coarse scales are not drowned out by pixel count.
pub fn loss_re<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[Var; SCALES + 1],
    target: &Tensor<T>,
) -> Result<Var> {
    let lowpass = gaussian_pyramid(target, SCALES + 1)?;
    let mut total: Option<Var> = None;
    for (level, (&out, reference)) in outputs.iter().zip(&lowpass).enumerate() {
        if tape.shape(out) != reference.shape() {
            return Err(Error::dim(
                "loss_re",
                format!(
                    "output level {level} is {} but the target pyramid level is {}",
                    tape.shape(out),
                    reference.shape()
                ),
            ));
        }
        let want = tape.constant(reference.clone())?;
        let diff = tape.sub(out, want)?;
        let mag = tape.abs(diff)?;
        let term = tape.mean_all(mag)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("outputs array is non-empty"))
}

/// L1 match between the predicted high-frequency stack and the band-pass
/// pyramid of the target, mean-normalized per level like [`loss_re`].
pub fn loss_hf<T: Scalar>(
    tape: &mut Tape<T>,
    stack: &[Var; SCALES],
    target: &Tensor<T>,
) -> Result<Var> {
    let pyr = laplacian_decompose(target, SCALES)?;
    let mut total: Option<Var> = None;
    for (level, (&band, reference)) in stack.iter().zip(&pyr.bands).enumerate() {
        if tape.shape(band) != reference.shape() {
            return Err(Error::dim(
                "loss_hf",
                format!(
                    "stack level {level} is {} but the target band is {}",
                    tape.shape(band),
                    reference.shape()
                ),
            ));
        }
        let want = tape.constant(reference.clone())?;
        let diff = tape.sub(band, want)?;
        let mag = tape.abs(diff)?;
        let term = tape.mean_all(mag)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("stack array is non-empty"))
}

/// Number of dyadic scales multi-scale SSIM will use for an image of the
/// given size: as many as keep both sides at least 11 samples, capped at 5.
/// Errors if even one scale does not fit.
pub fn msssim_scale_count(h: usize, w: usize) -> Result<usize> {
    if h < MSSSIM_WINDOW || w < MSSSIM_WINDOW {
        return Err(Error::dim(
            "loss_msssim",
            format!("image {h}x{w} cannot fit an {MSSSIM_WINDOW}-tap window"),
        ));
    }
    let (mut h, mut w) = (h, w);
    let mut scales = 1;
    while scales < MSSSIM_SCALE_WEIGHTS.len() && h / 2 >= MSSSIM_WINDOW && w / 2 >= MSSSIM_WINDOW {
        h /= 2;
        w /= 2;
        scales += 1;
    }
    Ok(scales)
}

/// Structural dissimilarity 1 - MS-SSIM. Contrast comparisons are averaged
/// per scale, the luminance comparison joins at the coarsest scale, and the
/// weighted geometric mean uses the published exponents renormalized to the
/// scale count from [`msssim_scale_count`].
pub fn loss_msssim<T: Scalar>(tape: &mut Tape<T>, output: Var, target: Var) -> Result<Var> {
    let s = tape.shape(output);
    if s != tape.shape(target) {
        return Err(Error::dim(
            "loss_msssim",
            format!("output {} does not match target {}", s, tape.shape(target)),
        ));
    }
    let scales = msssim_scale_count(s.h, s.w)?;
    let weight_sum: f64 = MSSSIM_SCALE_WEIGHTS[..scales].iter().sum();
    let window: Vec<T> = gaussian_window(MSSSIM_WINDOW, 1.5)
        .into_iter()
        .map(T::from_f64)
        .collect();

    let mut a = output;
    let mut b = target;
    let mut score: Option<Var> = None;
    for level in 0..scales {
        let exponent = T::from_f64(MSSSIM_SCALE_WEIGHTS[level] / weight_sum);
        let last = level + 1 == scales;
        let (contrast, luminance) = ssim_scale(tape, a, b, &window, last)?;
        let mut factors = vec![contrast];
        if let Some(lum) = luminance {
            factors.push(lum);
        }
        for factor in factors {
            let safe = tape.clamp_min(factor, T::from_f64(MSSSIM_SCORE_FLOOR))?;
            let term = tape.pow_const(safe, exponent)?;
            score = Some(match score {
                Some(acc) => tape.mul(acc, term)?,
                None => term,
            });
        }
        if !last {
            a = tape.avgpool2(a)?;
            b = tape.avgpool2(b)?;
        }
    }
    let score = score.expect("at least one scale");
    tape.affine(score, T::from_f64(-1.0), T::one())
}

/// Mean contrast comparison at one scale, plus the mean luminance
/// comparison when `with_luminance` is set.
fn ssim_scale<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    window: &[T],
    with_luminance: bool,
) -> Result<(Var, Option<Var>)> {
    let pad = MSSSIM_WINDOW / 2;
    let filt = |tape: &mut Tape<T>, v: Var| {
        tape.filter2d(v, window, MSSSIM_WINDOW, pad, PadMode::Reflect)
    };
    let mu_x = filt(tape, x)?;
    let mu_y = filt(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let raw_xx = filt(tape, xx)?;
    let raw_yy = filt(tape, yy)?;
    let raw_xy = filt(tape, xy)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(raw_xx, mu_xx)?;
    let var_y = tape.sub(raw_yy, mu_yy)?;
    let cov = tape.sub(raw_xy, mu_xy)?;

    let c2 = T::from_f64(MSSSIM_C2);
    let num = tape.affine(cov, T::from_f64(2.0), c2)?;
    let var_sum = tape.add(var_x, var_y)?;
    let den = tape.affine(var_sum, T::one(), c2)?;
    let cs_map = tape.div(num, den)?;
    let contrast = tape.mean_all(cs_map)?;

    let luminance = if with_luminance {
        let c1 = T::from_f64(MSSSIM_C1);
        let num = tape.affine(mu_xy, T::from_f64(2.0), c1)?;
        let mu_sum = tape.add(mu_xx, mu_yy)?;
        let den = tape.affine(mu_sum, T::one(), c1)?;
        let l_map = tape.div(num, den)?;
        Some(tape.mean_all(l_map)?)
    } else {
        None
    };
    Ok((contrast, luminance))
}

/// Fixed (non-trainable) feature maps for the feature-space loss. Each
/// returned variable is one scale of the representation; implementations
/// must not register parameters.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>>;
}

/// Default extractor: horizontal and vertical gradient filters plus a
/// binomial blur, applied per channel at full and half resolution. Cheap,
/// fixed, and sensitive to edge placement and sharpness.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientBank;

impl GradientBank {
    const SOBEL_X: [f64; 9] = [-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125];
    const SOBEL_Y: [f64; 9] = [-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125];
    const BLUR: [f64; 9] = [
        0.0625, 0.125, 0.0625, 0.125, 0.25, 0.125, 0.0625, 0.125, 0.0625,
    ];
    const LEVELS: usize = 2;
}

impl<T: Scalar> FeatureExtractor<T> for GradientBank {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(Self::LEVELS);
        let mut cur = x;
        for level in 0..Self::LEVELS {
            if level > 0 {
                cur = tape.avgpool2(cur)?;
            }
            let mut maps: Option<Var> = None;
            for kernel in [&Self::SOBEL_X, &Self::SOBEL_Y, &Self::BLUR] {
                let taps: Vec<T> = kernel.iter().map(|&v| T::from_f64(v)).collect();
                let map = tape.filter2d(cur, &taps, 3, 1, PadMode::Reflect)?;
                maps = Some(match maps {
                    Some(acc) => tape.concat_channels(acc, map)?,
                    None => map,
                });
            }
            out.push(maps.expect("three kernels per level"));
        }
        Ok(out)
    }
}

/// Feature-space distance: mean squared difference between extractor
/// responses, summed over scales.
pub fn loss_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    target: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    let f_out = extractor.features(tape, output)?;
    let f_ref = extractor.features(tape, target)?;
    if f_out.len() != f_ref.len() || f_out.is_empty() {
        return Err(Error::contract(
            "loss_perceptual",
            format!(
                "extractor returned {} and {} scales; need equal and nonzero",
                f_out.len(),
                f_ref.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in f_out.iter().zip(&f_ref) {
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(diff, diff)?;
        let term = tape.mean_all(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("checked nonzero scale count"))
}

/// Weighted sum of the four parts. Weight validation lives here so any
/// config path that reaches training is checked.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let terms = [
        (parts.reconstruction, weights.alpha),
        (parts.structural, weights.beta),
        (parts.high_frequency, weights.gamma),
        (parts.perceptual, weights.eta),
    ];
    let mut total: Option<Var> = None;
    for (part, weight) in terms {
        let term = tape.affine(part, T::from_f64(weight), T::zero())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("four terms"))
}

/// Builds every loss part for one pipeline forward pass and returns the
/// weighted total alongside the parts.
pub fn compute_losses<T: Scalar>(
    tape: &mut Tape<T>,
    out: &PipelineOut,
    target: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    let reconstruction = loss_re(tape, &out.t, target)?;
    let reference = tape.constant(target.clone())?;
    let structural = loss_msssim(tape, out.t[0], reference)?;
    let high_frequency = loss_hf(tape, &out.hf, target)?;
    let perceptual = loss_perceptual(tape, out.t[0], reference, extractor)?;
    let parts = LossParts { reconstruction, structural, high_frequency, perceptual };
    let total = total_loss(tape, &parts, weights)?;
    Ok((total, parts))
}
