//! Percentile normalization of HDR input. The tone LUT domain is the unit
//! cube, so incoming radiance is scaled to put a high percentile at 1.0;
//! the record of what was done travels with every mapping run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How an HDR image was brought into the working range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    /// Strategy tag; currently always "percentile".
    pub method: String,
    /// Percentile ranks used (0..100).
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Values found at those ranks, before scaling.
    pub low_value: f64,
    pub high_value: f64,
    /// Multiplier applied to every sample.
    pub scale: f64,
    /// Set when the image had no positive range and unit scale was used.
    pub degenerate: bool,
}

/// Scales `x` so the `high_pct` percentile of its samples maps to 1.0 and
/// clamps below at 0. Values above the percentile stay above 1; the LUT
/// stage clamps its own domain. A degenerate image (no positive samples)
/// passes through at unit scale with the record flagged.
pub fn normalize_hdr<T: Scalar>(
    x: &Tensor<T>,
    low_pct: f64,
    high_pct: f64,
) -> Result<(Tensor<T>, NormalizationRecord)> {
    if x.data().is_empty() {
        return Err(Error::dim("normalize_hdr", "image is empty"));
    }
    if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct >= high_pct
    {
        return Err(Error::contract(
            "normalize_hdr",
            format!("percentiles must satisfy 0 <= low < high <= 100, got {low_pct}, {high_pct}"),
        ));
    }
    let mut sorted: Vec<f64> = x.data().iter().map(|v| v.as_f64().max(0.0)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values validated finite"));
    let low_value = percentile(&sorted, low_pct);
    let high_value = percentile(&sorted, high_pct);

    let degenerate = !(high_value > 0.0) || !high_value.is_finite();
    let scale = if degenerate { 1.0 } else { 1.0 / high_value };
    let record = NormalizationRecord {
        method: "percentile".into(),
        low_percentile: low_pct,
        high_percentile: high_pct,
        low_value,
        high_value,
        scale,
        degenerate,
    };
    let s = T::from_f64(scale);
    Ok((x.map(|v| (v * s).max(T::zero())), record))
}

/// Linear-interpolated percentile of pre-sorted samples.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
