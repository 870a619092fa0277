//! Finite-difference validation of tape gradients.
//!
//! Central differences are compared against analytic gradients on a random
//! subset of parameter entries. Entries sitting on a non-differentiable point
//! (a relu corner, a max-pool tie) are detected by comparing the two
//! one-sided slopes and excluded rather than reported as failures.

use super::tape::{ParamId, Params};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference configuration. All tolerances are in f64 regardless of
/// the tensor element type.
#[derive(Clone, Debug)]
pub struct FdCheck {
    /// Perturbation half-width h for (f(x+h) - f(x-h)) / 2h.
    pub step: f64,
    /// Relative tolerance on |analytic - numeric|.
    pub rtol: f64,
    /// Absolute tolerance floor.
    pub atol: f64,
    /// Number of entries to probe per parameter (all entries if fewer).
    pub samples: usize,
    /// Seed for the entry sampler.
    pub seed: u64,
    /// One-sided slopes disagreeing by more than this relative margin mark
    /// the entry as non-differentiable and exclude it.
    pub kink_rtol: f64,
}

impl FdCheck {
    /// Tolerances suited to f32 forward passes.
    pub fn for_f32() -> Self {
        FdCheck { step: 1e-3, rtol: 1e-3, atol: 1e-4, samples: 24, seed: 7, kink_rtol: 0.05 }
    }

    /// Tolerances suited to f64 forward passes.
    pub fn for_f64() -> Self {
        FdCheck { step: 1e-6, rtol: 1e-6, atol: 1e-9, samples: 24, seed: 7, kink_rtol: 0.05 }
    }

    /// Tolerances for f64 checks through deep multi-block compositions. The
    /// central difference itself carries roundoff of roughly
    /// `eps * |loss| / step`, which for losses accumulated over thousands of
    /// intermediate values sits near 1e-8; a larger step and a matching
    /// absolute floor keep the reference trustworthy while still catching
    /// any genuinely wrong gradient by orders of magnitude.
    pub fn for_composite() -> Self {
        FdCheck { step: 1e-5, rtol: 1e-6, atol: 1e-7, samples: 24, seed: 7, kink_rtol: 0.05 }
    }
}

/// Outcome of one parameter check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    /// Entries compared (excluding kinks).
    pub checked: usize,
    /// Entries skipped because the loss is not differentiable there.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_flat_index: Option<usize>,
    pub pass: bool,
}

/// Compares `analytic` against central differences of `loss` with respect to
/// the entries of parameter `id`. The parameter is restored to its original
/// values before returning.
pub fn check_param<T, F>(
    params: &mut Params<T>,
    id: ParamId,
    analytic: &Tensor<T>,
    cfg: &FdCheck,
    mut loss: F,
) -> Result<FdReport>
where
    T: Scalar,
    F: FnMut(&Params<T>) -> Result<T>,
{
    let shape = params.value(id).shape();
    if analytic.shape() != shape {
        return Err(Error::contract(
            "gradcheck",
            format!("analytic gradient {} does not match parameter {}", analytic.shape(), shape),
        ));
    }
    let numel = shape.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id.0 as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let indices: Vec<usize> = if numel <= cfg.samples {
        (0..numel).collect()
    } else {
        rand::seq::index::sample(&mut rng, numel, cfg.samples).into_vec()
    };

    let h = cfg.step;
    let base = loss(params)?.as_f64();
    let slope_floor = cfg.atol / h;

    let mut report = FdReport {
        name: params.name(id).to_string(),
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_flat_index: None,
        pass: true,
    };

    for &i in &indices {
        let original = params.value(id).data()[i];
        let x0 = original.as_f64();

        params.value_mut(id).data_mut()[i] = T::from_f64(x0 + h);
        let plus = loss(params)?.as_f64();
        params.value_mut(id).data_mut()[i] = T::from_f64(x0 - h);
        let minus = loss(params)?.as_f64();
        params.value_mut(id).data_mut()[i] = original;

        let d_plus = (plus - base) / h;
        let d_minus = (base - minus) / h;
        let disagreement = (d_plus - d_minus).abs();
        if disagreement > cfg.kink_rtol * d_plus.abs().max(d_minus.abs()) + slope_floor {
            report.excluded += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic.data()[i].as_f64();
        let abs_err = (numeric - exact).abs();
        let denom = numeric.abs().max(exact.abs());
        let rel_err = abs_err / denom.max(1e-300);

        report.checked += 1;
        if abs_err > report.max_abs_err {
            report.max_abs_err = abs_err;
        }
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_flat_index = Some(i);
        }
        if abs_err > cfg.atol + cfg.rtol * denom {
            report.pass = false;
        }
    }
    Ok(report)
}
