//! Multi-scale decomposition.
//!
//! Two independent pieces live here. The classical Gaussian/Laplacian
//! pyramid works on plain tensors with a fixed binomial filter; it serves as
//! the reconstruction oracle and supplies per-level targets for the training
//! losses. The learnable differential pyramid ([`ldp`]) is recorded on the
//! tape and extracts the high-frequency maps the rest of the pipeline
//! consumes.

pub mod ldp;

pub use ldp::{LdpOut, LdpParams, SCALES};

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Scalar, Tensor};

/// The 5-tap binomial low-pass filter, normalized to unit sum.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Band-pass stack produced by [`laplacian_decompose`]. `bands[k]` lives at
/// ceil(h / 2^k) x ceil(w / 2^k); `base` is one halving below the last band.
pub struct LaplacianPyramid<T: Scalar> {
    pub bands: Vec<Tensor<T>>,
    pub base: Tensor<T>,
}

/// Blurs every plane with the separable binomial filter under reflect
/// borders. Output size equals input size.
pub fn blur5<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h < 3 || s.w < 3 {
        return Err(Error::dim("blur5", format!("input {s} too small for the 5-tap filter")));
    }
    let mut kernel = [T::zero(); 25];
    for (i, k) in kernel.iter_mut().enumerate() {
        *k = T::from_f64(BINOMIAL5[i / 5] * BINOMIAL5[i % 5]);
    }
    Ok(kernels::filter2d_forward(x, &kernel, 5, 2, kernels::PadMode::Reflect))
}

/// Keeps every even-indexed row and column; output is ceil(h/2) x ceil(w/2).
pub fn decimate2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    Tensor::from_fn(crate::Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| x.get(n, c, y * 2, xx * 2))
}

/// Doubles resolution with samples anchored at even indices (the inverse
/// phase of [`decimate2`]): even outputs copy the source, odd outputs are
/// midpoints, the last row/column clamps. Zero phase drift, so a decimated
/// linear ramp upsamples back to the same ramp on the interior.
pub fn dyadic_upsample<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != oh.div_ceil(2) || s.w != ow.div_ceil(2) {
        return Err(Error::dim(
            "dyadic_upsample",
            format!("cannot expand {s} to {oh}x{ow}: source must be the ceil-half size"),
        ));
    }
    let half = T::from_f64(0.5);
    let at = |i: usize, len: usize| i.min(len - 1);
    Ok(Tensor::from_fn(crate::Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let (ys, yr) = (y / 2, y % 2);
        let (xs, xr) = (xx / 2, xx % 2);
        match (yr, xr) {
            (0, 0) => x.get(n, c, ys, xs),
            (0, 1) => half * (x.get(n, c, ys, xs) + x.get(n, c, ys, at(xs + 1, s.w))),
            (1, 0) => half * (x.get(n, c, ys, xs) + x.get(n, c, at(ys + 1, s.h), xs)),
            _ => {
                let a = x.get(n, c, ys, xs) + x.get(n, c, ys, at(xs + 1, s.w));
                let b = x.get(n, c, at(ys + 1, s.h), xs) + x.get(n, c, at(ys + 1, s.h), at(xs + 1, s.w));
                half * half * (a + b)
            }
        }
    }))
}

/// Gaussian pyramid with `levels` entries; level 0 is the input itself.
pub fn gaussian_pyramid<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    if levels == 0 {
        return Err(Error::dim("gaussian_pyramid", "levels must be at least 1"));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(x.clone());
    for k in 1..levels {
        let blurred = blur5(&out[k - 1]).map_err(|_| {
            Error::dim(
                "gaussian_pyramid",
                format!("input {} cannot support {levels} levels", x.shape()),
            )
        })?;
        out.push(decimate2(&blurred));
    }
    Ok(out)
}

/// Splits `x` into `levels` band-pass images plus a low-pass base.
/// Band k = gaussian[k] - upsample(gaussian[k+1]).
pub fn laplacian_decompose<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<LaplacianPyramid<T>> {
    if levels == 0 {
        return Err(Error::dim("laplacian_decompose", "levels must be at least 1"));
    }
    let g = gaussian_pyramid(x, levels + 1)?;
    let mut bands = Vec::with_capacity(levels);
    for k in 0..levels {
        let up = dyadic_upsample(&g[k + 1], g[k].shape().h, g[k].shape().w)?;
        let band = Tensor::new(
            g[k].shape(),
            g[k].data().iter().zip(up.data()).map(|(&a, &b)| a - b).collect(),
        )?;
        bands.push(band);
    }
    Ok(LaplacianPyramid { bands, base: g[levels].clone() })
}

/// Exact inverse of [`laplacian_decompose`] up to float rounding.
pub fn laplacian_collapse<T: Scalar>(pyr: &LaplacianPyramid<T>) -> Result<Tensor<T>> {
    let mut cur = pyr.base.clone();
    for band in pyr.bands.iter().rev() {
        let bs = band.shape();
        let cs = cur.shape();
        if bs.n != cs.n || bs.c != cs.c {
            return Err(Error::dim(
                "laplacian_collapse",
                format!("band {bs} cannot sit above level of size {cs}"),
            ));
        }
        let up = dyadic_upsample(&cur, bs.h, bs.w)?;
        cur = Tensor::new(bs, band.data().iter().zip(up.data()).map(|(&a, &b)| a + b).collect())?;
    }
    Ok(cur)
}
