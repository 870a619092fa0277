//! 3D color lookup tables.
//!
//! A LUT maps an RGB value in [0,1]^3 to an output color by trilinear
//! interpolation over a V x V x V lattice. Entries are stored channel-major
//! with the red lattice axis fastest, matching both the `(r, 3, v, v*v)`
//! bank tensor layout used on the tape and the `.cube` text ordering.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One lookup table: `entries[((c * v + ib) * v + ig) * v + ir]` is output
/// channel `c` at lattice point (ir, ig, ib).
#[derive(Clone, Debug, PartialEq)]
pub struct Lut3D<T: Scalar> {
    size: usize,
    entries: Vec<T>,
}

impl<T: Scalar> Lut3D<T> {
    pub fn new(size: usize, entries: Vec<T>) -> Result<Self> {
        if size < 2 {
            return Err(Error::contract("lut3d", "lattice size must be at least 2"));
        }
        if entries.len() != 3 * size * size * size {
            return Err(Error::contract(
                "lut3d",
                format!("expected {} entries for size {size}, got {}", 3 * size * size * size, entries.len()),
            ));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("lut3d", "entries must be finite"));
        }
        Ok(Lut3D { size, entries })
    }

    /// Maps every lattice point to its own coordinates.
    pub fn identity(size: usize) -> Self {
        let mut entries = vec![T::zero(); 3 * size * size * size];
        let step = 1.0 / (size - 1) as f64;
        let mut idx = 0;
        for c in 0..3 {
            for ib in 0..size {
                for ig in 0..size {
                    for ir in 0..size {
                        let coord = [ir, ig, ib][c];
                        entries[idx] = T::from_f64(coord as f64 * step);
                        idx += 1;
                    }
                }
            }
        }
        Lut3D { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entry(&self, c: usize, ir: usize, ig: usize, ib: usize) -> T {
        self.entries[((c * self.size + ib) * self.size + ig) * self.size + ir]
    }

    /// Extracts one patch's LUT from a stacked tensor shaped
    /// `(n, patches * 3, v, v * v)`, the layout produced when mixing basis
    /// tables per patch on the tape.
    pub fn from_tensor_patch(stacked: &Tensor<T>, image: usize, patch: usize) -> Result<Self> {
        let s = stacked.shape();
        if s.c % 3 != 0 || s.w != s.h * s.h {
            return Err(Error::dim(
                "lut_from_tensor",
                format!("{s} is not a stack of (3, v, v*v) lookup tables"),
            ));
        }
        let patches = s.c / 3;
        if image >= s.n || patch >= patches {
            return Err(Error::dim(
                "lut_from_tensor",
                format!("image {image} patch {patch} out of range for {} images x {patches} patches", s.n),
            ));
        }
        let v3 = s.h * s.h * s.h;
        let start = (image * patches + patch) * 3 * v3;
        Lut3D::new(s.h, stacked.data()[start..start + 3 * v3].to_vec())
    }

    /// Entrywise weighted sum of basis LUTs.
    pub fn combine(weights: &[T], bank: &[Lut3D<T>]) -> Result<Self> {
        if weights.len() != bank.len() || bank.is_empty() {
            return Err(Error::contract(
                "lut_combine",
                format!("{} weights against {} basis tables", weights.len(), bank.len()),
            ));
        }
        let size = bank[0].size;
        if bank.iter().any(|b| b.size != size) {
            return Err(Error::contract("lut_combine", "basis tables must share one lattice size"));
        }
        let mut entries = vec![T::zero(); 3 * size * size * size];
        for (w, b) in weights.iter().zip(bank) {
            for (e, &v) in entries.iter_mut().zip(&b.entries) {
                *e = *e + *w * v;
            }
        }
        Lut3D::new(size, entries)
    }

    /// Trilinear lookup of one RGB value; inputs are clamped to [0,1].
    pub fn apply(&self, rgb: [T; 3]) -> [T; 3] {
        let v = self.size;
        let scale = (v - 1) as f64;
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = rgb[a].as_f64().clamp(0.0, 1.0) * scale;
            let i = (x.floor() as usize).min(v - 2);
            cell[a] = i;
            frac[a] = x - i as f64;
        }
        let mut out = [T::zero(); 3];
        for c in 0..3 {
            let mut acc = 0.0;
            for corner in 0..8 {
                let dr = corner & 1;
                let dg = (corner >> 1) & 1;
                let db = (corner >> 2) & 1;
                let w = (if dr == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dg == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if db == 1 { frac[2] } else { 1.0 - frac[2] });
                acc += w * self.entry(c, cell[0] + dr, cell[1] + dg, cell[2] + db).as_f64();
            }
            out[c] = T::from_f64(acc);
        }
        out
    }
}
