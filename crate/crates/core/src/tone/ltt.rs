//! Local tone tuning with patch-wise 3D lookup tables.
//!
//! A compact encoder turns the globally toned base image into one descriptor
//! per grid cell. A linear predictor mixes a shared bank of basis LUTs into
//! one LUT per cell, and the image is mapped through the per-patch LUTs with
//! bilinear blending between neighboring patch centers.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamInit, Params, Scalar, Shape, Tape, Tensor, Var};
use crate::tone::lut::Lut3D;

/// Negative slope of the encoder activations.
const LEAKY_SLOPE: f64 = 0.2;
/// Standard deviation of the non-identity basis tables at initialization.
const BANK_NOISE: f64 = 0.01;

/// Parameter handles for the descriptor encoder, weight predictor and basis
/// LUT bank.
pub struct LttParams {
    enc_w: [ParamId; 3],
    enc_c: [usize; 3],
    norm_gamma: [ParamId; 3],
    norm_beta: [ParamId; 3],
    fc_w: ParamId,
    fc_b: ParamId,
    bank: ParamId,
    grid: usize,
    basis_count: usize,
    lut_size: usize,
}

/// Tape outputs: the locally tuned image, the per-patch LUT stack shaped
/// `(n, grid*grid*3, v, v*v)`, and the mixing weights `(n, r, grid, grid)`.
pub struct LttOut {
    pub t3: Var,
    pub luts: Var,
    pub weights: Var,
}

impl LttParams {
    /// Registers encoder, predictor and bank parameters. Basis table 0 is
    /// the identity LUT and the predictor bias is one-hot on it, so the
    /// untrained block approximates identity tone mapping; the remaining
    /// tables start as small noise.
    pub fn register<T: Scalar>(
        params: &mut Params<T>,
        init: &mut ParamInit,
        width: usize,
        descriptor_dim: usize,
        grid: usize,
        basis_count: usize,
        lut_size: usize,
    ) -> Result<Self> {
        if width == 0 || descriptor_dim == 0 || grid == 0 || basis_count == 0 {
            return Err(Error::contract("ltt_register", "all dimensions must be positive"));
        }
        if lut_size < 2 {
            return Err(Error::contract("ltt_register", "lattice size must be at least 2"));
        }
        let bias = |c: usize| Tensor::<T>::zeros(Shape::new(1, c, 1, 1));
        let ones = |c: usize| Tensor::<T>::full(Shape::new(1, c, 1, 1), T::one());
        let p = &mut *params;
        let enc_c = [width, width, descriptor_dim];
        let mut enc_w = [ParamId::default(); 3];
        let mut norm_gamma = [ParamId::default(); 3];
        let mut norm_beta = [ParamId::default(); 3];
        let mut in_c = 3;
        // The encoder convolutions carry no bias: instance norm would cancel
        // any constant channel shift, leaving such a bias without gradient.
        for l in 0..3 {
            let out_c = enc_c[l];
            enc_w[l] = p.register(format!("ltt.enc{}.w", l + 1), init.uniform_fan_in(Shape::new(out_c, in_c, 3, 3)))?;
            norm_gamma[l] = p.register(format!("ltt.norm{}.gamma", l + 1), ones(out_c))?;
            norm_beta[l] = p.register(format!("ltt.norm{}.beta", l + 1), bias(out_c))?;
            in_c = out_c;
        }
        let mut fc_bias = Tensor::<T>::zeros(Shape::new(1, basis_count, 1, 1));
        fc_bias.data_mut()[0] = T::one();
        let v = lut_size;
        let mut bank = init.gaussian(Shape::new(basis_count, 3, v, v * v), BANK_NOISE);
        let identity = Lut3D::<T>::identity(v);
        bank.data_mut()[..3 * v * v * v].copy_from_slice(identity.entries());
        Ok(LttParams {
            enc_w,
            enc_c,
            norm_gamma,
            norm_beta,
            fc_w: p.register("ltt.fc.w", init.uniform_fan_in(Shape::new(basis_count, descriptor_dim, 1, 1)))?,
            fc_b: p.register("ltt.fc.b", fc_bias)?,
            bank: p.register("ltt.bank", bank)?,
            grid,
            basis_count,
            lut_size,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn lut_size(&self) -> usize {
        self.lut_size
    }

    /// Per-cell descriptors: three conv / instance-norm / leaky-relu layers
    /// pooled down to `(n, descriptor_dim, grid, grid)`.
    pub fn descriptors<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let mut f = x;
        for l in 0..3 {
            let wv = tape.param(params, self.enc_w[l])?;
            let bv = tape.constant(Tensor::zeros(Shape::new(1, self.enc_c[l], 1, 1)))?;
            let padded = tape.pad_reflect(f, 1)?;
            let conv = tape.conv2d(padded, wv, bv, 1, 0)?;
            let gv = tape.param(params, self.norm_gamma[l])?;
            let betav = tape.param(params, self.norm_beta[l])?;
            let normed = tape.instance_norm(conv, gv, betav)?;
            f = tape.leaky_relu(normed, T::from_f64(LEAKY_SLOPE))?;
        }
        tape.adaptive_avg_pool(f, self.grid, self.grid)
    }

    /// Locally tuned image plus the per-patch LUTs and mixing weights.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, l3g: Var) -> Result<LttOut> {
        let s = tape.shape(l3g);
        if s.c != 3 {
            return Err(Error::dim("ltt_forward", format!("input {s} must have 3 channels")));
        }
        if s.h < self.grid || s.w < self.grid {
            return Err(Error::dim(
                "ltt_forward",
                format!("input {s} is smaller than the {0}x{0} patch grid", self.grid),
            ));
        }
        let fce = self.descriptors(tape, params, l3g)?;
        let fw = tape.param(params, self.fc_w)?;
        let fb = tape.param(params, self.fc_b)?;
        let weights = tape.conv2d(fce, fw, fb, 1, 0)?;
        let bank = tape.param(params, self.bank)?;
        let luts = tape.lut_combine(weights, bank)?;
        let t3 = tape.lut_apply(l3g, luts, self.grid)?;
        Ok(LttOut { t3, luts, weights })
    }
}
