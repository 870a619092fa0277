//! Learnable differential pyramid.
//!
//! Each scale runs a stem convolution followed by four sequential 3x3
//! convolutions with no nonlinearity between them. Differences of
//! consecutive outputs form differential features (initialized to behave as
//! a difference-of-Gaussians stack), which a fusion conv, one residual block
//! and a 1x1 projection turn into a 3-channel high-frequency map. The
//! fourth conv output, max-pooled, feeds the next scale.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamInit, Params, Scalar, Shape, Tape, Tensor, Var};

/// Number of high-frequency scales; the base sits one halving further down.
pub const SCALES: usize = 3;

struct ScaleParams {
    stem_w: ParamId,
    stem_b: ParamId,
    branch_w: [ParamId; 4],
    branch_b: [ParamId; 4],
    fuse_w: ParamId,
    fuse_b: ParamId,
    res1_w: ParamId,
    res1_b: ParamId,
    res2_w: ParamId,
    res2_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Parameter handles for all three scales.
pub struct LdpParams {
    scales: Vec<ScaleParams>,
    width: usize,
}

/// Tape outputs of the full decomposition: three high-frequency maps at
/// full, half and quarter resolution plus the 1/8-scale base image.
pub struct LdpOut {
    pub hf: [Var; SCALES],
    pub base: Var,
}

/// 3x3 binomial blur tap, outer product of [1, 2, 1] / 4 with itself.
fn binomial3(dy: usize, dx: usize) -> f64 {
    let t = [0.25, 0.5, 0.25];
    t[dy] * t[dx]
}

impl LdpParams {
    /// Registers all scale parameters. The stem starts as a channel-tiling
    /// identity and every branch conv as a per-channel binomial blur, so the
    /// initial differential features equal a difference-of-Gaussians stack.
    /// The projection starts small (not zero) so its branch trains from the
    /// first step.
    pub fn register<T: Scalar>(params: &mut Params<T>, init: &mut ParamInit, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::contract("ldp_register", "width must be positive"));
        }
        let mut scales = Vec::with_capacity(SCALES);
        for s in 0..SCALES {
            let in_c = if s == 0 { 3 } else { width };
            let stem_w = Tensor::from_fn(Shape::new(width, in_c, 3, 3), |o, i, ky, kx| {
                if i == o % in_c && ky == 1 && kx == 1 {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let branch = Tensor::from_fn(Shape::new(width, width, 3, 3), |o, i, ky, kx| {
                if i == o {
                    T::from_f64(binomial3(ky, kx))
                } else {
                    T::zero()
                }
            });
            let bias = |c: usize| Tensor::zeros(Shape::new(1, c, 1, 1));
            let p = &mut *params;
            let pre = format!("ldp.s{s}");
            let branch_w = [
                p.register(format!("{pre}.conv1.w"), branch.clone())?,
                p.register(format!("{pre}.conv2.w"), branch.clone())?,
                p.register(format!("{pre}.conv3.w"), branch.clone())?,
                p.register(format!("{pre}.conv4.w"), branch)?,
            ];
            let branch_b = [
                p.register(format!("{pre}.conv1.b"), bias(width))?,
                p.register(format!("{pre}.conv2.b"), bias(width))?,
                p.register(format!("{pre}.conv3.b"), bias(width))?,
                p.register(format!("{pre}.conv4.b"), bias(width))?,
            ];
            scales.push(ScaleParams {
                stem_w: p.register(format!("{pre}.stem.w"), stem_w)?,
                stem_b: p.register(format!("{pre}.stem.b"), bias(width))?,
                branch_w,
                branch_b,
                fuse_w: p.register(format!("{pre}.fuse.w"), init.uniform_fan_in(Shape::new(width, 3 * width, 3, 3)))?,
                fuse_b: p.register(format!("{pre}.fuse.b"), bias(width))?,
                res1_w: p.register(format!("{pre}.res1.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
                res1_b: p.register(format!("{pre}.res1.b"), bias(width))?,
                res2_w: p.register(format!("{pre}.res2.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
                res2_b: p.register(format!("{pre}.res2.b"), bias(width))?,
                proj_w: p.register(format!("{pre}.proj.w"), init.uniform_fan_in_scaled(Shape::new(3, width, 1, 1), 0.1))?,
                proj_b: p.register(format!("{pre}.proj.b"), bias(3))?,
            });
        }
        Ok(LdpParams { scales, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Reflect-padded 3x3 convolution.
    fn conv3<T: Scalar>(tape: &mut Tape<T>, ps: &Params<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(ps, w)?;
        let bv = tape.param(ps, b)?;
        let padded = tape.pad_reflect(x, 1)?;
        tape.conv2d(padded, wv, bv, 1, 0)
    }

    /// The four sequential conv outputs and their consecutive differences
    /// for one scale. Exposed so the difference maps can be compared against
    /// a classical difference-of-Gaussians stack.
    pub fn differentials<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: Var,
        scale: usize,
    ) -> Result<([Var; SCALES], Var)> {
        let sp = &self.scales[scale];
        let stem = Self::conv3(tape, params, x, sp.stem_w, sp.stem_b)?;
        let c1 = Self::conv3(tape, params, stem, sp.branch_w[0], sp.branch_b[0])?;
        let c2 = Self::conv3(tape, params, c1, sp.branch_w[1], sp.branch_b[1])?;
        let c3 = Self::conv3(tape, params, c2, sp.branch_w[2], sp.branch_b[2])?;
        let c4 = Self::conv3(tape, params, c3, sp.branch_w[3], sp.branch_b[3])?;
        let d1 = tape.sub(c2, c1)?;
        let d2 = tape.sub(c3, c2)?;
        let d3 = tape.sub(c4, c3)?;
        Ok(([d1, d2, d3], c4))
    }

    /// One scale: high-frequency map at the input resolution plus the
    /// max-pooled features for the next scale.
    pub fn scale_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: Var,
        scale: usize,
    ) -> Result<(Var, Var)> {
        if scale >= SCALES {
            return Err(Error::contract("ldp_scale_forward", format!("scale {scale} out of range")));
        }
        let sp = &self.scales[scale];
        let ([d1, d2, d3], c4) = self.differentials(tape, params, x, scale)?;
        let cat12 = tape.concat_channels(d1, d2)?;
        let cat = tape.concat_channels(cat12, d3)?;
        let fused = Self::conv3(tape, params, cat, sp.fuse_w, sp.fuse_b)?;
        let fused = tape.relu(fused)?;
        let r1 = Self::conv3(tape, params, fused, sp.res1_w, sp.res1_b)?;
        let r1 = tape.relu(r1)?;
        let r2 = Self::conv3(tape, params, r1, sp.res2_w, sp.res2_b)?;
        let res = tape.add(fused, r2)?;
        let pw = tape.param(params, sp.proj_w)?;
        let pb = tape.param(params, sp.proj_b)?;
        let hf = tape.conv2d(res, pw, pb, 1, 0)?;
        let down = tape.maxpool2(c4)?;
        Ok((hf, down))
    }

    /// Full decomposition of a 3-channel image whose sides divide by 8.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<LdpOut> {
        let s = tape.shape(x);
        if s.c != 3 {
            return Err(Error::dim("ldp_forward", format!("input {s} must have 3 channels")));
        }
        if s.h % 8 != 0 || s.w % 8 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::dim(
                "ldp_forward",
                format!("input {s} sides must be positive multiples of 8"),
            ));
        }
        let (h0, f1) = self.scale_forward(tape, params, x, 0)?;
        let (h1, f2) = self.scale_forward(tape, params, f1, 1)?;
        let (h2, _) = self.scale_forward(tape, params, f2, 2)?;
        let base = tape.downsample_bilinear(x, 8)?;
        Ok(LdpOut { hf: [h0, h1, h2], base })
    }
}
