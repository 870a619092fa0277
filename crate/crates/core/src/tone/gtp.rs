//! Global tone perception.
//!
//! A small condition network pools the 1/8-scale base image into a vector z;
//! per-layer linear heads turn z into channelwise scale/shift pairs that
//! modulate a three-layer convolutional core. The block returns the base
//! image plus a projected correction, so it starts close to an identity map
//! and learns a content-adaptive global tone curve.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamInit, Params, Scalar, Shape, Tape, Tensor, Var};

/// Number of modulated core layers.
const LAYERS: usize = 3;

/// Parameter handles for the condition net, modulation heads and core.
pub struct GtpParams {
    cond_w: [ParamId; 3],
    cond_b: [ParamId; 3],
    head_gamma: [ParamId; LAYERS],
    head_beta: [ParamId; LAYERS],
    in_w: ParamId,
    in_b: ParamId,
    core_w: [ParamId; LAYERS],
    core_b: [ParamId; LAYERS],
    out_w: ParamId,
    out_b: ParamId,
    width: usize,
}

impl GtpParams {
    /// Registers condition, head and core parameters. The heads carry no
    /// bias, so with an all-zero input the modulation is exactly zero; their
    /// weights still start random so the condition branch receives gradient
    /// from the first step. The output projection starts small (not zero)
    /// for the same reason.
    pub fn register<T: Scalar>(params: &mut Params<T>, init: &mut ParamInit, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::contract("gtp_register", "width must be positive"));
        }
        let bias = |c: usize| Tensor::<T>::zeros(Shape::new(1, c, 1, 1));
        let p = &mut *params;
        let cond_w = [
            p.register("gtp.cond1.w", init.uniform_fan_in(Shape::new(width, 3, 3, 3)))?,
            p.register("gtp.cond2.w", init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
            p.register("gtp.cond3.w", init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
        ];
        let cond_b = [
            p.register("gtp.cond1.b", bias(width))?,
            p.register("gtp.cond2.b", bias(width))?,
            p.register("gtp.cond3.b", bias(width))?,
        ];
        let mut head_gamma = [ParamId::default(); LAYERS];
        let mut head_beta = [ParamId::default(); LAYERS];
        for l in 0..LAYERS {
            head_gamma[l] = p.register(
                format!("gtp.head{}.gamma", l + 1),
                init.uniform_fan_in(Shape::new(width, width, 1, 1)),
            )?;
            head_beta[l] = p.register(
                format!("gtp.head{}.beta", l + 1),
                init.uniform_fan_in(Shape::new(width, width, 1, 1)),
            )?;
        }
        let mut core_w = [ParamId::default(); LAYERS];
        let mut core_b = [ParamId::default(); LAYERS];
        for l in 0..LAYERS {
            core_w[l] = p.register(
                format!("gtp.core{}.w", l + 1),
                init.uniform_fan_in(Shape::new(width, width, 3, 3)),
            )?;
            core_b[l] = p.register(format!("gtp.core{}.b", l + 1), bias(width))?;
        }
        Ok(GtpParams {
            cond_w,
            cond_b,
            head_gamma,
            head_beta,
            in_w: p.register("gtp.in_proj.w", init.uniform_fan_in(Shape::new(width, 3, 1, 1)))?,
            in_b: p.register("gtp.in_proj.b", bias(width))?,
            core_w,
            core_b,
            out_w: p.register("gtp.out_proj.w", init.uniform_fan_in_scaled(Shape::new(3, width, 1, 1), 0.1))?,
            out_b: p.register("gtp.out_proj.b", bias(3))?,
            width,
        })
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

    /// Condition vector z: three convolutions with relu, then a global
    /// average pool. Shape `(n, width, 1, 1)`.
    pub fn condition<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let mut f = x;
        for l in 0..3 {
            f = Self::conv3(tape, params, f, self.cond_w[l], self.cond_b[l])?;
            f = tape.relu(f)?;
        }
        tape.global_avg_pool(f)
    }

    /// Globally toned base image, same shape as the input. Each core layer
    /// computes `relu(conv(F) * gamma + beta + F)` with gamma/beta broadcast
    /// per channel; the result is projected back to 3 channels and added to
    /// the input.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, l3: Var) -> Result<Var> {
        let s = tape.shape(l3);
        if s.c != 3 {
            return Err(Error::dim("gtp_forward", format!("input {s} must have 3 channels")));
        }
        let z = self.condition(tape, params, l3)?;
        let head_bias = tape.constant(Tensor::zeros(Shape::new(1, self.width, 1, 1)))?;
        let iw = tape.param(params, self.in_w)?;
        let ib = tape.param(params, self.in_b)?;
        let mut f = tape.conv2d(l3, iw, ib, 1, 0)?;
        for l in 0..LAYERS {
            let gw = tape.param(params, self.head_gamma[l])?;
            let bw = tape.param(params, self.head_beta[l])?;
            let gamma = tape.linear(z, gw, head_bias)?;
            let beta = tape.linear(z, bw, head_bias)?;
            let conv = Self::conv3(tape, params, f, self.core_w[l], self.core_b[l])?;
            let scaled = tape.mul(conv, gamma)?;
            let shifted = tape.add(scaled, beta)?;
            let pre = tape.add(shifted, f)?;
            f = tape.relu(pre)?;
        }
        let ow = tape.param(params, self.out_w)?;
        let ob = tape.param(params, self.out_b)?;
        let correction = tape.conv2d(f, ow, ob, 1, 0)?;
        tape.add(l3, correction)
    }
}
