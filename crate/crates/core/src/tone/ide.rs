//! Iterative detail enhancement.
//!
//! Starting from the 1/8-scale tone-mapped base, each stage upsamples the
//! running result, concatenates the matching high-frequency map, and adds a
//! predicted residual correction, restoring detail one octave at a time.

use crate::error::{Error, Result};
use crate::pyramid::SCALES;
use crate::tensor::{ParamId, ParamInit, Params, Scalar, Shape, Tape, Tensor, Var};

struct StageParams {
    in_w: ParamId,
    in_b: ParamId,
    res_w: [ParamId; 4],
    res_b: [ParamId; 4],
    out_w: ParamId,
    out_b: ParamId,
}

/// Parameter handles for the three refinement stages.
pub struct IdeParams {
    stages: Vec<StageParams>,
    width: usize,
}

impl IdeParams {
    /// Registers all stage parameters. Each output projection starts small
    /// (not zero) so every stage trains from the first step while the
    /// initial map stays close to plain upsampling.
    pub fn register<T: Scalar>(params: &mut Params<T>, init: &mut ParamInit, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::contract("ide_register", "width must be positive"));
        }
        let bias = |c: usize| Tensor::<T>::zeros(Shape::new(1, c, 1, 1));
        let mut stages = Vec::with_capacity(SCALES);
        for s in 0..SCALES {
            let p = &mut *params;
            let pre = format!("ide.s{s}");
            let res_w = [
                p.register(format!("{pre}.res1a.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
                p.register(format!("{pre}.res1b.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
                p.register(format!("{pre}.res2a.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
                p.register(format!("{pre}.res2b.w"), init.uniform_fan_in(Shape::new(width, width, 3, 3)))?,
            ];
            let res_b = [
                p.register(format!("{pre}.res1a.b"), bias(width))?,
                p.register(format!("{pre}.res1b.b"), bias(width))?,
                p.register(format!("{pre}.res2a.b"), bias(width))?,
                p.register(format!("{pre}.res2b.b"), bias(width))?,
            ];
            stages.push(StageParams {
                in_w: p.register(format!("{pre}.in.w"), init.uniform_fan_in(Shape::new(width, 6, 3, 3)))?,
                in_b: p.register(format!("{pre}.in.b"), bias(width))?,
                res_w,
                res_b,
                out_w: p.register(format!("{pre}.out.w"), init.uniform_fan_in_scaled(Shape::new(3, width, 1, 1), 0.1))?,
                out_b: p.register(format!("{pre}.out.b"), bias(3))?,
            });
        }
        Ok(IdeParams { stages, width })
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

    /// One stage: concatenates the upsampled running result with its
    /// high-frequency map, predicts a 3-channel residual through two
    /// residual blocks, and adds it to the upsampled input.
    pub fn refine<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        stage: usize,
        up: Var,
        hf: Var,
    ) -> Result<Var> {
        if stage >= self.stages.len() {
            return Err(Error::contract("ide_refine", format!("stage {stage} out of range")));
        }
        let sp = &self.stages[stage];
        let cat = tape.concat_channels(up, hf)?;
        let y = Self::conv3(tape, params, cat, sp.in_w, sp.in_b)?;
        let mut f = tape.relu(y)?;
        for block in 0..2 {
            let a = Self::conv3(tape, params, f, sp.res_w[2 * block], sp.res_b[2 * block])?;
            let a = tape.relu(a)?;
            let b = Self::conv3(tape, params, a, sp.res_w[2 * block + 1], sp.res_b[2 * block + 1])?;
            f = tape.add(f, b)?;
        }
        let ow = tape.param(params, sp.out_w)?;
        let ob = tape.param(params, sp.out_b)?;
        let correction = tape.conv2d(f, ow, ob, 1, 0)?;
        tape.add(up, correction)
    }

    /// Runs the three stages from coarse to fine; `hf` is ordered fine to
    /// coarse as produced by the pyramid decomposition. Returns the results
    /// at every scale, full resolution first.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        t3: Var,
        hf: &[Var; SCALES],
    ) -> Result<[Var; 4]> {
        let s = tape.shape(t3);
        if s.c != 3 {
            return Err(Error::dim("ide_forward", format!("input {s} must have 3 channels")));
        }
        let up2 = tape.upsample_bilinear2x(t3)?;
        let t2 = self.refine(tape, params, 0, up2, hf[2])?;
        let up1 = tape.upsample_bilinear2x(t2)?;
        let t1 = self.refine(tape, params, 1, up1, hf[1])?;
        let up0 = tape.upsample_bilinear2x(t1)?;
        let t0 = self.refine(tape, params, 2, up0, hf[0])?;
        Ok([t0, t1, t2, t3])
    }
}
