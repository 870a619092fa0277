//! The assembled tone-mapping model: differential pyramid decomposition,
//! global tone perception, patch-wise LUT tuning and iterative detail
//! enhancement wired end to end on one gradient tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{LdpParams, SCALES};
use crate::tensor::{kernels, ParamInit, Params, Scalar, Tape, Tensor, Var};
use crate::tone::gtp::GtpParams;
use crate::tone::ide::IdeParams;
use crate::tone::ltt::LttParams;

/// Architecture hyperparameters. The defaults land the full model near 200K
/// trainable scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width of every convolutional block.
    pub width: usize,
    /// Number of basis LUTs in the shared bank.
    pub basis_count: usize,
    /// Lattice points per color axis of each LUT.
    pub lut_size: usize,
    /// Patch grid is `grid x grid` over the 1/8-scale image.
    pub grid: usize,
    /// Per-patch descriptor length.
    pub descriptor_dim: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 20,
            basis_count: 8,
            lut_size: 9,
            grid: 4,
            descriptor_dim: 6,
            seed: 7,
        }
    }
}

/// All four stages plus their parameter handles.
pub struct Model {
    config: ModelConfig,
    pub ldp: LdpParams,
    pub gtp: GtpParams,
    pub ltt: LttParams,
    pub ide: IdeParams,
}

/// Tape handles for every intermediate the losses need.
pub struct PipelineOut {
    /// Tone-mapped results from full resolution (`t[0]`) down to 1/8 scale.
    pub t: [Var; 4],
    /// High-frequency maps, fine to coarse.
    pub hf: [Var; SCALES],
    /// 1/8-scale base image.
    pub l3: Var,
    /// Globally toned base image.
    pub l3g: Var,
    /// Per-patch LUT stack `(n, grid*grid*3, v, v*v)`.
    pub luts: Var,
    /// LUT mixing weights `(n, basis_count, grid, grid)`.
    pub lut_weights: Var,
}

impl Model {
    /// Registers all parameters into `params` and returns the model handle.
    pub fn register<T: Scalar>(config: ModelConfig, params: &mut Params<T>) -> Result<Self> {
        if config.grid == 0 {
            return Err(Error::contract("model_register", "grid must be positive"));
        }
        let mut init = ParamInit::new(config.seed);
        let ldp = LdpParams::register(params, &mut init, config.width)?;
        let gtp = GtpParams::register(params, &mut init, config.width)?;
        let ltt = LttParams::register(
            params,
            &mut init,
            config.width,
            config.descriptor_dim,
            config.grid,
            config.basis_count,
            config.lut_size,
        )?;
        let ide = IdeParams::register(params, &mut init, config.width)?;
        Ok(Model { config, ldp, gtp, ltt, ide })
    }

    /// Fresh parameter registry plus the model handle.
    pub fn new<T: Scalar>(config: ModelConfig) -> Result<(Self, Params<T>)> {
        let mut params = Params::new();
        let model = Self::register(config, &mut params)?;
        Ok((model, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Smallest input side `map_image` accepts without erroring: the working
    /// size must reach `8 * grid` and reflect padding cannot exceed the
    /// image itself.
    pub fn min_side(&self) -> usize {
        let target = 8 * self.config.grid;
        (1..=target).find(|&side| target.div_ceil(2) - side / 2 < side).unwrap_or(target)
    }

    /// End-to-end differentiable forward pass. `x` must be 3-channel with
    /// sides divisible by 8 and at least `8 * grid`; outputs are not clamped
    /// so losses see the raw values.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<PipelineOut> {
        let s = tape.shape(x);
        let min = 8 * self.config.grid;
        if s.h < min || s.w < min {
            return Err(Error::dim(
                "model_forward",
                format!("input {s} sides must be at least {min} for a {0}x{0} patch grid", self.config.grid),
            ));
        }
        let ldp = self.ldp.forward(tape, params, x)?;
        let l3 = ldp.base;
        let l3g = self.gtp.forward(tape, params, l3)?;
        let ltt = self.ltt.forward(tape, params, l3g)?;
        let t = self.ide.forward(tape, params, ltt.t3, &ldp.hf)?;
        Ok(PipelineOut {
            t,
            hf: ldp.hf,
            l3,
            l3g,
            luts: ltt.luts,
            lut_weights: ltt.weights,
        })
    }

    /// Maps one image of arbitrary size: reflect-pads to a valid working
    /// size, runs the pipeline without gradients, crops back and clamps to
    /// [0,1] for export.
    pub fn map_image<T: Scalar>(&self, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::dim("map_image", format!("input {s} must have 3 channels")));
        }
        let min = 8 * self.config.grid;
        let th = s.h.max(min).div_ceil(8) * 8;
        let tw = s.w.max(min).div_ceil(8) * 8;
        let (dh, dw) = (th - s.h, tw - s.w);
        let pad = (dh.div_ceil(2)).max(dw.div_ceil(2));
        if pad >= s.h.min(s.w) {
            return Err(Error::dim(
                "map_image",
                format!("input {s} too small to pad to {th}x{tw}; sides must be at least {}", self.min_side()),
            ));
        }
        let (top_off, left_off) = (dh / 2, dw / 2);
        let work = if pad == 0 {
            x.clone()
        } else {
            let padded = kernels::pad_reflect_forward(x, pad);
            kernels::crop_forward(&padded, pad - top_off, pad - left_off, th, tw)
        };
        let mut tape = Tape::new();
        let xv = tape.constant(work)?;
        let out = self.forward(&mut tape, params, xv)?;
        let full = tape.value(out.t[0]);
        let restored = if pad == 0 {
            full.clone()
        } else {
            kernels::crop_forward(full, top_off, left_off, s.h, s.w)
        };
        Ok(restored.map(|v| v.max(T::zero()).min(T::one())))
    }
}
