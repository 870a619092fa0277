//! Recorded-tape reverse-mode differentiation.
//!
//! Every operation validates its input shapes, computes its value eagerly,
//! checks the result for non-finite values and appends a node to the tape.
//! Nodes only ever reference earlier nodes, so the recording order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters live outside the tape in a [`Params`] registry; a forward pass
//! brings them onto the tape with [`Tape::param`], and `backward` returns a
//! [`Gradients`] map aligned with the registry.

use super::kernels::{self, Broadcast};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

pub use super::kernels::PadMode;

/// Epsilon added to the per-plane variance in instance normalization.
const INSTANCE_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter registered in [`Params`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors. Registration order is the canonical order used
/// by the optimizer, checkpoints and gradient maps.
pub struct Params<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(Error::contract("params_register", format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar values across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.shape().numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters that
/// did not participate in the loss have no entry and read back as zeros.
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Gradient for `id`, materializing zeros for unreachable parameters.
    pub fn dense(&self, params: &Params<T>, id: ParamId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.value(id).shape()),
        }
    }

    /// Euclidean norm over all gradient entries, in f64.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`]. Vars are only valid on the tape
/// that produced them; mixing tapes is a contract error.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Operation record. Saved fields are whatever the backward pass needs
/// beyond the input values themselves (which are read back off the tape).
pub enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    /// `a * x + b` with scalar constants.
    Affine(Var, T, T),
    PowConst(Var, T),
    ClampMin(Var, T),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u8> },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    ConcatChannels(Var, Var),
    PadReflect { x: Var, pad: usize },
    Crop { x: Var, top: usize, left: usize },
    ResizeBilinear(Var),
    Filter2d { x: Var, kernel: Vec<T>, k: usize, pad: usize, mode: PadMode },
    SumAll(Var),
    MeanAll(Var),
    LutCombine { weights: Var, bank: Var },
    LutApply { x: Var, luts: Var, grid: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Wengert tape recording a forward computation.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    watched: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            watched: Vec::new(),
        }
    }

    /// Drops the recording (capacity retained) and invalidates outstanding
    /// [`Var`]s so stale handles error instead of reading garbage.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.watched.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "Var used on a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Value of a scalar-shaped node.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn check_var(&self, op: &'static str, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::contract(op, "Var belongs to a different tape"));
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(op_name, "output contains NaN or infinity"));
        }
        self.nodes.push(Node { value, op, param: None });
        Ok(Var { idx: self.nodes.len() - 1, tape: self.id })
    }

    /// Records a constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Brings a parameter onto the tape as a leaf. Repeated calls for the
    /// same parameter return the same node so gradients accumulate in one
    /// slot.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> Result<Var> {
        if let Some(&(_, var)) = self.watched.iter().find(|(pid, _)| *pid == id) {
            return Ok(var);
        }
        let var = self.push("param", params.value(id).clone(), Op::Leaf)?;
        self.nodes[var.idx].param = Some(id);
        self.watched.push((id, var));
        Ok(var)
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_var(name, a)?;
        self.check_var(name, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = kernels::broadcast_of(sa, sb).ok_or_else(|| {
            Error::dim(name, format!("cannot broadcast rhs {sb} onto lhs {sa}"))
        })?;
        let out = kernels::ew_apply(self.value(a), self.value(b), bc, f);
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var("relu", x)?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.check_var("leaky_relu", x)?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check_var("abs", x)?;
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs(x))
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        self.check_var("affine", x)?;
        let out = self.value(x).map(|v| a * v + b);
        self.push("affine", out, Op::Affine(x, a, b))
    }

    /// `x^p` for a constant exponent; inputs must be positive when `p` is
    /// fractional (guard with [`Tape::clamp_min`]).
    pub fn pow_const(&mut self, x: Var, p: T) -> Result<Var> {
        self.check_var("pow_const", x)?;
        let out = self.value(x).map(|v| v.powf(p));
        self.push("pow_const", out, Op::PowConst(x, p))
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        self.check_var("clamp_min", x)?;
        let out = self.value(x).map(|v| v.max(min));
        self.push("clamp_min", out, Op::ClampMin(x, min))
    }

    // ── Structured ops ─────────────────────────────────────────────────

    /// 2D convolution with zero padding. `w` is `(oc, ic, k, k)`, `b` is
    /// `(1, oc, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_var("conv2d", x)?;
        self.check_var("conv2d", w)?;
        self.check_var("conv2d", b)?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.h != ws.w {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::dim("conv2d", format!("weight {ws} does not match input channels of {xs}")));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::dim("conv2d", format!("bias {bs} must be (1,{},1,1)", ws.n)));
        }
        if kernels::conv2d_out_dims(xs.h, xs.w, ws.h, stride, pad).is_none() {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} does not fit input {xs}", ws.h, ws.h),
            ));
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Fully connected layer treating `x` as `(n, d)` with `d = c*h*w`.
    /// `w` is `(out, d, 1, 1)`, `b` is `(1, out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_var("linear", x)?;
        self.check_var("linear", w)?;
        self.check_var("linear", b)?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let d = xs.numel() / xs.n;
        if ws.c * ws.h * ws.w != d {
            return Err(Error::dim("linear", format!("weight {ws} does not match input features {d}")));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::dim("linear", format!("bias {bs} must be (1,{},1,1)", ws.n)));
        }
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b));
        self.push("linear", out, Op::Linear { x, w, b })
    }

    /// 2x2 stride-2 max pooling; ties resolve to the first window position
    /// in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check_var("maxpool2", x)?;
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 || xs.h == 0 || xs.w == 0 {
            return Err(Error::dim("maxpool2", format!("input {xs} must have even height and width")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x));
        self.push("maxpool2", out, Op::MaxPool2 { x, argmax })
    }

    /// 2x2 stride-2 average pooling; a trailing odd row/column is dropped.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        self.check_var("avgpool2", x)?;
        let xs = self.shape(x);
        if xs.h < 2 || xs.w < 2 {
            return Err(Error::dim("avgpool2", format!("input {xs} is smaller than the window")));
        }
        let out = kernels::avgpool2_forward(self.value(x));
        self.push("avgpool2", out, Op::AvgPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_var("global_avg_pool", x)?;
        let out = kernels::global_avg_pool_forward(self.value(x));
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.check_var("adaptive_avg_pool", x)?;
        let xs = self.shape(x);
        if oh == 0 || ow == 0 || oh > xs.h || ow > xs.w {
            return Err(Error::dim(
                "adaptive_avg_pool",
                format!("output {oh}x{ow} invalid for input {xs}"),
            ));
        }
        let out = kernels::adaptive_avg_pool_forward(self.value(x), oh, ow);
        self.push("adaptive_avg_pool", out, Op::AdaptiveAvgPool(x))
    }

    /// Instance normalization with learned per-channel scale and shift
    /// (`gamma`, `beta` shaped `(1, c, 1, 1)`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_var("instance_norm", x)?;
        self.check_var("instance_norm", gamma)?;
        self.check_var("instance_norm", beta)?;
        let (xs, gs, bs) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let want = Shape::new(1, xs.c, 1, 1);
        if gs != want || bs != want {
            return Err(Error::dim("instance_norm", format!("gamma {gs} / beta {bs} must be {want}")));
        }
        let eps = T::from_f64(INSTANCE_NORM_EPS);
        let (out, stats) = kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        for (i, &(mean, inv_std)) in stats.iter().enumerate() {
            if !mean.is_finite() || !inv_std.is_finite() {
                return Err(Error::numeric(
                    "instance_norm",
                    format!("degenerate statistics on plane {i} (mean {mean}, inv_std {inv_std})"),
                ));
            }
        }
        self.push("instance_norm", out, Op::InstanceNorm { x, gamma, beta, stats })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("concat_channels", a)?;
        self.check_var("concat_channels", b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::dim("concat_channels", format!("incompatible shapes {sa} and {sb}")));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut out = Tensor::zeros(out_shape);
        for ni in 0..sa.n {
            for ci in 0..sa.c {
                out.plane_mut(ni, ci).copy_from_slice(self.value(a).plane(ni, ci));
            }
            for ci in 0..sb.c {
                out.plane_mut(ni, sa.c + ci).copy_from_slice(self.value(b).plane(ni, ci));
            }
        }
        self.push("concat_channels", out, Op::ConcatChannels(a, b))
    }

    /// Mirrors `pad` rows/columns at each border without repeating the edge
    /// sample. Combined with a pad-0 conv this gives reflect-padded
    /// convolution, which keeps constant images constant at the borders.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.check_var("pad_reflect", x)?;
        let xs = self.shape(x);
        if pad >= xs.h || pad >= xs.w {
            return Err(Error::dim("pad_reflect", format!("pad {pad} too large for input {xs}")));
        }
        let out = kernels::pad_reflect_forward(self.value(x), pad);
        self.push("pad_reflect", out, Op::PadReflect { x, pad })
    }

    /// Extracts the `oh` x `ow` window whose top-left corner is
    /// `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, oh: usize, ow: usize) -> Result<Var> {
        self.check_var("crop", x)?;
        let xs = self.shape(x);
        if oh == 0 || ow == 0 || top + oh > xs.h || left + ow > xs.w {
            return Err(Error::dim(
                "crop",
                format!("window {oh}x{ow} at ({top},{left}) exceeds input {xs}"),
            ));
        }
        let out = kernels::crop_forward(self.value(x), top, left, oh, ow);
        self.push("crop", out, Op::Crop { x, top, left })
    }

    /// Bilinear resize to an arbitrary size (align-corners-false sampling).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.check_var("resize_bilinear", x)?;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("resize_bilinear", "output size must be positive"));
        }
        let out = kernels::resize_bilinear_forward(self.value(x), oh, ow);
        self.push("resize_bilinear", out, Op::ResizeBilinear(x))
    }

    /// Doubles height and width by bilinear interpolation.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        self.resize_bilinear(x, xs.h * 2, xs.w * 2)
    }

    /// Shrinks by an integer factor (dims must divide evenly).
    pub fn downsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x);
        if factor == 0 || xs.h % factor != 0 || xs.w % factor != 0 {
            return Err(Error::dim(
                "downsample_bilinear",
                format!("factor {factor} does not divide input {xs}"),
            ));
        }
        self.resize_bilinear(x, xs.h / factor, xs.w / factor)
    }

    /// Correlates each channel plane with the same fixed (non-trainable)
    /// kernel. With `PadMode::Zero` and `pad = 0` this is a valid-mode
    /// correlation.
    pub fn filter2d(&mut self, x: Var, kernel: &[T], k: usize, pad: usize, mode: PadMode) -> Result<Var> {
        self.check_var("filter2d", x)?;
        if kernel.len() != k * k || k == 0 {
            return Err(Error::contract("filter2d", format!("kernel length {} != {k}x{k}", kernel.len())));
        }
        let xs = self.shape(x);
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(Error::dim("filter2d", format!("kernel {k} too large for input {xs} at pad {pad}")));
        }
        if mode == PadMode::Reflect && (pad >= xs.h || pad >= xs.w) {
            return Err(Error::dim("filter2d", format!("reflect pad {pad} too large for input {xs}")));
        }
        let out = kernels::filter2d_forward(self.value(x), kernel, k, pad, mode);
        self.push("filter2d", out, Op::Filter2d { x, kernel: kernel.to_vec(), k, pad, mode })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_var("sum_all", x)?;
        let s = kernels::sum_all_f64(self.value(x));
        self.push("sum_all", Tensor::scalar(T::from_f64(s)), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check_var("mean_all", x)?;
        let n = self.shape(x).numel() as f64;
        let s = kernels::sum_all_f64(self.value(x)) / n;
        self.push("mean_all", Tensor::scalar(T::from_f64(s)), Op::MeanAll(x))
    }

    // ── LUT ops ────────────────────────────────────────────────────────

    /// Per-patch weighted sums of basis LUTs. `weights` is `(n, r, gy, gx)`,
    /// `bank` is `(r, 3, v, v*v)`; output `(n, gy*gx*3, v, v*v)`.
    pub fn lut_combine(&mut self, weights: Var, bank: Var) -> Result<Var> {
        self.check_var("lut_combine", weights)?;
        self.check_var("lut_combine", bank)?;
        let (ws, bs) = (self.shape(weights), self.shape(bank));
        if bs.c != 3 || bs.w != bs.h * bs.h || bs.h < 2 {
            return Err(Error::dim("lut_combine", format!("bank shape {bs} is not (r,3,v,v*v)")));
        }
        if ws.c != bs.n {
            return Err(Error::dim("lut_combine", format!("weights {ws} do not match bank of {} bases", bs.n)));
        }
        let out = kernels::lut_combine_forward(self.value(weights), self.value(bank));
        self.push("lut_combine", out, Op::LutCombine { weights, bank })
    }

    /// Applies per-patch LUTs with bilinear patch blending. `x` is
    /// `(n, 3, h, w)`; `luts` is `(n, grid*grid*3, v, v*v)`. Inputs are
    /// clamped to [0, 1] before lookup.
    pub fn lut_apply(&mut self, x: Var, luts: Var, grid: usize) -> Result<Var> {
        self.check_var("lut_apply", x)?;
        self.check_var("lut_apply", luts)?;
        let (xs, ls) = (self.shape(x), self.shape(luts));
        if xs.c != 3 {
            return Err(Error::dim("lut_apply", format!("input {xs} must have 3 channels")));
        }
        if grid == 0 || ls.n != xs.n || ls.c != grid * grid * 3 || ls.w != ls.h * ls.h || ls.h < 2 {
            return Err(Error::dim(
                "lut_apply",
                format!("luts {ls} do not match grid {grid} and input {xs}"),
            ));
        }
        let out = kernels::lut_apply_forward(self.value(x), self.value(luts), grid);
        self.push("lut_apply", out, Op::LutApply { x, luts, grid })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every watched
    /// parameter; parameters the loss does not reach read back as zeros.
    pub fn backward(&self, loss: Var, params: &Params<T>) -> Result<Gradients<T>> {
        self.check_var("backward", loss)?;
        if !self.shape(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar-shaped, got {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let keep_for_param = self.nodes[idx].param.is_some();
            self.propagate(idx, &g, &mut grads)?;
            if keep_for_param {
                grads[idx] = Some(g);
            }
        }

        let mut slots: Vec<Option<Tensor<T>>> = (0..params.len()).map(|_| None).collect();
        for &(pid, var) in &self.watched {
            if let Some(g) = grads[var.idx].take() {
                if !g.all_finite() {
                    return Err(Error::numeric(
                        "backward",
                        format!("gradient for parameter {} is not finite", params.name(pid)),
                    ));
                }
                slots[pid.0] = Some(g);
            }
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.idx].value;
        let mut acc = |v: Var, delta: Tensor<T>| {
            match &mut grads[v.idx] {
                slot @ None => *slot = Some(delta),
                Some(t) => {
                    for (o, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                        *o = *o + d;
                    }
                }
            };
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let bc = kernels::broadcast_of(val(*a).shape(), val(*b).shape()).unwrap();
                acc(*a, g.clone());
                acc(*b, kernels::reduce_broadcast(g, val(*b).shape(), bc));
            }
            Op::Sub(a, b) => {
                let bc = kernels::broadcast_of(val(*a).shape(), val(*b).shape()).unwrap();
                acc(*a, g.clone());
                let neg = g.map(|v| -v);
                acc(*b, kernels::reduce_broadcast(&neg, val(*b).shape(), bc));
            }
            Op::Mul(a, b) => {
                let bc = kernels::broadcast_of(val(*a).shape(), val(*b).shape()).unwrap();
                acc(*a, kernels::ew_apply(g, val(*b), bc, |gv, bv| gv * bv));
                let ga_full = kernels::ew_apply(g, val(*a), Broadcast::Same, |gv, av| gv * av);
                acc(*b, kernels::reduce_broadcast(&ga_full, val(*b).shape(), bc));
            }
            Op::Div(a, b) => {
                let bc = kernels::broadcast_of(val(*a).shape(), val(*b).shape()).unwrap();
                acc(*a, kernels::ew_apply(g, val(*b), bc, |gv, bv| gv / bv));
                // d(a/b)/db = -a/b^2 = -out/b
                let gout = kernels::ew_apply(g, &node.value, Broadcast::Same, |gv, ov| gv * ov);
                let gb_full = kernels::ew_apply(&gout, val(*b), bc, |gv, bv| -gv / bv);
                acc(*b, kernels::reduce_broadcast(&gb_full, val(*b).shape(), bc));
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= T::zero() {
                        *dv = T::zero();
                    }
                }
                acc(*x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= T::zero() {
                        *dv = *dv * *slope;
                    }
                }
                acc(*x, d);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    *dv = if xv > T::zero() {
                        *dv
                    } else if xv < T::zero() {
                        -*dv
                    } else {
                        T::zero()
                    };
                }
                acc(*x, d);
            }
            Op::Affine(x, a, _) => acc(*x, g.map(|v| *a * v)),
            Op::PowConst(x, p) => {
                let mut d = g.clone();
                let pm1 = *p - T::one();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    *dv = *dv * *p * xv.powf(pm1);
                }
                acc(*x, d);
            }
            Op::ClampMin(x, m) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= *m {
                        *dv = T::zero();
                    }
                }
                acc(*x, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                acc(*x, kernels::conv2d_backward_input(g, val(*w), val(*x).shape(), *stride, *pad));
                acc(*w, kernels::conv2d_backward_weight(val(*x), g, val(*w).shape(), *stride, *pad));
                acc(*b, kernels::conv2d_backward_bias(g));
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(val(*x), val(*w), g);
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, kernels::maxpool2_backward(g, argmax, val(*x).shape()));
            }
            Op::AvgPool2(x) => acc(*x, kernels::avgpool2_backward(g, val(*x).shape())),
            Op::GlobalAvgPool(x) => acc(*x, kernels::global_avg_pool_backward(g, val(*x).shape())),
            Op::AdaptiveAvgPool(x) => acc(*x, kernels::adaptive_avg_pool_backward(g, val(*x).shape())),
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let (gx, gg, gb) = kernels::instance_norm_backward(val(*x), val(*gamma), stats, g);
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for ni in 0..sa.n {
                    for ci in 0..sa.c {
                        ga.plane_mut(ni, ci).copy_from_slice(g.plane(ni, ci));
                    }
                    for ci in 0..sb.c {
                        gb.plane_mut(ni, ci).copy_from_slice(g.plane(ni, sa.c + ci));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::PadReflect { x, pad } => {
                acc(*x, kernels::pad_reflect_backward(g, *pad, val(*x).shape()));
            }
            Op::Crop { x, top, left } => {
                acc(*x, kernels::crop_backward(g, *top, *left, val(*x).shape()));
            }
            Op::ResizeBilinear(x) => acc(*x, kernels::resize_bilinear_backward(g, val(*x).shape())),
            Op::Filter2d { x, kernel, k, pad, mode } => {
                acc(*x, kernels::filter2d_backward_input(g, kernel, *k, *pad, *mode, val(*x).shape()));
            }
            Op::SumAll(x) => {
                let gs = g.item().expect("sum_all grad is scalar");
                acc(*x, Tensor::full(val(*x).shape(), gs));
            }
            Op::MeanAll(x) => {
                let gs = g.item().expect("mean_all grad is scalar");
                let scale = T::from_f64(1.0 / val(*x).shape().numel() as f64);
                acc(*x, Tensor::full(val(*x).shape(), gs * scale));
            }
            Op::LutCombine { weights, bank } => {
                let (gw, gbank) = kernels::lut_combine_backward(val(*weights), val(*bank), g);
                acc(*weights, gw);
                acc(*bank, gbank);
            }
            Op::LutApply { x, luts, grid } => {
                let (gx, gluts) = kernels::lut_apply_backward(val(*x), val(*luts), *grid, g);
                acc(*x, gx);
                acc(*luts, gluts);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
