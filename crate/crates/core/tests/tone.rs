//! Behavior of the tone-mapping blocks: global tone perception reduces to
//! identity with zero parameters, local tuning reduces to a clamp with an
//! identity LUT, detail enhancement reduces to plain upsampling, and the
//! composed pipeline matches the oracle built from those pieces. Gradients
//! of every block match finite differences and no parameter is dead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyrtone::tensor::{check_param, AdamW, FdCheck, ParamId, ParamInit, Params, Shape, Tape, Tensor, Var};
use pyrtone::tone::{GtpParams, IdeParams, Lut3D, LttParams, Model, ModelConfig};

fn random_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn zero_params(params: &mut Params<f64>, prefix: &str) {
    let ids: Vec<ParamId> = params
        .iter()
        .filter(|(_, name, _)| name.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let v = params.value_mut(id);
        *v = Tensor::zeros(v.shape());
    }
}

fn set_param(params: &mut Params<f64>, name: &str, value: Tensor<f64>) {
    let id = params.find(name).unwrap_or_else(|| panic!("no parameter named {name}"));
    assert_eq!(params.value(id).shape(), value.shape(), "{name}");
    *params.value_mut(id) = value;
}

/// Deterministic, sign-varying probe so gradient errors cannot cancel.
fn probe_loss(tape: &mut Tape<f64>, out: Var) -> Var {
    let s = tape.shape(out);
    let (cc, hh, ww) = (s.c, s.h, s.w);
    let coef = Tensor::from_fn(s, |n, c, y, x| {
        let flat = ((n * cc + c) * hh + y) * ww + x;
        ((flat as u64).wrapping_mul(2654435761) % 97) as f64 / 97.0 - 0.5
    });
    let cv = tape.constant(coef).unwrap();
    let prod = tape.mul(out, cv).unwrap();
    tape.sum_all(prod).unwrap()
}

fn assert_grads_match(
    params: &mut Params<f64>,
    names: &[&str],
    samples: usize,
    build: &dyn Fn(&mut Tape<f64>, &Params<f64>) -> pyrtone::Result<Var>,
) {
    let grads = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params).unwrap();
        tape.backward(loss, params).unwrap()
    };
    let ids: Vec<ParamId> = if names.is_empty() {
        params.iter().map(|(id, _, _)| id).collect()
    } else {
        names.iter().map(|n| params.find(n).unwrap_or_else(|| panic!("no parameter named {n}"))).collect()
    };
    let mut cfg = FdCheck::for_composite();
    cfg.samples = samples;
    for id in ids {
        let analytic = grads.dense(params, id);
        let report = check_param(params, id, &analytic, &cfg, |ps| {
            let mut tape = Tape::new();
            let loss = build(&mut tape, ps)?;
            tape.scalar_value(loss)
        })
        .unwrap();
        assert!(
            report.pass,
            "{}: rel err {:.3e}, abs err {:.3e} at {:?}",
            report.name, report.max_rel_err, report.max_abs_err, report.worst_flat_index
        );
        assert!(report.checked > 0, "{}: every sampled entry was excluded", report.name);
    }
}

// ── Global tone perception ──────────────────────────────────────────────────

#[test]
fn gtp_zero_params_is_identity() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(3);
    let gtp = GtpParams::register(&mut params, &mut init, 8).unwrap();
    zero_params(&mut params, "gtp.");

    let x = random_tensor(Shape::new(2, 3, 9, 7), 1, 0.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let out = gtp.forward(&mut tape, &params, xv).unwrap();
    let diff = tape.value(out).max_abs_diff(&x).unwrap();
    assert!(diff < 1e-15, "zeroed block must pass the input through, diff {diff}");
}

#[test]
fn gtp_condition_sensitive_to_global_brightness() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(5);
    let gtp = GtpParams::register(&mut params, &mut init, 8).unwrap();

    let x = random_tensor(Shape::new(1, 3, 8, 8), 2, 0.1, 0.5);
    let brighter = x.map(|v| v * 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let bv = tape.constant(brighter).unwrap();
    let z1 = gtp.condition(&mut tape, &params, xv).unwrap();
    let z2 = gtp.condition(&mut tape, &params, bv).unwrap();
    let (z1, z2) = (tape.value(z1), tape.value(z2));
    let dist: f64 = z1
        .data()
        .iter()
        .zip(z2.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(dist > 1e-6, "condition vector must react to brightness, distance {dist}");
}

#[test]
fn gtp_gradients_match_finite_differences() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(7);
    let gtp = GtpParams::register(&mut params, &mut init, 6).unwrap();
    let x = random_tensor(Shape::new(1, 3, 6, 6), 3, 0.0, 1.5);

    assert_grads_match(&mut params, &[], 12, &|tape, ps| {
        let xv = tape.constant(x.clone())?;
        let out = gtp.forward(tape, ps, xv)?;
        Ok(probe_loss(tape, out))
    });
}

// ── Local tone tuning ───────────────────────────────────────────────────────

#[test]
fn ltt_identity_bank_with_forced_weight_clamps_input() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(9);
    let ltt = LttParams::register(&mut params, &mut init, 8, 6, 4, 4, 9).unwrap();
    // Zeroing the predictor weights leaves the one-hot bias, which selects
    // the identity basis table exactly.
    zero_params(&mut params, "ltt.fc.w");

    let x = random_tensor(Shape::new(2, 3, 8, 8), 4, -0.5, 1.8);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let out = ltt.forward(&mut tape, &params, xv).unwrap();
    let t3 = tape.value(out.t3);
    let clamped = x.map(|v| v.clamp(0.0, 1.0));
    let diff = t3.max_abs_diff(&clamped).unwrap();
    assert!(diff < 1e-9, "identity LUT must clamp and pass through, diff {diff}");

    let weights = tape.value(out.weights);
    for p in 0..16 {
        assert_eq!(weights.plane(0, 0)[p % 4], 1.0);
        for r in 1..4 {
            assert_eq!(weights.plane(0, r)[p % 4], 0.0);
        }
    }
}

#[test]
fn ltt_constant_image_yields_identical_patch_luts() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(11);
    let ltt = LttParams::register(&mut params, &mut init, 8, 6, 4, 8, 9).unwrap();
    // Randomize every parameter so the equality is a property of the
    // architecture, not of the initialization.
    let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for id in ids {
        let v = params.value_mut(id);
        *v = Tensor::from_fn(v.shape(), |_, _, _, _| rng.gen_range(-0.5..0.5));
    }

    let x = Tensor::full(Shape::new(1, 3, 16, 16), 0.37f64);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let out = ltt.forward(&mut tape, &params, xv).unwrap();
    let stacked = tape.value(out.luts);
    let first = Lut3D::from_tensor_patch(stacked, 0, 0).unwrap();
    for p in 1..16 {
        let other = Lut3D::from_tensor_patch(stacked, 0, p).unwrap();
        let max_diff = first
            .entries()
            .iter()
            .zip(other.entries())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "patch {p} diverges by {max_diff}");
    }
}

#[test]
fn ltt_gradients_match_finite_differences() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(13);
    let ltt = LttParams::register(&mut params, &mut init, 6, 4, 2, 3, 5).unwrap();
    let x = random_tensor(Shape::new(1, 3, 6, 6), 5, 0.05, 0.95);

    assert_grads_match(&mut params, &[], 12, &|tape, ps| {
        let xv = tape.constant(x.clone())?;
        let out = ltt.forward(tape, ps, xv)?;
        Ok(probe_loss(tape, out.t3))
    });
}

// ── Iterative detail enhancement ────────────────────────────────────────────

fn random_stack(seed: u64, h: usize, w: usize) -> (Tensor<f64>, [Tensor<f64>; 3]) {
    let t3 = random_tensor(Shape::new(1, 3, h / 8, w / 8), seed, 0.0, 1.0);
    let hf = [
        random_tensor(Shape::new(1, 3, h, w), seed + 1, -0.2, 0.2),
        random_tensor(Shape::new(1, 3, h / 2, w / 2), seed + 2, -0.2, 0.2),
        random_tensor(Shape::new(1, 3, h / 4, w / 4), seed + 3, -0.2, 0.2),
    ];
    (t3, hf)
}

#[test]
fn ide_zero_weights_is_pure_upsampling() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(15);
    let ide = IdeParams::register(&mut params, &mut init, 8).unwrap();
    zero_params(&mut params, "ide.");

    let (t3, hf) = random_stack(6, 64, 64);
    let mut tape = Tape::new();
    let t3v = tape.constant(t3.clone()).unwrap();
    let hfv = [
        tape.constant(hf[0].clone()).unwrap(),
        tape.constant(hf[1].clone()).unwrap(),
        tape.constant(hf[2].clone()).unwrap(),
    ];
    let t = ide.forward(&mut tape, &params, t3v, &hfv).unwrap();
    assert_eq!(tape.shape(t[0]), Shape::new(1, 3, 64, 64));
    assert_eq!(tape.shape(t[1]), Shape::new(1, 3, 32, 32));
    assert_eq!(tape.shape(t[2]), Shape::new(1, 3, 16, 16));
    assert_eq!(tape.shape(t[3]), Shape::new(1, 3, 8, 8));

    let mut oracle = Tape::new();
    let mut up = oracle.constant(t3).unwrap();
    for _ in 0..3 {
        up = oracle.upsample_bilinear2x(up).unwrap();
    }
    let diff = tape.value(t[0]).max_abs_diff(oracle.value(up)).unwrap();
    assert!(diff < 1e-12, "zeroed stages must reduce to upsampling, diff {diff}");
}

#[test]
fn ide_gradients_match_finite_differences() {
    let mut params = Params::<f64>::new();
    let mut init = ParamInit::new(17);
    let ide = IdeParams::register(&mut params, &mut init, 6).unwrap();
    let (t3, hf) = random_stack(7, 32, 32);

    let names = [
        "ide.s0.in.w", "ide.s0.res1a.w", "ide.s0.out.w", "ide.s0.out.b",
        "ide.s1.in.w", "ide.s1.res2b.w", "ide.s1.out.w",
        "ide.s2.in.b", "ide.s2.res1b.w", "ide.s2.out.w",
    ];
    assert_grads_match(&mut params, &names, 10, &|tape, ps| {
        let t3v = tape.constant(t3.clone())?;
        let hfv = [
            tape.constant(hf[0].clone())?,
            tape.constant(hf[1].clone())?,
            tape.constant(hf[2].clone())?,
        ];
        let t = ide.forward(tape, ps, t3v, &hfv)?;
        Ok(probe_loss(tape, t[0]))
    });
}

// ── Full pipeline ───────────────────────────────────────────────────────────

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        width: 8,
        basis_count: 4,
        lut_size: 5,
        grid: 4,
        descriptor_dim: 4,
        seed,
    }
}

#[test]
fn pipeline_zero_params_composes_resize_and_clamp() {
    let (model, mut params) = Model::new::<f64>(small_config(11)).unwrap();
    let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let v = params.value_mut(id);
        *v = Tensor::zeros(v.shape());
    }
    // Identity basis table plus the one-hot predictor bias keep local tuning
    // an exact identity; everything else stays zero.
    let v = 5usize;
    let mut bank = Tensor::<f64>::zeros(Shape::new(4, 3, v, v * v));
    bank.data_mut()[..3 * v * v * v].copy_from_slice(Lut3D::<f64>::identity(v).entries());
    set_param(&mut params, "ltt.bank", bank);
    let mut one_hot = Tensor::<f64>::zeros(Shape::new(1, 4, 1, 1));
    one_hot.data_mut()[0] = 1.0;
    set_param(&mut params, "ltt.fc.b", one_hot);

    let x = random_tensor(Shape::new(1, 3, 48, 48), 8, 0.0, 3.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let out = model.forward(&mut tape, &params, xv).unwrap();

    // The high-frequency maps and every correction are zero, so the result
    // must equal upsample(clamp(downsample(x))).
    let l3g_diff = tape.value(out.l3g).max_abs_diff(tape.value(out.l3)).unwrap();
    assert!(l3g_diff < 1e-15, "global toning must be identity, diff {l3g_diff}");

    let mut oracle = Tape::new();
    let xo = oracle.constant(x).unwrap();
    let down = oracle.downsample_bilinear(xo, 8).unwrap();
    let clamped = oracle.value(down).map(|v| v.clamp(0.0, 1.0));
    let mut up = oracle.constant(clamped.clone()).unwrap();
    for _ in 0..3 {
        up = oracle.upsample_bilinear2x(up).unwrap();
    }

    let t3_diff = tape.value(out.t[3]).max_abs_diff(&clamped).unwrap();
    assert!(t3_diff < 1e-5, "local tuning must reduce to a clamp, diff {t3_diff}");
    let t0_diff = tape.value(out.t[0]).max_abs_diff(oracle.value(up)).unwrap();
    assert!(t0_diff < 1e-5, "pipeline must reduce to resize + clamp, diff {t0_diff}");
}

#[test]
fn pipeline_output_shapes_match_input() {
    let (model, params) = Model::new::<f64>(small_config(13)).unwrap();
    for (h, w) in [(64usize, 64usize), (72, 40)] {
        let x = random_tensor(Shape::new(1, 3, h, w), 9, 0.0, 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let out = model.forward(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.shape(out.t[0]), Shape::new(1, 3, h, w));
        assert_eq!(tape.shape(out.t[1]), Shape::new(1, 3, h / 2, w / 2));
        assert_eq!(tape.shape(out.t[2]), Shape::new(1, 3, h / 4, w / 4));
        assert_eq!(tape.shape(out.t[3]), Shape::new(1, 3, h / 8, w / 8));
        assert_eq!(tape.shape(out.hf[0]), Shape::new(1, 3, h, w));
        assert_eq!(tape.shape(out.luts), Shape::new(1, 4 * 4 * 3, 5, 25));
        assert_eq!(tape.shape(out.lut_weights), Shape::new(1, 4, 4, 4));
    }
}

#[test]
fn pipeline_rejects_undersized_input() {
    let (model, params) = Model::new::<f64>(small_config(13)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 24, 64), 10, 0.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    assert!(model.forward(&mut tape, &params, xv).is_err());
}

#[test]
fn pipeline_adamw_step_decreases_l1_loss() {
    let (model, mut params) = Model::new::<f64>(small_config(3)).unwrap();
    let x = random_tensor(Shape::new(2, 3, 32, 32), 11, 0.0, 2.0);
    let y = random_tensor(Shape::new(2, 3, 32, 32), 12, 0.0, 1.0);

    let eval = |tape: &mut Tape<f64>, ps: &Params<f64>| -> pyrtone::Result<Var> {
        let xv = tape.constant(x.clone())?;
        let yv = tape.constant(y.clone())?;
        let out = model.forward(tape, ps, xv)?;
        let diff = tape.sub(out.t[0], yv)?;
        let mag = tape.abs(diff)?;
        tape.mean_all(mag)
    };

    let mut tape = Tape::new();
    let loss = eval(&mut tape, &params).unwrap();
    let before = tape.scalar_value(loss).unwrap();
    let grads = tape.backward(loss, &params).unwrap();

    let mut opt = AdamW::new(&params, 1e-4, 0.9, 0.99, 1e-4);
    opt.step(&mut params, &grads).unwrap();

    let mut tape = Tape::new();
    let loss = eval(&mut tape, &params).unwrap();
    let after = tape.scalar_value(loss).unwrap();
    assert!(after < before, "one optimizer step must reduce the loss: {before} -> {after}");
}

#[test]
fn pipeline_every_parameter_receives_gradient() {
    let (model, params) = Model::new::<f64>(small_config(5)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 32, 32), 13, 0.0, 2.0);
    let y = random_tensor(Shape::new(1, 3, 32, 32), 14, 0.0, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let yv = tape.constant(y).unwrap();
    let out = model.forward(&mut tape, &params, xv).unwrap();
    let diff = tape.sub(out.t[0], yv).unwrap();
    let mag = tape.abs(diff).unwrap();
    let loss = tape.mean_all(mag).unwrap();
    let grads = tape.backward(loss, &params).unwrap();

    for (id, name, _) in params.iter() {
        let g = grads.get(id).unwrap_or_else(|| panic!("{name} received no gradient"));
        let peak = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.0, "{name} has an all-zero gradient");
    }
}

#[test]
fn pipeline_block_gradients_match_finite_differences() {
    let (model, mut params) = Model::new::<f64>(small_config(7)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 32, 32), 15, 0.05, 1.8);

    let names = ["ldp.s0.fuse.w", "gtp.core1.w", "gtp.head2.gamma", "ltt.bank", "ltt.fc.w", "ide.s2.out.w"];
    assert_grads_match(&mut params, &names, 5, &|tape, ps| {
        let xv = tape.constant(x.clone())?;
        let out = model.forward(tape, ps, xv)?;
        Ok(probe_loss(tape, out.t[0]))
    });
}

#[test]
fn map_image_handles_arbitrary_sizes() {
    let (model, params) = Model::new::<f64>(small_config(9)).unwrap();
    assert_eq!(model.min_side(), 12);

    for (h, w) in [(37usize, 53usize), (64, 64), (100, 12)] {
        let x = random_tensor(Shape::new(1, 3, h, w), 16, 0.0, 4.0);
        let out = model.map_image(&params, &x).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, h, w));
        assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let again = model.map_image(&params, &x).unwrap();
        assert_eq!(out.data(), again.data(), "mapping must be deterministic");
    }

    let tiny = random_tensor(Shape::new(1, 3, 11, 200), 17, 0.0, 1.0);
    assert!(model.map_image(&params, &tiny).is_err());
}

#[test]
fn map_image_matches_forward_on_aligned_input() {
    let (model, params) = Model::new::<f64>(small_config(9)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 64, 64), 18, 0.0, 3.0);

    let mapped = model.map_image(&params, &x).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let out = model.forward(&mut tape, &params, xv).unwrap();
    let expect = tape.value(out.t[0]).map(|v| v.clamp(0.0, 1.0));
    let diff = mapped.max_abs_diff(&expect).unwrap();
    assert!(diff < 1e-15, "aligned input must skip the padding path, diff {diff}");
}

#[test]
fn default_model_parameter_count_within_budget() {
    let (_, params) = Model::new::<f64>(ModelConfig::default()).unwrap();
    let count = params.total_scalars();
    assert!(
        (150_000..=300_000).contains(&count),
        "trainable scalar count {count} outside [150000, 300000]"
    );
}

#[test]
fn same_seed_builds_identical_models() {
    let (model_a, params_a) = Model::new::<f64>(small_config(21)).unwrap();
    let (_, params_b) = Model::new::<f64>(small_config(21)).unwrap();
    for ((ia, na, va), (_, _, vb)) in params_a.iter().zip(params_b.iter()) {
        assert_eq!(params_a.name(ia), na);
        assert_eq!(va.data(), vb.data(), "{na} differs between identically seeded models");
    }

    let x = random_tensor(Shape::new(1, 3, 32, 32), 19, 0.0, 2.0);
    let mut t1 = Tape::new();
    let xv = t1.constant(x.clone()).unwrap();
    let o1 = model_a.forward(&mut t1, &params_a, xv).unwrap();
    let mut t2 = Tape::new();
    let xv = t2.constant(x).unwrap();
    let o2 = model_a.forward(&mut t2, &params_b, xv).unwrap();
    assert_eq!(t1.value(o1.t[0]).data(), t2.value(o2.t[0]).data());
}
