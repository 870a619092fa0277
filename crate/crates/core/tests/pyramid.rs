//! Laplacian pyramid round-trip and filter oracles, plus contract tests for
//! the learnable differential pyramid at its documented initialization.

use pyrtone::pyramid::{
    blur5, gaussian_pyramid, laplacian_collapse, laplacian_decompose, LaplacianPyramid, LdpParams, BINOMIAL5,
};
use pyrtone::tensor::{ParamInit, Params, Tape};
use pyrtone::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn round_trip_is_below_1e6_in_f32() {
    let x64 = random_image(Shape::new(1, 3, 64, 64), 1);
    let x: Tensor<f32> = x64.cast();
    let pyr = laplacian_decompose(&x, 3).unwrap();
    assert_eq!(pyr.bands.len(), 3);
    assert_eq!(pyr.base.shape(), Shape::new(1, 3, 8, 8));
    let back = laplacian_collapse(&pyr).unwrap();
    let err = back.max_abs_diff(&x).unwrap();
    assert!(err < 1e-6, "round trip error {err}");
}

#[test]
fn round_trip_handles_odd_sizes() {
    let x = random_image(Shape::new(2, 3, 37, 53), 2);
    let pyr = laplacian_decompose(&x, 3).unwrap();
    assert_eq!(pyr.bands[1].shape(), Shape::new(2, 3, 19, 27));
    assert_eq!(pyr.base.shape(), Shape::new(2, 3, 5, 7));
    let back = laplacian_collapse(&pyr).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
}

#[test]
fn impulse_level_one_shows_even_binomial_taps() {
    // decimation keeps even indices, so level 1 around the impulse reads the
    // even taps k[0], k[2], k[4] of the 5-tap filter along each axis
    let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 16, 16));
    x.set(0, 0, 8, 8, 1.0);
    let g = gaussian_pyramid(&x, 2).unwrap();
    let even = [BINOMIAL5[0], BINOMIAL5[2], BINOMIAL5[4]];
    for dy in 0..3 {
        for dx in 0..3 {
            let got = g[1].get(0, 0, 3 + dy, 3 + dx);
            let want = even[dy] * even[dx];
            assert!((got - want).abs() < 1e-12, "({dy},{dx}): {got} vs {want}");
        }
    }
}

#[test]
fn smooth_ramp_energy_concentrates_in_base() {
    let amplitude = 1.0;
    let x = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, xx| {
        amplitude * (y as f64 + xx as f64) / 126.0
    });
    let pyr = laplacian_decompose(&x, 3).unwrap();
    // borders carry O(slope) energy under any border convention; the
    // interior of a linear ramp reconstructs exactly
    let mut interior_max = 0.0f64;
    for y in 6..58 {
        for xx in 6..58 {
            interior_max = interior_max.max(pyr.bands[0].get(0, 0, y, xx).abs());
        }
    }
    assert!(interior_max < 1e-3 * amplitude, "interior band-0 max {interior_max}");
    let rms = (pyr.bands[0].data().iter().map(|v| v * v).sum::<f64>()
        / pyr.bands[0].data().len() as f64)
        .sqrt();
    assert!(rms < 5e-3 * amplitude, "band-0 rms {rms}");
}

#[test]
fn shifting_input_by_two_shifts_level_one_by_one() {
    let x = random_image(Shape::new(1, 1, 32, 32), 3);
    let shifted = Tensor::from_fn(Shape::new(1, 1, 32, 32), |n, c, y, xx| {
        if xx >= 2 {
            x.get(n, c, y, xx - 2)
        } else {
            0.0
        }
    });
    let g = gaussian_pyramid(&x, 2).unwrap();
    let gs = gaussian_pyramid(&shifted, 2).unwrap();
    // interior: stay clear of both borders where reflection and the
    // zero-filled shift differ
    for y in 2..14 {
        for xx in 3..14 {
            let a = g[1].get(0, 0, y, xx);
            let b = gs[1].get(0, 0, y, xx + 1);
            assert!((a - b).abs() < 1e-12, "({y},{xx})");
        }
    }
}

#[test]
fn zero_bands_collapse_to_upsampled_base() {
    let base = random_image(Shape::new(1, 3, 8, 8), 4);
    let zero_pyr = LaplacianPyramid {
        bands: vec![
            Tensor::zeros(Shape::new(1, 3, 32, 32)),
            Tensor::zeros(Shape::new(1, 3, 16, 16)),
        ],
        base: base.clone(),
    };
    let out = laplacian_collapse(&zero_pyr).unwrap();
    assert_eq!(out.shape(), Shape::new(1, 3, 32, 32));

    // all-zero pyramid gives a zero image
    let all_zero = LaplacianPyramid {
        bands: vec![Tensor::<f64>::zeros(Shape::new(1, 3, 16, 16))],
        base: Tensor::zeros(Shape::new(1, 3, 8, 8)),
    };
    let out = laplacian_collapse(&all_zero).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn blur_preserves_mean_brightness() {
    let x = random_image(Shape::new(1, 1, 24, 24), 5);
    let b = blur5(&x).unwrap();
    let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.data().len() as f64;
    // reflect borders keep the filter mass on the image
    assert!((mean(&x) - mean(&b)).abs() < 1e-3);
}

// ── Learnable differential pyramid ─────────────────────────────────────

fn ldp_fixture(width: usize) -> (Params<f32>, LdpParams) {
    let mut params = Params::<f32>::new();
    let mut init = ParamInit::new(11);
    let ldp = LdpParams::register(&mut params, &mut init, width).unwrap();
    (params, ldp)
}

#[test]
fn shape_ladder_is_halving_with_base_at_one_eighth() {
    let (params, ldp) = ldp_fixture(8);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 3, 64, 48), 0.25f32)).unwrap();
    let out = ldp.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.shape(out.hf[0]), Shape::new(1, 3, 64, 48));
    assert_eq!(tape.shape(out.hf[1]), Shape::new(1, 3, 32, 24));
    assert_eq!(tape.shape(out.hf[2]), Shape::new(1, 3, 16, 12));
    assert_eq!(tape.shape(out.base), Shape::new(1, 3, 8, 6));
}

#[test]
fn indivisible_sizes_are_rejected() {
    let (params, ldp) = ldp_fixture(4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 60, 64))).unwrap();
    assert!(matches!(
        ldp.forward(&mut tape, &params, x),
        Err(pyrtone::Error::Dim { .. })
    ));
}

#[test]
fn constant_image_yields_zero_hf_maps() {
    let (params, ldp) = ldp_fixture(8);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 3, 32, 32), 0.6f32)).unwrap();
    let out = ldp.forward(&mut tape, &params, x).unwrap();
    for (k, hf) in out.hf.iter().enumerate() {
        let max = tape.value(*hf).data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max < 1e-5, "scale {k} max abs {max}");
    }
}

/// Independent 3x3 binomial blur with reflect borders, plain loops.
fn blur3_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let taps = [0.25, 0.5, 0.25];
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    Tensor::from_fn(s, |n, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let iy = reflect(y as isize + dy as isize - 1, s.h);
                let ix = reflect(xx as isize + dx as isize - 1, s.w);
                acc += taps[dy] * taps[dx] * x.get(n, c, iy, ix);
            }
        }
        acc
    })
}

#[test]
fn initial_differentials_match_difference_of_gaussians() {
    let width = 8;
    let (params, ldp) = ldp_fixture(width);
    let x64 = random_image(Shape::new(1, 3, 24, 24), 6);

    // oracle: iterated binomial blurs of each channel, consecutive diffs
    let mut blurred = vec![x64.clone()];
    for k in 0..4 {
        blurred.push(blur3_oracle(&blurred[k]));
    }

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(x64.cast()).unwrap();
    let (diffs, _) = ldp.differentials(&mut tape, &params, x, 0).unwrap();
    for (k, d) in diffs.iter().enumerate() {
        let got = tape.value(*d);
        assert_eq!(got.shape(), Shape::new(1, width, 24, 24));
        for o in 0..width {
            let src = o % 3;
            for y in 0..24 {
                for xx in 0..24 {
                    let want = blurred[k + 2].get(0, src, y, xx) - blurred[k + 1].get(0, src, y, xx);
                    let v = got.get(0, o, y, xx) as f64;
                    assert!(
                        (v - want).abs() < 1e-5,
                        "diff {k} channel {o} at ({y},{xx}): {v} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn stem_weights_receive_gradient_from_deepest_scale() {
    let (params, ldp) = ldp_fixture(6);
    let mut tape = Tape::new();
    let x = tape.constant(random_image(Shape::new(1, 3, 16, 16), 7).cast::<f32>()).unwrap();
    let out = ldp.forward(&mut tape, &params, x).unwrap();
    let h2 = out.hf[2];
    let sq = tape.mul(h2, h2).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss, &params).unwrap();
    let stem = params.find("ldp.s0.stem.w").unwrap();
    let g = grads.dense(&params, stem);
    assert!(g.data().iter().any(|&v| v != 0.0), "no gradient reached the scale-0 stem");
}

#[test]
fn zero_weights_give_bias_map() {
    let width = 4;
    let mut params = Params::<f32>::new();
    let mut init = ParamInit::new(3);
    let ldp = LdpParams::register(&mut params, &mut init, width).unwrap();
    // zero every ldp parameter, then drive the projection bias
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let z = Tensor::zeros(params.value(id).shape());
        *params.value_mut(id) = z;
    }
    let pb = params.find("ldp.s0.proj.b").unwrap();
    *params.value_mut(pb) = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.5, -0.25, 0.0]).unwrap();

    let mut tape = Tape::new();
    let x = tape.constant(random_image(Shape::new(1, 3, 16, 16), 8).cast::<f32>()).unwrap();
    let (hf, _) = ldp.scale_forward(&mut tape, &params, x, 0).unwrap();
    let v = tape.value(hf);
    for y in 0..16 {
        for xx in 0..16 {
            assert_eq!(v.get(0, 0, y, xx), 0.5);
            assert_eq!(v.get(0, 1, y, xx), -0.25);
            assert_eq!(v.get(0, 2, y, xx), 0.0);
        }
    }
}
