//! 3D LUT and patch-blending behavior: trilinear lookup against corner
//! enumeration, basis mixing against scalar loops, and the bilinear patch
//! blend against an independently computed weight oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyrtone::tensor::{Shape, Tape, Tensor};
use pyrtone::tone::Lut3D;

fn random_lut(seed: u64, size: usize) -> Lut3D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..3 * size * size * size).map(|_| rng.gen_range(-0.5..1.5)).collect();
    Lut3D::new(size, entries).unwrap()
}

#[test]
fn identity_lut_reproduces_clamped_input() {
    let lut = Lut3D::<f64>::identity(9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let rgb = [rng.gen_range(-0.5..2.0), rng.gen_range(-0.5..2.0), rng.gen_range(-0.5..2.0)];
        let out = lut.apply(rgb);
        for c in 0..3 {
            assert!((out[c] - rgb[c].clamp(0.0, 1.0)).abs() < 1e-6);
        }
    }
}

#[test]
fn lattice_point_input_returns_lattice_entry() {
    let lut = random_lut(3, 9);
    for (ir, ig, ib) in [(0usize, 0usize, 0usize), (2, 5, 1), (8, 8, 8), (4, 0, 7)] {
        let rgb = [ir as f64 / 8.0, ig as f64 / 8.0, ib as f64 / 8.0];
        let out = lut.apply(rgb);
        for c in 0..3 {
            assert!(
                (out[c] - lut.entry(c, ir, ig, ib)).abs() < 1e-9,
                "lattice point ({ir},{ig},{ib}) channel {c}"
            );
        }
    }
}

#[test]
fn trilinear_matches_corner_enumeration() {
    let lut = random_lut(4, 9);
    let rgb = [0.5f64, 0.25, 0.125];
    // With V=9 the cell coordinates are rgb * 8; enumerate the 8 enclosing
    // corners by hand.
    let scaled = [rgb[0] * 8.0, rgb[1] * 8.0, rgb[2] * 8.0];
    let cell = [scaled[0].floor() as usize, scaled[1].floor() as usize, scaled[2].floor() as usize];
    let frac = [scaled[0] - cell[0] as f64, scaled[1] - cell[1] as f64, scaled[2] - cell[2] as f64];
    let out = lut.apply(rgb);
    for c in 0..3 {
        let mut expect = 0.0;
        for db in 0..2 {
            for dg in 0..2 {
                for dr in 0..2 {
                    let w = (if dr == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dg == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if db == 1 { frac[2] } else { 1.0 - frac[2] });
                    expect += w * lut.entry(c, cell[0] + dr, cell[1] + dg, cell[2] + db);
                }
            }
        }
        assert!((out[c] - expect).abs() < 1e-6, "channel {c}: {} vs {expect}", out[c]);
    }
}

#[test]
fn affine_entries_reproduce_affine_map_exactly() {
    // Trilinear interpolation is exact for any per-channel affine function
    // of the lattice coordinates.
    let size = 5;
    let coef = [[0.3, -0.2, 0.5, 0.1], [0.0, 1.0, 0.25, -0.3], [0.7, 0.1, -0.1, 0.2]];
    let mut entries = vec![0.0f64; 3 * size * size * size];
    for c in 0..3 {
        for ib in 0..size {
            for ig in 0..size {
                for ir in 0..size {
                    let (r, g, b) = (
                        ir as f64 / (size - 1) as f64,
                        ig as f64 / (size - 1) as f64,
                        ib as f64 / (size - 1) as f64,
                    );
                    let k = coef[c];
                    entries[((c * size + ib) * size + ig) * size + ir] = k[0] * r + k[1] * g + k[2] * b + k[3];
                }
            }
        }
    }
    let lut = Lut3D::new(size, entries).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let rgb: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let out = lut.apply(rgb);
        for c in 0..3 {
            let k = coef[c];
            let expect = k[0] * rgb[0] + k[1] * rgb[1] + k[2] * rgb[2] + k[3];
            assert!((out[c] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn combine_one_hot_and_zero_weights() {
    let bank = vec![random_lut(7, 5), random_lut(8, 5), random_lut(9, 5)];
    let picked = Lut3D::combine(&[0.0, 1.0, 0.0], &bank).unwrap();
    assert_eq!(picked.entries(), bank[1].entries());
    let zero = Lut3D::combine(&[0.0, 0.0, 0.0], &bank).unwrap();
    assert!(zero.entries().iter().all(|&e| e == 0.0));
}

#[test]
fn combine_matches_scalar_loop_and_is_linear() {
    let bank = vec![random_lut(21, 5), random_lut(22, 5), random_lut(23, 5), random_lut(24, 5)];
    let w1 = [0.3, -0.7, 1.1, 0.2];
    let w2 = [-0.5, 0.4, 0.0, 0.9];
    let (a, b) = (1.7, -0.6);

    let c1 = Lut3D::combine(&w1, &bank).unwrap();
    for (i, &e) in c1.entries().iter().enumerate() {
        let expect: f64 = w1.iter().zip(&bank).map(|(w, t)| w * t.entries()[i]).sum();
        assert!((e - expect).abs() < 1e-6);
    }

    let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
    let lhs = Lut3D::combine(&mixed, &bank).unwrap();
    let c2 = Lut3D::combine(&w2, &bank).unwrap();
    for i in 0..lhs.entries().len() {
        let rhs = a * c1.entries()[i] + b * c2.entries()[i];
        assert!((lhs.entries()[i] - rhs).abs() < 1e-6);
    }
}

#[test]
fn tape_combine_matches_pure_combine_per_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, r, grid, v) = (2, 3, 2, 5);
    let weights = Tensor::from_fn(Shape::new(n, r, grid, grid), |_, _, _, _| rng.gen_range(-1.0..1.0f64));
    let bank_tables: Vec<Lut3D<f64>> = (0..r).map(|i| random_lut(40 + i as u64, v)).collect();
    let mut bank_data = Vec::new();
    for t in &bank_tables {
        bank_data.extend_from_slice(t.entries());
    }
    let bank = Tensor::new(Shape::new(r, 3, v, v * v), bank_data).unwrap();

    let mut tape = Tape::new();
    let wv = tape.constant(weights.clone()).unwrap();
    let bv = tape.constant(bank).unwrap();
    let luts = tape.lut_combine(wv, bv).unwrap();
    let stacked = tape.value(luts);

    for ni in 0..n {
        for p in 0..grid * grid {
            let got = Lut3D::from_tensor_patch(stacked, ni, p).unwrap();
            let w: Vec<f64> = (0..r)
                .map(|ri| weights.data()[(ni * r + ri) * grid * grid + p])
                .collect();
            let expect = Lut3D::combine(&w, &bank_tables).unwrap();
            for (x, y) in got.entries().iter().zip(expect.entries()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

/// Independent restatement of the patch blend: patch centers sit at
/// `(i + 0.5) * size / grid - 0.5` in pixel coordinates, every pixel blends
/// the two nearest patches per axis linearly, and coordinates beyond the
/// outermost centers clamp.
fn blend_taps(pix: usize, size: usize, grid: usize) -> ((usize, f64), (usize, f64)) {
    let u = ((pix as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
    let i0 = (u.floor() as usize).min(grid - 2);
    let f = u - i0 as f64;
    ((i0, 1.0 - f), (i0 + 1, f))
}

#[test]
fn patch_blend_matches_weight_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let (grid, v, h, w) = (4usize, 5usize, 12usize, 20usize);
    let patches = grid * grid;
    let tables: Vec<Lut3D<f64>> = (0..patches).map(|i| random_lut(60 + i as u64, v)).collect();
    let mut data = Vec::new();
    for t in &tables {
        data.extend_from_slice(t.entries());
    }
    let luts = Tensor::new(Shape::new(1, patches * 3, v, v * v), data).unwrap();
    let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.gen_range(-0.2..1.2f64));

    let mut tape = Tape::new();
    let xv = tape.constant(img.clone()).unwrap();
    let lv = tape.constant(luts).unwrap();
    let out = tape.lut_apply(xv, lv, grid).unwrap();
    let got = tape.value(out);

    for y in 0..h {
        let (ty0, ty1) = blend_taps(y, h, grid);
        for x in 0..w {
            let (tx0, tx1) = blend_taps(x, w, grid);
            let rgb = [
                img.plane(0, 0)[y * w + x],
                img.plane(0, 1)[y * w + x],
                img.plane(0, 2)[y * w + x],
            ];
            let mut expect = [0.0f64; 3];
            for (py, wy) in [ty0, ty1] {
                for (px, wx) in [tx0, tx1] {
                    let mapped = tables[py * grid + px].apply(rgb);
                    for c in 0..3 {
                        expect[c] += wy * wx * mapped[c];
                    }
                }
            }
            for c in 0..3 {
                let have = got.plane(0, c)[y * w + x];
                assert!(
                    (have - expect[c]).abs() < 1e-6,
                    "pixel ({y},{x}) channel {c}: {have} vs {}",
                    expect[c]
                );
            }
        }
    }
}

#[test]
fn blend_weights_partition_unity_everywhere() {
    // With every patch LUT mapping all inputs to exactly 1, the output equals
    // the sum of the blend weights at each pixel.
    let (grid, v, h, w) = (4usize, 3usize, 37usize, 53usize);
    let luts = Tensor::full(Shape::new(1, grid * grid * 3, v, v * v), 1.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.gen_range(-1.0..2.0));

    let mut tape = Tape::new();
    let xv = tape.constant(img).unwrap();
    let lv = tape.constant(luts).unwrap();
    let out = tape.lut_apply(xv, lv, grid).unwrap();
    let got = tape.value(out);
    assert!(h * w >= 1000);
    for &value in got.data() {
        assert!((value - 1.0).abs() < 1e-6);
    }
}

#[test]
fn patch_center_pixel_uses_only_its_own_lut() {
    // With size 12 and grid 4 the patch centers land exactly on pixels
    // 1, 4, 7 and 10 along each axis.
    let (grid, v, size) = (4usize, 3usize, 12usize);
    let patches = grid * grid;
    let luts = Tensor::from_fn(Shape::new(1, patches * 3, v, v * v), |_, c, _, _| {
        let patch = c / 3;
        0.01 * patch as f64 + 0.5
    });
    let img = Tensor::full(Shape::new(1, 3, size, size), 0.25f64);

    let mut tape = Tape::new();
    let xv = tape.constant(img).unwrap();
    let lv = tape.constant(luts).unwrap();
    let out = tape.lut_apply(xv, lv, grid).unwrap();
    let got = tape.value(out);

    for py in 0..grid {
        for px in 0..grid {
            let (y, x) = (3 * py + 1, 3 * px + 1);
            let expect = 0.01 * (py * grid + px) as f64 + 0.5;
            for c in 0..3 {
                let have = got.plane(0, c)[y * size + x];
                assert!((have - expect).abs() < 1e-12, "center ({py},{px})");
            }
        }
    }
}

#[test]
fn shared_lut_makes_blending_transparent() {
    let (grid, v, h, w) = (4usize, 5usize, 16usize, 24usize);
    let table = random_lut(83, v);
    let mut data = Vec::new();
    for _ in 0..grid * grid {
        data.extend_from_slice(table.entries());
    }
    let luts = Tensor::new(Shape::new(1, grid * grid * 3, v, v * v), data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.gen_range(0.0..1.0f64));

    let mut tape = Tape::new();
    let xv = tape.constant(img.clone()).unwrap();
    let lv = tape.constant(luts).unwrap();
    let out = tape.lut_apply(xv, lv, grid).unwrap();
    let got = tape.value(out);

    for y in 0..h {
        for x in 0..w {
            let rgb = [
                img.plane(0, 0)[y * w + x],
                img.plane(0, 1)[y * w + x],
                img.plane(0, 2)[y * w + x],
            ];
            let expect = table.apply(rgb);
            for c in 0..3 {
                assert!((got.plane(0, c)[y * w + x] - expect[c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn blend_is_continuous_across_patch_boundaries() {
    // Left two patch columns map everything to 0, right two to 1. The blend
    // must ramp between them: equal neighboring LUTs give exactly equal
    // outputs, and no adjacent-pixel step may exceed the per-pixel weight
    // increment grid/size = 0.25.
    let (grid, v, size) = (4usize, 3usize, 16usize);
    let patches = grid * grid;
    let luts = Tensor::from_fn(Shape::new(1, patches * 3, v, v * v), |_, c, _, _| {
        let patch = c / 3;
        if patch % grid < 2 {
            0.0f64
        } else {
            1.0
        }
    });
    let img = Tensor::full(Shape::new(1, 3, size, size), 0.5f64);

    let mut tape = Tape::new();
    let xv = tape.constant(img).unwrap();
    let lv = tape.constant(luts).unwrap();
    let out = tape.lut_apply(xv, lv, grid).unwrap();
    let got = tape.value(out);

    let row: Vec<f64> = (0..size).map(|x| got.plane(0, 0)[x]).collect();
    for x in 0..=5 {
        assert!(row[x].abs() < 1e-12, "col {x} blends only zero LUTs");
    }
    for x in 10..size {
        assert!((row[x] - 1.0).abs() < 1e-12, "col {x} blends only one LUTs");
    }
    for x in 1..size {
        let step = (row[x] - row[x - 1]).abs();
        assert!(step <= 0.25 + 1e-9, "jump {step} between cols {} and {x}", x - 1);
    }
    assert!(row.windows(2).all(|p| p[1] >= p[0]), "ramp is monotone");
}
