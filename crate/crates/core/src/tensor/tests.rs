use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::*;
use super::*;
use crate::gradcheck::check_params;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let (cin, h, wd) = x.chw().unwrap();
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * p - kh) / s + 1;
    let wo = (wd + 2 * p - kw) / s + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data()[((o * cin + c) * kh + ky) * kw + kx]
                                    * x.at3(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..120 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (s, p) = (rng.random_range(1..3), rng.random_range(0..3));
        let h = rng.random_range(k.max(2)..10);
        let wd = rng.random_range(k.max(2)..10);
        let x = rand_tensor(&mut rng, &[cin, h, wd]);
        let w = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        let fast = conv2d(&x, &w, &b, s, p).unwrap();
        let slow = naive_conv(&x, &w, &b, s, p);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::<f32>::zeros(&[2, 5, 5]);
    let b = Tensor::zeros(&[1]);
    assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1, 1).is_err());
    assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &b, 1, 1).is_err());
    assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), 1, 1).is_err());
}

#[test]
fn max_pool_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let x = rand_tensor(&mut rng, &[2, h, w]);
        let (c, h, w) = x.chw().unwrap();
        let m = max_pool2d(&x, k).unwrap();
        let r = (k / 2) as isize;
        for ci in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut best = f64::NEG_INFINITY;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xq) = (y + dy, xx + dx);
                            if yy >= 0 && xq >= 0 && yy < h as isize && xq < w as isize {
                                best = best.max(x.at3(ci, yy as usize, xq as usize));
                            }
                        }
                    }
                    assert_eq!(m.at3(ci, y as usize, xx as usize), best);
                }
            }
        }
    }
    assert!(max_pool2d(&Tensor::<f32>::zeros(&[1, 3, 3]), 2).is_err());
}

#[test]
fn bilinear_matches_pointwise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let (oh, ow) = (rng.random_range(1..17), rng.random_range(1..17));
        let x = rand_tensor(&mut rng, &[2, h, w]);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        let sample = |c: usize, sy: f64, sx: f64| {
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            (1.0 - fy) * ((1.0 - fx) * x.at3(c, y0, x0) + fx * x.at3(c, y0, x1))
                + fy * ((1.0 - fx) * x.at3(c, y1, x0) + fx * x.at3(c, y1, x1))
        };
        for c in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                    let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                    assert!((y.at3(c, oy, ox) - sample(c, sy, sx)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn resize_backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let (oh, ow) = (rng.random_range(1..13), rng.random_range(1..13));
        let x = rand_tensor(&mut rng, &[3, h, w]);
        let g = rand_tensor(&mut rng, &[3, oh, ow]);
        let lhs: f64 = bilinear_resize(&x, oh, ow)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let back = bilinear_resize_backward(&g, h, w).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn group_norm_normalizes_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3, 5]);
    let ones = Tensor::full(&[4], 1.0);
    let zeros = Tensor::zeros(&[4]);
    let (y, _) = group_norm(&x, 2, &ones, &zeros, 0.0).unwrap();
    for g in 0..2 {
        let s = &y.data()[g * 30..(g + 1) * 30];
        let mean: f64 = s.iter().sum::<f64>() / 30.0;
        let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
    }
    assert!(group_norm(&x, 3, &ones, &zeros, 1e-5).is_err());
}

#[test]
fn coordinate_channels_follow_linspace() {
    let c = coord_channels::<f64>(3, 5);
    assert_eq!(c.shape(), &[2, 3, 5]);
    let corners = [(0, 0, -1.0, -1.0), (4, 0, 1.0, -1.0), (0, 2, -1.0, 1.0), (4, 2, 1.0, 1.0)];
    for (x, y, ex, ey) in corners {
        assert_eq!((c.at3(0, y, x), c.at3(1, y, x)), (ex, ey));
    }
    for x in 0..5 {
        assert!((c.at3(0, 1, x) - (-1.0 + 0.5 * x as f64)).abs() < 1e-15);
    }
    let one = coord_channels::<f32>(1, 1);
    assert_eq!(one.data(), &[-1.0, -1.0]);
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(0.0f64), 0.5);
    assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
    assert!(sigmoid(-30.0f32) > 0.0);
}

fn params(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, s) in specs {
        p.insert(*n, rand_tensor(rng, s)).unwrap();
    }
    p
}

/// Builds a graph that exercises every tape op and returns its scalar loss.
fn every_op_graph(tape: &mut Tape<f64>, p: &ParamSet<f64>) -> Result<Var> {
    let x = tape.param(p, "x")?;
    let w = tape.param(p, "w")?;
    let b = tape.param(p, "b")?;
    let gamma = tape.param(p, "gamma")?;
    let beta = tape.param(p, "beta")?;
    let k = tape.param(p, "k")?;
    let s = tape.param(p, "s")?;
    let h1 = tape.conv2d(x, w, b, 2, 1)?; // [4,3,3]
    let h2 = tape.group_norm(h1, gamma, beta, 2)?;
    let h3 = tape.relu(h2);
    let coords = tape.constant(coord_channels(3, 3));
    let h4 = tape.concat_channels(h3, coords)?; // [6,3,3]
    let h5 = tape.slice_channels(h4, 1, 5)?; // [4,3,3]
    let up = tape.resize(h5, 5, 4)?;
    let sig = tape.sigmoid(up);
    let prod = tape.mul(sig, up)?;
    let sum2 = tape.add(prod, up)?;
    let rows = tape.gather_pixels(sum2, &[(0, 0), (3, 4), (1, 2), (3, 4)])?;
    let kern = tape.combine_rows(rows, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0), (3, -0.3)]])?;
    let kk = tape.add(kern, k)?;
    let masks = tape.dynamic_conv1x1(kk, sum2)?; // [2,5,4]
    let picked = tape.gather_flat(masks, &[0, 7, 19, 33])?;
    let weights = tape.normalize_sum(s);
    let wp = tape.mul(picked, weights)?;
    let scaled = tape.scale(wp, 1.7);
    let masked = tape.sigmoid(masks);
    let total = tape.sum(masked);
    let dots = tape.sum(scaled);
    let total = tape.add(total, dots)?;
    let total = tape.scale(total, 0.05);
    // A fused op: squared value of the sum.
    let v = tape.value(total).data()[0];
    let sq = tape.custom(&[total], Tensor::scalar(v * v), move |g| {
        vec![Tensor::scalar(2.0 * v * g.data()[0])]
    });
    Ok(sq)
}

#[test]
fn every_tape_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..3 {
        let mut p = params(
            &mut rng,
            &[
                ("x", &[2, 6, 5]),
                ("w", &[4, 2, 3, 3]),
                ("b", &[4]),
                ("gamma", &[4]),
                ("beta", &[4]),
                ("k", &[2, 4]),
                ("s", &[4]),
            ],
        );
        for v in p.get_mut("s").unwrap().data_mut() {
            *v = v.abs() + 0.1;
        }
        let mut tape = Tape::new();
        let loss = every_op_graph(&mut tape, &p).unwrap();
        tape.backward(loss, &mut p).unwrap();
        let report = check_params(&p, 1e-5, 1e-6, 1, |q| {
            let mut t = Tape::new();
            let l = every_op_graph(&mut t, q)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&p, "a").unwrap();
    assert!(tape.backward(a, &mut p).is_err());
    let s = tape.sum(a);
    tape.backward(s, &mut p).unwrap();
    tape.backward(s, &mut p).unwrap();
    assert_eq!(p.grad("a").unwrap().data(), &[2.0, 2.0]);
    p.zero_grad();
    assert!(p.grad("a").is_none());
}

#[test]
fn params_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p64 = params(&mut rng, &[("a.w", &[3, 2, 3, 3]), ("a.b", &[3]), ("z", &[1])]);
    let p32: ParamSet<f32> = p64.cast();
    let dir = tempfile::tempdir().unwrap();
    p32.save(dir.path(), "m").unwrap();
    let back = ParamSet::<f32>::load(dir.path(), "m").unwrap();
    for ((n1, a), (n2, b)) in p32.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    let first = std::fs::read(dir.path().join("m.bin")).unwrap();
    back.save(dir.path(), "m").unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("m.bin")).unwrap());
    // Loading as the wrong precision is refused.
    assert!(ParamSet::<f64>::load(dir.path(), "m").is_err());
    let (manifest, bytes) = p64.to_bytes("x.bin");
    assert!(ParamSet::<f64>::from_bytes(&manifest, &bytes[..bytes.len() - 8]).is_err());
}

proptest! {
    #[test]
    fn resizing_a_constant_field_keeps_it_constant(
        v in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17
    ) {
        let x = Tensor::full(&[1, h, w], v);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }

    #[test]
    fn max_pool_dominates_input(vals in proptest::collection::vec(-10.0f64..10.0, 36)) {
        let x = Tensor::new(&[1, 6, 6], vals).unwrap();
        let m = max_pool2d(&x, 3).unwrap();
        prop_assert!(m.data().iter().zip(x.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(v in -30.0f64..30.0) {
        let s = sigmoid(v);
        prop_assert!(s > 0.0 && s < 1.0);
    }
}
