//! Tensor ops against naive reference implementations.

use phasealign::tensor::gradcheck::{gradcheck, random_tensor};
use phasealign::tensor::{
    bilinear_at, sgd_step, Conv2dConfig, Graph, ParamStore, Parameter, SgdConfig, Tensor,
};
use proptest::prelude::*;

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    cfg: Conv2dConfig,
) -> Tensor<f64> {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (f, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let fg = f / cfg.groups;
    let ho = (h + 2 * cfg.padding - cfg.dilation * (kh - 1) - 1) / cfg.stride + 1;
    let wo = (wd + 2 * cfg.padding - cfg.dilation * (kw - 1) - 1) / cfg.stride + 1;
    let mut y = Tensor::zeros(vec![n, f, ho, wo]);
    for ni in 0..n {
        for fi in 0..f {
            let g = fi / fg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[fi]);
                    for ci in 0..cg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * cfg.stride + i * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                let ix = (ox * cfg.stride + j * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ni, g * cg + ci, iy as usize, ix as usize])
                                        * w.at(&[fi, ci, i, j]);
                                }
                            }
                        }
                    }
                    let o = y.offset(&[ni, fi, oy, ox]);
                    y.data_mut()[o] = acc;
                }
            }
        }
    }
    y
}

fn conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    cfg: Conv2dConfig,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, cfg).unwrap();
    g.value(y).clone()
}

#[test]
fn grouped_conv_matches_brute_force() {
    let x = random_tensor::<f64>(&[2, 4, 8, 8], 1);
    let w = random_tensor::<f64>(&[4, 1, 3, 3], 2);
    let b = random_tensor::<f64>(&[4], 3);
    let cfg = Conv2dConfig::same3x3(4);
    assert!(conv(&x, &w, Some(&b), cfg).max_abs_diff(&naive_conv(&x, &w, Some(&b), cfg)) < 1e-5);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random_tensor::<f64>(&[4, 5], 4);
    let b = random_tensor::<f64>(&[5, 6], 5);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    let c = g.value(c);
    for i in 0..4 {
        for j in 0..6 {
            let want: f64 = (0..5).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((c.at(&[i, j]) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = random_tensor::<f64>(&[3, 7], 6).map(|v| 4.0 * v);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = g.softmax(xv, 1).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let err = gradcheck(&[random_tensor(&[3, 7], 7)], 1e-4, |g, v| {
        g.softmax(v[0], 1).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn avg_pool_matches_window_mean() {
    let x = random_tensor::<f64>(&[1, 2, 8, 8], 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.avg_pool2d(xv, 4).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 2, 2, 2]);
    for c in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        s += x.at(&[0, c, oy * 4 + i, ox * 4 + j]);
                    }
                }
                assert!((y.at(&[0, c, oy, ox]) - s / 16.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn bilinear_gradcheck_off_lattice() {
    let feat = random_tensor::<f64>(&[2, 5, 6], 9);
    let coords = Tensor::new(vec![3, 2], vec![1.3, 2.7, 0.2, 4.4, 3.6, 0.9]).unwrap();
    let err = gradcheck(&[feat, coords], 1e-4, |g, v| {
        g.bilinear_sample(v[0], v[1]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_brute_force_any_geometry(
        seed in 0u64..10_000,
        stride in 1usize..3,
        dilation in 1usize..3,
        padding in 0usize..3,
        groups in prop::sample::select(vec![1usize, 2, 4]),
        k in prop::sample::select(vec![1usize, 3]),
    ) {
        let x = random_tensor::<f64>(&[2, 4, 9, 7], seed);
        let w = random_tensor::<f64>(&[4, 4 / groups, k, k], seed + 1);
        let b = random_tensor::<f64>(&[4], seed + 2);
        let cfg = Conv2dConfig { stride, padding, dilation, groups };
        prop_assert!(conv(&x, &w, Some(&b), cfg).max_abs_diff(&naive_conv(&x, &w, Some(&b), cfg)) < 1e-9);
    }

    #[test]
    fn grouped_conv_is_concatenated_slices(seed in 0u64..10_000, groups in prop::sample::select(vec![2usize, 4])) {
        let x = random_tensor::<f64>(&[1, 8, 6, 6], seed);
        let w = random_tensor::<f64>(&[8, 8 / groups, 3, 3], seed + 1);
        let full = conv(&x, &w, None, Conv2dConfig::same3x3(groups));
        let (cg, fg) = (8 / groups, 8 / groups);
        for g in 0..groups {
            let xs = Tensor::new(vec![1, cg, 6, 6], x.data()[g * cg * 36..(g + 1) * cg * 36].to_vec()).unwrap();
            let ws = Tensor::new(vec![fg, cg, 3, 3], w.data()[g * fg * cg * 9..(g + 1) * fg * cg * 9].to_vec()).unwrap();
            let part = conv(&xs, &ws, None, Conv2dConfig::same3x3(1));
            let slice = &full.data()[g * fg * 36..(g + 1) * fg * 36];
            for (a, b) in slice.iter().zip(part.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_is_distribution(seed in 0u64..10_000, scale in 0.1f64..100.0, axis in 0usize..3) {
        let x = random_tensor::<f64>(&[3, 4, 5], seed).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv, axis).unwrap();
        let y = g.value(y);
        let dims = [3, 4, 5];
        let strides = [20, 5, 1];
        for base in 0..60 {
            if (base / strides[axis]) % dims[axis] != 0 {
                continue;
            }
            let s: f64 = (0..dims[axis]).map(|k| y.data()[base + k * strides[axis]]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pool_factor_one_is_bit_identity(seed in 0u64..10_000) {
        let x = random_tensor::<f32>(&[2, 3, 5, 4], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.avg_pool2d(xv, 1).unwrap();
        prop_assert!(g.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lattice_samples_are_exact(seed in 0u64..10_000, y in 0usize..6, x in 0usize..5) {
        let plane = random_tensor::<f32>(&[6, 5], seed);
        let v = bilinear_at(plane.data(), 6, 5, y as f32, x as f32);
        prop_assert_eq!(v.to_bits(), plane.data()[y * 5 + x].to_bits());
    }

    #[test]
    fn lr_scale_gives_exact_tenth(seed in 0u64..10_000) {
        let grad = random_tensor::<f64>(&[6], seed);
        let momentum = random_tensor::<f64>(&[6], seed + 1);
        // Starting from w = 0 the update is exactly -w.
        let step = |scale: f64| {
            let mut s = ParamStore::new();
            let id = s.push(Parameter::new("w", Tensor::zeros(vec![6])).with_lr_scale(scale));
            s.get_mut(id).set_momentum(momentum.data().to_vec());
            s.get_mut(id).grad = Some(grad.clone());
            sgd_step(&mut s, SgdConfig { lr: 1e-3, momentum: 0.9, weight_decay: 5e-4 });
            s.get(id).value.clone()
        };
        let (full, tenth) = (step(1.0), step(0.1));
        for (a, b) in full.data().iter().zip(tenth.data()) {
            prop_assert_eq!(0.1 * a, *b);
        }
    }
}

/// Every differentiable op, ten seeds each.
#[test]
fn gradcheck_ten_seeds_per_op() {
    for seed in 0..10u64 {
        let s = seed * 100;
        let checks: Vec<(&str, f64)> = vec![
            (
                "conv2d",
                gradcheck(
                    &[
                        random_tensor(&[1, 4, 5, 5], s),
                        random_tensor(&[4, 2, 3, 3], s + 1),
                    ],
                    1e-4,
                    |g, v| {
                        g.conv2d(v[0], v[1], None, Conv2dConfig::same3x3(2).with_stride(2))
                            .unwrap()
                    },
                ),
            ),
            (
                "matmul",
                gradcheck(
                    &[random_tensor(&[3, 4], s), random_tensor(&[4, 2], s + 1)],
                    1e-4,
                    |g, v| g.matmul(v[0], v[1]).unwrap(),
                ),
            ),
            (
                "bmm",
                gradcheck(
                    &[
                        random_tensor(&[2, 4, 3], s),
                        random_tensor(&[2, 4, 5], s + 1),
                    ],
                    1e-4,
                    |g, v| g.bmm(v[0], v[1], true, false).unwrap(),
                ),
            ),
            (
                "softmax",
                gradcheck(&[random_tensor(&[3, 5], s)], 1e-4, |g, v| {
                    g.softmax(v[0], 0).unwrap()
                }),
            ),
            (
                "avg_pool2d",
                gradcheck(&[random_tensor(&[1, 2, 5, 6], s)], 1e-4, |g, v| {
                    g.avg_pool2d(v[0], 2).unwrap()
                }),
            ),
            ("bilinear_sample", {
                let coords = random_tensor::<f64>(&[4, 2], s + 1).map(|v| 2.0 + 1.7 * v + 0.013);
                gradcheck(&[random_tensor(&[2, 5, 5], s), coords], 1e-4, |g, v| {
                    g.bilinear_sample(v[0], v[1]).unwrap()
                })
            }),
            (
                "mul_scalar",
                gradcheck(
                    &[random_tensor(&[2, 3], s), random_tensor(&[1], s + 1)],
                    1e-4,
                    |g, v| g.mul_scalar(v[0], v[1]).unwrap(),
                ),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}
