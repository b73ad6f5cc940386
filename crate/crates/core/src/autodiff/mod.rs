//! Dense `f64` tensors with a tape-based reverse-mode engine.
//!
//! Only the operators needed by the segmentation network are provided:
//! convolution, max pooling, batch normalization, bilinear upsampling,
//! sigmoid, ReLU, addition and a few reductions.

mod gradcheck;
pub mod suite;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_sampled, relative_error, GradcheckEntry, GradcheckReport};
pub use kernels::sigmoid_scalar;
pub use tape::{BatchNormState, Mode, Tape, Var, LOG_FLOOR};
pub use tensor::{Parameter, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn param(name: &str, tensor: Tensor) -> Parameter {
        Parameter::new(name, tensor)
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.data(y), &[3.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let w = tape.constant(random(&mut rng, &[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_box_filter_matches_dot_product() {
        // Oracle: 1/9 · Σ_{1..9} = 45/9.
        let oracle: f64 = (1..=9).map(|v| v as f64 / 9.0).sum();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &(1..=9).map(f64::from).collect::<Vec<_>>()));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert!((tape.data(y)[0] - oracle).abs() < 1e-12);
        assert!((oracle - 5.0).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, cin, h, w, cout, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
        let x = random(&mut rng, &[b, cin, h, w]);
        let wt = random(&mut rng, &[cout, cin, k, k]);
        let bias = random(&mut rng, &[cout]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut expect = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        expect[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(bias));
        let y = tape.conv2d(xv, wv, Some(bv), s, p).unwrap();
        assert_eq!(tape.shape(y), &[b, cout, oh, ow]);
        for (a, e) in tape.data(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("axis 1")), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 2.5));
        let y = tape.maxpool2d(c, 2, 2).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 2.5));

        // Window-wise maximum oracle.
        let vals: Vec<f64> = (1..=16).map(f64::from).collect();
        let mut expect = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let m = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (2 * oy + dy) * 4 + 2 * ox + dx))
                    .map(|i| vals[i])
                    .fold(f64::MIN, f64::max);
                expect.push(m);
            }
        }
        let x = tape.constant(t(&[1, 1, 4, 4], &vals));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), expect.as_slice());
        assert_eq!(expect, vec![6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).with_requires_grad(true));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 3]));
        assert!(matches!(tape.maxpool2d(x, 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(1);
        let x = tape.constant(t(&[2, 1, 1, 1], &[-1.0, 1.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.batchnorm2d(x, g, b, &mut state, Mode::Train).unwrap();
        // Hand normalization: var = 1, so y = ±1/sqrt(1 + 1e-5).
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.data(y)[0] + expect).abs() < 1e-12);
        assert!((tape.data(y)[1] - expect).abs() < 1e-12);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-2);
        assert_eq!(state.tracked, 1);
        assert!((state.running_var[0] - (0.9 + 0.1)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(random(&mut rng, &[2, 3, 4, 4]));
        let g0 = tape.constant(Tensor::zeros(&[3]));
        let beta = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let mut st3 = BatchNormState::new(3);
        let y = tape.batchnorm2d(x, g0, beta, &mut st3, Mode::Train).unwrap();
        for (i, v) in tape.data(y).iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][(i / 16) % 3]);
        }
    }

    #[test]
    fn batchnorm_eval_identity_and_uninitialized() {
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(2);
        let x = tape.constant(t(&[1, 2, 1, 2], &[0.3, -0.7, 1.5, 2.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batchnorm2d(x, g, b, &mut state, Mode::Eval),
            Err(Error::Uninitialized(_))
        ));
        state.tracked = 1;
        state.eps = 0.0;
        let y = tape.batchnorm2d(x, g, b, &mut state, Mode::Eval).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = tape.upsample_bilinear(x, 3, 3).unwrap();
        let d = tape.data(y);
        assert_eq!([d[0], d[2], d[6], d[8]], [0.0, 1.0, 2.0, 3.0]);
        assert!((d[4] - 1.5).abs() < 1e-12);
        // Closed form for align corners on a 2x2 grid: v(y, x) = 2y + x with y, x in {0, .5, 1}.
        for oy in 0..3 {
            for ox in 0..3 {
                let expect = 2.0 * oy as f64 / 2.0 + ox as f64 / 2.0;
                assert!((d[oy * 3 + ox] - expect).abs() < 1e-12);
            }
        }

        let c = tape.constant(Tensor::full(&[1, 1, 3, 2], 4.25));
        let y = tape.upsample_bilinear(c, 8, 5).unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 4.25).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = tape.constant(random(&mut rng, &[2, 2, 3, 4]));
        let y = tape.upsample_bilinear(r, 3, 4).unwrap();
        assert_eq!(tape.data(y), tape.data(r));

        assert!(matches!(tape.upsample_bilinear(r, 2, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, 3.7, -3.7, 500.0]));
        let y = tape.sigmoid(x);
        let d = tape.data(y);
        assert_eq!(d[0], 0.5);
        assert!((d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!(d[3] > 1.0 - 1e-12 && d[3] < 1.0);
    }

    #[test]
    fn add_and_relu_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let neg = tape.scale(a, -1.0);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.data(s), &[4.0, 6.0]);
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.data(s), tape.data(a));
        let s = tape.add(a, neg).unwrap();
        assert_eq!(tape.data(s), &[0.0, 0.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension(_))));

        let x = tape.leaf(t(&[2], &[-1.0, 2.0]).with_requires_grad(true));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 2.0]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[3], 0.7).with_requires_grad(true));
        let twice = tape.scale(p, 2.0);
        let s = tape.sum(twice);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 2.0, 2.0]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
        let s = tape.sigmoid(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[0.25]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn multi_path_gradients_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[1, 2, 4, 4]);
        let w = param("w", random(&mut rng, &[3, 2, 3, 3]));
        let wa: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wb: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |use_a: bool, use_b: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(&w);
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = tape.sigmoid(y);
            let la = tape.dot(s, wa.clone()).unwrap();
            let lb = tape.dot(y, wb.clone()).unwrap();
            let root = match (use_a, use_b) {
                (true, true) => tape.add(la, lb).unwrap(),
                (true, false) => la,
                _ => lb,
            };
            tape.backward(root).unwrap();
            tape.grad(wv).unwrap().to_vec()
        };
        let both = run(true, true);
        let (a, b) = (run(true, false), run(false, true));
        for i in 0..both.len() {
            assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    // Finite-difference checks of every operator on random inputs.

    fn check(f: impl FnMut(&mut Tape, &[Var]) -> crate::error::Result<Var>, mut params: Vec<Parameter>) -> f64 {
        let report = gradcheck(f, &mut params, 1e-6, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
        report.max_rel_error()
    }

    fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            param("x", random(&mut rng, &[2, 3, 6, 5])),
            param("w", random(&mut rng, &[4, 3, 3, 3])),
            param("b", random(&mut rng, &[4])),
        ];
        let wts = weights(&mut rng, 2 * 4 * 3 * 3);
        check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                t.dot(y, wts.clone())
            },
            params,
        );
    }

    #[test]
    fn gradcheck_maxpool() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = vec![param("x", random(&mut rng, &[2, 2, 8, 8]))];
        let wts = weights(&mut rng, 2 * 2 * 4 * 4);
        check(
            |t, v| {
                let y = t.maxpool2d(v[0], 2, 2)?;
                t.dot(y, wts.clone())
            },
            params,
        );
    }

    #[test]
    fn gradcheck_batchnorm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = vec![
            param("x", random(&mut rng, &[2, 3, 4, 4])),
            param("gamma", random(&mut rng, &[3])),
            param("beta", random(&mut rng, &[3])),
        ];
        let wts = weights(&mut rng, 96);
        let mut state = BatchNormState::new(3);
        check(
            |t, v| {
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut state, Mode::Train)?;
                t.dot(y, wts.clone())
            },
            params.clone(),
        );
        let mut eval_state = BatchNormState::new(3);
        eval_state.running_mean = vec![0.1, -0.2, 0.3];
        eval_state.running_var = vec![0.5, 1.5, 2.0];
        eval_state.tracked = 1;
        check(
            |t, v| {
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut eval_state, Mode::Eval)?;
                t.dot(y, wts.clone())
            },
            params,
        );
    }

    #[test]
    fn gradcheck_upsample_sigmoid_relu_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = vec![
            param("a", random(&mut rng, &[1, 2, 4, 4])),
            param("b", random(&mut rng, &[1, 2, 16, 16])),
        ];
        let wts = weights(&mut rng, 2 * 16 * 16);
        check(
            |t, v| {
                let up = t.upsample_bilinear(v[0], 16, 16)?;
                let r = t.relu(v[1]);
                let s = t.add(up, r)?;
                let y = t.sigmoid(s);
                t.dot(y, wts.clone())
            },
            params,
        );
    }

    #[test]
    fn gradcheck_weighted_sum_and_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = vec![
            param("a", random(&mut rng, &[2, 1, 3, 3])),
            param("b", random(&mut rng, &[2, 1, 3, 3])),
            param("h", random(&mut rng, &[2])),
            param("bias", random(&mut rng, &[1])),
        ];
        let label = Tensor::from_fn(&[2, 1, 3, 3], |_| f64::from(rng.random_bool(0.4) as u8));
        check(
            |t, v| {
                let f = t.weighted_sum(&[v[0], v[1]], v[2], v[3])?;
                let p = t.sigmoid(f);
                t.balanced_bce(p, &label, 0.7)
            },
            params,
        );
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = vec![param("x", random(&mut rng, &[5]))];
        let wts = weights(&mut rng, 5);
        let mut ps = params;
        let report = gradcheck(|t, v| t.dot(v[0], wts.clone()), &mut ps, 1e-5, 1e-10).unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn gradcheck_conv_sigmoid_mean_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = vec![
            param("w", random(&mut rng, &[2, 1, 3, 3])),
            param("b", random(&mut rng, &[2])),
        ];
        let x = random(&mut rng, &[1, 1, 4, 4]);
        check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.conv2d(xv, v[0], Some(v[1]), 1, 1)?;
                let s = t.sigmoid(y);
                Ok(t.mean(s))
            },
            params,
        );
    }

    #[test]
    fn gradcheck_detects_broken_gradient() {
        let mut params = vec![param("x", Tensor::full(&[3], 0.5))];
        let report = gradcheck(
            |t, v| {
                let y = t.broken_double(v[0]);
                Ok(t.sum(y))
            },
            &mut params,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.3);
    }

    #[test]
    fn gradcheck_rejects_nondeterministic_function() {
        let mut params = vec![param("x", Tensor::full(&[1], 0.5))];
        let mut calls = 0.0;
        let err = gradcheck(
            |t, v| {
                calls += 1.0;
                let y = t.scale(v[0], calls);
                Ok(t.sum(y))
            },
            &mut params,
            1e-6,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv_shape_formula(b in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 3usize..12,
                              w in 3usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[b, cin, h, w]));
            let wt = tape.constant(Tensor::zeros(&[cout, cin, k, k]));
            let y = tape.conv2d(x, wt, None, stride, pad).unwrap();
            prop_assert_eq!(tape.shape(y), &[b, cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
        }

        #[test]
        fn pool_and_upsample_shapes(h in 2usize..16, w in 2usize..16, k in 1usize..3, th in 0usize..8, tw in 0usize..8) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 2, h, w]));
            let y = tape.maxpool2d(x, k, k).unwrap();
            prop_assert_eq!(tape.shape(y), &[1, 2, (h - k) / k + 1, (w - k) / k + 1]);
            let u = tape.upsample_bilinear(x, h + th, w + tw).unwrap();
            prop_assert_eq!(tape.shape(u), &[1, 2, h + th, w + tw]);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[2, 2, 5, 5]);
            let b = random(&mut rng, &[2, 2, 5, 5]);
            let w = random(&mut rng, &[3, 2, 3, 3]);
            let mut tape = Tape::new();
            let (av, bv, wv) = (tape.constant(a), tape.constant(b), tape.constant(w));
            let ab = tape.add(av, bv).unwrap();
            let lhs = tape.conv2d(ab, wv, None, 1, 1).unwrap();
            let ca = tape.conv2d(av, wv, None, 1, 1).unwrap();
            let cb = tape.conv2d(bv, wv, None, 1, 1).unwrap();
            let rhs = tape.add(ca, cb).unwrap();
            for (l, r) in tape.data(lhs).iter().zip(tape.data(rhs)) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        #[test]
        fn sigmoid_strictly_inside(x in -1e6f64..1e6) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
