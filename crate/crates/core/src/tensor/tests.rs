use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_elements, CheckOptions};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// Direct nested-loop cross-correlation, independent of the im2col path.
fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [b, ci, h, w] = x.dims4().unwrap();
    let [co, _, kh, kw] = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for bi in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at4(bi, c, iy as usize, ix as usize) * k.at4(o, c, i, j);
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, kv, bv, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_identity_and_sum() {
    let y = conv(&t(&[1, 1, 1, 1], &[5.0]), &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
    assert_eq!(y.data(), &[5.0]);
    let y = conv(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), &t(&[1], &[0.0]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1), (3, 2, 2)] {
        let x = random(&[2, 2, 7, 6], &mut rng);
        let kern = random(&[3, 2, k, k], &mut rng);
        let bias = random(&[3], &mut rng);
        let got = conv(&x, &kern, &bias, stride, pad).unwrap();
        let want = conv_oracle(&x, &kern, bias.data(), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn conv_same_padding_preserves_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 3, 5] {
        let x = random(&[1, 2, 9, 5], &mut rng);
        let y = conv(&x, &random(&[4, 2, k, k], &mut rng), &Tensor::zeros(&[4]), 1, (k - 1) / 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 9, 5]);
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let err = conv(&Tensor::ones(&[1, 2, 4, 4]), &Tensor::ones(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("input channels"), "{err}");
    let err = conv(&Tensor::ones(&[1, 1, 2, 4]), &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("height"), "{err}");
    let err = conv(&Tensor::ones(&[1, 1, 4, 4]), &Tensor::ones(&[2, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("bias"), "{err}");
}

#[test]
fn relu_forward_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // exactly-zero input gets zero gradient
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[-1.0, -2.0, -0.5, -3.0]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn concat_and_slice_roundtrip() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[1, 1, 1, 1], &[2.0]));
    let b = tape.param(t(&[1, 1, 1, 1], &[3.0]));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 2, 1, 1]);
    assert_eq!(tape.value(c).data(), &[2.0, 3.0]);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let av = random(&[2, 3, 2, 2], &mut rng);
    let bv = random(&[2, 2, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(av.clone()), tape.constant(bv.clone()));
    let c = tape.concat_channels(a, b).unwrap();
    let front = tape.slice_channels(c, 0, 3).unwrap();
    let back = tape.slice_channels(c, 3, 2).unwrap();
    assert_eq!(tape.value(front), &av);
    assert_eq!(tape.value(back), &bv);

    let z = tape.constant(Tensor::zeros(&[2, 5, 2, 2]));
    let cz = tape.concat_channels(a, z).unwrap();
    assert_eq!(tape.value(cz).slice_channels(0, 3).unwrap(), av);

    let bad = tape.constant(Tensor::zeros(&[2, 1, 3, 2]));
    assert!(tape.concat_channels(a, bad).is_err());
}

#[test]
fn global_max_pool_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
    let y = tape.global_max_pool_spatial(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);

    let c = tape.param(Tensor::full(&[1, 2, 3, 3], 0.7));
    let y = tape.global_max_pool_spatial(c).unwrap();
    assert_eq!(tape.value(y).data(), &[0.7, 0.7]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // ties route to the first element in row-major order
    let gc = g.get(c).unwrap().data();
    assert_eq!(gc[0], 1.0);
    assert_eq!(gc[9], 1.0);
    assert_eq!(gc.iter().sum::<f64>(), 2.0);
}

#[test]
fn channel_mean_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 2, 1, 1], &[2.0, 4.0]));
    let y = tape.global_avg_pool_channels(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let plane = [0.3, -1.0, 2.5, 4.0];
    let rep: Vec<f64> = plane.iter().cycle().take(12).copied().collect();
    let z = tape.param(t(&[1, 3, 2, 2], &rep));
    let m = tape.global_avg_pool_channels(z).unwrap();
    for (got, want) in tape.value(m).data().iter().zip(plane) {
        assert!((got - want).abs() < 1e-15);
    }
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert!(g.get(z).unwrap().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn broadcast_mul_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let ones = tape.constant(Tensor::ones(&[2, 3, 1, 1]));
    let y = tape.broadcast_mul(av, ones).unwrap();
    assert_eq!(tape.value(y), &a);
    let zeros = tape.constant(Tensor::zeros(&[2, 1, 4, 5]));
    let y = tape.broadcast_mul(av, zeros).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    for bshape in [[2, 3, 1, 1], [2, 1, 4, 5], [1, 3, 4, 1]] {
        let b = random(&bshape, &mut rng);
        let bv = tape.constant(b.clone());
        let y = tape.broadcast_mul(av, bv).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let bi = |d: usize, i: usize| if bshape[d] == 1 { 0 } else { i };
                        let want = a.at4(n, c, h, w) * b.at4(bi(0, n), bi(1, c), bi(2, h), bi(3, w));
                        assert_eq!(tape.value(y).at4(n, c, h, w), want);
                    }
                }
            }
        }
    }
    let bad = tape.constant(Tensor::ones(&[2, 2, 1, 1]));
    assert!(tape.broadcast_mul(av, bad).is_err());
}

#[test]
fn upsample_cases() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let same = tape.upsample_nearest(xv, 1).unwrap();
    assert_eq!(tape.value(same), &x);
    let y = tape.upsample_nearest(xv, 2).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    // mean-downsampling the replicas gives back the input
    let yv = tape.value(y);
    for (i, &want) in x.data().iter().enumerate() {
        let (r, c) = (i / 2, i % 2);
        let mean = (yv.at4(0, 0, 2 * r, 2 * c)
            + yv.at4(0, 0, 2 * r + 1, 2 * c)
            + yv.at4(0, 0, 2 * r, 2 * c + 1)
            + yv.at4(0, 0, 2 * r + 1, 2 * c + 1))
            / 4.0;
        assert_eq!(mean, want);
    }
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[4.0; 4]);
}

#[test]
fn linear_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zb = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, eye, zb).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let zw = tape.constant(Tensor::zeros(&[2, 3]));
    let c = tape.constant(t(&[2], &[7.0, -1.0]));
    let y = tape.linear(x, zw, c).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, -1.0, 7.0, -1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (xs, ws, bs) = (random(&[4, 5], &mut rng), random(&[3, 5], &mut rng), random(&[3], &mut rng));
    let (xv, wv, bv) = (tape.constant(xs.clone()), tape.constant(ws.clone()), tape.constant(bs.clone()));
    let y = tape.linear(xv, wv, bv).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = bs.data()[j];
            for k in 0..5 {
                acc += xs.data()[i * 5 + k] * ws.data()[j * 5 + k];
            }
            assert!((tape.value(y).data()[i * 3 + j] - acc).abs() < 1e-14);
        }
    }
    assert!(tape.linear(xv, zw, c).is_err());
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0]);

    let sq = tape.broadcast_mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.get(s).unwrap().data(), &[1.0]);

    let unused = tape.param(Tensor::ones(&[3]));
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    assert!(matches!(tape.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let a = conv(&x, &k, &b, 2, 1).unwrap();
    let c = conv(&x, &k, &b, 2, 1).unwrap();
    assert_eq!(a.data(), c.data());
}

fn assert_grad_ok(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = check_elements(inputs, CheckOptions::default(), build).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn finite_difference_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = random(&[2, 2, 5, 4], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    // weight the output so the loss is not a plain sum
    let wts = random(&[2, 3, 3, 2], &mut rng);
    assert_grad_ok(&[x.clone(), k, b, wts], |tp, v| {
        let y = tp.conv2d(v[0], v[1], v[2], 2, 1)?;
        let y = tp.broadcast_mul(y, v[3])?;
        Ok(tp.sum(y))
    });
    // stay away from the kink at zero
    let away = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let w2 = random(&[2, 2, 5, 4], &mut rng);
    assert_grad_ok(&[away.clone(), w2.clone()], |tp, v| {
        let y = tp.relu(v[0]);
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
    assert_grad_ok(&[away.clone(), w2.clone()], |tp, v| {
        let y = tp.abs(v[0]);
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
    let w3 = random(&[2, 2, 1, 1], &mut rng);
    assert_grad_ok(&[x.clone(), w3], |tp, v| {
        let y = tp.global_max_pool_spatial(v[0])?;
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
    let w4 = random(&[2, 1, 5, 4], &mut rng);
    assert_grad_ok(&[x.clone(), w4], |tp, v| {
        let y = tp.global_avg_pool_channels(v[0])?;
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
    for bshape in [[2, 2, 1, 1], [2, 1, 5, 4], [1, 2, 5, 1]] {
        let bt = random(&bshape, &mut rng);
        assert_grad_ok(&[x.clone(), bt, w2.clone()], |tp, v| {
            let y = tp.broadcast_mul(v[0], v[1])?;
            let y = tp.broadcast_mul(y, v[2])?;
            Ok(tp.sum(y))
        });
    }
    let x2 = random(&[2, 3, 5, 4], &mut rng);
    let w5 = random(&[2, 5, 5, 4], &mut rng);
    assert_grad_ok(&[x.clone(), x2, w5], |tp, v| {
        let y = tp.concat_channels(v[0], v[1])?;
        let y = tp.broadcast_mul(y, v[2])?;
        Ok(tp.sum(y))
    });
    let w6 = random(&[2, 2, 15, 12], &mut rng);
    assert_grad_ok(&[x.clone(), w6], |tp, v| {
        let y = tp.upsample_nearest(v[0], 3)?;
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
    let (li, lw, lb) = (random(&[3, 4], &mut rng), random(&[2, 4], &mut rng), random(&[2], &mut rng));
    let w7 = random(&[3, 2], &mut rng);
    assert_grad_ok(&[li.clone(), lw, lb, w7], |tp, v| {
        let y = tp.linear(v[0], v[1], v[2])?;
        let y = tp.broadcast_mul(y, v[3])?;
        Ok(tp.sum(y))
    });
    let w8 = random(&[3], &mut rng);
    assert_grad_ok(&[li.clone(), w8], |tp, v| {
        let y = tp.row_norm(v[0])?;
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.mean(y))
    });
    assert_grad_ok(&[li.clone(), li.map(|v| v * 0.5 + 0.2)], |tp, v| {
        let d = tp.sub(v[0], v[1])?;
        let s = tp.add(d, v[1])?;
        let s = tp.broadcast_mul(s, s)?;
        let s = tp.reshape(s, &[12])?;
        let s = tp.scale(s, 0.3);
        Ok(tp.sum(s))
    });
    let w9 = random(&[2, 1, 5, 4], &mut rng);
    assert_grad_ok(&[x, w9], |tp, v| {
        let y = tp.slice_channels(v[0], 1, 1)?;
        let y = tp.broadcast_mul(y, v[1])?;
        Ok(tp.sum(y))
    });
}
