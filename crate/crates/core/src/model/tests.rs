use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_directional, check_sampled, CheckOptions};

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn flags(aux: bool, attn: bool) -> ModelConfig {
    ModelConfig {
        use_auxiliary: aux,
        use_attention: attn,
        ..ModelConfig::default()
    }
}

fn batch(b: usize, seed: u64) -> Batch<f64> {
    Batch {
        rgb: random(&[b, 3, 32, 32], seed, -1.5, 1.5),
        lightness: random(&[b, 1, 32, 32], seed + 1, 0.0, 1.0),
        ab: random(&[b, 2, 32, 32], seed + 2, -0.3, 0.3),
        translation: random(&[b, 3], seed + 3, -3.0, 3.0),
        log_rotation: random(&[b, 3], seed + 4, -1.0, 1.0),
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    for (h, w) in [(8, 32), (32, 24), (0, 0)] {
        let cfg = ModelConfig {
            input_height: h,
            input_width: w,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err(), "{h}x{w}");
    }
    let cfg = ModelConfig {
        input_height: 48,
        input_width: 80,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_ok());
    assert!(ModelConfig { beta_intra: 0.0, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { beta_inter: -0.1, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { beta_inter: 0.0, ..ModelConfig::default() }.validate().is_ok());
}

#[test]
fn parameter_groups_and_ablation_params() {
    let full = Model::<f64>::new(flags(true, true), 1).unwrap();
    let base = Model::<f64>::new(flags(false, false), 1).unwrap();
    assert!(full.params().keys().any(|k| k.starts_with("colorizer.")));
    assert!(full.params().contains_key("attn_fuse.weight"));
    assert!(!base.params().keys().any(|k| k.starts_with("colorizer.") || k.starts_with("attn_fuse.")));
    assert_eq!(ParamGroup::of("backbone.0.conv_a.weight"), ParamGroup::BackboneAndColorizer);
    assert_eq!(ParamGroup::of("colorizer.head.bias"), ParamGroup::BackboneAndColorizer);
    assert_eq!(ParamGroup::of("fuse.weight"), ParamGroup::Other);
    assert_eq!(ParamGroup::of("regressor.hidden.weight"), ParamGroup::Other);
    // Shared parameters start identical across variants.
    assert_eq!(full.params()["backbone.3.conv_b.weight"], base.params()["backbone.3.conv_b.weight"]);
    assert_eq!(full.params()["regressor.hidden.weight"], base.params()["regressor.hidden.weight"]);
}

#[test]
fn backbone_shapes_and_sensitivity() {
    let model = Model::<f64>::new(flags(false, false), 3).unwrap();
    let img = random(&[1, 3, 32, 32], 9, -1.0, 1.0);
    let run = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let x = tape.constant(img.clone());
        let out = m.backbone_forward(&mut tape, &p, x).unwrap();
        tape.value(out).clone()
    };
    let base = run(&model);
    assert_eq!(base.shape(), &[1, 32, 2, 2]);
    for name in model.params().keys().filter(|k| k.starts_with("backbone.")) {
        let mut m = model.clone();
        let t = &mut m.params_mut()[name.as_str()];
        let noise = random(t.shape(), 77, -1e-3, 1e-3);
        t.add_scaled(&noise, 1.0).unwrap();
        assert!(run(&m).max_abs_diff(&base) > 0.0, "{name} does not reach the output");
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let small = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(model.backbone_forward(&mut tape, &p, small).is_err());
}

#[test]
fn colorizer_contract() {
    let model = Model::<f64>::new(flags(true, false), 4).unwrap();
    let l = random(&[1, 1, 32, 32], 5, 0.0, 1.0);
    let run = |skip: Option<usize>| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let x = tape.constant(l.clone());
        let (ab, mc) = match skip {
            None => model.colorizer_forward(&mut tape, &p, x).unwrap(),
            Some(s) => model.colorizer_forward_without_skip(&mut tape, &p, x, s).unwrap(),
        };
        (tape.value(ab).clone(), tape.value(mc).clone())
    };
    let (ab, mc) = run(None);
    assert_eq!(ab.shape(), &[1, 2, 32, 32]);
    assert_eq!(mc.shape(), &[1, 32, 2, 2]);
    let (ab2, mc2) = run(None);
    assert_eq!(ab.data(), ab2.data());
    assert_eq!(mc.data(), mc2.data());
    for level in 0..4 {
        let (dropped, _) = run(Some(level));
        assert!(dropped.max_abs_diff(&ab) > 0.0, "skip {level} carries nothing");
    }

    let off = Model::<f64>::new(flags(false, false), 4).unwrap();
    let mut tape = Tape::new();
    let p = off.bind(&mut tape);
    let x = tape.constant(l.clone());
    assert!(off.colorizer_forward(&mut tape, &p, x).is_err());
}

fn fuse_on(a: &Tensor<f64>, b: Option<&Tensor<f64>>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (w, bias) = (tape.param(w.clone()), tape.param(bias.clone()));
    let a = tape.constant(a.clone());
    let b = b.map(|b| tape.constant(b.clone()));
    let out = fuse_maps(&mut tape, w, bias, a, b)?;
    Ok(tape.value(out).clone())
}

#[test]
fn fuse_channel_selector_is_identity() {
    let a = random(&[2, 2, 3, 3], 1, 0.0, 2.0);
    let b = random(&[2, 1, 3, 3], 2, 0.0, 2.0);
    let mut w = Tensor::zeros(&[1, 3, 1, 1]);
    w.data_mut()[2] = 1.0;
    let out = fuse_on(&a, Some(&b), &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(out.data(), b.data());
    let mut w = Tensor::zeros(&[1, 3, 1, 1]);
    w.data_mut()[1] = 1.0;
    let out = fuse_on(&a, Some(&b), &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(out.data(), a.slice_channels(1, 1).unwrap().data());
}

#[test]
fn fuse_rejects_spatial_mismatch_and_is_nonnegative() {
    let w = random(&[4, 3, 1, 1], 3, -1.0, 1.0);
    let bias = random(&[4], 4, -1.0, 1.0);
    let a = random(&[1, 2, 2, 2], 5, -1.0, 1.0);
    let b = random(&[1, 1, 3, 2], 6, -1.0, 1.0);
    assert!(fuse_on(&a, Some(&b), &w, &bias).is_err());
    let b = random(&[1, 1, 2, 2], 6, -1.0, 1.0);
    let out = fuse_on(&a, Some(&b), &w, &bias).unwrap();
    assert!(out.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn fuse_gradient_reaches_both_inputs() {
    let w = random(&[4, 5, 1, 1], 3, 0.1, 1.0);
    let bias = Tensor::full(&[4], 0.1);
    let a = random(&[1, 3, 2, 2], 5, 0.1, 1.0);
    let b = random(&[1, 2, 2, 2], 6, 0.1, 1.0);
    let f = |a: &Tensor<f64>, b: &Tensor<f64>| fuse_on(a, Some(b), &w, &bias).unwrap().sum();
    let base = f(&a, &b);
    for which in 0..2 {
        let (mut a2, mut b2) = (a.clone(), b.clone());
        let t = if which == 0 { &mut a2 } else { &mut b2 };
        t.data_mut()[0] += 1e-5;
        let slope = (f(&a2, &b2) - base) / 1e-5;
        assert!(slope.abs() > 1e-3, "input {which} has slope {slope}");
    }
}

fn attention_on(m: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let x = tape.constant(m.clone());
    let maps = attention_maps(&mut tape, x).unwrap();
    (
        tape.value(maps.excited).clone(),
        tape.value(maps.mask).clone(),
        tape.value(maps.attended).clone(),
    )
}

#[test]
fn attention_hand_example() {
    // Channel 0 = [[1,2],[3,4]], channel 1 = [[0,1],[0,0]].
    // GMP = (4, 1); excited = [[4,8],[12,16]], [[0,1],[0,0]];
    // mask = channel mean = [[2,4.5],[6,8]]; attended = M * mask.
    let m = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let (excited, mask, attended) = attention_on(&m);
    assert_eq!(excited.data(), &[4.0, 8.0, 12.0, 16.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(mask.shape(), &[1, 1, 2, 2]);
    assert_eq!(mask.data(), &[2.0, 4.5, 6.0, 8.0]);
    assert_eq!(attended.data(), &[2.0, 9.0, 18.0, 32.0, 0.0, 4.5, 0.0, 0.0]);
}

#[test]
fn attention_single_hot_pixel_peaks_there() {
    let mut m = Tensor::zeros(&[1, 2, 2, 2]);
    m.data_mut()[3] = 2.0;
    let (_, mask, attended) = attention_on(&m);
    // GMP = (2, 0); excited ch0 = 4 at p; mask = 4 / 2 = 2 at p.
    assert_eq!(mask.data(), &[0.0, 0.0, 0.0, 2.0]);
    assert_eq!(attended.data(), &[0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn attention_constant_and_zero_maps() {
    let c = [0.5, 2.0, 3.0];
    let m = Tensor::from_fn(&[1, 3, 2, 3], |i| c[i / 6]);
    let (_, mask, attended) = attention_on(&m);
    let s = c.iter().map(|v| v * v).sum::<f64>() / 3.0;
    assert!(mask.data().iter().all(|&v| (v - s).abs() < 1e-12));
    for (a, b) in attended.data().iter().zip(m.data()) {
        assert!((a - b * s).abs() < 1e-12);
    }
    let (_, mask, attended) = attention_on(&Tensor::zeros(&[2, 4, 3, 3]));
    assert!(mask.data().iter().all(|&v| v == 0.0));
    assert!(attended.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_nonnegative_and_homogeneous(seed in any::<u64>(), lambda in 0.1f64..5.0) {
        let m = random(&[2, 3, 2, 3], seed, 0.0, 2.0);
        let (_, mask, attended) = attention_on(&m);
        prop_assert!(mask.data().iter().all(|&v| v >= 0.0));
        prop_assert!(attended.data().iter().all(|&v| v >= 0.0));
        let (_, mask_l, attended_l) = attention_on(&m.map(|v| v * lambda));
        for (a, b) in mask_l.data().iter().zip(mask.data()) {
            prop_assert!((a - lambda.powi(2) * b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        for (a, b) in attended_l.data().iter().zip(attended.data()) {
            prop_assert!((a - lambda.powi(3) * b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn losses_nonnegative_and_zero_only_on_match(seed in any::<u64>()) {
        let pred = random(&[2, 2, 3, 3], seed, -1.0, 1.0);
        let gt = random(&[2, 2, 3, 3], seed ^ 1, -1.0, 1.0);
        let v = color_loss(&pred, &gt);
        prop_assert!(v > 0.0);
        prop_assert_eq!(color_loss(&pred, &pred), 0.0);
        let x = random(&[2, 3], seed, -1.0, 1.0);
        let w = random(&[2, 3], seed ^ 2, -1.0, 1.0);
        prop_assert!(pose_loss(&x, &w, &w, &x, 3.0) > 0.0);
        prop_assert_eq!(pose_loss(&x, &w, &x, &w, 3.0), 0.0);
    }
}

#[test]
fn regressor_bias_only_output() {
    let mut model = Model::<f64>::new(flags(false, false), 2).unwrap();
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("regressor.translation") {
            *t = Tensor::zeros(t.shape());
        }
    }
    model.params_mut()["regressor.translation.bias"] = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let f = tape.constant(random(&[4, 32, 2, 2], 1, 0.0, 1.0));
    let (t, r) = model.regressor_forward(&mut tape, &p, f).unwrap();
    assert_eq!(tape.shape(t), &[4, 3]);
    assert_eq!(tape.shape(r), &[4, 3]);
    assert_eq!(tape.value(t).data(), &[1.0, 2.0, 3.0].repeat(4)[..]);
}

#[test]
fn regressor_heads_learn_independently() {
    let model = Model::<f64>::new(flags(false, false), 2).unwrap();
    for head in [0, 1] {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let f = tape.constant(random(&[2, 32, 2, 2], 1, 0.0, 1.0));
        let (t, r) = model.regressor_forward(&mut tape, &p, f).unwrap();
        let loss = tape.sum(if head == 0 { t } else { r });
        let g = tape.backward(loss).unwrap();
        let norm = |name: &str| g.get(p.get(name)).unwrap().data().iter().map(|v| v.abs()).sum::<f64>();
        let (own, other) = if head == 0 {
            ("regressor.translation.weight", "regressor.rotation.weight")
        } else {
            ("regressor.rotation.weight", "regressor.translation.weight")
        };
        assert!(norm(own) > 0.0);
        assert_eq!(norm(other), 0.0);
    }
}

fn color_loss(pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let (p, g) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = loss_colorization(&mut tape, p, g).unwrap();
    tape.value(l).item().unwrap()
}

fn pose_loss(x: &Tensor<f64>, w: &Tensor<f64>, xg: &Tensor<f64>, wg: &Tensor<f64>, beta: f64) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<Var> = [x, w, xg, wg].iter().map(|t| tape.constant((*t).clone())).collect();
    let l = loss_pose(&mut tape, v[0], v[1], v[2], v[3], beta).unwrap();
    tape.value(l).item().unwrap()
}

fn joint(lc: Option<f64>, ll: f64, beta: f64) -> f64 {
    let mut tape = Tape::new();
    let lc = lc.map(|v| tape.constant(Tensor::scalar(v)));
    let ll = tape.constant(Tensor::scalar(ll));
    let l = loss_joint(&mut tape, lc, ll, beta).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn colorization_loss_examples() {
    let pred = Tensor::new(&[1, 2, 1, 1], vec![0.2, 0.1]).unwrap();
    let gt = Tensor::zeros(&[1, 2, 1, 1]);
    assert!((color_loss(&pred, &gt) - 0.3).abs() < 1e-15);
    assert_eq!(color_loss(&pred, &pred), 0.0);

    let pred = random(&[3, 2, 4, 5], 10, -1.0, 1.0);
    let gt = random(&[3, 2, 4, 5], 11, -1.0, 1.0);
    let mut oracle = 0.0;
    for b in 0..3 {
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..5 {
                    oracle += (pred.at4(b, c, h, w) - gt.at4(b, c, h, w)).abs();
                }
            }
        }
    }
    assert!((color_loss(&pred, &gt) - oracle / 3.0).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let g = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(loss_colorization(&mut tape, p, g).is_err());
}

#[test]
fn pose_loss_examples() {
    let z = Tensor::zeros(&[1, 3]);
    let x = Tensor::new(&[1, 3], vec![3.0, 4.0, 0.0]).unwrap();
    assert_eq!(pose_loss(&x, &z, &z, &z, 3.0), 5.0);
    let w = Tensor::new(&[1, 3], vec![0.06, 0.0, 0.08]).unwrap();
    assert!((pose_loss(&z, &w, &z, &z, 3.0) - 0.3).abs() < 1e-15);
    assert_eq!(pose_loss(&x, &w, &x, &w, 3.0), 0.0);
    // Batch mean.
    let x2 = Tensor::new(&[2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let z2 = Tensor::zeros(&[2, 3]);
    assert_eq!(pose_loss(&x2, &z2, &z2, &z2, 3.0), 3.0);
}

#[test]
fn joint_loss_examples() {
    assert_eq!(joint(Some(2.0), 1.0, 0.2), 1.4);
    assert_eq!(joint(Some(2.0), 1.0, 0.0), 1.0);
    assert_eq!(joint(None, 0.75, 0.2), 0.75);
    let mut prev = joint(Some(0.0), 1.0, 0.2);
    for i in 1..20 {
        let v = joint(Some(i as f64 * 0.3), 1.0, 0.2);
        assert!(v >= prev);
        prev = v;
    }
    let mut prev = joint(Some(1.0), 0.0, 0.2);
    for i in 1..20 {
        let v = joint(Some(1.0), i as f64 * 0.3, 0.2);
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn every_ablation_variant_runs() {
    let data = batch(2, 20);
    for (aux, attn) in [(false, false), (true, false), (false, true), (true, true)] {
        let model = Model::<f64>::new(flags(aux, attn), 7).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let (out, losses) = model.losses(&mut tape, &p, &data).unwrap();
        assert_eq!(tape.shape(out.translation), &[2, 3]);
        assert_eq!(tape.shape(out.log_rotation), &[2, 3]);
        assert_eq!(out.pred_ab.map(|v| tape.shape(v).to_vec()), aux.then(|| vec![2, 2, 32, 32]));
        assert_eq!(out.attention_mask.map(|v| tape.shape(v).to_vec()), attn.then(|| vec![2, 1, 2, 2]));
        if let Some(mask) = out.attention_mask {
            assert!(tape.value(mask).data().iter().all(|&v| v >= 0.0));
        }
        assert!(tape.value(out.fused).data().iter().all(|&v| v >= 0.0));
        assert_eq!(losses.color.is_some(), aux);
        if !aux {
            assert_eq!(tape.value(losses.joint).item(), tape.value(losses.pose).item());
        }
        let g = tape.backward(losses.joint).unwrap();
        for (name, v) in p.iter() {
            assert!(g.get(v).is_some(), "{name}");
        }
    }
}

#[test]
fn auxiliary_off_ignores_colorizer() {
    let off = Model::<f64>::new(flags(false, true), 5).unwrap();
    let on = Model::<f64>::new(flags(true, true), 5).unwrap();
    let rgb = random(&[1, 3, 32, 32], 30, -1.0, 1.0);
    let run = |with_colorizer: bool| {
        let mut tape = Tape::new();
        let x_l = if with_colorizer {
            on.bind(&mut tape);
            Some(tape.constant(random(&[1, 1, 32, 32], 31, 0.0, 1.0)))
        } else {
            None
        };
        let p = off.bind(&mut tape);
        let x = tape.constant(rgb.clone());
        let out = off.forward(&mut tape, &p, x, x_l).unwrap();
        assert!(out.pred_ab.is_none());
        (tape.value(out.translation).clone(), tape.value(out.log_rotation).clone())
    };
    let (a, b) = (run(false), run(true));
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());

    // Colorizer parameters cannot be attached to an auxiliary-off model.
    let err = Model::from_params(flags(false, true), on.params().clone()).unwrap_err();
    assert!(err.to_string().contains("unexpected colorizer.enc.0.weight"), "{err}");
}

#[test]
fn load_params_reports_each_field() {
    let mut model = Model::<f64>::new(ModelConfig::default(), 1).unwrap();
    let mut params = model.params().clone();
    params.shift_remove("fuse.bias");
    params["regressor.translation.bias"] = Tensor::zeros(&[4]);
    params.insert("extra".into(), Tensor::zeros(&[1]));
    let msg = model.load_params(params).unwrap_err().to_string();
    assert!(msg.contains("missing fuse.bias [32]"), "{msg}");
    assert!(msg.contains("regressor.translation.bias: expected [3], found [4]"), "{msg}");
    assert!(msg.contains("unexpected extra [1]"), "{msg}");
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let model = Model::<f64>::new(ModelConfig::default(), 8).unwrap();
    let bytes = encode_params(model.params());
    assert_eq!(&bytes[..4], b"AXPS");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    let back: ParamStore<f64> = decode_params(&bytes).unwrap();
    assert_eq!(&back, model.params());
    let reloaded = Model::from_params(ModelConfig::default(), back).unwrap();
    assert_eq!(reloaded.params(), model.params());

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(decode_params::<f64>(&bad).unwrap_err().to_string().contains("version 2"));
    assert!(decode_params::<f64>(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_params::<f64>(b"NOPE\x01\0\0\0").is_err());

    let other = ModelConfig {
        fuse_width: 16,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::from_params(other, decode_params::<f64>(&bytes).unwrap()), Err(Error::Incompatible(_))));
}

#[test]
fn full_model_gradient_check() {
    let model = Model::<f64>::new(ModelConfig::default(), 11).unwrap();
    let data = batch(1, 40);
    let inputs: Vec<Tensor<f64>> = model.params().values().cloned().collect();
    let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let p = model.bind_vars(vars)?;
        Ok(model.losses(tape, &p, &data)?.1.joint)
    };
    let opts = CheckOptions::default();
    let sampled = check_sampled(&inputs, opts, 4, 12, build).unwrap();
    assert!(sampled.max_rel_err < 1e-4, "{sampled:?}");
    assert!(sampled.kinks * 20 < sampled.compared, "{sampled:?}");
    let directional = check_directional(&inputs, opts, 13, build).unwrap();
    assert!(directional.max_rel_err < 1e-4, "{directional:?}");
    assert!(directional.kinks * 20 < directional.compared, "{directional:?}");
}


