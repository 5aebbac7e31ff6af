use d2hnet::model::{
    loss_deblur, mask_inputs, pad_replicate, two_phase_infer, upscale_offsets, Ablation, DeblurNet, EnhanceNet,
    ModelConfig, OFFSET_TAPS,
};
use d2hnet::tensor::avg_pool;
use d2hnet::{ConvGeometry, ConvVars, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        deblur_base: 4,
        enhance_base: 4,
        res_layers: 1,
        deblur_blocks: 1,
        resolution: 16,
        alpha: 0.5,
    }
}

fn random<T: d2hnet::Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.random_range(0.0..1.0)))
}

fn zero_params<T: d2hnet::Scalar>(tensors: &mut [Tensor<T>], which: &[usize]) {
    for &i in which {
        tensors[i] = Tensor::zeros(tensors[i].shape());
    }
}

#[test]
fn deblur_keeps_the_input_shape() {
    let net = DeblurNet::<f32>::new(&small(), 1);
    let s = Shape::new(2, 3, 16, 12);
    let t = net.run(&random(s, 1), &random(s, 2)).unwrap();
    assert_eq!(t.shape(), s);
    assert!(net.run(&random(Shape::new(1, 3, 10, 12), 1), &random(Shape::new(1, 3, 10, 12), 2)).is_err());
}

#[test]
fn zero_weights_give_zero_output() {
    let mut net = DeblurNet::<f32>::new(&small(), 1);
    let all: Vec<usize> = (0..net.params.len()).collect();
    zero_params(net.params.tensors_mut(), &all);
    let s = Shape::new(1, 3, 8, 8);
    let t = net.run(&random(s, 1), &random(s, 2)).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_members_do_not_interact() {
    let net = DeblurNet::<f64>::new(&small(), 3);
    let s1 = Shape::new(1, 3, 8, 8);
    let (l0, s0, l1, s1_) = (random(s1, 1), random(s1, 2), random(s1, 3), random(s1, 4));
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| {
        Tensor::from_fn(Shape::new(2, 3, 8, 8), |n, c, y, x| if n == 0 { a.at(0, c, y, x) } else { b.at(0, c, y, x) })
    };
    let both = net.run(&cat(&l0, &l1), &cat(&s0, &s1_)).unwrap();
    let a = net.run(&l0, &s0).unwrap();
    let b = net.run(&l1, &s1_).unwrap();
    assert!(both.max_abs_diff(&cat(&a, &b)) < 1e-12);
}

#[test]
fn identical_batch_members_match_the_single_run_bitwise() {
    let net = DeblurNet::<f32>::new(&small(), 3);
    let s = Shape::new(1, 3, 8, 8);
    let (l, sh) = (random::<f32>(s, 1), random::<f32>(s, 2));
    let single = net.run(&l, &sh).unwrap();
    let both = net.run(&Tensor::stack(&[&l, &l]).unwrap(), &Tensor::stack(&[&sh, &sh]).unwrap()).unwrap();
    for n in 0..2 {
        assert_eq!(both.sample(n), single.data());
    }
}

#[test]
fn same_seed_same_weights() {
    let (a, b) = (DeblurNet::<f32>::new(&small(), 7), DeblurNet::<f32>::new(&small(), 7));
    assert_eq!(a.params.tensors(), b.params.tensors());
    let c = DeblurNet::<f32>::new(&small(), 8);
    assert_ne!(a.params.tensors(), c.params.tensors());
}

#[test]
fn offsets_upscale_by_two_in_size_and_value() {
    let tape = Tape::<f32>::new();
    let off = tape.constant(Tensor::full(Shape::new(1, 18, 2, 3), 3.0));
    let up = upscale_offsets(&tape, off, 4, 6).unwrap();
    let v = tape.value(up);
    assert_eq!(v.shape(), Shape::new(1, 18, 4, 6));
    assert!(v.data().iter().all(|&x| (x - 6.0).abs() < 1e-6));
    assert!(upscale_offsets(&tape, off, 4, 5).is_err());
}

#[test]
fn zero_producer_gives_zero_offsets_and_half_mask() {
    let mut net = EnhanceNet::<f32>::new(&small(), &Ablation::default(), 2);
    let levels = net.widths().len();
    for lvl in 0..levels {
        let idx = net.producer_params(lvl);
        assert!(!idx.is_empty());
        zero_params(net.params.tensors_mut(), &idx);
    }
    let tape = Tape::new();
    let p = net.params.bind(&tape, false);
    let coarsest = levels - 1;
    let w = net.widths()[coarsest];
    let f = |seed| tape.constant(random::<f32>(Shape::new(1, w, 2, 2), seed));
    let (off, mask) = net.compute_offsets(&tape, &p, coarsest, f(1), f(2), None).unwrap();
    assert_eq!(tape.shape(off), Shape::new(1, 2 * OFFSET_TAPS, 2, 2));
    assert_eq!(tape.shape(mask), Shape::new(1, OFFSET_TAPS, 2, 2));
    assert!(tape.value(off).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(mask).data().iter().all(|&v| v == 0.5));

    // Finer levels need the coarser offsets and the coarsest refuses them.
    let w = net.widths()[coarsest - 1];
    let g = |seed| tape.constant(random::<f32>(Shape::new(1, w, 4, 4), seed));
    assert!(net.compute_offsets(&tape, &p, coarsest - 1, g(1), g(2), None).is_err());
    let (fine, _) = net.compute_offsets(&tape, &p, coarsest - 1, g(1), g(2), Some(off)).unwrap();
    assert_eq!(tape.shape(fine), Shape::new(1, 2 * OFFSET_TAPS, 4, 4));
    assert!(net.compute_offsets(&tape, &p, coarsest, f(1), f(2), Some(off)).is_err());
}

#[test]
fn dense_alignment_has_no_offset_producer() {
    let ab = Ablation::parse("dense-alignment").unwrap();
    let net = EnhanceNet::<f32>::new(&small(), &ab, 2);
    assert!((0..net.widths().len()).all(|l| net.producer_params(l).is_empty()));
    let full = EnhanceNet::<f32>::new(&small(), &Ablation::default(), 2);
    assert!(net.params.numel() < full.params.numel());
    let s = Shape::new(1, 3, 16, 16);
    let y = net.run(&random(s, 1), &random(s, 2), &random(s, 3)).unwrap();
    assert_eq!(y.shape(), s);
}

#[test]
fn zeroed_decoder_returns_the_upsampled_deblur_exactly() {
    let mut net = EnhanceNet::<f32>::new(&small(), &Ablation::default(), 4);
    let idx = net.decoder_tail_params();
    zero_params(net.params.tensors_mut(), &idx);
    let s = Shape::new(1, 3, 32, 16);
    let t_up = random::<f32>(s, 9);
    let y = net.run(&random(s, 1), &random(s, 2), &t_up).unwrap();
    assert!(y.data().iter().zip(t_up.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn enhance_rejects_sizes_off_the_pyramid() {
    let net = EnhanceNet::<f32>::new(&small(), &Ablation::default(), 4);
    let s = Shape::new(1, 3, 24, 16);
    assert!(net.run(&random(s, 1), &random(s, 2), &random(s, 3)).is_err());
}

fn missing_gradients(ab: &Ablation) -> Vec<String> {
    let net = EnhanceNet::<f64>::new(&small(), ab, 5);
    let tape = Tape::new();
    let p = net.params.bind(&tape, true);
    let s = Shape::new(1, 3, 16, 16);
    let v = |seed| tape.constant(random::<f64>(s, seed));
    let y = net.forward(&tape, &p, v(1), v(2), v(3)).unwrap();
    let loss = tape.l1_loss(y, &random(s, 4)).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut missing = Vec::new();
    for (i, var) in p.iter().enumerate() {
        match g.get(*var) {
            Some(grad) => {
                assert!(grad.data().iter().all(|x| x.is_finite()));
                assert!(grad.data().iter().any(|&x| x != 0.0), "{} has an all-zero gradient", net.params.names()[i]);
            }
            None => missing.push(net.params.names()[i].clone()),
        }
    }
    missing
}

#[test]
fn every_parameter_receives_a_gradient() {
    for spec in ["full", "no-tail-block", "dense-alignment", "only-long"] {
        let missing = missing_gradients(&Ablation::parse(spec).unwrap());
        assert!(missing.is_empty(), "{spec}: {missing:?}");
    }
}

#[test]
fn without_skip_fusion_only_the_coarsest_level_feeds_the_decoder() {
    let missing = missing_gradients(&Ablation::parse("no-skip-fusion").unwrap());
    assert!(!missing.is_empty());
    for name in &missing {
        let level = name.trim_start_matches(|c: char| c.is_alphabetic()).chars().next();
        assert!(matches!(level, Some('0'..='3')), "{name}");
        assert!(["offset", "align", "fuse"].iter().any(|p| name.starts_with(p)), "{name}");
    }
}

fn aligned(x: &Tensor<f64>, w: &Tensor<f64>, off: Tensor<f64>, mask: Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = ConvVars {
        weight: tape.constant(w.clone()),
        bias: None,
        geom: ConvGeometry::same(3),
    };
    let dense = tape.conv2d(xv, p).unwrap();
    let deform = tape.deform_conv2d(xv, p, tape.constant(off), tape.constant(mask)).unwrap();
    ((*tape.value(deform)).clone(), (*tape.value(dense)).clone())
}

#[test]
fn zero_offsets_and_unit_mask_reduce_alignment_to_a_dense_conv() {
    let x = random::<f64>(Shape::new(1, 4, 9, 7), 1);
    let w = random::<f64>(Shape::new(3, 4, 3, 3), 2);
    let (deform, dense) = aligned(&x, &w, Tensor::zeros(Shape::new(1, 18, 9, 7)), Tensor::ones(Shape::new(1, 9, 9, 7)));
    assert!(deform.max_abs_diff(&dense) < 1e-6);
}

#[test]
fn integer_offsets_undo_a_translation() {
    let (h, w, dy, dx) = (12usize, 11usize, 2isize, -1isize);
    let base = random::<f64>(Shape::new(1, 2, h, w), 3);
    let wt = random::<f64>(Shape::new(2, 2, 3, 3), 4);
    // shifted(y, x) = base(y + dy, x + dx), zero outside.
    let shifted = Tensor::from_fn(base.shape(), |n, c, y, x| {
        let (sy, sx) = (y as isize + dy, x as isize + dx);
        if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
            base.at(n, c, sy as usize, sx as usize)
        } else {
            0.0
        }
    });
    let off = Tensor::from_fn(Shape::new(1, 18, h, w), |_, c, _, _| if c % 2 == 0 { -dy as f64 } else { -dx as f64 });
    let (deform, _) = aligned(&shifted, &wt, off, Tensor::ones(Shape::new(1, 9, h, w)));
    let (_, dense) = aligned(&base, &wt, Tensor::zeros(Shape::new(1, 18, h, w)), Tensor::ones(Shape::new(1, 9, h, w)));
    let margin = 1 + dy.unsigned_abs().max(dx.unsigned_abs());
    for c in 0..2 {
        for y in margin..h - margin {
            for x in margin..w - margin {
                assert!((deform.at(0, c, y, x) - dense.at(0, c, y, x)).abs() < 1e-9, "({y}, {x})");
            }
        }
    }
}

#[test]
fn deblur_loss_is_l1_against_the_pooled_target() {
    let tape = Tape::<f32>::new();
    let t = tape.constant(random(Shape::new(1, 3, 4, 4), 1));
    let z = random::<f32>(Shape::new(1, 3, 8, 8), 2);
    let got = tape.value(loss_deblur(&tape, t, &z, 2).unwrap()).data()[0];
    let reference = tape.value(tape.l1_loss(t, &avg_pool(&z, 2).unwrap()).unwrap()).data()[0];
    assert_eq!(got.to_bits(), reference.to_bits());
    // Plain double-precision oracle.
    let tv = tape.value(t);
    let mut acc = 0.0f64;
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                let pooled = (0..4).map(|k| z.at(0, c, 2 * y + k / 2, 2 * x + k % 2) as f64).sum::<f64>() / 4.0;
                acc += (tv.at(0, c, y, x) as f64 - pooled).abs();
            }
        }
    }
    assert!((got as f64 - acc / 48.0).abs() < 1e-6);
}

#[test]
fn replicate_padding_repeats_the_border() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let p = pad_replicate(&x, 3, 4).unwrap();
    assert_eq!(p.data(), &[1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0]);
    assert!(pad_replicate(&x, 1, 2).is_err());
}

#[test]
fn two_phase_inference_contract() {
    let cfg = small();
    let ab = Ablation::default();
    let deblur = DeblurNet::<f32>::new(&cfg, 1);
    let enhance = EnhanceNet::<f32>::new(&cfg, &ab, 2);
    let s = Shape::new(1, 3, 40, 36);
    let (l, sh) = (random::<f32>(s, 1), random::<f32>(s, 2));
    let out = two_phase_infer(&deblur, Some(&enhance), &l, &sh, &cfg, &ab).unwrap();
    assert_eq!(out.t.shape(), Shape::new(1, 3, 16, 16));
    assert_eq!(out.t_up.shape(), s);
    assert_eq!(out.y.shape(), s);
    assert!(out.y.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let plain = two_phase_infer(&deblur, None, &l, &sh, &cfg, &ab).unwrap();
    assert_eq!(plain.y, plain.t_up.clamp01());
    assert_eq!(plain.t, out.t);

    let tiny = Shape::new(1, 3, 12, 40);
    assert!(two_phase_infer(&deblur, None, &random(tiny, 1), &random(tiny, 2), &cfg, &ab).is_err());
}

#[test]
fn doubling_the_input_leaves_the_deblur_result_unchanged() {
    let cfg = small();
    let ab = Ablation::default();
    let deblur = DeblurNet::<f32>::new(&cfg, 3);
    let s = Shape::new(1, 3, 16, 16);
    let (l, sh) = (random::<f32>(s, 5), random::<f32>(s, 6));
    let double = |x: &Tensor<f32>| Tensor::from_fn(s.with_hw(32, 32), |n, c, y, xx| x.at(n, c, y / 2, xx / 2));
    let a = two_phase_infer(&deblur, None, &l, &sh, &cfg, &ab).unwrap();
    let b = two_phase_infer(&deblur, None, &double(&l), &double(&sh), &cfg, &ab).unwrap();
    assert!(a.t.max_abs_diff(&b.t) < 1e-6);
}

#[test]
fn ablations_zero_the_removed_input() {
    let s = Shape::new(1, 3, 4, 4);
    let (l, sh) = (random::<f32>(s, 1), random::<f32>(s, 2));
    let (a, b) = mask_inputs(&l, &sh, &Ablation::parse("only-long").unwrap());
    assert_eq!(a, l);
    assert!(b.data().iter().all(|&v| v == 0.0));
    let (a, b) = mask_inputs(&l, &sh, &Ablation::parse("only-short").unwrap());
    assert!(a.data().iter().all(|&v| v == 0.0));
    assert_eq!(b, sh);
}

#[test]
fn inference_is_reproducible() {
    let cfg = small();
    let ab = Ablation::default();
    let s = Shape::new(1, 3, 32, 32);
    let (l, sh) = (random::<f32>(s, 1), random::<f32>(s, 2));
    let run = || {
        let d = DeblurNet::<f32>::new(&cfg, 1);
        let e = EnhanceNet::<f32>::new(&cfg, &ab, 2);
        two_phase_infer(&d, Some(&e), &l, &sh, &cfg, &ab).unwrap().y
    };
    assert_eq!(run(), run());
}

#[test]
fn model_config_validation() {
    assert!(ModelConfig { alpha: 0.3, ..small() }.validate().is_err());
    assert!(ModelConfig { resolution: 24, ..small() }.validate().is_err());
    assert_eq!(ModelConfig { alpha: 0.25, ..small() }.pool_factor().unwrap(), 4);
}
