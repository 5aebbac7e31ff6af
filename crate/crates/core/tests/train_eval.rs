use d2hnet::augment::{apply_augmentations, AugmentConfig, TrainingSample};
use d2hnet::config::RunConfig;
use d2hnet::eval::{evaluate, train_both, EvalReport, Experiment, ValidationSet};
use d2hnet::isp::{IspConfig, NoiseParams};
use d2hnet::metrics::{mse, psnr, ssim};
use d2hnet::model::{Ablation, DeblurNet, EnhanceNet, ModelConfig};
use d2hnet::synth::{build_dataset, procedural_tuples, procedural_video, Crop, SamplingPolicy, SynthConfig};
use d2hnet::tensor::optim::AdamConfig;
use d2hnet::train::{
    ablate_augment, epoch_order, load_deblur, load_enhance, save_deblur, save_enhance, smoothed_endpoints,
    train_deblur, with_target, AugmentingLoader, FixedSamples, TrainSchedule,
};
use d2hnet::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ModelConfig {
    ModelConfig {
        deblur_base: 4,
        enhance_base: 4,
        res_layers: 1,
        deblur_blocks: 1,
        resolution: 16,
        alpha: 0.5,
    }
}

fn schedule(epochs: usize, lr0: f64, seed: u64) -> TrainSchedule {
    TrainSchedule {
        epochs,
        lr0,
        period: 1,
        batch: 2,
        seed,
        adam: AdamConfig::default(),
    }
}

fn samples(count: usize) -> Vec<TrainingSample> {
    let tuples = procedural_tuples(count, 24, &SynthConfig::default(), 3).unwrap();
    let cfg = AugmentConfig {
        crop: 16,
        ..AugmentConfig::default()
    };
    tuples
        .iter()
        .enumerate()
        .map(|(i, t)| apply_augmentations(t, &cfg, &IspConfig::default(), &NoiseParams::default(), 1, i as u64).unwrap())
        .collect()
}

fn validation(n: usize) -> ValidationSet {
    let ids = (0..n).map(|i| format!("v{i}")).collect();
    ValidationSet::from_samples(ids, &samples(n), 0x1234)
}

fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn learning_rate_halves_every_period() {
    let s = TrainSchedule {
        period: 2,
        ..schedule(0, 1e-3, 0)
    };
    let got: Vec<f64> = (0..6).map(|e| s.lr_at(e)).collect();
    assert_eq!(got, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let m = model();
    let mut net = DeblurNet::<f32>::new(&m, 1);
    let before = net.params.tensors().to_vec();
    let out = train_deblur(&mut net, &FixedSamples(samples(2)), &m, &schedule(2, 0.0, 0), &Ablation::default()).unwrap();
    assert_eq!(out.losses.len(), 2);
    assert_eq!(net.params.tensors(), &before[..]);
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let m = model();
    let data = FixedSamples(samples(3));
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = DeblurNet::<f32>::new(&m, 4);
            let out = train_deblur(&mut net, &data, &m, &schedule(2, 1e-3, 2), &Ablation::default()).unwrap();
            (net.params.tensors().to_vec(), out.losses)
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert!(a.1.iter().all(|l| l.is_finite()));
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(10, 3, 0);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(10, 3, 0));
    assert_ne!(a, epoch_order(10, 3, 1));
}

#[test]
fn smoothed_endpoints_average_the_ends() {
    let l = [4.0f32, 2.0, 9.0, 1.0, 3.0];
    assert_eq!(smoothed_endpoints(&l, 2), Some((3.0, 2.0)));
    assert_eq!(smoothed_endpoints(&l, 6), None);
}

#[test]
fn psnr_examples() {
    let x = random(Shape::new(1, 3, 8, 8), 1);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    let a = Tensor::full(Shape::new(1, 1, 4, 4), 0.5f32);
    let b = Tensor::full(Shape::new(1, 1, 4, 4), 0.6f32);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    let board = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| ((y + x) % 2) as f32);
    let inverse = board.map(|v| 1.0 - v);
    assert_eq!(mse(&board, &inverse).unwrap(), 1.0);
    assert_eq!(psnr(&board, &inverse, 1.0).unwrap(), 0.0);
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let x = random(Shape::new(2, 3, 16, 14), 2);
    assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let y = random(Shape::new(2, 3, 16, 14), 3);
    assert!(ssim(&x, &y, 1.0).unwrap() < 0.5);
    let tiny = random(Shape::new(1, 1, 8, 8), 4);
    assert!(ssim(&tiny, &tiny, 1.0).is_err());
}

fn report_for(ab: &Ablation, val: &ValidationSet) -> EvalReport {
    let m = model();
    let d = DeblurNet::<f32>::new(&m, 1);
    let e = EnhanceNet::<f32>::new(&m, ab, 2);
    evaluate(val, &d, Some(&e), &m, ab, 77).unwrap()
}

#[test]
fn deblur_only_reports_no_second_stage() {
    let val = validation(2);
    let r = report_for(&Ablation::parse("deblur-only").unwrap(), &val);
    assert!(!r.stage2);
    assert!(r.rows.iter().all(|row| row.psnr.is_none() && row.ssim.is_none()));
    let tsv = r.to_tsv();
    assert!(tsv.contains("# stage2\tabsent"));
    assert!(tsv.lines().last().unwrap().ends_with("\t-\t-"));
    assert_eq!(r.headline().0, r.mean_psnr_deblur());

    let full = report_for(&Ablation::default(), &val);
    assert!(full.stage2 && full.rows.iter().all(|row| row.psnr.is_some()));
}

#[test]
fn evaluation_is_pure() {
    let val = validation(3);
    let copy = val.clone();
    let a = report_for(&Ablation::default(), &val);
    let b = report_for(&Ablation::default(), &val);
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(val, copy);
    // Row order follows the validation set.
    let ids: Vec<&str> = a.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["v0", "v1", "v2"]);
    // The input PSNR column compares the noisy short image with the target.
    let oracle = psnr(&val.s_n[1], &val.z[1], 1.0).unwrap();
    assert_eq!(a.rows[1].psnr_input, oracle);
}

#[test]
fn mismatched_fingerprint_warns() {
    let mut r = report_for(&Ablation::default(), &validation(1));
    r.check_checkpoint("deblur", Some(77));
    assert!(r.warnings.is_empty());
    r.check_checkpoint("enhance", Some(78));
    r.check_checkpoint("deblur", None);
    assert_eq!(r.warnings.len(), 2);
    assert!(r.to_tsv().contains("# warning\tenhance checkpoint fingerprint 0000004e"));
}

#[test]
fn validation_cache_round_trips() {
    let val = validation(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.bin");
    val.save(&path).unwrap();
    assert_eq!(ValidationSet::load(&path).unwrap(), val);
}

#[test]
fn checkpoints_round_trip_with_metadata() {
    let m = model();
    let ab = Ablation::parse("no-tail-block+no-ca").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = DeblurNet::<f32>::new(&m, 3);
    let e = EnhanceNet::<f32>::new(&m, &ab, 4);
    save_deblur(dir.path().join("d.ckpt"), &d, None, 0xDEAD, &ab).unwrap();
    save_enhance(dir.path().join("e.ckpt"), &e, None, 0xBEEF, &ab).unwrap();
    let ld = load_deblur(dir.path().join("d.ckpt"), &m).unwrap();
    assert_eq!(ld.net.params.tensors(), d.params.tensors());
    assert_eq!(ld.fingerprint, Some(0xDEAD));
    assert_eq!(ld.ablation, ab);
    let le = load_enhance(dir.path().join("e.ckpt"), &m).unwrap();
    assert_eq!(le.net.params.tensors(), e.params.tensors());
    // Wrong architecture is refused.
    let wide = ModelConfig { deblur_base: 8, ..m };
    assert!(load_deblur(dir.path().join("d.ckpt"), &wide).is_err());
    assert!(load_deblur(dir.path().join("missing.ckpt"), &m).is_err());
}

#[test]
fn train_both_skips_the_second_stage_for_deblur_only() {
    let exp = Experiment {
        model: model(),
        deblur: schedule(1, 1e-3, 1),
        enhance: schedule(1, 1e-3, 2),
        fingerprint: 0,
    };
    let data = FixedSamples(samples(2));
    let t = train_both(&exp, &data, &Ablation::parse("deblur-only").unwrap()).unwrap();
    assert!(t.enhance.is_none() && t.enhance_losses.is_empty());
    assert_eq!(t.deblur_losses.len(), 1);
    let t = train_both(&exp, &data, &Ablation::default()).unwrap();
    assert!(t.enhance.is_some() && t.enhance_losses.len() == 1);
}

#[test]
fn data_ablations_change_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let videos = vec![("v".to_string(), procedural_video(24, 24, 12, 1).unwrap())];
    let synth = SynthConfig {
        interp_factor: 2,
        long_frames: 8,
        gap_frames: 2,
        short_frames: 2,
    };
    let mut m = build_dataset(&videos, &synth, SamplingPolicy { stride: 4, seed: 0 }, dir.path()).unwrap();
    let base = m.len();
    let mut extra = m.entries[0].clone();
    extra.id.push_str("_sel");
    extra.crop = Some(Crop { y: 2, x: 2, side: 16 });
    m.entries.push(extra);
    let aug = AugmentConfig {
        crop: 16,
        ..AugmentConfig::default()
    };
    let load = |spec: &str| {
        AugmentingLoader::from_manifest(&m, aug.clone(), IspConfig::default(), NoiseParams::default(), 0, &Ablation::parse(spec).unwrap())
            .unwrap()
    };
    assert_eq!(load("full").tuples.len(), base + 1);
    let dropped = load("no-varmap");
    assert_eq!(dropped.tuples.len(), base);
    assert_eq!(dropped.tuples[0].s_first, m.load_tuple(0).unwrap().s_first);
    assert_eq!(load("no-ia+no-cutnoise").augment.p_ia, 0.0);

    let t = m.load_tuple(0).unwrap();
    let swapped = with_target(t.clone(), &Ablation::parse("l-last-gt").unwrap());
    assert_eq!(swapped.s_first, t.l_last);
    let off = ablate_augment(aug, &Ablation::parse("no-ia+no-ca+no-cutnoise").unwrap());
    assert_eq!((off.p_ia, off.p_ca, off.p_cutnoise), (0.0, 0.0, 0.0));
}

#[test]
fn config_round_trip_and_fingerprint() {
    let cfg = RunConfig::default();
    let again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.fingerprint(), cfg.fingerprint());
    // Equal values in another spelling fingerprint the same.
    let a = RunConfig::parse("[train]\ndeblur_lr = 0.0001\n").unwrap();
    let b = RunConfig::parse("[train]\ndeblur_lr = 1e-4\n").unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let mut c = cfg.clone();
    c.set("train.batch", "4").unwrap();
    assert_ne!(c.fingerprint(), cfg.fingerprint());
    c.set_seed(9);
    assert!(c.to_text().contains("seed = 9"));
}

#[test]
fn malformed_configs_are_rejected() {
    for text in [
        "[train]\nbogus = 1\n",
        "[nowhere]\n",
        "batch = 2\n",
        "[train]\nbatch = 2\nbatch = 3\n",
        "[train]\nbatch = two\n",
        "[augment]\ncrop = 64\nselect_side = 32\n",
        "[model]\nalpha = 0.3\n",
    ] {
        assert!(RunConfig::parse(text).is_err(), "{text:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let x = random(Shape::new(1, 3, 12, 12), seed);
        let y = random(Shape::new(1, 3, 12, 12), seed + 1);
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        prop_assert!((ssim(&x, &y, 1.0).unwrap() - ssim(&y, &x, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&x, &y, 1.0).unwrap() <= 1.0);
    }
}
