use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthrefine::eyegen::{generate_samples, write_dataset, DatasetSpec, DomainShiftConfig, MIN_RENDER_SIZE};
use synthrefine::imageops::{resize, resize_mask, upsample2};
use synthrefine::io::{load_image, read_manifest};
use synthrefine::refiner::{
    gan_objective, train, training_log_header, Refiner, RefinerSample, TrainOptions, TrainingData,
};
use synthrefine::{ClassMask, GazeSample, ImageTensor, RefinerConfig, StageSchedule};
use synthrefine_tape::{ParamStore, Tensor};

fn small_cfg(resolution: usize) -> RefinerConfig {
    let mut c = RefinerConfig::default();
    c.train_resolution = resolution;
    c.percept_width = 4;
    c.g1_width = 4;
    c.g1_blocks = 1;
    c.g2_width = 4;
    c.g2_blocks = 1;
    c.disc_width = 4;
    c.batch_size = 2;
    c
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn perturb(store: &mut ParamStore<f32>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let noise = Tensor::<f32>::randn(&shape, scale, &mut r);
        let mut v = store.get(id).clone();
        v.add_assign(&noise);
        store.set(id, v);
    }
}

/// Toys rendered at the smallest render size and resampled to `size`.
fn toys(n: usize, size: usize, shift: Option<DomainShiftConfig>, seed: u64) -> Vec<GazeSample> {
    let mut v = generate_samples(&DatasetSpec::new(n, 0.5, shift, MIN_RENDER_SIZE, seed)).unwrap();
    for s in &mut v {
        s.image = resize(&s.image, size, size).unwrap();
        s.mask = Some(resize_mask(s.mask.as_ref().unwrap(), size, size).unwrap());
    }
    v
}

fn data(n: usize, size: usize) -> TrainingData {
    let syn = toys(n, size, None, 1);
    let real = toys(n, size, Some(DomainShiftConfig::pseudo_real(0)), 2);
    let conv = |s: &GazeSample| RefinerSample::new(s.image.clone(), s.mask.clone().unwrap());
    TrainingData { synthetic: syn.iter().map(conv).collect(), real: real.iter().map(conv).collect() }
}

fn refiner(cfg: &RefinerConfig) -> Refiner {
    Refiner::new(cfg, Refiner::percept_for(cfg).unwrap()).unwrap()
}

#[test]
fn identity_initialised_refiner_reproduces_input() {
    let cfg = small_cfg(8);
    let r = refiner(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for size in [16, 23] {
        let x = random_image(&mut rng, size, size);
        let m = ClassMask::background(size, size);
        let out = r.generate(&x, &m).unwrap();
        assert!(out.max_abs_diff(&resize(&x, 16, 16).unwrap()) <= 1e-6);
        let (g, back) = r.generate_global(&x).unwrap();
        assert!(g.max_abs_diff(&resize(&x, 8, 8).unwrap()) <= 1e-6);
        assert_eq!(back.shape(), &[1, cfg.g1_width, 8, 8]);
    }
}

#[test]
fn zero_enhancer_returns_upsampled_global_output() {
    let cfg = small_cfg(8);
    let mut r = refiner(&cfg);
    perturb(&mut r.g1.store, 9, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // A 2x2-block image: resampling to R and back is exact, so the two-scale
    // path must match nearest upsampling of G1's own output.
    let x = upsample2(&random_image(&mut rng, 8, 8));
    let m = ClassMask::background(16, 16);
    let full = r.generate(&x, &m).unwrap();
    let (g, _) = r.generate_global(&x).unwrap();
    assert!(g.max_abs_diff(&resize(&x, 8, 8).unwrap()) > 1e-3, "perturbed G1 should change the image");
    assert!(full.max_abs_diff(&upsample2(&g)) <= 1e-6);
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let cfg = small_cfg(8);
    let mut r = refiner(&cfg);
    perturb(&mut r.g1.store, 1, 1.0);
    perturb(&mut r.g2.store, 2, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, 16, 16);
    let m = ClassMask::new(16, 16, (0..256).map(|i| (i % 3) as u8).collect()).unwrap();
    let a = r.generate(&x, &m).unwrap();
    let b = r.generate(&x, &m).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(a.max_abs_diff(&x) > 1e-3);
    assert!(r.generate(&x, &ClassMask::background(8, 8)).is_err());
}

#[test]
fn zero_weight_discriminator_scores_its_bias() {
    let cfg = small_cfg(8);
    let mut r = refiner(&cfg);
    r.d.zero_score_weights();
    let bias = r.d.store.ids().find(|&id| r.d.store.name(id) == "d.score.bias").unwrap();
    r.d.store.set(bias, Tensor::from_vec(&[1], vec![0.37]));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (h, w) in [(16, 16), (32, 24), (20, 20)] {
        let s = r.discriminate(&random_image(&mut rng, h, w), &ClassMask::background(h, w)).unwrap();
        let (th, tw) = synthrefine::percept::tap_size(r.d.tap(), h, w);
        assert_eq!(s.shape(), &[1, 1, th, tw]);
        assert!(s.data().iter().all(|&v| v == r.d.score_bias() && v == 0.37));
    }
}

#[test]
fn gan_objective_matches_mean_square_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let nr = rng.random_range(1..20);
        let nf = rng.random_range(1..20);
        let real: Vec<f64> = (0..nr).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..nf).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (d, g) = gan_objective(&real, &fake).unwrap();
        let mut sr = 0.0;
        for v in &real {
            sr += (v - 1.0) * (v - 1.0);
        }
        let (mut sf, mut sg) = (0.0, 0.0);
        for v in &fake {
            sf += v * v;
            sg += (v - 1.0) * (v - 1.0);
        }
        let d_ref = 0.5 * sr / nr as f64 + 0.5 * sf / nf as f64;
        let g_ref = 0.5 * sg / nf as f64;
        assert!((d - d_ref).abs() <= 1e-12 * d_ref.max(1.0));
        assert!((g - g_ref).abs() <= 1e-12 * g_ref.max(1.0));
    }
}

#[test]
fn empty_schedule_leaves_nets_unchanged() {
    let mut cfg = small_cfg(8);
    cfg.stages = StageSchedule::new(0, 0, 0);
    let mut r = refiner(&cfg);
    let before = refiner(&cfg);
    let h = train(&mut r, &data(4, 16), &cfg, &TrainOptions::default()).unwrap();
    assert!(h.iterations.is_empty() && h.checkpoints.is_empty());
    assert!(r.same_weights(&before));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut cfg = small_cfg(8);
    cfg.stages = StageSchedule::new(1, 0, 0);
    let mut r = refiner(&cfg);
    let mut d = data(2, 16);
    d.real.clear();
    assert!(matches!(train(&mut r, &d, &cfg, &TrainOptions::default()), Err(synthrefine::Error::EmptyDataset)));
}

#[test]
fn adversarial_only_smoke_run_is_finite() {
    let mut cfg = small_cfg(8);
    cfg.lambda = 0.0;
    cfg.stages = StageSchedule::new(20, 15, 15);
    let mut r = refiner(&cfg);
    let h = train(&mut r, &data(8, 16), &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(h.iterations.len(), 50);
    for it in &h.iterations {
        assert!(it.loss_d.is_finite() && it.loss_g_adv.is_finite() && it.g_objective.is_finite());
        assert!(it.terms.total.is_finite());
    }
    let stages: Vec<usize> = h.iterations.iter().map(|l| l.stage).collect();
    assert!(stages.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn null_weights_make_no_updates() {
    let mut cfg = small_cfg(8);
    cfg.lambda = 0.0;
    cfg.adv_weight = 0.0;
    cfg.stages = StageSchedule::new(2, 2, 2);
    let mut r = refiner(&cfg);
    let before = refiner(&cfg);
    let h = train(&mut r, &data(4, 16), &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(h.iterations.len(), 6);
    assert!(r.same_weights(&before));
}

#[test]
fn stage_two_freezes_the_global_generator() {
    let mut cfg = small_cfg(8);
    cfg.stages = StageSchedule::new(0, 3, 0);
    let mut r = refiner(&cfg);
    let g1_before = r.g1.store.clone();
    let g2_before = r.g2.store.clone();
    train(&mut r, &data(4, 16), &cfg, &TrainOptions::default()).unwrap();
    assert!(r.g1.store.same_values(&g1_before));
    assert!(!r.g2.store.same_values(&g2_before));
}

#[test]
fn checkpoints_and_log_follow_the_naming_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(8);
    cfg.stages = StageSchedule::new(3, 2, 1);
    cfg.checkpoint_every = 2;
    let mut r = refiner(&cfg);
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), verbose: false };
    let h = train(&mut r, &data(4, 16), &cfg, &opts).unwrap();
    let names: Vec<String> = h.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["stage1_iter2.ckpt", "stage1_iter3.ckpt", "stage2_iter5.ckpt", "stage3_iter6.ckpt"]);
    for p in &h.checkpoints {
        assert!(p.exists());
    }
    let mut restored = refiner(&cfg);
    restored.load_weights(&h.checkpoints[3]).unwrap();
    assert!(restored.same_weights(&r));

    let log = dir.path().join("losses.csv");
    h.write_csv(&log).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iter,l_gs,l_ls,l_style_weighted,content,l_m,L_total,loss_D,loss_G_adv");
    assert_eq!(training_log_header().len(), 9);
    assert_eq!(lines.count(), 6);
}

#[test]
fn refine_batch_copies_labels_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let samples = toys(5, 16, None, 11);
    let manifest = write_dataset(&samples, &dir.path().join("in")).unwrap();
    let cfg = small_cfg(8);
    let mut r = refiner(&cfg);
    perturb(&mut r.g1.store, 3, 0.2);
    perturb(&mut r.g2.store, 4, 0.2);
    let out_a = r.refine_batch(&manifest, &dir.path().join("a"), None).unwrap();
    let out_b = r.refine_batch(&manifest, &dir.path().join("b"), None).unwrap();
    let rows_in = read_manifest(&manifest).unwrap();
    let rows_a = read_manifest(&out_a).unwrap();
    assert_eq!(rows_a, read_manifest(&out_b).unwrap());
    assert_eq!(rows_a.len(), rows_in.len());
    for (a, i) in rows_a.iter().zip(&rows_in) {
        assert_eq!(a.yaw_deg.to_bits(), i.yaw_deg.to_bits());
        assert_eq!(a.pitch_deg.to_bits(), i.pitch_deg.to_bits());
        assert_eq!(a.domain, "refined");
    }
    for row in &rows_a {
        let a = load_image(&dir.path().join("a").join(&row.image_path)).unwrap();
        let b = load_image(&dir.path().join("b").join(&row.image_path)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (16, 16));
    }
}
