mod common;

use std::collections::BTreeMap;

use common::*;
use rand::Rng;
use synthrefine::percept::{tap_size, PerceptualNet};
use synthrefine::segmenter::downsample_masks;
use synthrefine::styleloss::*;
use synthrefine::{ClassMask, FeatureStack, ImageTensor, LayerMask, LayerMaskSet, RefinerConfig, Tap};
use synthrefine_tape::Tensor;

fn stack(tap: Tap, f: &Block, h: usize, w: usize) -> FeatureStack<f64> {
    let data = f.iter().flatten().copied().collect();
    let mut s = FeatureStack::new();
    s.insert(tap, Tensor::from_vec(&[1, f.len(), h, w], data));
    s
}

fn layer_masks(tap: Tap, h: usize, w: usize, classes: &[Vec<f64>]) -> LayerMaskSet {
    [(tap, LayerMask { height: h, width: w, classes: [classes[0].clone(), classes[1].clone()] })].into()
}

#[test]
fn gram_matches_double_loop() {
    let mut r = rng(1);
    let f = random_block(&mut r, 3, 4);
    let g = gram(&f.concat(), 3, 4).unwrap();
    let o = oracle_gram(&f);
    for i in 0..3 {
        for j in 0..3 {
            assert!((g.get(i, j) - o[i][j]).abs() <= 1e-12);
        }
    }
    assert_eq!(g.max_asymmetry(), 0.0);
}

#[test]
fn gram_is_quadratically_homogeneous() {
    let mut r = rng(2);
    let f = random_block(&mut r, 4, 6);
    let g = gram(&f.concat(), 4, 6).unwrap();
    let scaled: Vec<f64> = f.concat().iter().map(|v| v * 4.0).collect();
    let g2 = gram(&scaled, 4, 6).unwrap();
    for (a, b) in g.data.iter().zip(&g2.data) {
        assert_eq!(16.0 * a, *b);
    }
}

#[test]
fn masked_features_examples() {
    let mut r = rng(3);
    let f = random_block(&mut r, 3, 6);
    let t = Tensor::from_vec(&[1, 3, 2, 3], f.concat());
    assert_eq!(masked_features(&t, &[1.0; 6]).unwrap(), t);
    assert!(masked_features(&t, &[0.0; 6]).unwrap().data().iter().all(|&v| v == 0.0));
    let mask: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    let got = masked_features(&t, &mask).unwrap();
    let want = oracle_mask(&f, &mask).concat();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(masked_features(&t, &[1.0; 5]).is_err());
}

#[test]
fn global_style_examples() {
    let tap = Tap::from_index(3);
    let mut r = rng(4);
    let f = random_block(&mut r, 5, 12);
    let s = stack(tap, &f, 3, 4);
    assert_eq!(global_style_loss(&s, &s, &[tap]).unwrap()[&tap], 0.0);
    // O = 2F against S = F: G[2F] = 4G[F], so the loss is 9 sum G^2 / (4 N^2 M^2).
    let doubled: Block = f.iter().map(|row| row.iter().map(|v| 2.0 * v).collect()).collect();
    let got = global_style_loss(&stack(tap, &doubled, 3, 4), &s, &[tap]).unwrap()[&tap];
    let g = oracle_gram(&f);
    let want = 9.0 * g.iter().flatten().map(|v| v * v).sum::<f64>() / (4.0 * 25.0 * 144.0);
    assert!(rel_err(got, want) <= 1e-12);
    let other = random_block(&mut r, 5, 12);
    let got = global_style_loss(&s, &stack(tap, &other, 3, 4), &[tap]).unwrap()[&tap];
    assert!(rel_err(got, oracle_global(&f, &other)) <= 1e-10);
    assert!(global_style_loss(&s, &s, &[Tap::from_index(0)]).is_err());
}

#[test]
fn local_style_examples() {
    let tap = Tap::from_index(5);
    let mut r = rng(5);
    let (h, w) = (4, 5);
    let fo = random_block(&mut r, 6, h * w);
    let fs = random_block(&mut r, 6, h * w);
    let masks: Vec<Vec<f64>> = (0..2).map(|_| (0..h * w).map(|_| r.random_range(0.0..0.5)).collect()).collect();
    let mset = layer_masks(tap, h, w, &masks);
    let o = stack(tap, &fo, h, w);
    assert_eq!(local_style_loss(&o, &o, &mset, &mset, &[tap]).unwrap()[&tap], 0.0);
    let s_masks: Vec<Vec<f64>> = (0..2).map(|_| (0..h * w).map(|_| r.random_range(0.0..0.5)).collect()).collect();
    let got = local_style_loss(&o, &stack(tap, &fs, h, w), &mset, &layer_masks(tap, h, w, &s_masks), &[tap]).unwrap()[&tap];
    assert!(rel_err(got, oracle_local(&fo, &fs, &masks, &s_masks)) <= 1e-10);
    // Swapping the two classes on both sides leaves the sum unchanged.
    let swapped = |m: &[Vec<f64>]| vec![m[1].clone(), m[0].clone()];
    let got_sw = local_style_loss(
        &o,
        &stack(tap, &fs, h, w),
        &layer_masks(tap, h, w, &swapped(&masks)),
        &layer_masks(tap, h, w, &swapped(&s_masks)),
        &[tap],
    )
    .unwrap()[&tap];
    assert!(rel_err(got, got_sw) <= 1e-12);
    // Wrong mask size.
    let bad = layer_masks(tap, h, w + 1, &[vec![0.0; h * (w + 1)], vec![0.0; h * (w + 1)]]);
    assert!(matches!(local_style_loss(&o, &o, &bad, &bad, &[tap]), Err(synthrefine::Error::MaskMismatch(_))));
}

#[test]
fn local_reduces_to_global_with_one_full_class() {
    let tap = Tap::from_index(1);
    let mut r = rng(6);
    let (h, w) = (3, 3);
    let fo = random_block(&mut r, 4, 9);
    let fs = random_block(&mut r, 4, 9);
    let ones = layer_masks(tap, h, w, &[vec![1.0; 9], vec![0.0; 9]]);
    let (o, s) = (stack(tap, &fo, h, w), stack(tap, &fs, h, w));
    let l = local_style_loss(&o, &s, &ones, &ones, &[tap]).unwrap()[&tap];
    let g = global_style_loss(&o, &s, &[tap]).unwrap()[&tap];
    assert!(rel_err(l, g) <= 1e-12);
}

#[test]
fn style_scales_with_fourth_power_against_zero_style() {
    let tap = Tap::from_index(2);
    let mut r = rng(7);
    let f = random_block(&mut r, 3, 8);
    let zero = stack(tap, &vec![vec![0.0; 8]; 3], 2, 4);
    let base = global_style_loss(&stack(tap, &f, 2, 4), &zero, &[tap]).unwrap()[&tap];
    let scaled: Block = f.iter().map(|row| row.iter().map(|v| 3.0 * v).collect()).collect();
    let big = global_style_loss(&stack(tap, &scaled, 2, 4), &zero, &[tap]).unwrap()[&tap];
    assert!(rel_err(big, 81.0 * base) <= 1e-12);
}

#[test]
fn content_examples() {
    let tap = Tap::from_index(9);
    let mut r = rng(8);
    let fo = random_block(&mut r, 5, 6);
    let fi = random_block(&mut r, 5, 6);
    let (o, i) = (stack(tap, &fo, 2, 3), stack(tap, &fi, 2, 3));
    let alpha: BTreeMap<Tap, f64> = [(tap, 1.0)].into();
    assert_eq!(content_loss(&o, &o, &alpha).unwrap(), 0.0);
    let zero: BTreeMap<Tap, f64> = [(tap, 0.0)].into();
    assert_eq!(content_loss(&o, &i, &zero).unwrap(), 0.0);
    assert!(rel_err(content_loss(&o, &i, &alpha).unwrap(), oracle_content(&fo, &fi)) <= 1e-10);
    let missing: BTreeMap<Tap, f64> = [(Tap::from_index(0), 1.0)].into();
    assert!(matches!(content_loss(&o, &i, &missing), Err(synthrefine::Error::MissingLayer(_))));
}

fn random_image(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> ImageTensor {
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_planes(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|_| (0..n).map(|_| r.random_range(0.0..1.0)).collect())
}

#[test]
fn matting_entries_match_window_oracle() {
    let mut r = rng(9);
    let img = random_planes(&mut r, 25);
    let lap = matting_laplacian_planes([&img[0], &img[1], &img[2]], 5, 5, 1e-5).unwrap();
    let dense = oracle_matting(&img, 5, 5, 1e-5);
    for i in 0..25 {
        for j in 0..25 {
            assert!((lap.get(i, j) - dense[i][j]).abs() <= 1e-10, "({i},{j})");
        }
    }
}

#[test]
fn matting_regulariser_matches_dense_form_and_is_nonnegative() {
    let mut r = rng(10);
    let input = random_image(&mut r, 8, 8, 0.0, 1.0);
    let lap = matting_laplacian(&input, 1e-5).unwrap();
    let planes: [Vec<f64>; 3] = [0, 1, 2].map(|c| input.plane(c).iter().map(|&v| v as f64).collect());
    let dense = oracle_matting(&planes, 8, 8, 1e-5);
    let want: f64 = planes.iter().map(|p| quad(&dense, p)).sum();
    assert!(rel_err(photorealism_reg(&input, &lap).unwrap(), want) <= 1e-9);
    let constant = ImageTensor::filled(8, 8, [0.2, 0.9, 0.4]).unwrap();
    assert!(photorealism_reg(&constant, &lap).unwrap().abs() <= 1e-10);
    for _ in 0..10 {
        let o = random_image(&mut r, 8, 8, 0.0, 1.0);
        assert!(photorealism_reg(&o, &lap).unwrap() >= -1e-12);
    }
    let wrong = ImageTensor::filled(9, 8, [0.0; 3]).unwrap();
    assert!(photorealism_reg(&wrong, &lap).is_err());
}

/// Small end-to-end problem on 8x8 images.
fn problem(seed: u64) -> (PerceptualNet<f64>, Tensor<f64>, PairContext<f64>, RefinerConfig) {
    let mut r = rng(seed);
    let cfg = RefinerConfig::default();
    let net = PerceptualNet::<f64>::random(4, seed);
    let img = |r: &mut rand_chacha::ChaCha8Rng| random_image(r, 8, 8, 0.05, 0.95);
    let mask = |r: &mut rand_chacha::ChaCha8Rng| ClassMask::new(8, 8, (0..64).map(|_| r.random_range(0..3u8)).collect()).unwrap();
    let (input, style) = (img(&mut r), img(&mut r));
    let sizes: BTreeMap<Tap, (usize, usize)> = cfg.loss_taps().into_iter().map(|t| (t, tap_size(t, 8, 8))).collect();
    let in_masks = downsample_masks(&mask(&mut r), &sizes).unwrap();
    let st_masks = downsample_masks(&mask(&mut r), &sizes).unwrap();
    let style_feats = net.extract_tensor(&style.to_tensor(), &cfg.loss_taps());
    let pair = PairContext::new(&net, &input.to_tensor(), in_masks, &style_feats, &st_masks, &cfg).unwrap();
    let o = img(&mut r).to_tensor();
    (net, o, pair, cfg)
}

#[test]
fn recorded_objective_matches_plain_terms() {
    let (net, o, pair, cfg) = problem(11);
    let (terms, _) = total_loss_with_gradient(&net, &o, &pair, &cfg).unwrap();
    let of = net.extract_tensor(&o, &cfg.loss_taps());
    let lap = &pair.matting;
    let oimg = ImageTensor::from_tensor(&o, 0).unwrap();
    assert!(rel_err(terms.l_m, photorealism_reg(&oimg, lap).unwrap()) <= 1e-9);
    assert!(rel_err(terms.content, content_loss(&of, &pair.content, &cfg.content_weights).unwrap()) <= 1e-9);
    let want = total_loss(terms.style_weighted, terms.content, terms.l_m, &cfg);
    assert!(rel_err(terms.total, want) <= 1e-9);
    assert!(terms.csv_fields().iter().all(|v| *v >= 0.0));
}

#[test]
fn gradient_matches_central_differences() {
    let (net, o, pair, cfg) = problem(12);
    let (_, grad) = total_loss_with_gradient(&net, &o, &pair, &cfg).unwrap();
    let mut r = rng(13);
    let h = 1e-5;
    for _ in 0..10 {
        let k = r.random_range(0..o.len());
        let eval = |delta: f64| {
            let mut p = o.clone();
            p.data_mut()[k] += delta;
            total_loss_with_gradient(&net, &p, &pair, &cfg).unwrap().0.total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let err = rel_err(grad.data()[k], fd);
        assert!(err <= 1e-4, "element {k}: analytic {} vs fd {fd} (rel {err})", grad.data()[k]);
    }
}

#[test]
fn matting_laplacian_is_symmetric_psd_with_zero_row_sums() {
    let mut r = rng(14);
    let img = random_planes(&mut r, 36);
    let lap = matting_laplacian_planes([&img[0], &img[1], &img[2]], 6, 6, 1e-5).unwrap();
    let n = 36;
    let dense = nalgebra::DMatrix::from_row_slice(n, n, &lap.to_dense());
    for i in 0..n {
        let row: f64 = (0..n).map(|j| dense[(i, j)]).sum();
        assert!(row.abs() <= 1e-9, "row {i} sums to {row}");
        for j in 0..n {
            assert_eq!(dense[(i, j)], dense[(j, i)]);
        }
    }
    let eig = nalgebra::SymmetricEigen::new(dense);
    let scale = eig.eigenvalues.amax();
    assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * scale));
}

#[test]
fn matting_laplacian_annihilates_affine_functions_of_the_input() {
    let mut r = rng(15);
    let img = random_planes(&mut r, 64);
    let lap = matting_laplacian_planes([&img[0], &img[1], &img[2]], 8, 8, 1e-10).unwrap();
    let (a, b) = ([0.3, -0.7, 0.5], 0.2);
    let v: Vec<f64> = (0..64).map(|k| a[0] * img[0][k] + a[1] * img[1][k] + a[2] * img[2][k] + b).collect();
    let norm: f64 = v.iter().map(|x| x * x).sum();
    assert!(lap.quadratic_form(&v) <= 1e-8 * norm.max(1.0));
}

#[test]
fn matting_rejects_tiny_images_and_bad_eps() {
    let p = vec![0.5; 4];
    assert!(matting_laplacian_planes([&p, &p, &p], 2, 2, 1e-5).is_err());
    let p = vec![0.5; 9];
    assert!(matting_laplacian_planes([&p, &p, &p], 3, 3, 0.0).is_err());
    assert!(matting_laplacian_planes([&p, &p, &p], 3, 3, 1e-5).is_ok());
}
