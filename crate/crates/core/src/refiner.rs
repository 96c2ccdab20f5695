//! Two-scale refiner, feature-space discriminator and the three-stage
//! training loop.
//!
//! Resolutions: the global generator G1 works at `R = train_resolution`; the
//! local enhancer G2 and every output work at `2R`. Images entering
//! [`Refiner::generate`] are resampled to `2R` (area averaging) and to `R`
//! for G1.
//!
//! * G1: 3x3 convolution, stride-2 convolution, residual units at `R/2`, a
//!   transposed convolution back to `R` (the back-end feature map exposed for
//!   fusion), then a zero-initialised 3x3 head producing a correction `d1`.
//!   Output at `R`: `clamp(x_R + d1, 0, 1)`.
//! * G2: two 3x3 convolutions over the `2R` image concatenated with its iris
//!   and pupil indicator planes. The result is summed with G1's back-end map
//!   (upsampled 2x), passed through residual units and a 3x3 convolution, and
//!   a zero-initialised head produces a second correction `d2`. Output at
//!   `2R`: `clamp(x_2R + up(d1) + d2, 0, 1)`, so G1's correction is carried
//!   to the full-resolution input rather than to a blocky upsampled image.
//!   With both heads at zero the refiner returns the input resampled to `2R`.
//! * D: the fixed perceptual net's features at `disc_layer`, concatenated with
//!   the image's iris/pupil masks and its RGB values pooled to the same size,
//!   scored by three trainable convolutions into a per-patch map.
//!
//! The adversarial objective is least squares:
//! `loss_D = 0.5 mean (D(real) - 1)^2 + 0.5 mean D(refined)^2` and
//! `loss_G_adv = 0.5 mean (D(refined) - 1)^2`.
//!
//! Every loss and the discriminator work at `2R` in all stages; in stage 1
//! the refined image is [`apply_global`]. Training runs stage 1 (G1 alone),
//! stage 2 (G2, G1 frozen) and
//! stage 3 (both, learning rate divided by `stage3_lr_decay`). Each iteration
//! updates D once on real against refined images, then the trainable
//! generator on `adv_weight * loss_G_adv + lambda * L_total`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng as _;
use synthrefine_tape::{read_records, Adam, Bound, Conv, ParamStore, Tape, Tensor, UpConv, Var};

use crate::config::RefinerConfig;
use crate::error::{Error, Result};
use crate::imageops::{resize, resize_mask};
use crate::io::{self, ManifestRow};
use crate::percept::{tap_channels, tap_size, PerceptualNet};
use crate::rng::{self, stream};
use crate::segmenter::{downsample_masks, ResidualUnit, Segmenter};
use crate::styleloss::{matting_laplacian_tensor, MattingLaplacian, read_terms, record_objective, PairContext, StyleLossTerms, StyleTarget, LOSS_CSV_HEADER};
use crate::types::{Class, ClassMask, Domain, FeatureStack, ImageTensor, LayerMaskSet, Tap};

const LEAKY_SLOPE: f64 = 0.2;
const ADAM_BETA1: f64 = 0.5;
const ADAM_BETA2: f64 = 0.999;

/// Global generator G1.
pub struct GlobalGenerator {
    pub store: ParamStore<f32>,
    front: [Conv; 2],
    blocks: Vec<ResidualUnit>,
    back: UpConv,
    head: Conv,
}

impl GlobalGenerator {
    pub fn new(width: usize, blocks: usize, seed: u64) -> Self {
        let mut r = rng::item_rng(seed, stream::REFINER_INIT, 1);
        let mut s = ParamStore::new();
        let front = [Conv::new(&mut s, "g1.front1", 3, width, 3, 1, &mut r), Conv::new(&mut s, "g1.front2", width, 2 * width, 3, 2, &mut r)];
        let blocks = (0..blocks).map(|i| ResidualUnit::new(&mut s, &format!("g1.res{i}"), 2 * width, &mut r)).collect();
        let back = UpConv::new(&mut s, "g1.back", 2 * width, width, &mut r);
        let head = Conv::zeroed(&mut s, "g1.head", width, 3, 3);
        Self { store: s, front, blocks, back, head }
    }

    /// Refined image, correction and back-end feature map for
    /// `x: [B, 3, R, R]`.
    pub fn forward(&self, tape: &Tape<f32>, p: &Bound, x: Var) -> (Var, Var, Var) {
        let mut f = tape.relu(self.front[0].forward(tape, p, x));
        f = tape.relu(self.front[1].forward(tape, p, f));
        for b in &self.blocks {
            f = b.forward(tape, p, f);
        }
        let back = tape.relu(self.back.forward(tape, p, f));
        let delta = self.head.forward(tape, p, back);
        let out = tape.clamp(tape.add(x, delta), 0.0, 1.0);
        (out, delta, back)
    }
}

/// G1's correction applied at the output resolution:
/// `clamp(x_2R + up(d1), 0, 1)`. This is the refined image while G2 is
/// untrained.
pub fn apply_global(tape: &Tape<f32>, x2: Var, g1_delta: Var) -> Var {
    tape.clamp(tape.add(x2, tape.upsample2(g1_delta)), 0.0, 1.0)
}

/// Local enhancer G2.
pub struct LocalEnhancer {
    pub store: ParamStore<f32>,
    front: [Conv; 2],
    blocks: Vec<ResidualUnit>,
    back: Conv,
    head: Conv,
}

impl LocalEnhancer {
    /// `fusion_width` must equal G1's width so the fused maps match.
    pub fn new(width: usize, fusion_width: usize, blocks: usize, seed: u64) -> Self {
        let mut r = rng::item_rng(seed, stream::REFINER_INIT, 2);
        let mut s = ParamStore::new();
        let front = [Conv::new(&mut s, "g2.front1", 5, width, 3, 1, &mut r), Conv::new(&mut s, "g2.front2", width, fusion_width, 3, 1, &mut r)];
        let blocks = (0..blocks).map(|i| ResidualUnit::new(&mut s, &format!("g2.res{i}"), fusion_width, &mut r)).collect();
        let back = Conv::new(&mut s, "g2.back", fusion_width, width, 3, 1, &mut r);
        let head = Conv::zeroed(&mut s, "g2.head", width, 3, 3);
        Self { store: s, front, blocks, back, head }
    }

    /// `x` and `masks` at `2R`; G1's correction and back-end map at `R`.
    pub fn forward(&self, tape: &Tape<f32>, p: &Bound, x: Var, masks: Var, g1_delta: Var, g1_back: Var) -> Var {
        let mut f = tape.relu(self.front[0].forward(tape, p, tape.concat(&[x, masks])));
        f = tape.relu(self.front[1].forward(tape, p, f));
        f = tape.add(f, tape.upsample2(g1_back));
        for b in &self.blocks {
            f = b.forward(tape, p, f);
        }
        let back = tape.relu(self.back.forward(tape, p, f));
        let delta = tape.add(tape.upsample2(g1_delta), self.head.forward(tape, p, back));
        tape.clamp(tape.add(x, delta), 0.0, 1.0)
    }
}

/// Feature-space discriminator head over a fixed perceptual tap.
pub struct Discriminator {
    pub store: ParamStore<f32>,
    tap: Tap,
    convs: [Conv; 3],
}

impl Discriminator {
    pub fn new(tap: Tap, percept_width: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::item_rng(seed, stream::REFINER_INIT, 3);
        let mut s = ParamStore::new();
        let cin = tap_channels(tap, percept_width) + 5;
        let convs = [
            Conv::new(&mut s, "d.conv1", cin, width, 3, 1, &mut r),
            Conv::new(&mut s, "d.conv2", width, width, 3, 1, &mut r),
            Conv::new(&mut s, "d.score", width, 1, 1, 1, &mut r),
        ];
        Self { store: s, tap, convs }
    }

    pub fn tap(&self) -> Tap {
        self.tap
    }

    /// Score map `[B, 1, h, w]` (the tap's spatial size) for images
    /// `[B, 3, H, W]` and masks already pooled to the tap size, `[B, 2, h, w]`.
    pub fn forward(&self, tape: &Tape<f32>, p: &Bound, percept: &PerceptualNet<f32>, x: Var, masks: Var) -> Var {
        let feats = percept.forward(tape, x, &[self.tap])[&self.tap];
        let mut rgb = x;
        for _ in 0..self.tap.module() {
            rgb = tape.avg_pool2(rgb);
        }
        let mut h = tape.concat(&[feats, masks, rgb]);
        h = tape.leaky_relu(self.convs[0].forward(tape, p, h), LEAKY_SLOPE);
        h = tape.leaky_relu(self.convs[1].forward(tape, p, h), LEAKY_SLOPE);
        self.convs[2].forward(tape, p, h)
    }

    /// Zero the scoring weights so every patch scores the bias.
    pub fn zero_score_weights(&mut self) {
        let w = self.convs[2].weight;
        let shape = self.store.get(w).shape().to_vec();
        self.store.set(w, Tensor::zeros(&shape));
    }

    pub fn score_bias(&self) -> f32 {
        self.store.get(self.convs[2].bias).data()[0]
    }
}

/// Least-squares adversarial losses `(loss_D, loss_G_adv)` from raw scores.
pub fn gan_objective(scores_real: &[f64], scores_refined: &[f64]) -> Result<(f64, f64)> {
    if scores_real.is_empty() || scores_refined.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&s| f(s)).sum::<f64>() / v.len() as f64;
    let loss_d = 0.5 * mean(scores_real, &|s| (s - 1.0).powi(2)) + 0.5 * mean(scores_refined, &|s| s * s);
    let loss_g = 0.5 * mean(scores_refined, &|s| (s - 1.0).powi(2));
    Ok((loss_d, loss_g))
}

fn lsgan_target(tape: &Tape<f32>, scores: Var, target: f64) -> Var {
    tape.scale(tape.mean(tape.square(tape.add_scalar(scores, -target))), 0.5)
}

/// `[1, 2, H, W]` iris and pupil indicator planes.
pub fn mask_planes(mask: &ClassMask) -> Tensor<f32> {
    let ind = |c: Class| mask.labels().iter().map(move |&l| if l == c as u8 { 1.0f32 } else { 0.0 });
    let data = ind(Class::Iris).chain(ind(Class::Pupil)).collect();
    Tensor::from_vec(&[1, 2, mask.height(), mask.width()], data)
}

/// G1, G2 and D together with the fixed perceptual net.
pub struct Refiner {
    pub g1: GlobalGenerator,
    pub g2: LocalEnhancer,
    pub d: Discriminator,
    pub percept: Rc<PerceptualNet<f32>>,
    resolution: usize,
}

impl Refiner {
    /// Fresh, identity-initialised refiner.
    pub fn new(cfg: &RefinerConfig, percept: Rc<PerceptualNet<f32>>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            g1: GlobalGenerator::new(cfg.g1_width, cfg.g1_blocks, cfg.seed),
            g2: LocalEnhancer::new(cfg.g2_width, cfg.g1_width, cfg.g2_blocks, cfg.seed),
            d: Discriminator::new(cfg.disc_layer, percept.width(), cfg.disc_width, cfg.seed),
            percept,
            resolution: cfg.train_resolution,
        })
    }

    /// The perceptual net a configuration asks for: the weight file when set,
    /// the seeded random extractor otherwise.
    pub fn percept_for(cfg: &RefinerConfig) -> Result<Rc<PerceptualNet<f32>>> {
        let net = if cfg.percept_weights.is_empty() {
            PerceptualNet::random(cfg.percept_width, cfg.seed)
        } else {
            PerceptualNet::load(Path::new(&cfg.percept_weights))?
        };
        Ok(Rc::new(net))
    }

    /// Global working resolution `R`.
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Output resolution `2R`.
    pub fn output_resolution(&self) -> usize {
        2 * self.resolution
    }

    fn stores(&self) -> [&ParamStore<f32>; 3] {
        [&self.g1.store, &self.g2.store, &self.d.store]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in self.stores() {
            s.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Restore weights written by [`Refiner::save`] into a refiner built
    /// from the same configuration.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
        self.g1.store.assign(&records)?;
        self.g2.store.assign(&records)?;
        self.d.store.assign(&records)?;
        Ok(())
    }

    /// Bitwise equality of every trainable parameter.
    pub fn same_weights(&self, other: &Self) -> bool {
        self.stores().iter().zip(other.stores()).all(|(a, b)| a.same_values(b))
    }

    /// G1 alone: the refined image at `R` and G1's back-end feature map.
    pub fn generate_global(&self, image: &ImageTensor) -> Result<(ImageTensor, Tensor<f32>)> {
        let x = resize(image, self.resolution, self.resolution)?;
        let tape = Tape::new();
        let p = self.g1.store.bind_frozen(&tape);
        let (out, _, back) = self.g1.forward(&tape, &p, tape.constant(x.to_tensor()));
        Ok((ImageTensor::from_tensor(&tape.value(out), 0)?, (*tape.value(back)).clone()))
    }

    /// Full refinement at `2R`. The mask must have the image's size.
    pub fn generate(&self, image: &ImageTensor, mask: &ClassMask) -> Result<ImageTensor> {
        if !mask.matches_image(image) {
            return Err(Error::MaskMismatch(format!(
                "mask {}x{} for image {}x{}",
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            )));
        }
        let s = self.output_resolution();
        let x2 = resize(image, s, s)?;
        let m2 = resize_mask(mask, s, s)?;
        let x1 = resize(&x2, self.resolution, self.resolution)?;
        let tape = Tape::new();
        let p1 = self.g1.store.bind_frozen(&tape);
        let p2 = self.g2.store.bind_frozen(&tape);
        let (_, delta, back) = self.g1.forward(&tape, &p1, tape.constant(x1.to_tensor()));
        let out = self.g2.forward(&tape, &p2, tape.constant(x2.to_tensor()), tape.constant(mask_planes(&m2)), delta, back);
        ImageTensor::from_tensor(&tape.value(out), 0)
    }

    /// Per-patch realism scores of one image. The mask must match the image.
    pub fn discriminate(&self, image: &ImageTensor, mask: &ClassMask) -> Result<Tensor<f32>> {
        if !mask.matches_image(image) {
            return Err(Error::MaskMismatch("mask does not match image".into()));
        }
        let (h, w) = (image.height(), image.width());
        let tap = self.d.tap;
        let sizes: BTreeMap<Tap, (usize, usize)> = [(tap, tap_size(tap, h, w))].into();
        let pooled = downsample_masks(mask, &sizes)?;
        let tape = Tape::new();
        let p = self.d.store.bind_frozen(&tape);
        let m = tape.constant(disc_mask_tensor(&pooled, tap));
        let s = self.d.forward(&tape, &p, &self.percept, tape.constant(image.to_tensor()), m);
        Ok((*tape.value(s)).clone())
    }

    /// Refine every image of a manifest into `out_dir`. Masks come from the
    /// manifest when present, otherwise from the segmenter (repaired). Gaze
    /// fields are copied verbatim; the domain becomes `refined`.
    pub fn refine_batch(&self, manifest: &Path, out_dir: &Path, segmenter: Option<&Segmenter>) -> Result<PathBuf> {
        let base = io::manifest_dir(manifest);
        let rows = io::read_manifest(manifest)?;
        std::fs::create_dir_all(out_dir.join("images"))?;
        let mut out_rows = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let image_file = row.image_file(&base);
            if !image_file.exists() {
                return Err(Error::MissingImage(image_file));
            }
            let image = io::load_image(&image_file)?;
            let mask = match (row.mask_file(&base), segmenter) {
                (Some(p), _) => io::load_mask(&p)?,
                (None, Some(seg)) => seg.mask(&image)?,
                (None, None) => return Err(Error::MaskMismatch(format!("row {} has no mask and no segmenter was given", i + 1))),
            };
            let refined = self.generate(&image, &mask)?;
            let image_path = format!("images/{i:05}.png");
            io::save_image(&refined, &out_dir.join(&image_path))?;
            out_rows.push(ManifestRow {
                image_path,
                mask_path: String::new(),
                domain: Domain::Refined.as_str().to_string(),
                ..row.clone()
            });
        }
        let path = out_dir.join("manifest.csv");
        io::write_manifest(&path, &out_rows)?;
        Ok(path)
    }
}

fn disc_mask_tensor(masks: &LayerMaskSet, tap: Tap) -> Tensor<f32> {
    let m = &masks[&tap];
    let data = m.classes.iter().flatten().map(|&v| v as f32).collect();
    Tensor::from_vec(&[1, 2, m.height, m.width], data)
}

/// One training image with its mask. `disc_mask` is what the discriminator
/// sees; it defaults to `mask`.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    pub image: ImageTensor,
    pub mask: ClassMask,
    pub disc_mask: Option<ClassMask>,
}

impl RefinerSample {
    pub fn new(image: ImageTensor, mask: ClassMask) -> Self {
        Self { image, mask, disc_mask: None }
    }
}

/// Synthetic inputs (with exact or segmented masks) and real style
/// references (with segmenter masks).
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub synthetic: Vec<RefinerSample>,
    pub real: Vec<RefinerSample>,
}

/// One logged training iteration.
#[derive(Clone, Debug)]
pub struct IterationLog {
    pub iter: usize,
    pub stage: usize,
    pub terms: StyleLossTerms,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    /// `adv_weight * loss_G_adv + lambda * L_total`.
    pub g_objective: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingHistory {
    pub iterations: Vec<IterationLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Header of the training log CSV.
pub fn training_log_header() -> Vec<&'static str> {
    LOSS_CSV_HEADER.iter().copied().chain(["loss_D", "loss_G_adv"]).collect()
}

impl TrainingHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(training_log_header())?;
        for it in &self.iterations {
            let mut rec = vec![it.iter.to_string()];
            rec.extend(it.terms.csv_fields().iter().map(|v| v.to_string()));
            rec.push(it.loss_d.to_string());
            rec.push(it.loss_g_adv.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean generator objective over the `window` iterations ending at
    /// 1-based iteration `end`.
    pub fn moving_average(&self, end: usize, window: usize) -> Option<f64> {
        if end < window || end > self.iterations.len() || window == 0 {
            return None;
        }
        let vals = &self.iterations[end - window..end];
        Some(vals.iter().map(|l| l.g_objective).sum::<f64>() / window as f64)
    }
}

/// Options beyond the configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `stage{K}_iter{N}.ckpt` files go; no checkpoints when absent.
    pub checkpoint_dir: Option<PathBuf>,
    /// Log every iteration at `info` level.
    pub verbose: bool,
}

/// Per-sample tensors and masks, prepared once.
struct SampleCache {
    /// Image at `R`, G1's input.
    global: Tensor<f32>,
    /// Image at `2R`, where every loss is evaluated.
    full: Tensor<f32>,
    /// Layer masks at `2R` for the loss taps.
    loss_masks: Rc<LayerMaskSet>,
    /// Discriminator masks pooled to the discriminator tap, `[1, 2, h, w]`.
    disc_masks: Tensor<f32>,
    /// Indicator planes at `2R` for G2's input.
    planes: Tensor<f32>,
}

fn prepare(sample: &RefinerSample, cfg: &RefinerConfig, taps: &[Tap]) -> Result<SampleCache> {
    if !sample.mask.matches_image(&sample.image) {
        return Err(Error::MaskMismatch("training mask does not match its image".into()));
    }
    let s = cfg.output_resolution();
    let r = cfg.train_resolution;
    let x2 = resize(&sample.image, s, s)?;
    let m2 = resize_mask(&sample.mask, s, s)?;
    let d2 = match &sample.disc_mask {
        Some(m) => resize_mask(m, s, s)?,
        None => m2.clone(),
    };
    let sizes: BTreeMap<Tap, (usize, usize)> = taps.iter().map(|&t| (t, tap_size(t, s, s))).collect();
    let dsizes: BTreeMap<Tap, (usize, usize)> = [(cfg.disc_layer, tap_size(cfg.disc_layer, s, s))].into();
    Ok(SampleCache {
        global: resize(&x2, r, r)?.to_tensor(),
        full: x2.to_tensor(),
        loss_masks: Rc::new(downsample_masks(&m2, &sizes)?),
        disc_masks: disc_mask_tensor(&downsample_masks(&d2, &dsizes)?, cfg.disc_layer),
        planes: mask_planes(&m2),
    })
}

/// Lazily built loss inputs shared across iterations.
struct LossCache<'a> {
    percept: &'a PerceptualNet<f32>,
    cfg: &'a RefinerConfig,
    synthetic: &'a [SampleCache],
    real: &'a [SampleCache],
    styles: HashMap<usize, Rc<StyleTarget<f32>>>,
    inputs: HashMap<usize, (Rc<FeatureStack<f32>>, Rc<MattingLaplacian>)>,
}

impl LossCache<'_> {
    fn pair(&mut self, syn: usize, real: usize) -> Result<PairContext<f32>> {
        if !self.styles.contains_key(&real) {
            let r = &self.real[real];
            let feats = self.percept.extract_tensor(&r.full, &self.cfg.loss_taps());
            self.styles.insert(real, Rc::new(StyleTarget::new(&feats, &r.loss_masks, self.cfg)?));
        }
        if !self.inputs.contains_key(&syn) {
            let s = &self.synthetic[syn];
            let content_taps: Vec<Tap> = self.cfg.content_weights.keys().copied().collect();
            let content = Rc::new(self.percept.extract_tensor(&s.full, &content_taps));
            let lap = Rc::new(matting_laplacian_tensor(&s.full, 0, self.cfg.matting_eps)?);
            self.inputs.insert(syn, (content, lap));
        }
        let (content, matting) = self.inputs[&syn].clone();
        Ok(PairContext { style: self.styles[&real].clone(), input_masks: self.synthetic[syn].loss_masks.clone(), content, matting })
    }
}

/// Run the three-stage schedule from `cfg.stages`.
pub fn train(refiner: &mut Refiner, data: &TrainingData, cfg: &RefinerConfig, opts: &TrainOptions) -> Result<TrainingHistory> {
    cfg.validate()?;
    if cfg.train_resolution != refiner.resolution {
        return Err(Error::InvalidParams("train_resolution differs from the refiner's".into()));
    }
    let mut history = TrainingHistory::default();
    if cfg.stages.total() == 0 {
        return Ok(history);
    }
    if data.synthetic.is_empty() || data.real.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let taps = cfg.loss_taps();
    let synthetic: Vec<SampleCache> = data.synthetic.iter().map(|s| prepare(s, cfg, &taps)).collect::<Result<_>>()?;
    let real: Vec<SampleCache> = data.real.iter().map(|s| prepare(s, cfg, &taps)).collect::<Result<_>>()?;
    let percept = Rc::clone(&refiner.percept);
    let mut cache = LossCache { percept: &percept, cfg, synthetic: &synthetic, real: &real, styles: HashMap::new(), inputs: HashMap::new() };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let lr = cfg.learning_rate;
    let mut opt_g1 = Adam::new(&refiner.g1.store, lr, ADAM_BETA1, ADAM_BETA2);
    let mut opt_g2 = Adam::new(&refiner.g2.store, lr, ADAM_BETA1, ADAM_BETA2);
    let mut opt_d = Adam::new(&refiner.d.store, lr, ADAM_BETA1, ADAM_BETA2);
    let idle = cfg.lambda == 0.0 && cfg.adv_weight == 0.0;
    let mut iter = 0;
    for stage in 1..=3 {
        if stage == 3 {
            let decayed = lr / cfg.stage3_lr_decay.max(f64::MIN_POSITIVE);
            opt_g1.lr = decayed;
            opt_g2.lr = decayed;
            opt_d.lr = decayed;
        }
        let n = cfg.stages.iters(stage);
        for k in 0..n {
            iter += 1;
            let mut r = rng::item_rng(cfg.seed, stream::REFINER, iter as u64);
            let syn: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..synthetic.len())).collect();
            let reals: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..real.len())).collect();
            let log = step(refiner, &mut cache, stage, iter, &syn, &reals, [&mut opt_g1, &mut opt_g2, &mut opt_d], idle)?;
            if opts.verbose {
                log::info!(
                    "stage {stage} iter {iter}: L_total {:.4e} loss_D {:.4} loss_G_adv {:.4}",
                    log.terms.total,
                    log.loss_d,
                    log.loss_g_adv
                );
            }
            history.iterations.push(log);
            let every = cfg.checkpoint_every.max(1);
            if let Some(dir) = &opts.checkpoint_dir {
                if (k + 1) % every == 0 || k + 1 == n {
                    let path = dir.join(format!("stage{stage}_iter{iter}.ckpt"));
                    refiner.save(&path)?;
                    history.checkpoints.push(path);
                }
            }
        }
    }
    Ok(history)
}

fn stack(items: impl Iterator<Item = Tensor<f32>>) -> Tensor<f32> {
    Tensor::stack(&items.collect::<Vec<_>>())
}

#[allow(clippy::too_many_arguments)]
fn step(
    refiner: &mut Refiner,
    cache: &mut LossCache,
    stage: usize,
    iter: usize,
    syn: &[usize],
    reals: &[usize],
    opts: [&mut Adam<f32>; 3],
    idle: bool,
) -> Result<IterationLog> {
    let cfg = cache.cfg;
    let [opt_g1, opt_g2, opt_d] = opts;

    // Generator forward, kept on its tape for the generator update.
    let tape = Tape::new();
    let train_g1 = stage != 2;
    let p1 = if train_g1 { refiner.g1.store.bind(&tape) } else { refiner.g1.store.bind_frozen(&tape) };
    let x1 = tape.constant(stack(syn.iter().map(|&i| cache.synthetic[i].global.clone())));
    let (_, delta, back) = refiner.g1.forward(&tape, &p1, x1);
    let x2 = tape.constant(stack(syn.iter().map(|&i| cache.synthetic[i].full.clone())));
    let (out, p2) = if stage == 1 {
        (apply_global(&tape, x2, delta), None)
    } else {
        let p2 = refiner.g2.store.bind(&tape);
        let planes = tape.constant(stack(syn.iter().map(|&i| cache.synthetic[i].planes.clone())));
        (refiner.g2.forward(&tape, &p2, x2, planes, delta, back), Some(p2))
    };
    let refined = (*tape.value(out)).clone();
    let refined_masks = stack(syn.iter().map(|&i| cache.synthetic[i].disc_masks.clone()));

    // Discriminator update on real against refined.
    let loss_d = {
        let dt = Tape::new();
        let pd = refiner.d.store.bind(&dt);
        let xr = dt.constant(stack(reals.iter().map(|&i| cache.real[i].full.clone())));
        let mr = dt.constant(stack(reals.iter().map(|&i| cache.real[i].disc_masks.clone())));
        let sr = refiner.d.forward(&dt, &pd, &refiner.percept, xr, mr);
        let sf = refiner.d.forward(&dt, &pd, &refiner.percept, dt.constant(refined), dt.constant(refined_masks.clone()));
        let loss = dt.add(lsgan_target(&dt, sr, 1.0), lsgan_target(&dt, sf, 0.0));
        let value = dt.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected(format!("loss_D = {value} at iteration {iter}")));
        }
        if !idle && cfg.adv_weight > 0.0 {
            let grads = dt.backward(loss);
            opt_d.step(&mut refiner.d.store, &pd, &grads);
        }
        value
    };

    // Generator update.
    let pd = refiner.d.store.bind_frozen(&tape);
    let sf = refiner.d.forward(&tape, &pd, &refiner.percept, out, tape.constant(refined_masks));
    let adv = lsgan_target(&tape, sf, 1.0);
    let pairs: Vec<PairContext<f32>> = syn.iter().zip(reals).map(|(&s, &r)| cache.pair(s, r)).collect::<Result<_>>()?;
    let refs: Vec<&PairContext<f32>> = pairs.iter().collect();
    let vars = record_objective(&tape, &refiner.percept, out, &refs, cfg)?;
    let objective = tape.add(tape.scale(adv, cfg.adv_weight), tape.scale(vars.total, cfg.lambda));
    let terms = read_terms(&tape, &vars, cfg);
    let loss_g_adv = tape.scalar(adv) as f64;
    let g_objective = tape.scalar(objective) as f64;
    if !g_objective.is_finite() || !terms.total.is_finite() {
        return Err(Error::DivergenceDetected(format!("generator objective = {g_objective} at iteration {iter}")));
    }
    if !idle {
        let grads = tape.backward(objective);
        if train_g1 {
            opt_g1.step(&mut refiner.g1.store, &p1, &grads);
        }
        if let Some(p2) = &p2 {
            opt_g2.step(&mut refiner.g2.store, p2, &grads);
        }
    }
    Ok(IterationLog { iter, stage, terms, loss_d, loss_g_adv, g_objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gan_objective_examples() {
        assert_eq!(gan_objective(&[0.3], &[1.0, 1.0]).unwrap().1, 0.0);
        assert_eq!(gan_objective(&[1.0, 1.0], &[0.0]).unwrap().0, 0.0);
        assert!(matches!(gan_objective(&[], &[1.0]), Err(Error::EmptyBatch)));
        assert!(matches!(gan_objective(&[1.0], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mask_planes_are_indicators() {
        let m = ClassMask::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(mask_planes(&m).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
