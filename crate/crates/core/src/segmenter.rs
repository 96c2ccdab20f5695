//! Eye-region segmentation into background, iris and pupil.
//!
//! The network is a small residual encoder-decoder: a stem convolution,
//! three stride-2 encoder stages, eight residual units at 1/8 resolution and
//! a mirrored decoder of transposed convolutions with additive skips from the
//! encoder. Every residual unit computes `relu(x + F(x))` where `F` is two
//! 3x3 convolutions with a rectifier between them.
//!
//! [`repair_orphans`] enforces the pupil constraint after segmentation and
//! [`downsample_masks`] turns a mask into per-layer soft masks for the
//! losses.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use synthrefine_tape::{read_records, Adam, Bound, Conv, Float, ParamStore, Tape, Tensor, UpConv, Var};

use crate::error::{Error, Result};
use crate::imageops::{resize, resize_mask};
use crate::rng;
use crate::types::{Class, ClassMask, ImageTensor, LayerMask, LayerMaskSet, Tap};

/// Total downsampling factor of the encoder.
pub const DOWNSAMPLING: usize = 8;
/// Residual units at the bottleneck.
pub const BOTTLENECK_UNITS: usize = 8;

/// `x -> relu(x + conv_b(relu(conv_a(x))))`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualUnit {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl ResidualUnit {
    pub fn new<T: Float, R: rand::Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let conv_a = Conv::new(store, &format!("{name}.a"), channels, channels, 3, 1, rng);
        let conv_b = Conv::new(store, &format!("{name}.b"), channels, channels, 3, 1, rng);
        // Start the residual branch small so deep stacks begin near identity.
        let w = store.get_mut(conv_b.weight);
        for v in w.data_mut() {
            *v = T::of(v.as_f64() * 0.1);
        }
        Self { conv_a, conv_b }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Var {
        let r = self.conv_b.forward(tape, p, tape.relu(self.conv_a.forward(tape, p, x)));
        tape.relu(tape.add(x, r))
    }
}

pub struct SegmenterNet {
    pub store: ParamStore<f32>,
    width: usize,
    stem: Conv,
    down: [Conv; 3],
    units: Vec<ResidualUnit>,
    up: [UpConv; 3],
    head: Conv,
}

impl SegmenterNet {
    /// Channel widths: `w` at full resolution, `2w` at 1/2, `4w` at 1/4 and 1/8.
    pub fn new(width: usize, seed: u64) -> Self {
        let mut r = rng::item_rng(seed, rng::stream::SEGMENTER, 0);
        let mut s = ParamStore::new();
        let (w1, w2, w3) = (width, 2 * width, 4 * width);
        let stem = Conv::new(&mut s, "stem", 3, w1, 3, 1, &mut r);
        let down = [
            Conv::new(&mut s, "down1", w1, w2, 3, 2, &mut r),
            Conv::new(&mut s, "down2", w2, w3, 3, 2, &mut r),
            Conv::new(&mut s, "down3", w3, w3, 3, 2, &mut r),
        ];
        let units = (0..BOTTLENECK_UNITS).map(|i| ResidualUnit::new(&mut s, &format!("res{i}"), w3, &mut r)).collect();
        let up = [
            UpConv::new(&mut s, "up3", w3, w3, &mut r),
            UpConv::new(&mut s, "up2", w3, w2, &mut r),
            UpConv::new(&mut s, "up1", w2, w1, &mut r),
        ];
        let head = Conv::new(&mut s, "head", w1, 3, 1, 1, &mut r);
        Self { store: s, width, stem, down, units, up, head }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Zero the output head so every pixel gets equal class scores.
    pub fn zero_head(&mut self) {
        let (w, b) = (self.head.weight, self.head.bias);
        let shape_w = self.store.get(w).shape().to_vec();
        let shape_b = self.store.get(b).shape().to_vec();
        self.store.set(w, Tensor::zeros(&shape_w));
        self.store.set(b, Tensor::zeros(&shape_b));
    }

    /// Logits `[N, 3, H, W]` for inputs whose sides are multiples of 8.
    pub fn forward(&self, tape: &Tape<f32>, p: &Bound, x: Var) -> Var {
        let e0 = tape.relu(self.stem.forward(tape, p, x));
        let e1 = tape.relu(self.down[0].forward(tape, p, e0));
        let e2 = tape.relu(self.down[1].forward(tape, p, e1));
        let mut z = tape.relu(self.down[2].forward(tape, p, e2));
        for u in &self.units {
            z = u.forward(tape, p, z);
        }
        let d2 = tape.relu(tape.add(self.up[0].forward(tape, p, z), e2));
        let d1 = tape.relu(tape.add(self.up[1].forward(tape, p, d2), e1));
        let d0 = tape.relu(tape.add(self.up[2].forward(tape, p, d1), e0));
        self.head.forward(tape, p, d0)
    }

    /// Class scores of one image, `[1, 3, H, W]`, after edge padding to a
    /// multiple of 8 and cropping back.
    pub fn scores(&self, image: &ImageTensor) -> Tensor<f32> {
        let (h, w) = (image.height(), image.width());
        let (ph, pw) = (h.div_ceil(DOWNSAMPLING) * DOWNSAMPLING, w.div_ceil(DOWNSAMPLING) * DOWNSAMPLING);
        let padded = pad_edge(&image.to_tensor::<f32>(), ph, pw);
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(padded);
        let y = tape.value(self.forward(&tape, &p, x));
        crop_top_left(&y, h, w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let width = records.get("stem.weight").ok_or_else(|| Error::MissingLayer("stem.weight".into()))?.shape()[0];
        let mut net = Self::new(width, 0);
        net.store.assign(&records)?;
        Ok(net)
    }
}

fn pad_edge<T: Float>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks(h * w) {
        for y in 0..ph {
            for xx in 0..pw {
                out.push(plane[y.min(h - 1) * w + xx.min(w - 1)]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ph, pw], out)
}

fn crop_top_left<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ih, iw) = x.dims4();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * iw..y * iw + w]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Argmax over classes; ties go to the lowest class index.
pub fn argmax_mask(scores: &Tensor<f32>) -> Result<ClassMask> {
    let (_, k, h, w) = scores.dims4();
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if scores.data()[c * plane + p] > scores.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ClassMask::new(h, w, labels)
}

/// Per-pixel class probabilities (softmax over the score channels).
pub fn probabilities(scores: &Tensor<f32>) -> Tensor<f64> {
    let (n, k, h, w) = scores.dims4();
    let plane = h * w;
    let mut out = vec![0.0f64; scores.len()];
    for i in 0..n {
        for p in 0..plane {
            let at = |c: usize| (i * k + c) * plane + p;
            let max = (0..k).map(|c| scores.data()[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (scores.data()[at(c)] as f64 - max).exp()).sum();
            for c in 0..k {
                out[at(c)] = (scores.data()[at(c)] as f64 - max).exp() / z;
            }
        }
    }
    Tensor::from_vec(scores.shape(), out)
}

/// Segment one image. Any size is accepted; the image is padded to a
/// multiple of the encoder's downsampling and the result cropped back.
pub fn segment(net: &SegmenterNet, image: &ImageTensor) -> Result<ClassMask> {
    argmax_mask(&net.scores(image))
}

/// 4-connected components of the pixels where `member` holds.
fn components(h: usize, w: usize, member: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || !member(start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && member(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Enforce the pupil constraint.
///
/// The iris support is every iris or pupil pixel in a connected component
/// that contains at least one iris pixel. Pupil pixels outside it are
/// orphans and become background. The pupil is then redrawn as the digital
/// disk of the support pixels nearest the support centroid, with the same
/// pixel count as the input pupil (fewer if the support is smaller). Ties in
/// distance go to the lower row-major index. With no iris pixel at all,
/// every pupil pixel becomes background.
pub fn repair_orphans(mask: &ClassMask) -> ClassMask {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let pupil_area = mask.count(Class::Pupil);
    let mut out: Vec<u8> = labels.iter().map(|&l| if l == Class::Pupil as u8 { Class::Background as u8 } else { l }).collect();
    if mask.count(Class::Iris) == 0 {
        return ClassMask::new(h, w, out).expect("same shape");
    }
    let support: Vec<usize> = components(h, w, |p| labels[p] != Class::Background as u8)
        .into_iter()
        .filter(|c| c.iter().any(|&p| labels[p] == Class::Iris as u8))
        .flatten()
        .collect();
    let n = support.len() as f64;
    let cy = support.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
    let cx = support.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
    let mut ranked: Vec<(f64, usize)> = support
        .iter()
        .map(|&p| {
            let (dy, dx) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
            (dy * dy + dx * dx, p)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &p in &support {
        out[p] = Class::Iris as u8;
    }
    for &(_, p) in ranked.iter().take(pupil_area) {
        out[p] = Class::Pupil as u8;
    }
    ClassMask::new(h, w, out).expect("same shape")
}

/// 2x2 average pooling with partial windows averaged over their valid
/// pixels, matching the extractor's pooling.
fn pool2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for yy in 2 * y..(2 * y + 2).min(h) {
                for xx in 2 * x..(2 * x + 2).min(w) {
                    acc += src[yy * w + xx];
                    cnt += 1.0;
                }
            }
            out[y * ow + x] = acc / cnt;
        }
    }
    (out, oh, ow)
}

/// Soft per-layer class masks by area averaging, following the extractor's
/// pooling chain. Each requested size must be reachable from the mask size
/// by repeated halving (rounding up).
pub fn downsample_masks(mask: &ClassMask, layer_sizes: &BTreeMap<Tap, (usize, usize)>) -> Result<LayerMaskSet> {
    let (h, w) = (mask.height(), mask.width());
    let indicator = |class: Class| -> Vec<f64> { mask.labels().iter().map(|&l| if l == class as u8 { 1.0 } else { 0.0 }).collect() };
    let mut levels: Vec<(usize, usize, [Vec<f64>; 2])> = vec![(h, w, [indicator(Class::Iris), indicator(Class::Pupil)])];
    let mut out = LayerMaskSet::new();
    for (&tap, &(th, tw)) in layer_sizes {
        loop {
            if let Some((_, _, classes)) = levels.iter().find(|(lh, lw, _)| (*lh, *lw) == (th, tw)) {
                out.insert(tap, LayerMask { height: th, width: tw, classes: classes.clone() });
                break;
            }
            let (lh, lw, classes) = levels.last().expect("non-empty");
            if (*lh <= th && *lw <= tw) || (*lh == 1 && *lw == 1) {
                return Err(Error::Shape(format!("{tap}: size {th}x{tw} is not a pooling level of a {h}x{w} mask")));
            }
            let (a, nh, nw) = pool2(&classes[0], *lh, *lw);
            let (b, _, _) = pool2(&classes[1], *lh, *lw);
            levels.push((nh, nw, [a, b]));
        }
    }
    Ok(out)
}

/// Options for [`train_segmenter`].
#[derive(Clone, Debug)]
pub struct SegmenterTraining {
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Where `epoch_{N}.ckpt` and the `latest` pointer go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self { width: 8, epochs: 30, learning_rate: 2e-3, batch_size: 4, seed: 0, checkpoint_dir: None }
    }
}

/// Trained network and the mean cross-entropy of every epoch.
pub struct TrainedSegmenter {
    pub net: SegmenterNet,
    pub epoch_losses: Vec<f64>,
}

/// Train on exact masks with per-pixel softmax cross-entropy and Adam.
pub fn train_segmenter(dataset: &[(ImageTensor, ClassMask)], opts: &SegmenterTraining) -> Result<TrainedSegmenter> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = (dataset[0].0.height(), dataset[0].0.width());
    for (img, m) in dataset {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape("all training images must share one size".into()));
        }
        if !m.matches_image(img) {
            return Err(Error::MaskMismatch("mask and image sizes differ".into()));
        }
    }
    let (ph, pw) = (h.div_ceil(DOWNSAMPLING) * DOWNSAMPLING, w.div_ceil(DOWNSAMPLING) * DOWNSAMPLING);
    let inputs: Vec<Tensor<f32>> = dataset.iter().map(|(img, _)| pad_edge(&img.to_tensor(), ph, pw)).collect();
    let labels: Vec<Vec<u8>> = dataset.iter().map(|(_, m)| pad_labels(m, ph, pw)).collect();

    let mut net = SegmenterNet::new(opts.width, opts.seed);
    let mut opt = Adam::new(&net.store, opts.learning_rate, 0.9, 0.999);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut r = rng::item_rng(opts.seed, rng::stream::SEGMENTER, 1);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(INPUT_SIZE_FILE), format!("{h}\n"))?;
    }
    let batch = opts.batch_size.max(1);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let tape = Tape::new();
            let p = net.store.bind(&tape);
            let x = tape.constant(Tensor::stack(&chunk.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>()));
            let lab: Vec<u8> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let logits = net.forward(&tape, &p, x);
            let loss = tape.cross_entropy(logits, Rc::new(lab), None);
            let l = tape.scalar(loss) as f64;
            if !l.is_finite() {
                return Err(Error::DivergenceDetected(format!("segmenter loss {l} in epoch {epoch}")));
            }
            total += l * chunk.len() as f64;
            let grads = tape.backward(loss);
            opt.step(&mut net.store, &p, &grads);
        }
        let mean = total / dataset.len() as f64;
        log::debug!("segmenter epoch {epoch}: cross-entropy {mean:.5}");
        epoch_losses.push(mean);
        if let Some(dir) = &opts.checkpoint_dir {
            let name = format!("epoch_{epoch}.ckpt");
            net.save(&dir.join(&name))?;
            std::fs::write(dir.join("latest"), format!("{name}\n"))?;
        }
    }
    Ok(TrainedSegmenter { net, epoch_losses })
}

fn pad_labels(mask: &ClassMask, ph: usize, pw: usize) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            out.push(mask.labels()[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    out
}

/// Checkpoint named by the `latest` pointer in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let pointer = dir.join("latest");
    if !pointer.exists() {
        return Err(Error::MissingFile(pointer));
    }
    Ok(dir.join(std::fs::read_to_string(&pointer)?.trim()))
}

/// File in a segmenter directory holding the side length it was trained at.
pub const INPUT_SIZE_FILE: &str = "input_size";
/// Input side assumed when a segmenter directory does not record one.
pub const DEFAULT_INPUT_SIZE: usize = 32;

/// A trained network together with the square input size it was trained
/// at. [`Segmenter::mask`] resizes any image to that size, segments and
/// repairs it, and resizes the mask back.
pub struct Segmenter {
    pub net: SegmenterNet,
    pub input_size: usize,
}

impl Segmenter {
    pub fn new(net: SegmenterNet, input_size: usize) -> Self {
        Self { net, input_size }
    }

    /// Load from a checkpoint file or from a directory written by
    /// [`Segmenter::save_dir`] or [`train_segmenter`].
    pub fn load(path: &Path) -> Result<Self> {
        let (file, dir) = if path.is_dir() {
            (latest_checkpoint(path)?, path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
        };
        let net = SegmenterNet::load(&file)?;
        let size_file = dir.join(INPUT_SIZE_FILE);
        let input_size = if size_file.exists() {
            let text = std::fs::read_to_string(&size_file)?;
            text.trim().parse().map_err(|_| Error::InvalidParams(format!("{INPUT_SIZE_FILE} = {:?}", text.trim())))?
        } else {
            DEFAULT_INPUT_SIZE
        };
        Ok(Self { net, input_size })
    }

    /// Write `final.ckpt`, the `latest` pointer and the input size file.
    pub fn save_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let file = dir.join("final.ckpt");
        self.net.save(&file)?;
        std::fs::write(dir.join("latest"), "final.ckpt\n")?;
        std::fs::write(dir.join(INPUT_SIZE_FILE), format!("{}\n", self.input_size))?;
        Ok(file)
    }

    pub fn mask(&self, image: &ImageTensor) -> Result<ClassMask> {
        let (h, w) = (image.height(), image.width());
        let s = self.input_size;
        if (h, w) == (s, s) {
            return Ok(repair_orphans(&segment(&self.net, image)?));
        }
        let small = resize(image, s, s)?;
        resize_mask(&repair_orphans(&segment(&self.net, &small)?), h, w)
    }
}

/// Fraction of pixels where two masks agree.
pub fn pixel_accuracy(a: &ClassMask, b: &ClassMask) -> f64 {
    let same = a.labels().iter().zip(b.labels()).filter(|(x, y)| x == y).count();
    same as f64 / a.labels().len() as f64
}
