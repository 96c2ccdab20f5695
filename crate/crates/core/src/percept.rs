//! Fixed perceptual feature extractor, instance-wise average pooling and a
//! cascaded-refinement decoder.
//!
//! The extractor follows the VGG-19 layout: five modules of 2, 2, 4, 4 and 4
//! 3x3 convolutions, each followed by a rectifier, with 2x2 average pooling
//! between modules. Channel widths double per module up to `8 * width`; with
//! `width = 64` this is the standard topology and pretrained weights can be
//! loaded from a weight file. Taps are the post-rectifier activations.
//!
//! Without a weight file, [`PerceptualNet::random`] builds a seeded network
//! whose kernels are mirror-symmetric left to right. That keeps the
//! extractor exactly equivariant under horizontal flips.
//!
//! Weight file records (see `synthrefine_tape::read_records` for the byte
//! layout): `convX_Y.weight` `[out, in, 3, 3]` and `convX_Y.bias` `[out]` for
//! all sixteen taps, plus optional `input.scale` `[1]` and `input.mean` `[3]`
//! applied as `x * scale - mean` before the first layer (defaults 1 and 0.5).

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use synthrefine_tape::{read_records, Adam, Conv, Float, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{FeatureStack, ImageTensor, LayerMaskSet, Tap};

/// Convolutions per module.
pub const MODULE_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
/// Channel multiplier per module, relative to the base width.
pub const MODULE_WIDTH: [usize; 5] = [1, 2, 4, 8, 8];

/// Output channels of `tap` for a base width.
pub fn tap_channels(tap: Tap, width: usize) -> usize {
    MODULE_WIDTH[tap.module()] * width
}

/// Input channels of `tap` for a base width.
pub fn tap_inputs(tap: Tap, width: usize) -> usize {
    if tap.index() == 0 {
        3
    } else {
        tap_channels(Tap::from_index(tap.index() - 1), width)
    }
}

/// Spatial size of `tap` for an `h x w` input (pooling rounds up).
pub fn tap_size(tap: Tap, h: usize, w: usize) -> (usize, usize) {
    let mut s = (h, w);
    for _ in 0..tap.module() {
        s = (s.0.div_ceil(2), s.1.div_ceil(2));
    }
    s
}

#[derive(Clone, Debug)]
pub struct PerceptualNet<T: Float> {
    width: usize,
    layers: Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>,
    input_scale: f64,
    input_mean: [f64; 3],
}

impl<T: Float> PerceptualNet<T> {
    /// Seeded He-normal weights with left-right symmetric kernels and zero biases.
    pub fn random(width: usize, seed: u64) -> Self {
        assert!(width > 0, "width must be positive");
        let mut r = rng::item_rng(seed, rng::stream::PERCEPT, 0);
        let layers = Tap::all()
            .map(|tap| {
                let (cin, cout) = (tap_inputs(tap, width), tap_channels(tap, width));
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let mut w = vec![T::zero(); cout * cin * 9];
                for k in 0..cout * cin {
                    for ky in 0..3 {
                        for kx in 0..2 {
                            let z: f64 = StandardNormal.sample(&mut r);
                            let v = T::of(z * std);
                            w[k * 9 + ky * 3 + kx] = v;
                            w[k * 9 + ky * 3 + 2 - kx] = v;
                        }
                    }
                }
                (Rc::new(Tensor::from_vec(&[cout, cin, 3, 3], w)), Rc::new(Tensor::zeros(&[cout])))
            })
            .collect();
        Self { width, layers, input_scale: 1.0, input_mean: [0.5; 3] }
    }

    /// Load from a weight file. The base width is read from `conv1_1.weight`
    /// and every record is checked against the topology table.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Self::from_records(&records)
    }

    pub fn from_records(records: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let first = records.get("conv1_1.weight").ok_or_else(|| Error::MissingLayer("conv1_1".into()))?;
        let width = first.shape()[0];
        let mut layers = Vec::with_capacity(16);
        for tap in Tap::all() {
            let (cin, cout) = (tap_inputs(tap, width), tap_channels(tap, width));
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Rc<Tensor<T>>> {
                let name = format!("{}.{suffix}", tap.name());
                let t = records.get(&name).ok_or_else(|| Error::MissingLayer(name.clone()))?;
                if t.shape() != shape {
                    return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
                }
                Ok(Rc::new(t.cast()))
            };
            layers.push((fetch("weight", &[cout, cin, 3, 3])?, fetch("bias", &[cout])?));
        }
        let input_scale = records.get("input.scale").map_or(1.0, |t| t.data()[0] as f64);
        let input_mean = match records.get("input.mean") {
            Some(t) if t.len() == 3 => [0, 1, 2].map(|i| t.data()[i] as f64),
            Some(_) => return Err(Error::Shape("input.mean must hold 3 values".into())),
            None => [0.5; 3],
        };
        Ok(Self { width, layers, input_scale, input_mean })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::<T>::new();
        for (tap, (w, b)) in Tap::all().zip(&self.layers) {
            store.add(format!("{}.weight", tap.name()), (**w).clone());
            store.add(format!("{}.bias", tap.name()), (**b).clone());
        }
        store.add("input.scale", Tensor::scalar(T::of(self.input_scale)));
        store.add("input.mean", Tensor::from_vec(&[3], self.input_mean.iter().map(|&v| T::of(v)).collect()));
        store.save(path)?;
        Ok(())
    }

    /// Same weights in another precision.
    pub fn cast<U: Float>(&self) -> PerceptualNet<U> {
        PerceptualNet {
            width: self.width,
            layers: self.layers.iter().map(|(w, b)| (Rc::new(w.cast()), Rc::new(b.cast()))).collect(),
            input_scale: self.input_scale,
            input_mean: self.input_mean,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weight(&self, tap: Tap) -> &Tensor<T> {
        &self.layers[tap.index()].0
    }

    /// Record the extractor on `tape` for a `[N, 3, H, W]` input and return
    /// the requested taps. Stops after the deepest requested tap.
    pub fn forward(&self, tape: &Tape<T>, x: Var, taps: &[Tap]) -> BTreeMap<Tap, Var> {
        let mut out = BTreeMap::new();
        let Some(&deepest) = taps.iter().max() else {
            return out;
        };
        let shape = tape.shape(x);
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let mean: Vec<T> = (0..n).flat_map(|_| (0..3).flat_map(|c| std::iter::repeat_n(T::of(self.input_mean[c]), h * w))).collect();
        let mean = tape.constant(Tensor::from_vec(&[n, 3, h, w], mean));
        let mut cur = tape.sub(tape.scale(x, self.input_scale), mean);
        for tap in Tap::all().take(deepest.index() + 1) {
            if tap.index() > 0 && tap.module() != Tap::from_index(tap.index() - 1).module() {
                cur = tape.avg_pool2(cur);
            }
            let (wt, b) = &self.layers[tap.index()];
            let (wv, bv) = (tape.constant_rc(wt.clone()), tape.constant_rc(b.clone()));
            cur = tape.relu(tape.conv2d(cur, wv, Some(bv), 1, 1));
            if taps.contains(&tap) {
                out.insert(tap, cur);
            }
        }
        out
    }

    /// Features of a batch tensor, without gradients.
    pub fn extract_tensor(&self, x: &Tensor<T>, taps: &[Tap]) -> FeatureStack<T> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut stack = FeatureStack::new();
        for (tap, v) in self.forward(&tape, xv, taps) {
            stack.insert(tap, (*tape.value(v)).clone());
        }
        stack
    }
}

/// Parse tap names, rejecting unknown ones.
pub fn parse_taps<S: AsRef<str>>(names: &[S]) -> Result<Vec<Tap>> {
    let mut taps: Vec<Tap> = names.iter().map(|n| Tap::parse(n.as_ref())).collect::<Result<_>>()?;
    taps.sort();
    taps.dedup();
    Ok(taps)
}

/// Features of one image at the named layers.
pub fn extract_features<T: Float, S: AsRef<str>>(net: &PerceptualNet<T>, image: &ImageTensor, layers: &[S]) -> Result<FeatureStack<T>> {
    let taps = parse_taps(layers)?;
    Ok(net.extract_tensor(&image.to_tensor(), &taps))
}

/// Replace features inside each class region by the region's mask-weighted
/// mean: `out = (1 - sum_c S_c) F + sum_c S_c mean_c`. Classes with zero area
/// are skipped, so an all-zero mask returns the input unchanged. Repeating
/// the pooling changes nothing when the masks are binary.
pub fn instance_average_pool<T: Float>(features: &FeatureStack<T>, masks: &LayerMaskSet) -> Result<FeatureStack<T>> {
    let mut out = FeatureStack::new();
    for (tap, block) in features.iter() {
        let mask = masks.get(&tap).ok_or_else(|| Error::MissingLayer(tap.name().into()))?;
        let (n, c, h, w) = block.dims4();
        if n != 1 || (mask.height, mask.width) != (h, w) {
            return Err(Error::Shape(format!("{tap}: mask {}x{} for features {:?}", mask.height, mask.width, block.shape())));
        }
        let m = h * w;
        let src = block.data();
        let mut dst = src.to_vec();
        let active: Vec<usize> = (0..2).filter(|&k| mask.area(k) > 0.0).collect();
        if !active.is_empty() {
            let means: Vec<Vec<f64>> = active
                .iter()
                .map(|&k| {
                    let s = &mask.classes[k];
                    let area = mask.area(k);
                    (0..c).map(|ch| (0..m).map(|p| s[p] * src[ch * m + p].as_f64()).sum::<f64>() / area).collect()
                })
                .collect();
            for p in 0..m {
                let cover: f64 = active.iter().map(|&k| mask.classes[k][p]).sum();
                if cover == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let mixed: f64 = active.iter().zip(&means).map(|(&k, mu)| mask.classes[k][p] * mu[ch]).sum();
                    dst[ch * m + p] = T::of((1.0 - cover) * src[ch * m + p].as_f64() + mixed);
                }
            }
        }
        out.insert(tap, Tensor::from_vec(block.shape(), dst));
    }
    Ok(out)
}

/// Cascaded refinement decoder: from the features of one tap, a chain of
/// modules (2x nearest upsampling, then two 3x3 convolutions each followed by
/// layer normalisation and a leaky rectifier) back to image resolution, and a
/// 1x1 convolution squashed by a sigmoid. Inner convolutions carry no bias,
/// so zero features decode to the constant `sigmoid(output bias)`.
pub struct DecoderNet {
    pub store: ParamStore<f32>,
    source: Tap,
    width: usize,
    modules: Vec<(Conv, Conv)>,
    head: Conv,
}

const DECODER_SLOPE: f64 = 0.2;

impl DecoderNet {
    pub fn new(source: Tap, in_channels: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::item_rng(seed, rng::stream::PERCEPT, 1);
        let mut store = ParamStore::new();
        let levels = source.module() + 1;
        let mut modules = Vec::with_capacity(levels);
        let mut cin = in_channels;
        for i in 0..levels {
            let a = Conv::new(&mut store, &format!("dec{i}.conv_a"), cin, width, 3, 1, &mut r);
            let b = Conv::new(&mut store, &format!("dec{i}.conv_b"), width, width, 3, 1, &mut r);
            modules.push((a, b));
            cin = width;
        }
        let head = Conv::new(&mut store, "dec.head", width, 3, 1, 1, &mut r);
        Self { store, source, width, modules, head }
    }

    pub fn source(&self) -> Tap {
        self.source
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Decode features to an `out_h x out_w` image.
    pub fn decode(&self, features: &FeatureStack<f32>, out_h: usize, out_w: usize) -> Result<ImageTensor> {
        let block = features.get(self.source)?;
        let tape = Tape::new();
        let x = tape.constant(block.clone());
        let p = self.store.bind_frozen(&tape);
        let y = self.forward_bound(&tape, &p, x, out_h, out_w);
        ImageTensor::from_tensor(&tape.value(y), 0)
    }

    /// Fit the decoder to reconstruct `images` from their features with an
    /// L2 loss. Returns the per-step loss trace.
    pub fn train(&mut self, net: &PerceptualNet<f32>, images: &[ImageTensor], steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let feats: Vec<Tensor<f32>> = images
            .iter()
            .map(|im| net.extract_tensor(&im.to_tensor(), &[self.source]).get(self.source).cloned())
            .collect::<Result<_>>()?;
        let mut opt = Adam::new(&self.store, lr, 0.9, 0.999);
        let mut r = rng::item_rng(seed, rng::stream::PERCEPT, 2);
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let i = r.random_range(0..images.len());
            let tape = Tape::new();
            let target = tape.constant(images[i].to_tensor());
            let x = tape.constant(feats[i].clone());
            let p = self.store.bind(&tape);
            let y = self.forward_bound(&tape, &p, x, images[i].height(), images[i].width());
            let loss = tape.mean(tape.square(tape.sub(y, target)));
            let l = tape.scalar(loss).as_f64();
            if !l.is_finite() {
                return Err(Error::DivergenceDetected(format!("decoder loss {l}")));
            }
            trace.push(l);
            let grads = tape.backward(loss);
            opt.step(&mut self.store, &p, &grads);
        }
        Ok(trace)
    }

    fn forward_bound(&self, tape: &Tape<f32>, p: &synthrefine_tape::Bound, feats: Var, out_h: usize, out_w: usize) -> Var {
        let mut x = feats;
        for (i, (a, b)) in self.modules.iter().enumerate() {
            if i > 0 {
                x = tape.upsample2(x);
            }
            for conv in [a, b] {
                let y = tape.conv2d(x, p.var(conv.weight), None, 1, conv.pad);
                x = tape.leaky_relu(tape.layer_norm(y, 1e-5), DECODER_SLOPE);
            }
        }
        let y = tape.sigmoid(self.head.forward(tape, p, x));
        crop(tape, y, out_h, out_w)
    }
}

/// Top-left crop of an NCHW value, recorded as a fixed linear map.
fn crop<T: Float>(tape: &Tape<T>, x: Var, h: usize, w: usize) -> Var {
    let shape = tape.shape(x);
    if shape[2] == h && shape[3] == w {
        return x;
    }
    tape.custom(x, Rc::new(Crop { h, w }))
}

struct Crop {
    h: usize,
    w: usize,
}

impl<T: Float> synthrefine_tape::CustomOp<T> for Crop {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, ih, iw) = x.dims4();
        assert!(self.h <= ih && self.w <= iw, "crop larger than input");
        let mut out = Vec::with_capacity(n * c * self.h * self.w);
        for plane in x.data().chunks(ih * iw) {
            for y in 0..self.h {
                out.extend_from_slice(&plane[y * iw..y * iw + self.w]);
            }
        }
        Tensor::from_vec(&[n, c, self.h, self.w], out)
    }

    fn backward(&self, x: &Tensor<T>, _y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (_, _, ih, iw) = x.dims4();
        let mut gx = Tensor::zeros(x.shape());
        for (dst, src) in gx.data_mut().chunks_mut(ih * iw).zip(gy.data().chunks(self.h * self.w)) {
            for y in 0..self.h {
                dst[y * iw..y * iw + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
            }
        }
        gx
    }
}
