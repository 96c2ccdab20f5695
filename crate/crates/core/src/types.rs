//! Shared domain types: images, semantic masks, layer masks, feature stacks
//! and gaze labels.

use std::collections::BTreeMap;
use std::fmt;

use synthrefine_tape::{Float, Tensor};

use crate::error::{Error, Result};

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

/// RGB image with values in `[0, 1]`, stored as three planes (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!("image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!("expected {} values for {height}x{width}x3, got {}", 3 * height * width, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParams(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from a per-sample function `(channel, y, x) -> value`; values are
    /// clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(sanitize(f(c, y, x)));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    /// Image from the first sample of a `[N, 3, H, W]` tensor, clamping to
    /// `[0, 1]` (non-finite values become 0).
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != 3 || index >= n {
            return Err(Error::Shape(format!("cannot read image {index} from tensor {:?}", t.shape())));
        }
        let per = 3 * h * w;
        let data = t.data()[index * per..(index + 1) * per].iter().map(|v| sanitize(v.as_f64() as f32)).collect();
        Self::new(h, w, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let data = self
            .data
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self { height: self.height, width: w, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / self.data.len() as f64
    }
}

fn sanitize(v: f32) -> f32 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Semantic class of a mask pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Iris = 1,
    Pupil = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Background, Class::Iris, Class::Pupil];
    /// Classes that receive their own style statistics.
    pub const FOREGROUND: [Class; 2] = [Class::Iris, Class::Pupil];

    pub fn from_label(v: u8) -> Option<Self> {
        match v {
            0 => Some(Class::Background),
            1 => Some(Class::Iris),
            2 => Some(Class::Pupil),
            _ => None,
        }
    }
}

/// Per-pixel labels in `{0 = background, 1 = iris, 2 = pupil}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("expected {} labels for {height}x{width}, got {}", height * width, labels.len())));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 2) {
            return Err(Error::InvalidParams(format!("mask label {v} not in {{0, 1, 2}}")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Class {
        Class::from_label(self.labels[y * self.width + x]).expect("labels validated on construction")
    }

    pub fn set(&mut self, y: usize, x: usize, class: Class) {
        self.labels[y * self.width + x] = class as u8;
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&v| v == class as u8).count()
    }

    /// Centroid `(y, x)` in pixel-centre coordinates of all pixels whose class
    /// is in `classes`.
    pub fn centroid(&self, classes: &[Class]) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for (i, &v) in self.labels.iter().enumerate() {
            if classes.iter().any(|&c| c as u8 == v) {
                sy += (i / self.width) as f64;
                sx += (i % self.width) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    pub fn matches_image(&self, image: &ImageTensor) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    pub fn flip_horizontal(&self) -> Self {
        let labels = self.labels.chunks(self.width).flat_map(|r| r.iter().rev().copied()).collect();
        Self { height: self.height, width: self.width, labels }
    }
}

/// The sixteen convolutional taps of the perceptual extractor, in network order.
pub const TAP_NAMES: [&str; 16] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4", "conv4_1", "conv4_2",
    "conv4_3", "conv4_4", "conv5_1", "conv5_2", "conv5_3", "conv5_4",
];

/// A named convolutional layer of the perceptual extractor. Orders by depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tap(u8);

impl Tap {
    pub fn parse(name: &str) -> Result<Self> {
        TAP_NAMES
            .iter()
            .position(|&n| n == name.trim())
            .map(|i| Tap(i as u8))
            .ok_or_else(|| Error::UnknownLayer(name.trim().to_string()))
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < TAP_NAMES.len());
        Tap(i as u8)
    }

    pub fn all() -> impl Iterator<Item = Tap> {
        (0..TAP_NAMES.len()).map(Tap::from_index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        TAP_NAMES[self.index()]
    }

    /// Zero-based module (pooling stage) this layer belongs to.
    pub fn module(self) -> usize {
        match self.0 {
            0..=1 => 0,
            2..=3 => 1,
            4..=7 => 2,
            8..=11 => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Soft class masks for one layer, each of the layer's spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub height: usize,
    pub width: usize,
    /// Indexed like [`Class::FOREGROUND`]: iris, then pupil.
    pub classes: [Vec<f64>; 2],
}

impl LayerMask {
    pub fn class(&self, class: Class) -> &[f64] {
        match class {
            Class::Iris => &self.classes[0],
            Class::Pupil => &self.classes[1],
            Class::Background => panic!("background has no layer mask"),
        }
    }

    /// `[1, 1, h, w]` tensor for one foreground class.
    pub fn tensor<T: Float>(&self, k: usize) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.classes[k].iter().map(|&v| T::of(v)).collect())
    }

    /// A mask covering every position with the first class only.
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, classes: [vec![1.0; height * width], vec![0.0; height * width]] }
    }

    pub fn area(&self, k: usize) -> f64 {
        self.classes[k].iter().sum()
    }
}

/// Per-layer soft masks `S_{l,c}`.
pub type LayerMaskSet = BTreeMap<Tap, LayerMask>;

/// Feature blocks keyed by tap. Every block has shape `[1, N_l, h_l, w_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T: Float> {
    layers: BTreeMap<Tap, Tensor<T>>,
}

impl<T: Float> Default for FeatureStack<T> {
    fn default() -> Self {
        Self { layers: BTreeMap::new() }
    }
}

impl<T: Float> FeatureStack<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tap: Tap, block: Tensor<T>) {
        assert_eq!(block.shape().len(), 4, "feature blocks are [1, N, h, w]");
        self.layers.insert(tap, block);
    }

    pub fn get(&self, tap: Tap) -> Result<&Tensor<T>> {
        self.layers.get(&tap).ok_or_else(|| Error::MissingLayer(tap.name().into()))
    }

    pub fn taps(&self) -> impl Iterator<Item = Tap> + '_ {
        self.layers.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tap, &Tensor<T>)> {
        self.layers.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Spatial size `(h, w)` of every layer.
    pub fn sizes(&self) -> BTreeMap<Tap, (usize, usize)> {
        self.layers.iter().map(|(&k, v)| (k, (v.shape()[2], v.shape()[3]))).collect()
    }

    pub fn map(&self, f: impl Fn(Tap, &Tensor<T>) -> Tensor<T>) -> Self {
        Self { layers: self.layers.iter().map(|(&k, v)| (k, f(k, v))).collect() }
    }
}

/// `N_l x N_l` Gram matrix of one layer, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub tap: Option<Tap>,
    pub n: usize,
    pub data: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                let (a, b) = (self.get(i, j), self.get(j, i));
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
            }
        }
        worst
    }
}

/// Source domain of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Synthetic,
    Refined,
    Real,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Synthetic => "synthetic",
            Domain::Refined => "refined",
            Domain::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "synthetic" => Some(Domain::Synthetic),
            "refined" => Some(Domain::Refined),
            "real" => Some(Domain::Real),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gaze direction as a unit vector `g = (cos p sin y, sin p, cos p cos y)`
/// together with its yaw/pitch angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaze {
    yaw: f64,
    pitch: f64,
    vector: [f64; 3],
}

impl Gaze {
    pub fn from_yaw_pitch(yaw: f64, pitch: f64) -> Self {
        let vector = [pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos()];
        Self { yaw, pitch, vector }
    }

    pub fn from_degrees(yaw_deg: f64, pitch_deg: f64) -> Self {
        Self::from_yaw_pitch(yaw_deg.to_radians(), pitch_deg.to_radians())
    }

    /// From a unit vector; the norm must be 1 within `1e-9`.
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitInput(norm));
        }
        let pitch = v[1].clamp(-1.0, 1.0).asin();
        let yaw = v[0].atan2(v[2]);
        Ok(Self { yaw, pitch, vector: v })
    }

    /// Normalise an arbitrary non-zero vector.
    pub fn normalized(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return None;
        }
        Self::from_vector([v[0] / norm, v[1] / norm, v[2] / norm]).ok()
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw_pitch(&self) -> (f64, f64) {
        (self.yaw, self.pitch)
    }

    pub fn vector(&self) -> [f64; 3] {
        self.vector
    }
}

/// An image with its gaze label.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    pub image: ImageTensor,
    pub gaze: Gaze,
    pub domain: Domain,
    pub mask: Option<ClassMask>,
}
