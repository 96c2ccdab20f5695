//! Appearance-based gaze estimators and the benchmark harness.
//!
//! Three estimators share one interface ([`GazeEstimator`]):
//!
//! * k-nearest neighbours on raw pixel vectors, predicting the normalised
//!   mean of the neighbours' gaze vectors;
//! * a random forest of regression trees on pixel vectors, predicting the
//!   normalised mean of the per-tree outputs;
//! * a small CNN (two convolutions, two dense layers) regressing the gaze
//!   vector directly.
//!
//! Images are reduced by [`featurize`] to a grayscale vector at a fixed
//! input size, 9 rows by 15 columns by default, stored row-major.
//! [`benchmark`] trains every estimator on every training set, scores it on
//! one test set and emits a report in the CSV layout of [`REPORT_HEADER`].

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use synthrefine_tape::{Adam, Bound, Conv, Dense, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::eyegen::load_manifest;
use crate::imageops::{grayscale, resize_plane};
use crate::rng;
use crate::types::{Gaze, GazeSample, ImageTensor};

/// Default feature rows.
pub const FEATURE_HEIGHT: usize = 9;
/// Default feature columns.
pub const FEATURE_WIDTH: usize = 15;
/// Default neighbour count.
pub const DEFAULT_K: usize = 50;
/// Default forest size.
pub const DEFAULT_TREES: usize = 20;
/// Columns of the benchmark CSV.
pub const REPORT_HEADER: [&str; 6] = ["estimator", "train_set", "test_set", "n", "mean_error_deg", "runtime_s"];
/// Published baselines without an implementation here. The report can carry
/// placeholder rows for them so external numbers can be filled in by hand.
pub const RESERVED_BASELINES: [&str; 2] = ["ALR", "SVR"];

/// Angle between two unit gaze vectors in degrees, in `[0, 180]`.
pub fn angular_error(g1: [f64; 3], g2: [f64; 3]) -> Result<f64> {
    for g in [g1, g2] {
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::NonUnitInput(norm));
        }
    }
    // atan2(|g1 x g2|, g1 . g2) equals arccos of the clamped dot product for
    // unit inputs and stays exact near 0 and 180 degrees.
    let dot = g1[0] * g2[0] + g1[1] * g2[1] + g1[2] * g2[2];
    let c = [g1[1] * g2[2] - g1[2] * g2[1], g1[2] * g2[0] - g1[0] * g2[2], g1[0] * g2[1] - g1[1] * g2[0]];
    let cross = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    Ok(cross.atan2(dot).to_degrees())
}

/// Grayscale pixel vector of `image` resampled to `height x width`, in
/// row-major order (`index = y * width + x`), values clamped to `[0, 1]`.
///
/// The image is converted to grayscale first and the single plane is area
/// resampled, so any target size of at least 1 x 1 is accepted.
pub fn featurize_at(image: &ImageTensor, height: usize, width: usize) -> Result<Vec<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParams(format!("feature size {height}x{width}")));
    }
    let gray = grayscale(image);
    let small = resize_plane(&gray, image.height(), image.width(), height, width);
    Ok(small.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
}

/// [`featurize_at`] at the default 9 x 15 input size.
pub fn featurize(image: &ImageTensor) -> Result<Vec<f64>> {
    featurize_at(image, FEATURE_HEIGHT, FEATURE_WIDTH)
}

/// Estimator family and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorSpec {
    Knn { k: usize },
    Forest(ForestParams),
    Cnn(CnnParams),
}

impl EstimatorSpec {
    pub fn knn(k: usize) -> Self {
        Self::Knn { k }
    }

    pub fn forest(trees: usize, seed: u64) -> Self {
        Self::Forest(ForestParams { trees, seed, ..Default::default() })
    }

    pub fn cnn(seed: u64) -> Self {
        Self::Cnn(CnnParams { seed, ..Default::default() })
    }

    /// Short name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Knn { .. } => "knn",
            Self::Forest(_) => "rf",
            Self::Cnn(_) => "cnn",
        }
    }

    /// Parse `knn`, `knn:K`, `rf`, `rf:TREES` or `cnn`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let count = |default: usize| -> Result<usize> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| Error::InvalidParams(format!("estimator `{s}`"))),
            }
        };
        match name {
            "knn" => Ok(Self::knn(count(DEFAULT_K)?)),
            "rf" => Ok(Self::forest(count(DEFAULT_TREES)?, seed)),
            "cnn" if arg.is_none() => Ok(Self::cnn(seed)),
            _ => Err(Error::InvalidParams(format!("estimator `{s}`"))),
        }
    }
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self::knn(DEFAULT_K)
    }
}

/// Random forest hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `sqrt(dimension)`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { trees: DEFAULT_TREES, max_depth: 16, min_leaf: 2, features_per_split: None, seed: 0 }
    }
}

/// CNN training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    /// Input rows and columns.
    pub input: (usize, usize),
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop once validation error has not improved for this many epochs.
    pub patience: usize,
    pub max_epochs: usize,
    /// Fraction of the training set held out for the stopping rule.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CnnParams {
    fn default() -> Self {
        Self { input: (18, 30), learning_rate: 1e-3, batch_size: 32, patience: 5, max_epochs: 200, validation_fraction: 0.1, seed: 0 }
    }
}

/// k-nearest-neighbour state: every training vector and label.
#[derive(Clone, Debug)]
pub struct Knn {
    k: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<[f64; 3]>,
}

impl Knn {
    /// Indices of the `k` nearest training vectors, nearest first. Equal
    /// distances are ordered by training index.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self.features.iter().enumerate().map(|(i, f)| (sq_dist(f, x), i)).collect();
        let k = self.k.min(d.len());
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d[..k].iter().map(|&(_, i)| i).collect()
    }

    fn predict(&self, x: &[f64]) -> [f64; 3] {
        let nn = self.neighbors(x);
        let mut s = [0.0; 3];
        for &i in &nn {
            add3(&mut s, &self.labels[i]);
        }
        // Zero-mean guard: opposite labels can cancel, then the nearest
        // neighbour decides.
        normalize3(s).unwrap_or(self.labels[nn[0]])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn add3(acc: &mut [f64; 3], v: &[f64; 3]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Unit vector along `v`; vectors already unit within `1e-12` are returned
/// unchanged so single labels pass through bit-exactly.
fn normalize3(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if (n - 1.0).abs() <= 1e-12 {
        return Some(v);
    }
    (n > 1e-9 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

#[derive(Clone, Debug)]
enum Node {
    Leaf([f64; 3]),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Regression tree over pixel vectors with a 3-vector output.
#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> [f64; 3] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [[f64; 3]],
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn mean(&self, idx: &[usize]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for &i in idx {
            add3(&mut s, &self.y[i]);
        }
        s.map(|v| v / idx.len() as f64)
    }

    /// Grow a node on `idx` and return its index.
    fn grow(&mut self, idx: &mut [usize], depth: usize, r: &mut rng::Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.mean(idx)));
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx, r) else {
            return id;
        };
        idx.sort_by(|&a, &b| (self.x[a][feature] > threshold).cmp(&(self.x[b][feature] > threshold)));
        let cut = idx.partition_point(|&i| self.x[i][feature] <= threshold);
        let (l, rt) = idx.split_at_mut(cut);
        let left = self.grow(l, depth + 1, r);
        let right = self.grow(rt, depth + 1, r);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    /// Split minimising the summed squared error of both children over a
    /// random feature subset; `None` if no split improves on the parent.
    fn best_split(&self, idx: &[usize], r: &mut rng::Rng) -> Option<(usize, f64)> {
        let dim = self.x[0].len();
        let n = idx.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut total = [0.0; 3];
        let mut total_sq = 0.0;
        for &i in idx {
            add3(&mut total, &self.y[i]);
            total_sq += self.y[i].iter().map(|v| v * v).sum::<f64>();
        }
        let parent = total_sq - total.iter().map(|s| s * s).sum::<f64>() / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let features = rand::seq::index::sample(r, dim, self.mtry.min(dim));
        let mut order: Vec<usize> = idx.to_vec();
        for f in features.iter() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = [0.0; 3];
            for (pos, &i) in order.iter().enumerate().take(n - 1) {
                add3(&mut left, &self.y[i]);
                let nl = pos + 1;
                let (xa, xb) = (self.x[i][f], self.x[order[pos + 1]][f]);
                if nl < min_leaf || n - nl < min_leaf || xa == xb {
                    continue;
                }
                let nr = (n - nl) as f64;
                let gain = left.iter().map(|s| s * s).sum::<f64>() / nl as f64
                    + (0..3).map(|c| (total[c] - left[c]).powi(2)).sum::<f64>() / nr;
                // Children SSE = total_sq - gain.
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (xa + xb)));
                }
            }
        }
        best.filter(|&(g, _, _)| total_sq - g < parent - 1e-12).map(|(_, f, t)| (f, t))
    }
}

/// Bagged regression trees.
#[derive(Clone, Debug)]
pub struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    fn fit(x: &[Vec<f64>], y: &[[f64; 3]], params: &ForestParams) -> Result<Self> {
        if params.trees == 0 {
            return Err(Error::InvalidParams("forest needs at least one tree".into()));
        }
        let dim = x[0].len();
        let mtry = params.features_per_split.unwrap_or(((dim as f64).sqrt().round() as usize).max(1));
        let trees = (0..params.trees)
            .map(|t| {
                let mut r = rng::item_rng(params.seed, rng::stream::ESTIMATOR, t as u64);
                let mut idx: Vec<usize> = (0..x.len()).map(|_| r.random_range(0..x.len())).collect();
                let mut b = TreeBuilder { x, y, params, mtry, nodes: Vec::new() };
                b.grow(&mut idx, 0, &mut r);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    fn predict(&self, x: &[f64]) -> [f64; 3] {
        let outs: Vec<[f64; 3]> = self.trees.iter().map(|t| t.predict(x)).collect();
        let mut s = [0.0; 3];
        for o in &outs {
            add3(&mut s, o);
        }
        normalize3(s).or_else(|| outs.iter().find_map(|&o| normalize3(o))).unwrap_or([0.0, 0.0, 1.0])
    }
}

/// Two convolutions and two dense layers:
/// `conv5(1->16) relu pool, conv3(16->32) relu pool, dense(->32) relu, dense(->3)`.
/// At the default 18 x 30 input this has 46,147 parameters.
pub struct GazeCnn {
    pub store: ParamStore<f32>,
    input: (usize, usize),
    conv1: Conv,
    conv2: Conv,
    fc1: Dense,
    fc2: Dense,
    flat: usize,
}

/// Hidden width of the first dense layer.
pub const CNN_HIDDEN: usize = 32;

impl GazeCnn {
    pub fn new(input: (usize, usize), seed: u64) -> Self {
        let mut r = rng::item_rng(seed, rng::stream::ESTIMATOR, u64::MAX);
        let mut store = ParamStore::new();
        let conv1 = Conv::new(&mut store, "conv1", 1, 16, 5, 1, &mut r);
        let conv2 = Conv::new(&mut store, "conv2", 16, 32, 3, 1, &mut r);
        let (h, w) = (input.0.div_ceil(2).div_ceil(2), input.1.div_ceil(2).div_ceil(2));
        let flat = 32 * h * w;
        let fc1 = Dense::new(&mut store, "fc1", flat, CNN_HIDDEN, &mut r);
        let fc2 = Dense::new(&mut store, "fc2", CNN_HIDDEN, 3, &mut r);
        Self { store, input, conv1, conv2, fc1, fc2, flat }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn forward(&self, tape: &Tape<f32>, p: &Bound, x: Var) -> Var {
        let n = tape.shape(x)[0];
        let h = tape.avg_pool2(tape.relu(self.conv1.forward(tape, p, x)));
        let h = tape.avg_pool2(tape.relu(self.conv2.forward(tape, p, h)));
        let h = tape.reshape(h, &[n, self.flat]);
        let h = tape.relu(self.fc1.forward(tape, p, h));
        self.fc2.forward(tape, p, h)
    }

    fn batch(&self, xs: &[&Vec<f64>]) -> Tensor<f32> {
        let (h, w) = self.input;
        let data = xs.iter().flat_map(|v| v.iter().map(|&p| p as f32)).collect();
        Tensor::from_vec(&[xs.len(), 1, h, w], data)
    }

    fn predict_many(&self, xs: &[&Vec<f64>]) -> Vec<[f64; 3]> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(self.batch(xs));
        let out = tape.value(self.forward(&tape, &p, x));
        out.data().chunks(3).map(|o| normalize3([o[0] as f64, o[1] as f64, o[2] as f64]).unwrap_or([0.0, 0.0, 1.0])).collect()
    }

    fn mean_error(&self, xs: &[&Vec<f64>], ys: &[[f64; 3]]) -> f64 {
        let preds: Vec<[f64; 3]> = xs.chunks(256).flat_map(|c| self.predict_many(c)).collect();
        preds.iter().zip(ys).map(|(p, y)| angular_error(*p, *y).unwrap_or(180.0)).sum::<f64>() / ys.len() as f64
    }

    /// Minibatch Adam on the squared error to the unit gaze vector; keeps the
    /// weights of the best validation epoch. Returns per-epoch validation
    /// errors in degrees.
    fn fit(&mut self, x: &[Vec<f64>], y: &[[f64; 3]], params: &CnnParams) -> Result<Vec<f64>> {
        let mut r = rng::item_rng(params.seed, rng::stream::ESTIMATOR, u64::MAX - 1);
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.shuffle(&mut r);
        let n_val = ((x.len() as f64 * params.validation_fraction).round() as usize).min(x.len() - 1);
        let (val, train) = if n_val == 0 { (order.clone(), order) } else { (order[..n_val].to_vec(), order[n_val..].to_vec()) };
        let vx: Vec<&Vec<f64>> = val.iter().map(|&i| &x[i]).collect();
        let vy: Vec<[f64; 3]> = val.iter().map(|&i| y[i]).collect();
        let mut opt = Adam::new(&self.store, params.learning_rate, 0.9, 0.999);
        let mut best = (f64::INFINITY, self.store.clone());
        let mut since_best = 0;
        let mut history = Vec::new();
        let mut train = train;
        for epoch in 1..=params.max_epochs {
            train.shuffle(&mut r);
            for chunk in train.chunks(params.batch_size.max(1)) {
                let tape = Tape::new();
                let p = self.store.bind(&tape);
                let xb = tape.constant(self.batch(&chunk.iter().map(|&i| &x[i]).collect::<Vec<_>>()));
                let target: Vec<f32> = chunk.iter().flat_map(|&i| y[i].map(|v| v as f32)).collect();
                let t = tape.constant(Tensor::from_vec(&[chunk.len(), 3], target));
                let loss = tape.mean(tape.square(tape.sub(self.forward(&tape, &p, xb), t)));
                let l = tape.scalar(loss) as f64;
                if !l.is_finite() {
                    return Err(Error::DivergenceDetected(format!("gaze CNN loss {l} in epoch {epoch}")));
                }
                let grads = tape.backward(loss);
                opt.step(&mut self.store, &p, &grads);
            }
            let err = self.mean_error(&vx, &vy);
            log::debug!("gaze CNN epoch {epoch}: validation error {err:.3} deg");
            history.push(err);
            if err < best.0 {
                best = (err, self.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= params.patience {
                    break;
                }
            }
        }
        self.store = best.1;
        Ok(history)
    }
}

enum Trained {
    Knn(Knn),
    Forest(Forest),
    Cnn(Rc<GazeCnn>),
}

/// A gaze estimator, untrained until [`GazeEstimator::fit`] succeeds.
pub struct GazeEstimator {
    spec: EstimatorSpec,
    input: (usize, usize),
    state: Option<Trained>,
    history: Vec<f64>,
}

impl GazeEstimator {
    /// Untrained estimator. k-NN and forests use the 9 x 15 default input;
    /// the CNN uses the size in its parameters.
    pub fn new(spec: EstimatorSpec) -> Self {
        let input = match &spec {
            EstimatorSpec::Cnn(p) => p.input,
            _ => (FEATURE_HEIGHT, FEATURE_WIDTH),
        };
        Self { spec, input, state: None, history: Vec::new() }
    }

    /// Override the feature size (rows, columns) of a k-NN or forest.
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        if let EstimatorSpec::Cnn(p) = &mut self.spec {
            p.input = (height, width);
        }
        self.input = (height, width);
        self
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input
    }

    pub fn is_trained(&self) -> bool {
        self.state.is_some()
    }

    /// Per-epoch validation error of the CNN; empty for other kinds.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        featurize_at(image, self.input.0, self.input.1)
    }

    /// The k-NN state, if this is a trained k-NN.
    pub fn knn(&self) -> Option<&Knn> {
        match &self.state {
            Some(Trained::Knn(k)) => Some(k),
            _ => None,
        }
    }

    pub fn fit(&mut self, train: &[GazeSample]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let x = train.iter().map(|s| self.features(&s.image)).collect::<Result<Vec<_>>>()?;
        let y: Vec<[f64; 3]> = train.iter().map(|s| s.gaze.vector()).collect();
        self.history.clear();
        let state = match &self.spec {
            EstimatorSpec::Knn { k } => {
                if *k == 0 {
                    return Err(Error::InvalidParams("k must be at least 1".into()));
                }
                Trained::Knn(Knn { k: *k, features: x, labels: y })
            }
            EstimatorSpec::Forest(p) => Trained::Forest(Forest::fit(&x, &y, p)?),
            EstimatorSpec::Cnn(p) => {
                let mut net = GazeCnn::new(self.input, p.seed);
                self.history = net.fit(&x, &y, p)?;
                Trained::Cnn(Rc::new(net))
            }
        };
        self.state = Some(state);
        Ok(())
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Gaze> {
        Ok(self.predict_all(std::slice::from_ref(image))?.remove(0))
    }

    /// Predictions for several images; unit vectors within `1e-9`.
    pub fn predict_all(&self, images: &[ImageTensor]) -> Result<Vec<Gaze>> {
        let state = self.state.as_ref().ok_or(Error::NotTrained)?;
        let x = images.iter().map(|im| self.features(im)).collect::<Result<Vec<_>>>()?;
        let raw: Vec<[f64; 3]> = match state {
            Trained::Knn(k) => x.iter().map(|v| k.predict(v)).collect(),
            Trained::Forest(f) => x.iter().map(|v| f.predict(v)).collect(),
            Trained::Cnn(net) => {
                let refs: Vec<&Vec<f64>> = x.iter().collect();
                refs.chunks(256).flat_map(|c| net.predict_many(c)).collect()
            }
        };
        raw.into_iter().map(|v| Gaze::from_vector(v).or_else(|_| Gaze::normalized(v).ok_or(Error::NonUnitInput(0.0)))).collect()
    }

    /// Mean angular error in degrees against the labels of `test`.
    pub fn mean_error(&self, test: &[GazeSample]) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let images: Vec<ImageTensor> = test.iter().map(|s| s.image.clone()).collect();
        let preds = self.predict_all(&images)?;
        let mut total = 0.0;
        for (p, s) in preds.iter().zip(test) {
            total += angular_error(p.vector(), s.gaze.vector())?;
        }
        Ok(total / test.len() as f64)
    }
}

/// Mean prediction shift in degrees between raw images and their refined
/// counterparts. Pairs must align one-to-one with identical gaze labels.
pub fn label_preservation(estimator: &GazeEstimator, raw: &[GazeSample], refined: &[GazeSample]) -> Result<f64> {
    if raw.len() != refined.len() {
        return Err(Error::PairMismatch(format!("{} raw samples but {} refined", raw.len(), refined.len())));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, (a, b)) in raw.iter().zip(refined).enumerate() {
        let (ga, gb) = (a.gaze.vector(), b.gaze.vector());
        if ga.iter().zip(&gb).any(|(x, y)| (x - y).abs() > 1e-9) {
            return Err(Error::PairMismatch(format!("pair {i} carries different gaze labels")));
        }
    }
    let pa = estimator.predict_all(&raw.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let pb = estimator.predict_all(&refined.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let mut total = 0.0;
    for (a, b) in pa.iter().zip(&pb) {
        total += angular_error(a.vector(), b.vector())?;
    }
    Ok(total / raw.len() as f64)
}

/// One benchmark result.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub estimator: String,
    pub train_set: String,
    pub test_set: String,
    pub n: usize,
    /// `None` only for reserved placeholder rows.
    pub mean_error_deg: Option<f64>,
    pub runtime_s: f64,
}

/// Benchmark rows ordered by estimator, then training set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    /// Append empty rows for [`RESERVED_BASELINES`] against `test_set`.
    pub fn with_reserved_rows(mut self, test_set: &str) -> Self {
        for name in RESERVED_BASELINES {
            self.rows.push(BenchmarkRow {
                estimator: name.into(),
                train_set: "published".into(),
                test_set: test_set.into(),
                n: 0,
                mean_error_deg: None,
                runtime_s: 0.0,
            });
        }
        self
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let err = r.mean_error_deg.map(|e| format!("{e:.6}")).unwrap_or_default();
            w.write_record([r.estimator.clone(), r.train_set.clone(), r.test_set.clone(), r.n.to_string(), err, format!("{:.3}", r.runtime_s)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, estimator: &str, train_set: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.train_set == train_set)
    }
}

/// A named sample set.
pub struct NamedSet<'a> {
    pub name: String,
    pub samples: &'a [GazeSample],
}

/// Train each estimator on each training set and score it on `test`.
///
/// Work is spread over up to `jobs` threads; the row order is fixed as
/// estimators in the given order, then training sets in the given order.
pub fn benchmark(train_sets: &[NamedSet<'_>], test: &NamedSet<'_>, estimators: &[EstimatorSpec], jobs: usize) -> Result<BenchmarkReport> {
    benchmark_sized(train_sets, test, estimators, jobs, None)
}

/// [`benchmark`] with every estimator's input size overridden when `input`
/// is given.
pub fn benchmark_sized(
    train_sets: &[NamedSet<'_>],
    test: &NamedSet<'_>,
    estimators: &[EstimatorSpec],
    jobs: usize,
    input: Option<(usize, usize)>,
) -> Result<BenchmarkReport> {
    if test.samples.is_empty() || train_sets.iter().any(|s| s.samples.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let tasks: Vec<(usize, usize)> = (0..estimators.len()).flat_map(|e| (0..train_sets.len()).map(move |t| (e, t))).collect();
    let results: Mutex<Vec<Option<Result<BenchmarkRow>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run = |(e, t): (usize, usize)| -> Result<BenchmarkRow> {
        let start = Instant::now();
        let mut est = GazeEstimator::new(estimators[e].clone());
        if let Some((h, w)) = input {
            est = est.with_input_size(h, w);
        }
        est.fit(train_sets[t].samples)?;
        let err = est.mean_error(test.samples)?;
        Ok(BenchmarkRow {
            estimator: estimators[e].name().into(),
            train_set: train_sets[t].name.clone(),
            test_set: test.name.clone(),
            n: test.samples.len(),
            mean_error_deg: Some(err),
            runtime_s: start.elapsed().as_secs_f64(),
        })
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let row = run(tasks[i]);
                results.lock().expect("benchmark worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = results.into_inner().expect("benchmark worker panicked").into_iter().map(|r| r.expect("every task ran")).collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport { rows })
}

/// [`benchmark`] over manifests on disk. Sets are named by their paths as
/// given.
pub fn benchmark_manifests(train: &[PathBuf], test: &Path, estimators: &[EstimatorSpec], jobs: usize) -> Result<BenchmarkReport> {
    let train_data = train.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>>>()?;
    let test_data = load_manifest(test)?;
    let sets: Vec<NamedSet<'_>> = train.iter().zip(&train_data).map(|(p, d)| NamedSet { name: p.display().to_string(), samples: d }).collect();
    benchmark(&sets, &NamedSet { name: test.display().to_string(), samples: &test_data }, estimators, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_parameter_count() {
        assert_eq!(GazeCnn::new((18, 30), 0).num_params(), 46_147);
    }

    #[test]
    fn estimator_names_parse() {
        assert_eq!(EstimatorSpec::parse("knn:5", 0).unwrap(), EstimatorSpec::knn(5));
        assert_eq!(EstimatorSpec::parse("knn", 0).unwrap(), EstimatorSpec::knn(50));
        assert_eq!(EstimatorSpec::parse("rf", 3).unwrap(), EstimatorSpec::forest(20, 3));
        assert!(EstimatorSpec::parse("svr", 0).is_err());
        assert!(EstimatorSpec::parse("knn:0", 0).is_err());
    }
}
