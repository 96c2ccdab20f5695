//! Style, content and photorealism losses.
//!
//! Two layers of API live here. Plain functions (`gram`, `global_style_loss`,
//! `local_style_loss`, `content_loss`, `photorealism_reg`) evaluate the terms
//! on finished feature stacks in 64-bit. [`record_objective`] records the
//! same algebra on a [`Tape`] so gradients reach the output image; refiner
//! training and the gradient checks go through it.
//!
//! Conventions:
//!
//! * `F_l` is a layer's `N_l x M_l` feature block, `G = F F^T` unnormalised.
//! * Global term per layer: `sum (G[O] - G[S])^2 / (4 N^2 M^2)`.
//! * Local term per layer: the same per foreground class `c` on masked
//!   features `F_l * S_{l,c}`, with `M_{l,c} = max(sum S_{l,c}[I], 1)` taken
//!   from the output-side (input image) mask. Output features are masked with
//!   the input image's segmentation, style features with the style image's.
//!   A class absent from either image contributes 0.
//! * Content: `sum_l alpha_l sum (F_l[O] - F_l[I])^2 / (2 N_l M_l)`.
//! * Photorealism: `sum_c V_c[O]^T L_I V_c[O]` with `L_I` the matting
//!   Laplacian of the input image.
//! * Total: `eta * style + mu * content + theta * l_m` where
//!   `style = sum_l beta_l (lambda_g l_gs^l + lambda_l l_ls^l)`, global and
//!   local terms each taken over their own configured layers.

use std::collections::BTreeMap;
use std::rc::Rc;

use synthrefine_tape::{CustomOp, Float, Tape, Tensor, Var};

use crate::config::RefinerConfig;
use crate::error::{Error, Result};
use crate::percept::PerceptualNet;
use crate::types::{FeatureStack, GramMatrix, ImageTensor, LayerMask, LayerMaskSet, Tap};

/// `G = F F^T` of a row-major `n x m` block.
pub fn gram(f: &[f64], n: usize, m: usize) -> Result<GramMatrix> {
    if f.len() != n * m {
        return Err(Error::Shape(format!("feature block of {} values is not {n}x{m}", f.len())));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = f[i * m..(i + 1) * m].iter().zip(&f[j * m..(j + 1) * m]).map(|(a, b)| a * b).sum();
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(GramMatrix { tap: None, n, data })
}

/// Gram matrix of a `[1, N, h, w]` feature block.
pub fn block_gram<T: Float>(tap: Tap, block: &Tensor<T>) -> Result<GramMatrix> {
    let (b, n, h, w) = block.dims4();
    if b != 1 {
        return Err(Error::Shape(format!("{tap}: expected a single feature block, got {:?}", block.shape())));
    }
    let f: Vec<f64> = block.data().iter().map(|v| v.as_f64()).collect();
    Ok(GramMatrix { tap: Some(tap), ..gram(&f, n, h * w)? })
}

/// Scale every channel of `[1, N, h, w]` features by a spatial mask.
pub fn masked_features<T: Float>(f: &Tensor<T>, mask: &[f64]) -> Result<Tensor<T>> {
    let (b, n, h, w) = f.dims4();
    let m = h * w;
    if b != 1 || mask.len() != m {
        return Err(Error::Shape(format!("mask of {} positions for features {:?}", mask.len(), f.shape())));
    }
    let mut out = f.data().to_vec();
    for ch in 0..n {
        for (v, &s) in out[ch * m..(ch + 1) * m].iter_mut().zip(mask) {
            *v = T::of(v.as_f64() * s);
        }
    }
    Ok(Tensor::from_vec(f.shape(), out))
}

fn squared_diff(a: &GramMatrix, b: &GramMatrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn block_dims<T: Float>(t: &Tensor<T>) -> (usize, usize) {
    let (_, n, h, w) = t.dims4();
    (n, h * w)
}

/// Unmasked style term per layer.
pub fn global_style_loss<T: Float>(o: &FeatureStack<T>, s: &FeatureStack<T>, layers: &[Tap]) -> Result<BTreeMap<Tap, f64>> {
    let mut out = BTreeMap::new();
    for &tap in layers {
        let (fo, fs) = (o.get(tap)?, s.get(tap)?);
        let (n, m) = block_dims(fo);
        if block_dims(fs).0 != n {
            return Err(Error::Shape(format!("{tap}: channel counts differ")));
        }
        let d = squared_diff(&block_gram(tap, fo)?, &block_gram(tap, fs)?);
        out.insert(tap, d / (4.0 * (n * n) as f64 * (m * m) as f64));
    }
    Ok(out)
}

fn check_mask(tap: Tap, mask: &LayerMask, block: &Tensor<impl Float>) -> Result<()> {
    let (_, _, h, w) = block.dims4();
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::MaskMismatch(format!("{tap}: mask {}x{} vs features {h}x{w}", mask.height, mask.width)));
    }
    Ok(())
}

/// Class-masked style term per layer, summed over the two foreground classes.
pub fn local_style_loss<T: Float>(
    o: &FeatureStack<T>,
    s: &FeatureStack<T>,
    o_masks: &LayerMaskSet,
    s_masks: &LayerMaskSet,
    layers: &[Tap],
) -> Result<BTreeMap<Tap, f64>> {
    let mut out = BTreeMap::new();
    for &tap in layers {
        let (fo, fs) = (o.get(tap)?, s.get(tap)?);
        let mo = o_masks.get(&tap).ok_or_else(|| Error::MaskMismatch(format!("no output mask for {tap}")))?;
        let ms = s_masks.get(&tap).ok_or_else(|| Error::MaskMismatch(format!("no style mask for {tap}")))?;
        check_mask(tap, mo, fo)?;
        check_mask(tap, ms, fs)?;
        let (n, _) = block_dims(fo);
        let mut total = 0.0;
        for k in 0..2 {
            let (ao, as_) = (mo.area(k), ms.area(k));
            if ao <= 0.0 || as_ <= 0.0 {
                continue;
            }
            let go = block_gram(tap, &masked_features(fo, &mo.classes[k])?)?;
            let gs = block_gram(tap, &masked_features(fs, &ms.classes[k])?)?;
            let m = ao.max(1.0);
            total += squared_diff(&go, &gs) / (4.0 * (n * n) as f64 * m * m);
        }
        out.insert(tap, total);
    }
    Ok(out)
}

/// `lambda_g * l_gs + lambda_l * l_ls` per layer; both maps must cover the
/// same layers.
pub fn style_loss(gs: &BTreeMap<Tap, f64>, ls: &BTreeMap<Tap, f64>, lambda_g: f64, lambda_l: f64) -> Result<BTreeMap<Tap, f64>> {
    for tap in gs.keys().chain(ls.keys()) {
        if !gs.contains_key(tap) || !ls.contains_key(tap) {
            return Err(Error::MissingLayer(tap.name().into()));
        }
    }
    Ok(gs.iter().map(|(&t, &g)| (t, lambda_g * g + lambda_l * ls[&t])).collect())
}

/// Weighted feature reconstruction term.
pub fn content_loss<T: Float>(o: &FeatureStack<T>, i: &FeatureStack<T>, alpha: &BTreeMap<Tap, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (&tap, &a) in alpha {
        let (fo, fi) = (o.get(tap)?, i.get(tap)?);
        if fo.shape() != fi.shape() {
            return Err(Error::Shape(format!("{tap}: {:?} vs {:?}", fo.shape(), fi.shape())));
        }
        if a == 0.0 {
            continue;
        }
        let (n, m) = block_dims(fo);
        let ss: f64 = fo.data().iter().zip(fi.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        total += a * ss / (2.0 * (n * m) as f64);
    }
    Ok(total)
}

/// Closed-form matting Laplacian over 3x3 windows lying fully inside the
/// image. Pixel `i` only couples to pixels within two rows and columns, so
/// each row is stored as a 5x5 stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct MattingLaplacian {
    height: usize,
    width: usize,
    eps: f64,
    stencil: Vec<f64>,
}

const STENCIL: usize = 25;

impl MattingLaplacian {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Number of pixels (matrix side).
    pub fn size(&self) -> usize {
        self.height * self.width
    }

    /// Entry `(i, j)` with pixels indexed row-major.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (yi, xi) = ((i / self.width) as i64, (i % self.width) as i64);
        let (yj, xj) = ((j / self.width) as i64, (j % self.width) as i64);
        let (dy, dx) = (yj - yi, xj - xi);
        if dy.abs() > 2 || dx.abs() > 2 {
            return 0.0;
        }
        self.stencil[i * STENCIL + ((dy + 2) * 5 + dx + 2) as usize]
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.size();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    /// `y = L v` for one plane.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut y = vec![0.0; v.len()];
        for yi in 0..h {
            for xi in 0..w {
                let i = (yi * w + xi) as usize;
                let row = &self.stencil[i * STENCIL..(i + 1) * STENCIL];
                let mut acc = 0.0;
                for dy in -2..=2 {
                    let yj = yi + dy;
                    if yj < 0 || yj >= h {
                        continue;
                    }
                    for dx in -2..=2 {
                        let xj = xi + dx;
                        if xj < 0 || xj >= w {
                            continue;
                        }
                        acc += row[((dy + 2) * 5 + dx + 2) as usize] * v[(yj * w + xj) as usize];
                    }
                }
                y[i] = acc;
            }
        }
        y
    }

    /// `v^T L v` for one plane.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

/// Build the matting Laplacian of an image from `[h*w]` channel planes.
pub fn matting_laplacian_planes(planes: [&[f64]; 3], height: usize, width: usize, eps: f64) -> Result<MattingLaplacian> {
    if height < 3 || width < 3 {
        return Err(Error::ImageTooSmall(height, width));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidWeight("matting_eps".into()));
    }
    let n = height * width;
    let mut stencil = vec![0.0; n * STENCIL];
    let win = 9.0;
    for cy in 1..height - 1 {
        for cx in 1..width - 1 {
            let idx: Vec<usize> = (0..9).map(|k| (cy + k / 3 - 1) * width + cx + k % 3 - 1).collect();
            let px: Vec<[f64; 3]> = idx.iter().map(|&p| [planes[0][p], planes[1][p], planes[2][p]]).collect();
            let mut mu = [0.0; 3];
            for p in &px {
                for c in 0..3 {
                    mu[c] += p[c] / win;
                }
            }
            let mut cov = [[0.0; 3]; 3];
            for p in &px {
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += (p[a] - mu[a]) * (p[b] - mu[b]) / win;
                    }
                }
            }
            for (a, row) in cov.iter_mut().enumerate() {
                row[a] += eps / win;
            }
            let inv = invert3(&cov);
            let centred: Vec<[f64; 3]> = px.iter().map(|p| [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]]).collect();
            let t: Vec<[f64; 3]> = centred.iter().map(|c| mat_vec(&inv, c)).collect();
            let dot = |u: &[f64; 3], v: &[f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    // Both orderings of the bilinear form, so (i, j) and (j, i)
                    // receive bitwise identical contributions.
                    let (lo, hi) = (a.min(b), a.max(b));
                    let q = 0.5 * (dot(&t[lo], &centred[hi]) + dot(&t[hi], &centred[lo]));
                    let delta = if a == b { 1.0 } else { 0.0 };
                    let (yi, xi) = ((i / width) as i64, (i % width) as i64);
                    let (yj, xj) = ((j / width) as i64, (j % width) as i64);
                    let slot = ((yj - yi + 2) * 5 + (xj - xi + 2)) as usize;
                    stencil[i * STENCIL + slot] += delta - (1.0 + q) / win;
                }
            }
        }
    }
    Ok(MattingLaplacian { height, width, eps, stencil })
}

/// Matting Laplacian of an image (window radius 1).
pub fn matting_laplacian(image: &ImageTensor, eps: f64) -> Result<MattingLaplacian> {
    let planes: Vec<Vec<f64>> = (0..3).map(|c| image.plane(c).iter().map(|&v| v as f64).collect()).collect();
    matting_laplacian_planes([&planes[0], &planes[1], &planes[2]], image.height(), image.width(), eps)
}

/// Matting Laplacian of the first sample of a `[N, 3, H, W]` tensor.
pub fn matting_laplacian_tensor<T: Float>(t: &Tensor<T>, index: usize, eps: f64) -> Result<MattingLaplacian> {
    let (_, c, h, w) = t.dims4();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|ch| t.data()[(index * 3 + ch) * plane..(index * 3 + ch + 1) * plane].iter().map(|v| v.as_f64()).collect())
        .collect();
    matting_laplacian_planes([&planes[0], &planes[1], &planes[2]], h, w, eps)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv_det = 1.0 / det;
    [
        [c00 * inv_det, (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det, (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det],
        [c01 * inv_det, (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det, (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det],
        [c02 * inv_det, (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det, (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// `sum_c V_c[O]^T L V_c[O]`.
pub fn photorealism_reg(o: &ImageTensor, lap: &MattingLaplacian) -> Result<f64> {
    if (o.height(), o.width()) != (lap.height, lap.width) {
        return Err(Error::Shape(format!("output {}x{} vs Laplacian {}x{}", o.height(), o.width(), lap.height, lap.width)));
    }
    Ok((0..3)
        .map(|c| {
            let v: Vec<f64> = o.plane(c).iter().map(|&x| x as f64).collect();
            lap.quadratic_form(&v)
        })
        .sum())
}

/// Photorealism term of a `[N, 3, H, W]` batch as a tape operation, one
/// Laplacian per sample, summed over the batch.
pub struct MattingTerm {
    pub laplacians: Vec<Rc<MattingLaplacian>>,
}

impl MattingTerm {
    fn planes<'a, T: Float>(&self, x: &'a Tensor<T>) -> impl Iterator<Item = (usize, Vec<f64>)> + 'a {
        let (_, _, h, w) = x.dims4();
        x.data().chunks(h * w).enumerate().map(|(k, p)| (k / 3, p.iter().map(|v| v.as_f64()).collect()))
    }
}

impl<T: Float> CustomOp<T> for MattingTerm {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let total: f64 = self.planes(x).map(|(b, v)| self.laplacians[b].quadratic_form(&v)).sum();
        Tensor::scalar(T::of(total))
    }

    fn backward(&self, x: &Tensor<T>, _y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let g = gy.data()[0].as_f64();
        let data = self
            .planes(x)
            .flat_map(|(b, v)| self.laplacians[b].apply(&v).into_iter().map(move |lv| T::of(2.0 * g * lv)))
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// Every loss term of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleLossTerms {
    /// Unmasked style term per global style layer.
    pub l_gs: BTreeMap<Tap, f64>,
    /// Masked style term per local style layer.
    pub l_ls: BTreeMap<Tap, f64>,
    /// `lambda_g l_gs^l + lambda_l l_ls^l` per layer (terms absent on a layer count as 0).
    pub l_style: BTreeMap<Tap, f64>,
    /// `sum_l beta_l l_gs^l` over the global layers.
    pub global_weighted: f64,
    /// `sum_l beta_l l_ls^l` over the local layers.
    pub local_weighted: f64,
    /// `lambda_g global_weighted + lambda_l local_weighted`.
    pub style_weighted: f64,
    pub content: f64,
    pub l_m: f64,
    pub total: f64,
}

/// `eta * style + mu * content + theta * l_m`.
pub fn total_loss(style_weighted: f64, content: f64, l_m: f64, cfg: &RefinerConfig) -> f64 {
    cfg.eta * style_weighted + cfg.mu * content + cfg.theta * l_m
}

impl StyleLossTerms {
    /// Assemble weighted totals from per-layer terms.
    pub fn from_parts(l_gs: BTreeMap<Tap, f64>, l_ls: BTreeMap<Tap, f64>, content: f64, l_m: f64, cfg: &RefinerConfig) -> Self {
        let global_weighted: f64 = l_gs.iter().map(|(&t, v)| cfg.style_weight(t, false) * v).sum();
        let local_weighted: f64 = l_ls.iter().map(|(&t, v)| cfg.style_weight(t, true) * v).sum();
        let mut l_style = BTreeMap::new();
        for (&t, v) in &l_gs {
            *l_style.entry(t).or_insert(0.0) += cfg.lambda_global * v;
        }
        for (&t, v) in &l_ls {
            *l_style.entry(t).or_insert(0.0) += cfg.lambda_local * v;
        }
        let style_weighted = cfg.lambda_global * global_weighted + cfg.lambda_local * local_weighted;
        let total = total_loss(style_weighted, content, l_m, cfg);
        Self { l_gs, l_ls, l_style, global_weighted, local_weighted, style_weighted, content, l_m, total }
    }

    /// Row of the loss dump: `l_gs,l_ls,l_style_weighted,content,l_m,L_total`.
    pub fn csv_fields(&self) -> [f64; 6] {
        [self.global_weighted, self.local_weighted, self.style_weighted, self.content, self.l_m, self.total]
    }
}

/// Header of the per-iteration loss dump.
pub const LOSS_CSV_HEADER: [&str; 7] = ["iter", "l_gs", "l_ls", "l_style_weighted", "content", "l_m", "L_total"];

/// Statistics of one style reference: its global Grams and, per foreground
/// class, the masked Gram and mask area.
#[derive(Clone, Debug)]
pub struct StyleTarget<T: Float> {
    pub global: BTreeMap<Tap, Tensor<T>>,
    pub local: BTreeMap<Tap, [(Tensor<T>, f64); 2]>,
}

fn gram_tensor<T: Float>(block: &Tensor<T>) -> Tensor<T> {
    let (_, n, h, w) = block.dims4();
    let m = h * w;
    let mut out = vec![T::zero(); n * n];
    T::gemm(n, m, n, T::one(), block.data(), (m as isize, 1), block.data(), (1, m as isize), T::zero(), &mut out, (n as isize, 1));
    Tensor::from_vec(&[1, n, n], out)
}

impl<T: Float> StyleTarget<T> {
    pub fn new(features: &FeatureStack<T>, masks: &LayerMaskSet, cfg: &RefinerConfig) -> Result<Self> {
        let mut global = BTreeMap::new();
        for &tap in &cfg.global_style_layers {
            global.insert(tap, gram_tensor(features.get(tap)?));
        }
        let mut local = BTreeMap::new();
        for &tap in &cfg.local_style_layers {
            let f = features.get(tap)?;
            let m = masks.get(&tap).ok_or_else(|| Error::MaskMismatch(format!("no style mask for {tap}")))?;
            check_mask(tap, m, f)?;
            let per = [0, 1].map(|k| (gram_tensor(&masked_features(f, &m.classes[k]).expect("checked")), m.area(k)));
            local.insert(tap, per);
        }
        Ok(Self { global, local })
    }
}

/// Everything the objective needs for one (input, style reference) pair.
#[derive(Clone, Debug)]
pub struct PairContext<T: Float> {
    pub style: Rc<StyleTarget<T>>,
    /// Layer masks of the input image's segmentation, at the loss resolution.
    pub input_masks: Rc<LayerMaskSet>,
    /// Input image features at the content layers.
    pub content: Rc<FeatureStack<T>>,
    pub matting: Rc<MattingLaplacian>,
}

impl<T: Float> PairContext<T> {
    /// Build from the input image tensor `[1, 3, H, W]`, its layer masks, and
    /// the style reference's features and layer masks.
    pub fn new(
        net: &PerceptualNet<T>,
        input: &Tensor<T>,
        input_masks: LayerMaskSet,
        style_features: &FeatureStack<T>,
        style_masks: &LayerMaskSet,
        cfg: &RefinerConfig,
    ) -> Result<Self> {
        let content_taps: Vec<Tap> = cfg.content_weights.keys().copied().collect();
        Ok(Self {
            style: Rc::new(StyleTarget::new(style_features, style_masks, cfg)?),
            input_masks: Rc::new(input_masks),
            content: Rc::new(net.extract_tensor(input, &content_taps)),
            matting: Rc::new(matting_laplacian_tensor(input, 0, cfg.matting_eps)?),
        })
    }
}

/// Tape handles of one recorded objective.
pub struct ObjectiveVars {
    pub total: Var,
    pub l_gs: BTreeMap<Tap, Var>,
    pub l_ls: BTreeMap<Tap, Var>,
    pub content: Var,
    pub l_m: Var,
}

fn stack_batch<T: Float>(items: Vec<Tensor<T>>) -> Tensor<T> {
    Tensor::stack(&items)
}

fn per_sample_factor<T: Float>(factors: &[f64], n: usize) -> Tensor<T> {
    let data = factors.iter().flat_map(|&f| std::iter::repeat_n(T::of(f), n * n)).collect();
    Tensor::from_vec(&[factors.len(), n, n], data)
}

/// Record the total objective for a batch of outputs `o: [B, 3, H, W]`, one
/// pair context per sample. Every term is averaged over the batch.
pub fn record_objective<T: Float>(
    tape: &Tape<T>,
    net: &PerceptualNet<T>,
    o: Var,
    pairs: &[&PairContext<T>],
    cfg: &RefinerConfig,
) -> Result<ObjectiveVars> {
    let b = tape.shape(o)[0];
    if pairs.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} pair contexts for a batch of {b}", pairs.len())));
    }
    let inv_b = 1.0 / b as f64;
    let feats = net.forward(tape, o, &cfg.loss_taps());
    let zero = tape.constant(Tensor::scalar(T::zero()));

    let mut l_gs = BTreeMap::new();
    for &tap in &cfg.global_style_layers {
        let f = feats[&tap];
        let (_, n, h, w) = tape.value(f).dims4();
        let m = (h * w) as f64;
        let g = tape.gram(f);
        let target = tape.constant(stack_batch(pairs.iter().map(|p| p.style.global[&tap].clone()).collect()));
        let d = tape.square(tape.sub(g, target));
        let v = tape.scale(tape.sum(d), inv_b / (4.0 * (n * n) as f64 * m * m));
        l_gs.insert(tap, v);
    }

    let mut l_ls = BTreeMap::new();
    for &tap in &cfg.local_style_layers {
        let f = feats[&tap];
        let (_, n, h, w) = tape.value(f).dims4();
        let mut terms = Vec::with_capacity(2);
        for k in 0..2 {
            let mut masks = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            let mut factors = Vec::with_capacity(b);
            for p in pairs {
                let mo = p.input_masks.get(&tap).ok_or_else(|| Error::MaskMismatch(format!("no input mask for {tap}")))?;
                if (mo.height, mo.width) != (h, w) {
                    return Err(Error::MaskMismatch(format!("{tap}: mask {}x{} vs features {h}x{w}", mo.height, mo.width)));
                }
                let (gs, as_) = &p.style.local[&tap][k];
                let ao = mo.area(k);
                let active = ao > 0.0 && *as_ > 0.0;
                factors.push(if active { inv_b / (4.0 * (n * n) as f64 * ao.max(1.0).powi(2)) } else { 0.0 });
                masks.push(mo.tensor::<T>(k));
                targets.push(gs.clone());
            }
            if factors.iter().all(|&f| f == 0.0) {
                continue;
            }
            let fm = tape.mul_spatial(f, tape.constant(stack_batch(masks)));
            let g = tape.gram(fm);
            let d = tape.square(tape.sub(g, tape.constant(stack_batch(targets))));
            let weighted = tape.mul(d, tape.constant(per_sample_factor(&factors, n)));
            terms.push(tape.sum(weighted));
        }
        let v = terms.into_iter().reduce(|a, c| tape.add(a, c)).unwrap_or(zero);
        l_ls.insert(tap, v);
    }

    let mut content = zero;
    for (&tap, &alpha) in &cfg.content_weights {
        if alpha == 0.0 {
            continue;
        }
        let f = feats[&tap];
        let (_, n, h, w) = tape.value(f).dims4();
        let target = stack_batch(pairs.iter().map(|p| p.content.get(tap).cloned()).collect::<Result<Vec<_>>>()?);
        let d = tape.square(tape.sub(f, tape.constant(target)));
        let v = tape.scale(tape.sum(d), alpha * inv_b / (2.0 * (n * h * w) as f64));
        content = tape.add(content, v);
    }

    let lap = MattingTerm { laplacians: pairs.iter().map(|p| p.matting.clone()).collect() };
    let l_m = tape.scale(tape.custom(o, Rc::new(lap)), inv_b);

    let mut style = zero;
    for (&tap, &v) in &l_gs {
        style = tape.add(style, tape.scale(v, cfg.lambda_global * cfg.style_weight(tap, false)));
    }
    for (&tap, &v) in &l_ls {
        style = tape.add(style, tape.scale(v, cfg.lambda_local * cfg.style_weight(tap, true)));
    }
    let total = tape.add(
        tape.add(tape.scale(style, cfg.eta), tape.scale(content, cfg.mu)),
        tape.scale(l_m, cfg.theta),
    );
    Ok(ObjectiveVars { total, l_gs, l_ls, content, l_m })
}

/// Read the recorded terms back as numbers.
pub fn read_terms<T: Float>(tape: &Tape<T>, vars: &ObjectiveVars, cfg: &RefinerConfig) -> StyleLossTerms {
    let get = |v: Var| tape.scalar(v).as_f64();
    let l_gs = vars.l_gs.iter().map(|(&t, &v)| (t, get(v))).collect();
    let l_ls = vars.l_ls.iter().map(|(&t, &v)| (t, get(v))).collect();
    StyleLossTerms::from_parts(l_gs, l_ls, get(vars.content), get(vars.l_m), cfg)
}

/// Total objective of a single output image and its gradient with respect
/// to every pixel, `o: [1, 3, H, W]`.
pub fn total_loss_with_gradient<T: Float>(
    net: &PerceptualNet<T>,
    o: &Tensor<T>,
    pair: &PairContext<T>,
    cfg: &RefinerConfig,
) -> Result<(StyleLossTerms, Tensor<T>)> {
    let tape = Tape::new();
    let ov = tape.leaf(o.clone());
    let vars = record_objective(&tape, net, ov, &[pair], cfg)?;
    let terms = read_terms(&tape, &vars, cfg);
    let mut grads = tape.backward(vars.total);
    let g = grads.take(ov).unwrap_or_else(|| Tensor::zeros(o.shape()));
    Ok((terms, g))
}
