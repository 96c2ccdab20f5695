//! Small raster utilities: area resampling, Gaussian blur, grayscale and
//! integer-factor up/down sampling.

use crate::error::Result;
use crate::types::{ClassMask, ImageTensor};

/// Row-stochastic weights mapping `src` samples onto `dst` samples by exact
/// interval overlap. Returned as `(first_src_index, weights)` per output.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let ws = (first..last)
                .map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    overlap / scale
                })
                .collect();
            (first, ws)
        })
        .collect()
}

/// Resample one `h x w` plane to `nh x nw` by area averaging. Same-size
/// resampling returns the input unchanged; integer upscaling replicates.
pub fn resize_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    if (h, w) == (nh, nw) {
        return src.to_vec();
    }
    let wy = area_weights(h, nh);
    let wx = area_weights(w, nw);
    let mut rows = vec![0.0f64; h * nw];
    for y in 0..h {
        for (j, (first, ws)) in wx.iter().enumerate() {
            rows[y * nw + j] = ws.iter().enumerate().map(|(k, &a)| a * src[y * w + first + k] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; nh * nw];
    for (i, (first, ws)) in wy.iter().enumerate() {
        for x in 0..nw {
            let v: f64 = ws.iter().enumerate().map(|(k, &a)| a * rows[(first + k) * nw + x]).sum();
            out[i * nw + x] = v as f32;
        }
    }
    out
}

pub fn resize(image: &ImageTensor, nh: usize, nw: usize) -> Result<ImageTensor> {
    if (image.height(), image.width()) == (nh, nw) {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(3 * nh * nw);
    for c in 0..3 {
        data.extend(resize_plane(image.plane(c), image.height(), image.width(), nh, nw).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ImageTensor::new(nh, nw, data)
}

/// Nearest-neighbour resampling of a label mask, sampling at pixel centres.
pub fn resize_mask(mask: &ClassMask, nh: usize, nw: usize) -> Result<ClassMask> {
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (nh, nw) {
        return Ok(mask.clone());
    }
    let labels = (0..nh * nw)
        .map(|i| {
            let y = (((i / nw) as f64 + 0.5) * h as f64 / nh as f64) as usize;
            let x = (((i % nw) as f64 + 0.5) * w as f64 / nw as f64) as usize;
            mask.labels()[y.min(h - 1) * w + x.min(w - 1)]
        })
        .collect();
    ClassMask::new(nh, nw, labels)
}

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one plane with edge replication. `sigma <= 0`
/// returns the input unchanged.
pub fn blur_plane(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(i, &kv)| kv * src[y * w + clampi(x as i64 + i as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(i, &kv)| kv * tmp[clampi(y as i64 + i as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

/// Luma plane (Rec. 601 weights), row-major.
pub fn grayscale(image: &ImageTensor) -> Vec<f32> {
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(image: &ImageTensor) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    ImageTensor::from_fn(2 * h, 2 * w, |c, y, x| image.get(c, y / 2, x / 2)).expect("upsampled image is valid")
}

/// 2x2 average pooling (even sides only).
pub fn downsample2(image: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (image.height() / 2, image.width() / 2);
    ImageTensor::from_fn(h, w, |c, y, x| {
        0.25 * (image.get(c, 2 * y, 2 * x) + image.get(c, 2 * y + 1, 2 * x) + image.get(c, 2 * y, 2 * x + 1) + image.get(c, 2 * y + 1, 2 * x + 1))
    })
}
