//! Raw forward/backward kernels over flat NCHW buffers.

use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold one image `[C, H, W]` into `[C*k*k, OH*OW]`.
pub fn im2col<T: Float>(src: &[T], g: ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.channels {
        let img = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &img[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `[C*k*k, OH*OW]` back into `[C, H, W]`.
pub fn col2im<T: Float>(cols: &[T], g: ConvGeom, dst: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let plane = oh * ow;
    for c in 0..g.channels {
        let img = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut img[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// `y = conv(x, w) + b`, weights `[O, C, k, k]`.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(wc, c, "conv2d: input has {c} channels, weight expects {wc}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input {h}x{wd} smaller than kernel {k}");
    let g = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); n * o * plane];
    for i in 0..n {
        im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], g, &mut cols);
        let dst = &mut out[i * o * plane..(i + 1) * o * plane];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(o, rows, plane, T::one(), w.data(), row_major(rows), &cols, row_major(plane), beta, dst, row_major(plane));
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to `(x, w, b)`.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let g = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * plane];
    let mut gw = vec![T::zero(); o * rows];
    let mut gb = vec![T::zero(); o];
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    for i in 0..n {
        let gyi = &gy.data()[i * o * plane..(i + 1) * o * plane];
        for (oc, chunk) in gyi.chunks(plane).enumerate() {
            gb[oc] += chunk.iter().copied().sum();
        }
        im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], g, &mut cols);
        // gw += gy_i [o, plane] * cols^T [plane, rows]
        T::gemm(o, plane, rows, T::one(), gyi, row_major(plane), &cols, transposed(plane), T::one(), &mut gw, row_major(rows));
        if let Some(gx) = gx.as_mut() {
            // gcols = w^T [rows, o] * gy_i [o, plane]
            T::gemm(rows, o, plane, T::one(), w.data(), transposed(rows), gyi, row_major(plane), T::zero(), &mut cols, row_major(plane));
            col2im(&cols, g, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
        }
    }
    (
        gx.map(|d| Tensor::from_vec(x.shape(), d)),
        Tensor::from_vec(w.shape(), gw),
        Tensor::from_vec(&[o], gb),
    )
}

/// Transposed convolution, weights `[C_in, C_out, k, k]`; the exact adjoint of
/// [`conv2d`] with the same `(k, stride, pad)`.
pub fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, k, _) = w.dims4();
    assert_eq!(wci, ci, "conv_transpose2d: input has {ci} channels, weight expects {wci}");
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let g = ConvGeom { channels: co, height: oh, width: ow, kernel: k, stride, pad };
    debug_assert_eq!(g.out_hw(), (h, wd));
    let rows = g.rows();
    let plane = h * wd;
    let mut cols = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); n * co * oh * ow];
    for i in 0..n {
        let xi = &x.data()[i * ci * plane..(i + 1) * ci * plane];
        // cols = w^T [rows, ci] * x_i [ci, plane]
        T::gemm(rows, ci, plane, T::one(), w.data(), transposed(rows), xi, row_major(plane), T::zero(), &mut cols, row_major(plane));
        let dst = &mut out[i * co * oh * ow..(i + 1) * co * oh * ow];
        col2im(&cols, g, dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[oc]);
            }
        }
    }
    Tensor::from_vec(&[n, co, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, k, _) = w.dims4();
    let (_, _, oh, ow) = gy.dims4();
    let g = ConvGeom { channels: co, height: oh, width: ow, kernel: k, stride, pad };
    let rows = g.rows();
    let plane = h * wd;
    let mut cols = vec![T::zero(); rows * plane];
    let mut gw = vec![T::zero(); ci * rows];
    let mut gb = vec![T::zero(); co];
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    for i in 0..n {
        let gyi = &gy.data()[i * co * oh * ow..(i + 1) * co * oh * ow];
        for (oc, chunk) in gyi.chunks(oh * ow).enumerate() {
            gb[oc] += chunk.iter().copied().sum();
        }
        im2col(gyi, g, &mut cols);
        let xi = &x.data()[i * ci * plane..(i + 1) * ci * plane];
        // gw += x_i [ci, plane] * cols^T [plane, rows]
        T::gemm(ci, plane, rows, T::one(), xi, row_major(plane), &cols, transposed(plane), T::one(), &mut gw, row_major(rows));
        if let Some(gx) = gx.as_mut() {
            // gx_i = w [ci, rows] * cols [rows, plane]
            T::gemm(ci, rows, plane, T::one(), w.data(), row_major(rows), &cols, row_major(plane), T::zero(), &mut gx[i * ci * plane..(i + 1) * ci * plane], row_major(plane));
        }
    }
    (
        gx.map(|d| Tensor::from_vec(x.shape(), d)),
        Tensor::from_vec(w.shape(), gw),
        Tensor::from_vec(&[co], gb),
    )
}

/// 2x2 average pooling with stride 2. Odd trailing rows/columns form partial
/// windows averaged over their valid elements.
pub fn avg_pool2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                let mut cnt = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        s += src[y * w + xx];
                        cnt += 1;
                    }
                }
                dst[oy * ow + ox] = s / T::of(cnt as f64);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Float>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &gy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let cy = if 2 * (y / 2) + 1 < h { 2 } else { 1 };
            for xx in 0..w {
                let cx = if 2 * (xx / 2) + 1 < w { 2 } else { 1 };
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] / T::of((cy * cx) as f64);
            }
        }
    }
    Tensor::from_vec(x_shape, gx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn upsample2_backward<T: Float>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let ow = 2 * w;
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &gy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Tensor::from_vec(x_shape, gx)
}
