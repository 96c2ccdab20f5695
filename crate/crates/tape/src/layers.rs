use rand::Rng;

use crate::{Bound, Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Square-kernel convolution registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal initialised convolution with "same" padding for stride 1.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn zeroed<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1: doubles the
/// spatial size exactly.
#[derive(Clone, Copy, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // Each output pixel receives 4 of the 16 taps per input channel.
        let std = (2.0 / (cin * 4) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cin, cout, 4, 4], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2, 1)
    }
}

/// Fully connected layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let std = (2.0 / inp as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[out, inp], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}
