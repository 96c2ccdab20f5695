//! Central finite-difference checks of every tape operation in 64-bit.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthrefine_tape::{CustomOp, Tape, Tensor, Var};

type T = f64;

/// Checks d loss / d input for each input tensor. `build` maps the input
/// variables to a scalar loss.
fn check(inputs: &[Tensor<T>], build: impl Fn(&Tape<T>, &[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss);
    let eval = |vals: &[Tensor<T>]| {
        let t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let l = build(&t, &vs);
        t.scalar(l)
    };
    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k} element {i}: analytic {a} vs fd {fd}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

/// Random projection to a scalar so every output element matters.
fn project(tape: &Tape<T>, y: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y);
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut r));
    tape.sum(tape.mul(y, w))
}

#[test]
fn conv2d_stride_and_padding() {
    let mut r = rng();
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, k, k], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        check(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), s, p);
            project(t, y, 1)
        });
    }
}

#[test]
fn conv_transpose2d_doubles() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    let t = Tape::new();
    let y = t.conv_transpose2d(t.constant(x.clone()), t.constant(w.clone()), None, 2, 1);
    assert_eq!(t.shape(y), vec![2, 2, 6, 8]);
    check(&[x, w, b], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1);
        project(t, y, 2)
    });
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> with shared weights.
    let mut r = rng();
    let x = Tensor::<T>::randn(&[1, 2, 6, 6], 1.0, &mut r);
    let w = Tensor::<T>::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let y = Tensor::<T>::randn(&[1, 3, 3, 3], 1.0, &mut r);
    let cx = synthrefine_tape::kernels::conv2d(&x, &w, None, 2, 1);
    // conv weight [O=3, C=2] reads as transposed-conv weight [C_in=3, C_out=2].
    let ty = synthrefine_tape::kernels::conv_transpose2d(&y, &w, None, 2, 1);
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn pooling_and_upsampling() {
    let mut r = rng();
    for &(h, w) in &[(4, 6), (5, 3), (1, 1)] {
        let x = Tensor::randn(&[2, 2, h, w], 1.0, &mut r);
        check(&[x.clone()], |t, v| project(t, t.avg_pool2(v[0]), 3));
        check(&[x], |t, v| project(t, t.upsample2(v[0]), 4));
    }
}

#[test]
fn pointwise_nonlinearities() {
    let mut r = rng();
    let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r);
    check(&[x.clone()], |t, v| project(t, t.relu(v[0]), 5));
    check(&[x.clone()], |t, v| project(t, t.leaky_relu(v[0], 0.2), 5));
    check(&[x.clone()], |t, v| project(t, t.sigmoid(v[0]), 5));
    check(&[x.clone()], |t, v| project(t, t.tanh(v[0]), 5));
    check(&[x.clone()], |t, v| project(t, t.clamp(v[0], -0.5, 0.7), 5));
    check(&[x.clone()], |t, v| project(t, t.add_scalar(t.scale(v[0], -1.5), 0.3), 5));
    check(&[x], |t, v| t.mean(t.square(v[0])));
}

#[test]
fn binary_ops() {
    let mut r = rng();
    let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r);
    check(&[a.clone(), b.clone()], |t, v| project(t, t.add(v[0], v[1]), 6));
    check(&[a.clone(), b.clone()], |t, v| project(t, t.sub(v[0], v[1]), 6));
    check(&[a, b], |t, v| project(t, t.mul(v[0], v[1]), 6));
}

#[test]
fn spatial_mask_concat_and_reshape() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut r);
    let m = Tensor::uniform(&[2, 1, 3, 4], 0.0, 1.0, &mut r);
    check(&[x.clone(), m], |t, v| project(t, t.mul_spatial(v[0], v[1]), 7));
    let y = Tensor::randn(&[2, 1, 3, 4], 1.0, &mut r);
    check(&[x.clone(), y], |t, v| project(t, t.concat(&[v[0], v[1]]), 8));
    check(&[x], |t, v| project(t, t.reshape(v[0], &[2, 36]), 9));
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 2, 3], 2.0, &mut r);
    check(&[x], |t, v| project(t, t.layer_norm(v[0], 1e-5), 10));
}

#[test]
fn linear_gradient() {
    let mut r = rng();
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    check(&[x, w, b], |t, v| project(t, t.linear(v[0], v[1], v[2]), 11));
}

#[test]
fn gram_gradient_and_values() {
    let mut r = rng();
    let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let t = Tape::<f64>::new();
    let g = t.gram(t.constant(x.clone()));
    let gv = t.value(g);
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|m| x.data()[(n * 3 + i) * 4 + m] * x.data()[(n * 3 + j) * 4 + m]).sum();
                assert!((gv.data()[(n * 3 + i) * 3 + j] - want).abs() < 1e-12);
            }
        }
    }
    check(&[x], |t, v| project(t, t.gram(v[0]), 12));
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng();
    let logits = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let labels = Rc::new(vec![0u8, 1, 2, 1, 2, 2, 0, 1]);
    let l2 = Rc::clone(&labels);
    check(&[logits.clone()], move |t, v| t.cross_entropy(v[0], Rc::clone(&l2), None));
    check(&[logits], move |t, v| t.cross_entropy(v[0], Rc::clone(&labels), Some(vec![0.5, 2.0, 3.0])));
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_k() {
    let t = Tape::<f64>::new();
    let l = t.cross_entropy(t.constant(Tensor::zeros(&[1, 3, 2, 2])), Rc::new(vec![0, 1, 2, 0]), None);
    assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-12);
}

struct Cube;

impl CustomOp<f64> for Cube {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v * v * v)
    }
    fn backward(&self, x: &Tensor<f64>, _y: &Tensor<f64>, gy: &Tensor<f64>) -> Tensor<f64> {
        gy.zip_map(x, |g, v| 3.0 * v * v * g)
    }
}

#[test]
fn custom_op_gradient() {
    let mut r = rng();
    let x = Tensor::randn(&[1, 1, 2, 3], 1.0, &mut r);
    check(&[x], |t, v| project(t, t.custom(v[0], Rc::new(Cube)), 13));
}

#[test]
fn shared_subexpression_accumulates() {
    let mut r = rng();
    let x = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut r);
    check(&[x], |t, v| {
        let a = t.relu(v[0]);
        let b = t.mul(a, v[0]);
        project(t, t.add(a, b), 14)
    });
}
