//! Brute-force reference implementations shared by the integration tests.
//! They are written for clarity, not speed, and share no code with the
//! library's loss implementations.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feature block `f[i][p]`: channel `i`, position `p`.
pub type Block = Vec<Vec<f64>>;

pub fn random_block(r: &mut ChaCha8Rng, n: usize, m: usize) -> Block {
    (0..n).map(|_| (0..m).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

pub fn oracle_gram(f: &Block) -> Vec<Vec<f64>> {
    let n = f.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..f[i].len() {
                s += f[i][p] * f[j][p];
            }
            g[i][j] = s;
        }
    }
    g
}

pub fn oracle_mask(f: &Block, mask: &[f64]) -> Block {
    f.iter().map(|row| row.iter().zip(mask).map(|(v, s)| v * s).collect()).collect()
}

fn sq_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s
}

pub fn oracle_global(fo: &Block, fs: &Block) -> f64 {
    let (n, m) = (fo.len() as f64, fo[0].len() as f64);
    sq_diff(&oracle_gram(fo), &oracle_gram(fs)) / (4.0 * n * n * m * m)
}

/// Masked style term with `M_c = max(area of the output-side mask, 1)` and
/// classes missing on either side skipped.
pub fn oracle_local(fo: &Block, fs: &Block, mo: &[Vec<f64>], ms: &[Vec<f64>]) -> f64 {
    let n = fo.len() as f64;
    let mut total = 0.0;
    for c in 0..mo.len() {
        let ao: f64 = mo[c].iter().sum();
        let as_: f64 = ms[c].iter().sum();
        if ao <= 0.0 || as_ <= 0.0 {
            continue;
        }
        let go = oracle_gram(&oracle_mask(fo, &mo[c]));
        let gs = oracle_gram(&oracle_mask(fs, &ms[c]));
        let m = ao.max(1.0);
        total += sq_diff(&go, &gs) / (4.0 * n * n * m * m);
    }
    total
}

pub fn oracle_content(fo: &Block, fi: &Block) -> f64 {
    let (n, m) = (fo.len() as f64, fo[0].len() as f64);
    let mut s = 0.0;
    for i in 0..fo.len() {
        for p in 0..fo[i].len() {
            s += (fo[i][p] - fi[i][p]).powi(2);
        }
    }
    s / (2.0 * n * m)
}

/// Dense matting Laplacian accumulated window by window with nalgebra's
/// 3x3 inverse. `img[c][y * w + x]`.
pub fn oracle_matting(img: &[Vec<f64>; 3], h: usize, w: usize, eps: f64) -> Vec<Vec<f64>> {
    let n = h * w;
    let mut l = vec![vec![0.0; n]; n];
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            let mut idx = Vec::new();
            for dy in 0..3 {
                for dx in 0..3 {
                    idx.push((cy + dy - 1) * w + (cx + dx - 1));
                }
            }
            let colors: Vec<Vector3<f64>> = idx.iter().map(|&p| Vector3::new(img[0][p], img[1][p], img[2][p])).collect();
            let mean = colors.iter().fold(Vector3::zeros(), |a, c| a + c) / 9.0;
            let mut cov = Matrix3::zeros();
            for c in &colors {
                cov += (c - mean) * (c - mean).transpose();
            }
            cov /= 9.0;
            let inv = (cov + Matrix3::identity() * (eps / 9.0)).try_inverse().unwrap();
            for a in 0..9 {
                for b in 0..9 {
                    let q = ((colors[a] - mean).transpose() * inv * (colors[b] - mean))[(0, 0)];
                    let delta = if a == b { 1.0 } else { 0.0 };
                    l[idx[a]][idx[b]] += delta - (1.0 + q) / 9.0;
                }
            }
        }
    }
    l
}

pub fn quad(l: &[Vec<f64>], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            s += v[i] * l[i][j] * v[j];
        }
    }
    s
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
