#![allow(dead_code)]

use espt::episodes::{generate_synthetic, Dataset, SyntheticSpec};
use espt::{Graph, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Solve `a x = b` (`a` is `n×n`, `b` is `n×m`, row-major) by Gauss–Jordan elimination with
/// partial pivoting.
pub fn gauss_jordan(a: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let w = n + m;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        aug[i * w..i * w + n].copy_from_slice(&a[i * n..(i + 1) * n]);
        aug[i * w + n..(i + 1) * w].copy_from_slice(&b[i * m..(i + 1) * m]);
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| aug[x * w + col].abs().total_cmp(&aug[y * w + col].abs())).unwrap();
        for j in 0..w {
            aug.swap(col * w + j, pivot * w + j);
        }
        let p = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = aug[i * w + col];
                if f != 0.0 {
                    for j in 0..w {
                        aug[i * w + j] -= f * aug[col * w + j];
                    }
                }
            }
        }
    }
    (0..n).flat_map(|i| aug[i * w + n..(i + 1) * w].to_vec()).collect()
}

pub fn randn<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `x` is `r×d`, returns `x xᵀ + λI` (`r×r`).
pub fn gram(x: &[f64], r: usize, d: usize, lambda: f64) -> Vec<f64> {
    let mut g = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            g[i * r + j] = (0..d).map(|t| x[i * d + t] * x[j * d + t]).sum::<f64>() + if i == j { lambda } else { 0.0 };
        }
    }
    g
}

/// `x` is `r×d`, `f` is `m×d`; returns `x fᵀ` (`r×m`).
pub fn cross(x: &[f64], f: &[f64], r: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * m];
    for i in 0..r {
        for j in 0..m {
            out[i * m + j] = (0..d).map(|t| x[i * d + t] * f[j * d + t]).sum();
        }
    }
    out
}

/// Ridge objective `‖f − xᵀw‖² + λ‖w‖²` for a single query row.
pub fn ridge_objective(x: &[f64], f: &[f64], w: &[f64], r: usize, d: usize, lambda: f64) -> f64 {
    let resid: f64 = (0..d)
        .map(|t| {
            let rec: f64 = (0..r).map(|i| w[i] * x[i * d + t]).sum();
            (f[t] - rec).powi(2)
        })
        .sum();
    resid + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Library ridge solution for `x` (`r×d`) and query rows `f` (`m×d`), as an `r×m` matrix.
pub fn library_ridge(x: &[f64], f: &[f64], r: usize, m: usize, d: usize, lambda: f64) -> Vec<f64> {
    let g = Graph::new();
    let xv = g.constant(Tensor::new(vec![r, d], x.to_vec()).unwrap());
    let fv = g.constant(Tensor::new(vec![m, d], f.to_vec()).unwrap());
    espt::loss::ridge_coefficients(xv, fv, lambda).unwrap().value().data().to_vec()
}

pub fn relative_max_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    num / den
}

pub fn synthetic(classes: usize, samples: usize, side: usize, seed: u64, split: [usize; 3]) -> Dataset {
    generate_synthetic(&SyntheticSpec { num_classes: classes, samples_per_class: samples, image_side: side, seed, split: Some(split) })
        .unwrap()
}
