//! Cholesky factorization and triangular solves on row-major slices.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, stored as a full n×n row-major
/// matrix (upper triangle zero). Only the lower triangle of `a` is read.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Solver(format!(
                "matrix has {} entries, expected {n}x{n}",
                a.len()
            )));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = a[j * n + j];
            for p in 0..j {
                diag -= l[j * n + p] * l[j * n + p];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Solver(format!(
                    "matrix is not positive definite: pivot {j} of {n} is {diag:e}"
                )));
            }
            let d = diag.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A X = B` in place, `b` being n×m row-major.
    pub fn solve_in_place(&self, b: &mut [f64], m: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * m, "right-hand side shape mismatch");
        let l = &self.l;
        // forward: L Y = B
        for i in 0..n {
            for p in 0..i {
                let lip = l[i * n + p];
                if lip == 0.0 {
                    continue;
                }
                let (head, tail) = b.split_at_mut(i * m);
                let src = &head[p * m..(p + 1) * m];
                for (x, &y) in tail[..m].iter_mut().zip(src) {
                    *x -= lip * y;
                }
            }
            let inv = 1.0 / l[i * n + i];
            b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= inv);
        }
        // backward: Lᵀ X = Y
        for i in (0..n).rev() {
            for p in i + 1..n {
                let lpi = l[p * n + i];
                if lpi == 0.0 {
                    continue;
                }
                let (head, tail) = b.split_at_mut(p * m);
                let src = &tail[..m];
                for (x, &y) in head[i * m..(i + 1) * m].iter_mut().zip(src) {
                    *x -= lpi * y;
                }
            }
            let inv = 1.0 / l[i * n + i];
            b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= inv);
        }
    }

    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x, m);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let c = Cholesky::factor(&[2.0, 0.0, 0.0, 4.0], 2).unwrap();
        let x = c.solve(&[2.0, 8.0], 1);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15, "{x:?}");
    }

    #[test]
    fn reports_failing_pivot() {
        let err = Cholesky::factor(&[1.0, 2.0, 2.0, 1.0], 2).unwrap_err();
        assert!(err.to_string().contains("pivot 1"), "{err}");
        assert!(Cholesky::factor(&[1.0, 0.0, 0.0], 2).is_err());
    }
}
