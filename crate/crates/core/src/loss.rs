//! Ridge-regression feature reconstruction and the losses built on it.
//!
//! For a class `c`, the `k` support maps are flattened into a `khw×d` matrix `X_c`. Each
//! query location `f` (a `d`-vector) gets reconstruction coefficients
//!
//! ```text
//! w = (X_c X_cᵀ + λ I)⁻¹ X_c f,        λ = (k·h·w / d) · λ̄
//! ```
//!
//! The class logit is the negative mean squared residual `‖f − X_cᵀ w‖²` over the query's
//! `h·w` locations. Coefficients of the same query in the original and the rotated episode
//! are compared with a cosine distance, the original side behind a stop-gradient.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Guard added to vector norms in the cosine distance.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsptHyperparams {
    /// Regularization control; the effective λ is rescaled by `k·h·w/d`.
    pub lambda_bar: f64,
    /// Weight of the pretext term in the total loss.
    pub alpha: f64,
}

impl Default for EsptHyperparams {
    fn default() -> Self {
        Self { lambda_bar: 1.0, alpha: 0.3 }
    }
}

impl EsptHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bar > 0.0 && self.lambda_bar.is_finite()) {
            return Err(Error::Config(format!("lambda_bar must be positive, got {}", self.lambda_bar)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn effective_lambda(k: usize, h: usize, w: usize, d: usize, lambda_bar: f64) -> f64 {
    (k * h * w) as f64 / d as f64 * lambda_bar
}

/// Split a batch along its leading axis into the first `n` items and the rest.
pub fn split_leading(x: Var<'_>, n: usize) -> (Var<'_>, Var<'_>) {
    let s = x.shape();
    assert!(n > 0 && n < s[0], "cannot split {} items at {n}", s[0]);
    let inner: usize = s[1..].iter().product();
    let flat = x.reshape(&[s[0], inner]);
    let head: Vec<usize> = (0..n).collect();
    let tail: Vec<usize> = (n..s[0]).collect();
    let mut hs = s.clone();
    hs[0] = n;
    let mut ts = s;
    ts[0] -= n;
    (flat.select_rows(&head).reshape(&hs), flat.select_rows(&tail).reshape(&ts))
}

/// Rearrange an `N×d×h×w` feature batch into `(N·h·w)×d` rows ordered by
/// (sample, row-major location).
pub fn location_rows(fmap: Var<'_>) -> Var<'_> {
    let s = fmap.shape();
    assert_eq!(s.len(), 4, "location_rows expects N×d×h×w, got {s:?}");
    let (n, d, hw) = (s[0], s[1], s[2] * s[3]);
    let mut index = Vec::with_capacity(n * d * hw);
    for i in 0..n {
        for loc in 0..hw {
            for ch in 0..d {
                index.push((i * d + ch) * hw + loc);
            }
        }
    }
    fmap.gather(Rc::from(index), &[n * hw, d])
}

/// Stack the location rows of every support sample labelled `class`, in support order.
pub fn class_matrix<'g>(support_rows: Var<'g>, labels: &[usize], class: usize, hw: usize) -> Var<'g> {
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == class)
        .flat_map(|(i, _)| i * hw..(i + 1) * hw)
        .collect();
    assert!(!rows.is_empty(), "class {class} has no support samples");
    support_rows.select_rows(&rows)
}

/// Coefficients for every query row at once: solves `(X Xᵀ + λI) W = X Fᵀ` with one
/// factorization. `xc` is `r×d`, `query_rows` is `m×d`; the result is `r×m`, column `j`
/// holding the coefficients of query row `j`.
pub fn ridge_coefficients<'g>(xc: Var<'g>, query_rows: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    let (xs, qs) = (xc.shape(), query_rows.shape());
    if xs.len() != 2 || qs.len() != 2 || xs[1] != qs[1] {
        return Err(Error::Shape(format!("class matrix {xs:?} and query rows {qs:?} disagree on d")));
    }
    let g = xc.graph();
    let gram = xc.matmul(xc.t()) + g.constant(Tensor::eye(xs[0]).scale(lambda));
    let rhs = xc.matmul(query_rows.t());
    gram.solve_spd(rhs)
}

/// Squared reconstruction residual `‖f − X_cᵀ w‖²` for each query row.
pub fn squared_residuals<'g>(xc: Var<'g>, query_rows: Var<'g>, coefficients: Var<'g>) -> Var<'g> {
    let recon = coefficients.t().matmul(xc);
    let r = query_rows - recon;
    (r * r).sum_rows()
}

/// Per-query logits for one class: minus the mean squared residual over `hw` locations.
pub fn class_logit<'g>(xc: Var<'g>, query_rows: Var<'g>, coefficients: Var<'g>, hw: usize) -> Var<'g> {
    let sq = squared_residuals(xc, query_rows, coefficients);
    let n_query = sq.shape()[0] / hw;
    -sq.reshape(&[n_query, hw]).mean_rows()
}

/// Logits and coefficients of one branch of an episode.
pub struct Reconstruction<'g> {
    /// `n_query × n_way`.
    pub logits: Var<'g>,
    /// Per class, the `khw × (n_query·hw)` coefficient matrix.
    pub coefficients: Vec<Var<'g>>,
    pub hw: usize,
}

/// Reconstruct every query of a branch from every class's support features.
pub fn reconstruct<'g>(
    support: Var<'g>,
    support_labels: &[usize],
    query: Var<'g>,
    n_way: usize,
    lambda_bar: f64,
) -> Result<Reconstruction<'g>> {
    let s = support.shape();
    let q = query.shape();
    if s.len() != 4 || q.len() != 4 || s[1..] != q[1..] {
        return Err(Error::Shape(format!("support {s:?} and query {q:?} feature maps differ")));
    }
    if support_labels.len() != s[0] {
        return Err(Error::Shape(format!("{} support labels for {} maps", support_labels.len(), s[0])));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let support_rows = location_rows(support);
    let query_rows = location_rows(query);
    let mut logit_cols = Vec::with_capacity(n_way);
    let mut coefficients = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let k = support_labels.iter().filter(|&&y| y == c).count();
        if k == 0 {
            return Err(Error::Shape(format!("class {c} has no support samples")));
        }
        let xc = class_matrix(support_rows, support_labels, c, hw);
        let lambda = effective_lambda(k, h, w, d, lambda_bar);
        let wc = ridge_coefficients(xc, query_rows, lambda)?;
        logit_cols.push(class_logit(xc, query_rows, wc, hw));
        coefficients.push(wc);
    }
    let n_query = q[0];
    let g = support.graph();
    let logits = g.concat(&logit_cols).reshape(&[n_way, n_query]).t();
    Ok(Reconstruction { logits, coefficients, hw })
}

/// Softmax of `γ·logits` with max subtraction.
pub fn predict_proba(logits: &[f64], gamma: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| gamma * l).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Row-wise log-probabilities `log softmax(γ·logits)`.
pub fn log_proba<'g>(logits: Var<'g>, gamma: Var<'g>) -> Var<'g> {
    logits.scale_by(gamma).log_softmax_rows()
}

/// Mean cross-entropy of the queries against their episode-local labels.
pub fn classification_loss<'g>(logits: Var<'g>, gamma: Var<'g>, labels: &[usize]) -> Var<'g> {
    let s = logits.shape();
    assert_eq!(s[0], labels.len(), "one label per query");
    let n_way = s[1];
    let logp = log_proba(logits, gamma);
    let index: Vec<usize> = labels.iter().enumerate().map(|(q, &y)| q * n_way + y).collect();
    -logp.gather(Rc::from(index), &[labels.len()]).mean()
}

/// `1 − cos` between matching rows of two matrices, norms guarded by [`COSINE_EPS`].
pub fn cosine_distance_rows<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let dot = (a * b).sum_rows();
    let na = a.row_norms().add_scalar(COSINE_EPS);
    let nb = b.row_norms().add_scalar(COSINE_EPS);
    (-dot.div(na * nb)).add_scalar(1.0)
}

/// Per-query consistency losses: for each query, the mean over its `hw` locations of the
/// summed (over classes) cosine distance between original and transformed coefficients.
///
/// With `stop_gradient` the original coefficients are detached, so the gradient only
/// reaches the transformed branch.
pub fn consistency_losses<'g>(original: &[Var<'g>], transformed: &[Var<'g>], hw: usize, stop_gradient: bool) -> Var<'g> {
    assert_eq!(original.len(), transformed.len(), "coefficient sets cover different classes");
    assert!(!original.is_empty(), "no classes");
    let mut total: Option<Var<'g>> = None;
    for (&wo, &wt) in original.iter().zip(transformed) {
        assert_eq!(wo.shape(), wt.shape(), "coefficient shapes differ");
        let wo = if stop_gradient { wo.stop_grad() } else { wo };
        let dis = cosine_distance_rows(wo.t(), wt.t());
        total = Some(match total {
            Some(t) => t + dis,
            None => dis,
        });
    }
    let total = total.expect("nonempty");
    let rows = total.shape()[0];
    total.reshape(&[rows / hw, hw]).mean_rows()
}

/// Mean of the per-query consistency losses.
pub fn pretext_loss(per_query: Var<'_>) -> Var<'_> {
    per_query.mean()
}

pub fn total_loss<'g>(class_loss: Var<'g>, pretext: Var<'g>, alpha: f64) -> Var<'g> {
    class_loss + pretext.scale(alpha)
}
