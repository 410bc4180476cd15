mod common;

use common::*;
use espt::loss::{classification_loss, effective_lambda, predict_proba, reconstruct};
use espt::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Logits by explicit loops: build each class matrix location by location, solve every
/// query location with Gauss–Jordan, and average squared residuals.
fn naive_logits(support: &Tensor, labels: &[usize], query: &Tensor, n_way: usize, lambda_bar: f64) -> Vec<f64> {
    let s = support.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let nq = query.shape()[0];
    let feature = |t: &Tensor, i: usize, loc: usize| -> Vec<f64> { (0..d).map(|ch| t.data()[(i * d + ch) * hw + loc]).collect() };
    let mut out = vec![0.0; nq * n_way];
    for c in 0..n_way {
        let members: Vec<usize> = (0..s[0]).filter(|&i| labels[i] == c).collect();
        let mut x = Vec::new();
        for &i in &members {
            for loc in 0..hw {
                x.extend(feature(support, i, loc));
            }
        }
        let r = members.len() * hw;
        let lambda = members.len() as f64 * hw as f64 / d as f64 * lambda_bar;
        let a = gram(&x, r, d, lambda);
        for q in 0..nq {
            let mut total = 0.0;
            for loc in 0..hw {
                let f = feature(query, q, loc);
                let coef = gauss_jordan(&a, &cross(&x, &f, r, 1, d), r, 1);
                total += (0..d).map(|t| (f[t] - (0..r).map(|i| coef[i] * x[i * d + t]).sum::<f64>()).powi(2)).sum::<f64>();
            }
            out[q * n_way + c] = -total / hw as f64;
        }
    }
    out
}

fn random_maps(rng: &mut ChaCha8Rng, count: usize, d: usize, side: usize) -> Tensor {
    Tensor::new(vec![count, d, side, side], randn(rng, count * d * side * side)).unwrap()
}

#[test]
fn logits_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (n, k, q, d, side) in [(2, 1, 3, 4, 2), (3, 2, 2, 6, 3), (5, 1, 4, 16, 1), (2, 3, 2, 3, 2)] {
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let support = random_maps(&mut rng, n * k, d, side);
        let query = random_maps(&mut rng, q, d, side);
        let g = Graph::new();
        let rec = reconstruct(g.constant(support.clone()), &labels, g.constant(query.clone()), n, 0.7).unwrap();
        let expected = naive_logits(&support, &labels, &query, n, 0.7);
        let got = rec.logits.value();
        assert_eq!(got.shape(), &[q, n]);
        let err = relative_max_error(got.data(), &expected);
        assert!(err < 1e-9, "({n},{k},{q},{d},{side}): {err:e}");
    }
}

/// With `d = h = w = 1`, every quantity has a closed form:
/// `w = s f / (s² + λ)`, residual `f λ / (s² + λ)`, logit `−(f λ / (s² + λ))²`.
#[test]
fn scalar_two_way_one_shot_closed_form() {
    let (s, f, lambda_bar, gamma) = ([0.8, -1.7], [1.1, -0.4], 0.6, 1.9);
    let labels_q = [0usize, 1];
    let g = Graph::new();
    let support = g.param(Tensor::new(vec![2, 1, 1, 1], s.to_vec()).unwrap());
    let query = g.param(Tensor::new(vec![2, 1, 1, 1], f.to_vec()).unwrap());
    let gamma_v = g.param(Tensor::scalar(gamma));
    let rec = reconstruct(support, &[0, 1], query, 2, lambda_bar).unwrap();
    let loss = classification_loss(rec.logits, gamma_v, &labels_q);

    let lambda = effective_lambda(1, 1, 1, 1, lambda_bar);
    assert_eq!(lambda, lambda_bar);
    let logit = |fq: f64, sc: f64| -(fq * lambda / (sc * sc + lambda)).powi(2);
    let mut expected_loss = 0.0;
    let mut expected_dgamma = 0.0;
    for (qi, &fq) in f.iter().enumerate() {
        let l = [logit(fq, s[0]), logit(fq, s[1])];
        let p = predict_proba(&l, gamma);
        let y = labels_q[qi];
        expected_loss -= p[y].ln() / 2.0;
        expected_dgamma -= (l[y] - (p[0] * l[0] + p[1] * l[1])) / 2.0;
        for c in 0..2 {
            let coef = rec.coefficients[c].value().data()[qi];
            assert!((coef - s[c] * fq / (s[c] * s[c] + lambda)).abs() < 1e-14);
        }
    }
    assert!((loss.item() - expected_loss).abs() < 1e-12, "{} vs {expected_loss}", loss.item());
    let grads = g.backward(loss).unwrap();
    assert!((grads.get(gamma_v).unwrap().item() - expected_dgamma).abs() < 1e-12);
}

#[test]
fn query_identical_to_a_support_image_is_assigned_its_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..50 {
        let n = 5;
        let support = random_maps(&mut rng, n, 32, 2);
        let c = trial % n;
        let query = Tensor::stack(&[&support.index_axis0(c)]).unwrap();
        let labels: Vec<usize> = (0..n).collect();
        let g = Graph::new();
        let rec = reconstruct(g.constant(support), &labels, g.constant(query), n, 0.01).unwrap();
        let p = predict_proba(rec.logits.value().data(), 1.0);
        assert_eq!(espt::evaluation::argmax(&p), c);
    }
}

fn instance_strategy() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=12, 1usize..=16, any::<u64>())
}

proptest! {
    #[test]
    fn probabilities_normalize(logits in prop::collection::vec(-1e3f64..1e3, 1..30), gamma in -50f64..50.0) {
        let p = predict_proba(&logits, gamma);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = logits.iter().map(|l| l + 3.5).collect();
        let q = predict_proba(&shifted, gamma);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn stronger_ridge_shrinks_coefficients((r, d, seed) in instance_strategy(), lo in 0.01f64..1.0, factor in 1.5f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, r * d);
        let f = randn(&mut rng, d);
        let weak = library_ridge(&x, &f, r, 1, d, lo);
        let strong = library_ridge(&x, &f, r, 1, d, lo * factor);
        let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
        let resid = |w: &[f64]| ridge_objective(&x, &f, w, r, d, 0.0);
        prop_assert!(norm(&strong) <= norm(&weak) * (1.0 + 1e-12));
        prop_assert!(resid(&strong) >= resid(&weak) * (1.0 - 1e-12) - 1e-15);
    }

    #[test]
    fn ridge_matches_gauss_jordan((r, d, seed) in instance_strategy(), lambda in 0.05f64..5.0, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, r * d);
        let f = randn(&mut rng, m * d);
        let got = library_ridge(&x, &f, r, m, d, lambda);
        let expected = gauss_jordan(&gram(&x, r, d, lambda), &cross(&x, &f, r, m, d), r, m);
        prop_assert!(relative_max_error(&got, &expected) < 1e-9);
    }
}
