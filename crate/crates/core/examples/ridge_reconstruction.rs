//! Classify queries by how well each class's support features reconstruct them.
//!
//!     cargo run --release --example ridge_reconstruction

use espt::loss::{effective_lambda, predict_proba, reconstruct};
use espt::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> espt::Result<()> {
    let (n, k, d, side) = (3, 2, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };

    // Each class lives near its own random feature prototype.
    let per_map = d * side * side;
    let prototypes: Vec<Vec<f64>> = (0..n).map(|_| noise(per_map)).collect();
    let mut jitter = |c: usize| -> Vec<f64> { prototypes[c].iter().zip(noise(per_map)).map(|(p, e)| p + 0.3 * e).collect() };
    let support_labels: Vec<usize> = (0..n * k).map(|i| i / k).collect();
    let query_labels: Vec<usize> = (0..n).collect();
    let support: Vec<f64> = support_labels.iter().flat_map(|&c| jitter(c)).collect();
    let query: Vec<f64> = query_labels.iter().flat_map(|&c| jitter(c)).collect();

    let g = Graph::new();
    let support = g.constant(Tensor::new(vec![n * k, d, side, side], support)?);
    let query = g.constant(Tensor::new(vec![n, d, side, side], query)?);
    let rec = reconstruct(support, &support_labels, query, n, 1.0)?;

    println!("λ = k·h·w/d·λ̄ = {}", effective_lambda(k, side, side, d, 1.0));
    println!("coefficients per class: {:?}", rec.coefficients[0].shape());
    let logits = rec.logits.value();
    for (q, row) in logits.data().chunks(n).enumerate() {
        let p = predict_proba(row, 1.0);
        let fmt: Vec<String> = row.iter().zip(&p).map(|(l, p)| format!("{l:8.3} ({p:.3})")).collect();
        println!("query of class {q}: logits (probabilities) {}", fmt.join("  "));
    }
    Ok(())
}
