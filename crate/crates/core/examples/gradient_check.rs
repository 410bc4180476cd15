//! Finite-difference check of every parameter gradient on a 2-way 1-shot toy episode.
//!
//!     cargo run --release --example gradient_check -- [seed]

use std::time::Instant;

use espt::gradcheck::{check, Problem, DEFAULT_FLOOR, DEFAULT_STEP, DEFAULT_TOLERANCE};

fn main() -> espt::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let problem = Problem::toy(seed)?;
    let started = Instant::now();
    let report = check(&problem, DEFAULT_STEP, DEFAULT_FLOOR)?;
    println!("{:<28} {:>6} {:>7} {:>10} {:>10} {:>10}", "parameter", "coords", "refined", "L_class", "L_pretext", "L_total");
    for p in &report.params {
        println!(
            "{:<28} {:>6} {:>7} {:>10.2e} {:>10.2e} {:>10.2e}",
            p.name, p.coords, p.refined, p.class, p.pretext, p.total
        );
    }
    println!(
        "max relative error {:.2e} (tolerance {DEFAULT_TOLERANCE:e}); {} of {} coordinates needed a smaller step, {} unresolved; {:.1}s",
        report.max(),
        report.refined(),
        report.coords(),
        report.unresolved(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
