//! Exact brute-force trade-off curve for one class of a small world.

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::oracle::{check_monotone, enumerate_sequences, pareto_curve};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (world, _) = make_synthetic_world(&WorldSpec::builtin(&[2], 0.8)?, 0)?;
    let table = enumerate_sequences(&world, 4)?;
    let gammas = [1.0, 1.5, 2.0, 2.9, 3.0, 3.1, 4.0];
    let curve = pareto_curve(&table, 0, &gammas)?;
    for p in &curve {
        println!(
            "gamma {:<4} {:<10} log p(c|x) {:>7.4}  pmi {:>7.4}",
            p.gamma,
            world.vocab.decode(&p.tokens),
            p.log_cond,
            p.pmi
        );
    }
    println!("monotone: {}", check_monotone(&curve).is_ok());
    Ok(())
}
