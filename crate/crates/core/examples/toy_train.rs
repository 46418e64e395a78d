//! Trains the toy model on the toy split and compares AR@1 against raw cosine.
//!
//! Usage: `cargo run --release --example toy_train -- [steps]`

use std::time::Instant;

use pgat_core::verify::toy_comparison;

fn main() -> pgat_core::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let started = Instant::now();
    let c = toy_comparison(steps)?;
    println!("raw     AR@1={:.3} AR@1%={:.3}", c.raw.ar1, c.raw.ar1_percent);
    println!("trained AR@1={:.3} AR@1%={:.3}", c.trained.ar1, c.trained.ar1_percent);
    println!("{steps} steps, final loss {:.4}, {:.0}s", c.final_loss, started.elapsed().as_secs_f64());
    Ok(())
}
