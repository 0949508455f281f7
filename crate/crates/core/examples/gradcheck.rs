//! Finite-difference check of every loss against every parameter tensor of
//! a small model.
//!
//! cargo run --release --example gradcheck -- [seed]

use kplift::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> kplift::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let r = run_gradcheck(seed, &GradcheckConfig::default())?;
    let mut tensors: Vec<&str> = r.entries.iter().map(|e| e.tensor.as_str()).collect();
    tensors.dedup();
    println!("{} tensors x 5 losses, {} kinks skipped", tensors.len(), r.kinks());
    if let Some(w) = r.worst() {
        println!("worst relative error {:.2e} ({} wrt {})", w.max_rel_error, w.loss, w.tensor);
    }
    println!("{}", if r.passed() { "passed" } else { "FAILED" });
    Ok(())
}
