//! Trains the empowerment term alone and probes latents for each factor.
//!
//! cargo run --release --example controllability_probe -- [seed] [updates]

use primi::theory::{probe_experiment, ProbeExperimentConfig};

fn main() -> primi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ProbeExperimentConfig::default();
    if let Some(u) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.updates = u;
    }
    let rep = probe_experiment(&cfg, seed)?;
    println!("{}", serde_json::to_string_pretty(&rep).expect("serialisable report"));
    println!("gap trained {:.3} control {:.3}", rep.trained.gap(), rep.control.gap());
    Ok(())
}
