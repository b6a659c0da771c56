//! Blahut–Arimoto capacity of binary symmetric channels and per-state
//! empowerment of a small grid world.
//!
//! cargo run --release --example channel_capacity

use primi::empowerment::{channel_capacity, state_capacities, DiscreteChannel};
use primi::env::{DistractorEnv, EnvConfig, Topology};

fn main() -> primi::Result<()> {
    for p in [0.0, 0.05, 0.1, 0.25, 0.5] {
        let (cap, st) = channel_capacity(&DiscreteChannel::bsc(p)?, 1e-12, 500)?;
        println!("bsc({p:<4}) capacity {cap:.6} nats after {} iterations", st.iterations);
    }

    let env = DistractorEnv::new(EnvConfig {
        topology: Topology::Grid { width: 3, height: 3 },
        distractor_chains: 0,
        goal_drift: 0.0,
        ..Default::default()
    })?;
    let caps = state_capacities(&env.as_tabular(0.9, 4096)?, 1e-12, 1000)?;
    // goal fixed at cell 0: states 0, 9, 18, ... differ only in the agent cell
    println!("one-step empowerment by agent cell (nats):");
    for row in 0..3 {
        let line: Vec<String> = (0..3).map(|col| format!("{:.3}", caps[(row * 3 + col) * 9].0)).collect();
        println!("  {}", line.join("  "));
    }
    Ok(())
}
