//! Trains the agent on the distractor environment and prints a summary.
//!
//! cargo run --release --example train_agent -- [total_env_steps] [seed]

use primi::agent::{train_with, TrainConfig};

fn main() -> primi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = TrainConfig::default();
    cfg.total_env_steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    cfg.seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = train_with(&cfg, |row| {
        if let Some(r) = row.ret {
            println!("episode {:>4} step {:>6} return {r:.3}", row.episode, row.step);
        }
    })?;
    println!("final lambda {:.4}", out.lagrangian.lambda);
    println!("{:#?}", out.eval);
    Ok(())
}
