//! Exact check of the value-difference bound on random tabular MDPs with
//! lossy latent abstractions.
//!
//! cargo run --release --example value_bound -- [seed]

use primi::theory::bound_suite;

fn main() -> primi::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2024);
    for (i, rep) in bound_suite(seed, 5, 3)?.iter().enumerate() {
        println!(
            "instance {i:>2} lhs {:>9.5} rhs {:>9.5} L_R {:.2e} L_T {:.2e} K {:.3} holds {}",
            rep.lhs, rep.rhs, rep.losses.l_r, rep.losses.l_t, rep.losses.k, rep.holds
        );
    }
    Ok(())
}
