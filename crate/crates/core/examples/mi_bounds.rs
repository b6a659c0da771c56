//! Trains critics for the contrastive bounds on correlated Gaussians and
//! compares them with the exact mutual information.
//!
//! cargo run --release --example mi_bounds -- [rho] [dims]

use primi::mi::{mi_bench, BenchConfig, Family};

fn main() -> primi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let rho = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let dims = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rep = mi_bench(Family::Gaussian { rho, dims }, &BenchConfig::default())?;
    println!("oracle         {:.5}", rep.oracle);
    for (name, e) in [
        ("nce-inclusive", &rep.nce_inclusive),
        ("nce-exclusive", &rep.nce_exclusive),
        ("nwj", &rep.nwj),
    ] {
        println!("{name:<14} {:.5} ± {:.5}", e.value, e.std_err);
    }
    if let Some(t) = rep.ba_total {
        println!("ba (total)     {t:.5}");
    }
    Ok(())
}
