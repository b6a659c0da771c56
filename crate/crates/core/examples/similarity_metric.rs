//! Graph-kernel similarity between ground-truth points and three latent
//! embeddings: an isometry, a distortion and noise.
//!
//! cargo run --release --example similarity_metric

use primi::metrics::{behavioral_similarity, KernelConfig};
use primi::rng;

fn main() -> primi::Result<()> {
    let mut r = rng::stream(0, "example/similarity");
    let truth: Vec<Vec<f64>> = (0..32).map(|_| rng::normals(&mut r, 2)).collect();
    let rotated: Vec<Vec<f64>> = truth.iter().map(|p| vec![-p[1] + 3.0, p[0] - 1.0]).collect();
    let squashed: Vec<Vec<f64>> = truth.iter().map(|p| vec![p[0].tanh(), 0.2 * p[1]]).collect();
    let noise: Vec<Vec<f64>> = (0..32).map(|_| rng::normals(&mut r, 2)).collect();
    let cfg = KernelConfig::default();
    for (name, lat) in [("isometry", &rotated), ("distortion", &squashed), ("noise", &noise)] {
        println!("{name:<11} {:.4}", behavioral_similarity(lat, &truth, &cfg)?);
    }
    Ok(())
}
