//! One-bit random-projection sketches of the Gibbs kernel.
//!
//! Every agent shares a seed, projects its samples onto `P` Gaussian
//! directions and broadcasts only the signs. The Frobenius error of the
//! reconstructed kernel shrinks like `1/sqrt(P)` while the message grows
//! linearly in `P`.
//!
//! `cargo run --release --example kernel_sketch`

use deot::eot::KernelBlocks;
use deot::experiment::{generate_synthetic, Covariance, DatasetSpec};
use deot::measures::CostSpec;
use deot::netsim::{AgentPartition, StorageMode};
use deot::sketch::{distributed_sketch, draw_shared_randomness, sketch_error_bound, GipParams};

fn main() -> deot::Result<()> {
    let cloud = |x: f64| DatasetSpec::Gaussian {
        n: 120,
        mean: vec![x, 0.0, 0.5],
        covariance: Covariance::Isotropic(0.25),
    };
    let mu = generate_synthetic(&cloud(0.0), 7)?;
    let gamma = generate_synthetic(&cloud(1.0), 8)?;
    let spec = CostSpec::squared_euclidean(0.5)?;
    let part = AgentPartition::scatter_both(&mu, &gamma, 3, 3, StorageMode::Iid, 9)?;
    let exact = KernelBlocks::exact(&part, &spec)?;
    let params = GipParams::estimate(mu.samples(), gamma.samples(), spec.epsilon, 0.1)?;

    println!(
        "{:>7} {:>12} {:>12} {:>12}",
        "P", "||K-K^||_F", "bound", "sign bits"
    );
    for p in [10, 100, 1000, 10_000] {
        let rand = draw_shared_randomness(42, p, part.dim())?;
        let (approx, ledger) = distributed_sketch(&part, &rand, &spec, false)?;
        println!(
            "{p:>7} {:>12.4e} {:>12.4e} {:>12}",
            exact.frobenius_distance(&approx),
            sketch_error_bound(mu.len(), gamma.len(), p, &params),
            ledger.total_bits()
        );
    }
    Ok(())
}
