//! Centralized reference: log-domain Sinkhorn between two Gaussian clouds.
//!
//! `cargo run --release --example centralized_sinkhorn`

use deot::eot::{primal_objective, sinkhorn_oracle, SinkhornConfig};
use deot::experiment::{generate_synthetic, Covariance, DatasetSpec};
use deot::measures::{cost_matrix, CostSpec};

fn main() -> deot::Result<()> {
    let cloud = |x: f64| DatasetSpec::Gaussian {
        n: 300,
        mean: vec![x, x],
        covariance: Covariance::Isotropic(0.0625),
    };
    let mu = generate_synthetic(&cloud(0.0), 1)?;
    let gamma = generate_synthetic(&cloud(0.5), 2)?;

    for epsilon in [0.5, 0.1, 0.05] {
        let spec = CostSpec::squared_euclidean(epsilon)?;
        let r = sinkhorn_oracle(&mu, &gamma, &spec, &SinkhornConfig::default())?;
        let c = cost_matrix(mu.samples(), gamma.samples(), spec.kind)?;
        let primal = primal_objective(&r.coupling.values, c.view(), &mu, &gamma, epsilon);
        println!(
            "eps {epsilon:<5} W = {:.6}  primal = {primal:.6}  duality gap = {:.1e}  marginal violation = {:.1e}  ({} iterations)",
            r.dual_value,
            (primal - r.dual_value).abs(),
            r.violation,
            r.iterations
        );
    }
    Ok(())
}
