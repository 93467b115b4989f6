//! Measured error against the combined error bound over iterations.
//!
//! The bound has an algorithm term decaying like `1/sqrt(t)`, a kernel term
//! decaying like `1/sqrt(P)` and a constant model term. Rows are exported as
//! CSV with a JSON sidecar recording the seed and config hash.
//!
//! `cargo run --release --example bounds_check`

use deot::analysis::{bound_curve, config_hash, export_table};
use deot::eot::SinkhornConfig;
use deot::experiment::{generate_synthetic, Covariance, DatasetSpec};
use deot::measures::CostSpec;
use deot::mrbcd::{curvature_step_for, SolverConfig};
use deot::netsim::{storage_protocol, AgentPartition, StorageMode};

fn main() -> deot::Result<()> {
    let cloud = |x: f64| DatasetSpec::Gaussian {
        n: 60,
        mean: vec![x, x],
        covariance: Covariance::Isotropic(0.25),
    };
    let mu = generate_synthetic(&cloud(0.0), 21)?;
    let gamma = generate_synthetic(&cloud(1.0), 22)?;
    let spec = CostSpec::squared_euclidean(0.5)?;
    let part = AgentPartition::scatter_both(&mu, &gamma, 3, 3, StorageMode::Iid, 23)?;
    let e = storage_protocol(&part.source_mass(), &part.target_mass())?;
    let solver = SolverConfig {
        epsilon: spec.epsilon,
        eta0: 3.0
            * curvature_step_for(
                &e,
                &part.source_sizes(),
                &part.target_sizes(),
                spec.epsilon,
                2,
            ),
        batch: 2,
        ..Default::default()
    };

    let grid = [100, 400, 1600, 6400];
    let rows = bound_curve(
        &part,
        &e,
        &spec,
        &solver,
        &grid,
        &[None, Some(256)],
        &[0, 1, 2],
        0.1,
        &SinkhornConfig::default(),
    )?;
    println!(
        "{:>6} {:>6} {:>11} {:>11} {:>11} {:>11}",
        "t", "P", "measured", "algorithm", "kernel", "model"
    );
    for r in &rows {
        let p = r.projections.map_or("exact".to_string(), |p| p.to_string());
        println!(
            "{:>6} {p:>6} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}",
            r.t, r.measured, r.algorithm_term, r.kernel_term, r.model_term
        );
    }

    let dir = std::env::temp_dir().join("deot_bounds_check");
    export_table(
        rows.as_slice(),
        &dir,
        "bound_curve",
        Some(0),
        &config_hash(&solver)?,
    )?;
    println!("table written to {}", dir.join("bound_curve.csv").display());
    Ok(())
}
