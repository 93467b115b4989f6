//! Decentralized dual ascent against the centralized optimum.
//!
//! Ten source and ten target agents each hold 20 samples. One communicating
//! pair is drawn per iteration; its dual blocks move against `L` partners.
//! The assembled distance is compared with centralized Sinkhorn.
//!
//! `cargo run --release --example decentralized_solve`

use deot::eot::{sinkhorn_oracle, SinkhornConfig};
use deot::experiment::{generate_synthetic, Covariance, DatasetSpec};
use deot::measures::CostSpec;
use deot::mrbcd::{curvature_step_for, solve, SolverConfig};
use deot::netsim::{storage_protocol, AgentPartition, StorageMode};

fn main() -> deot::Result<()> {
    let cloud = |x: f64| DatasetSpec::Gaussian {
        n: 200,
        mean: vec![x, x],
        covariance: Covariance::Isotropic(0.0625),
    };
    let mu = generate_synthetic(&cloud(0.0), 1)?;
    let gamma = generate_synthetic(&cloud(0.5), 2)?;
    let epsilon = 0.1;
    let spec = CostSpec::squared_euclidean(epsilon)?;
    let oracle = sinkhorn_oracle(&mu, &gamma, &spec, &SinkhornConfig::default())?.dual_value;

    let part = AgentPartition::scatter_both(&mu, &gamma, 10, 10, StorageMode::Iid, 3)?;
    let e = storage_protocol(&part.source_mass(), &part.target_mass())?;
    let batch = 5;
    let cfg = SolverConfig {
        epsilon,
        eta0: 2.0
            * curvature_step_for(
                &e,
                &part.source_sizes(),
                &part.target_sizes(),
                epsilon,
                batch,
            ),
        iterations: 5000,
        batch,
        record_every: 500,
        seed: 4,
        ..Default::default()
    };
    let out = solve(&part, &e, &spec, &cfg, Some(oracle))?;

    println!(
        "{:>6} {:>12} {:>12} {:>10}",
        "t", "F(u_t,v_t)", "F(avg)", "gap"
    );
    for r in &out.trace.records {
        let show = |x: Option<f64>| x.unwrap_or(f64::NAN);
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>10.2e}",
            r.t,
            show(r.dual_objective),
            show(r.averaged_objective),
            show(r.gap)
        );
    }
    println!(
        "decentralized {:.6} vs centralized {oracle:.6} (relative error {:.2}%)",
        out.distance,
        100.0 * (out.distance - oracle).abs() / oracle
    );
    Ok(())
}
