//! Domain adaptation through the decentralized transport plan.
//!
//! Labeled source samples are moved onto the shifted target domain with the
//! barycentric map of the coupling, then each target point takes the label
//! of its nearest transported source point.
//!
//! `cargo run --release --example domain_adaptation`

use deot::experiment::{
    domain_adapt, generate_pair, Component, Covariance, DatasetSpec, ExperimentConfig,
};

fn main() -> deot::Result<()> {
    let blobs = |dx: f64| DatasetSpec::Gmm {
        n: 120,
        components: vec![
            Component {
                mean: vec![dx, 0.0],
                covariance: Covariance::Isotropic(0.09),
                weight: 1.0,
            },
            Component {
                mean: vec![dx + 2.0, 0.0],
                covariance: Covariance::Isotropic(0.09),
                weight: 1.0,
            },
        ],
    };
    let mut config = ExperimentConfig {
        source: blobs(0.0),
        target: blobs(1.2),
        source_agents: 2,
        target_agents: 2,
        eta_scale: Some(2.0),
        ..Default::default()
    };
    config.solver.epsilon = 0.1;
    config.solver.batch = 2;
    config.solver.iterations = 10_000;

    let (mu, gamma) = generate_pair(&config, 0)?;
    let r = domain_adapt(mu.samples(), gamma.samples(), &config, 0)?;
    println!("source-only 1NN accuracy: {:.3}", r.source_only_accuracy);
    println!(
        "after transport:          {:.3} ({}/{})",
        r.accuracy, r.correct, r.total
    );
    Ok(())
}
