//! Where the error comes from.
//!
//! The gap between the decentralized estimate and the centralized optimum
//! splits into a model part (the protocol), a kernel part (the sketch) and an
//! algorithm part (finite iterations). The three parts bound the total by the
//! triangle inequality.
//!
//! `cargo run --release --example error_decomposition`

use deot::analysis::{decompose_errors, SketchSpec};
use deot::eot::SinkhornConfig;
use deot::experiment::{generate_synthetic, Component, Covariance, DatasetSpec};
use deot::measures::CostSpec;
use deot::mrbcd::{curvature_step_for, SolverConfig};
use deot::netsim::{protocol_generator, AgentPartition, ProtocolKind, StorageMode};

fn main() -> deot::Result<()> {
    // Non-i.i.d. storage gives each agent one mixture component.
    let cloud = |x: f64| DatasetSpec::Gmm {
        n: 80,
        components: (0..4)
            .map(|k| Component {
                mean: vec![x + k as f64, 0.0],
                covariance: Covariance::Isotropic(0.05),
                weight: 1.0,
            })
            .collect(),
    };
    let mu = generate_synthetic(&cloud(0.0), 11)?;
    let gamma = generate_synthetic(&cloud(0.5), 12)?;
    let spec = CostSpec::squared_euclidean(0.25)?;
    let part = AgentPartition::scatter_both(&mu, &gamma, 4, 4, StorageMode::NonIid, 13)?;
    let e = protocol_generator(ProtocolKind::Sparse, 4, 4, 0.5, 14)?;
    let solver = SolverConfig {
        epsilon: spec.epsilon,
        eta0: 1.5
            * curvature_step_for(
                &e,
                &part.source_sizes(),
                &part.target_sizes(),
                spec.epsilon,
                2,
            ),
        iterations: 4000,
        batch: 2,
        clamp_batch: true,
        ..Default::default()
    };

    for projections in [16, 128, 1024] {
        let sketch = SketchSpec {
            projections,
            normalized: false,
            seed: 15,
        };
        let d = decompose_errors(
            &part,
            &e,
            &spec,
            Some(sketch),
            &solver,
            &SinkhornConfig::default(),
        )?;
        println!(
            "P = {projections:<5} model {:.3e}  kernel {:.3e}  algorithm {:.3e}  total {:.3e}  triangle holds: {}",
            d.e_model,
            d.e_kernel,
            d.e_algorithm,
            d.e_all,
            d.triangle_holds(1e-9)
        );
    }
    Ok(())
}
