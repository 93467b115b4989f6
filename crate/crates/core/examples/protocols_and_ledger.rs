//! Communication protocols and what they cost.
//!
//! Sparse protocols cut links between agents. That moves the decentralized
//! objective away from the centralized one by at most `tau * sigma`, where
//! `sigma` measures how far the protocol is from the storage product `p q^T`.
//! The ledger counts every scalar and bit sent, per phase.
//!
//! `cargo run --release --example protocols_and_ledger`

use deot::analysis::mismatch_bound_check;
use deot::eot::SinkhornConfig;
use deot::experiment::{generate_synthetic, Covariance, DatasetSpec};
use deot::measures::CostSpec;
use deot::mrbcd::{curvature_step_for, solve, KernelSource, SolverConfig};
use deot::netsim::{
    protocol_generator, protocol_mismatch, storage_protocol, AgentPartition, Phase, ProtocolKind,
    StorageMode,
};

fn main() -> deot::Result<()> {
    let cloud = |x: f64| DatasetSpec::Gaussian {
        n: 60,
        mean: vec![x, 0.0],
        covariance: Covariance::Isotropic(0.1),
    };
    let mu = generate_synthetic(&cloud(0.0), 1)?;
    let gamma = generate_synthetic(&cloud(0.8), 2)?;
    let spec = CostSpec::squared_euclidean(0.2)?;
    let part = AgentPartition::scatter_both(&mu, &gamma, 4, 4, StorageMode::Iid, 3)?;
    let (p, q) = (part.source_mass(), part.target_mass());

    let protocols = [
        ("ideal", storage_protocol(&p, &q)?),
        (
            "sparse",
            protocol_generator(ProtocolKind::Sparse, 4, 4, 0.5, 5)?,
        ),
        (
            "sparse asymmetric",
            protocol_generator(ProtocolKind::SparseAsymmetric, 4, 4, 0.5, 5)?,
        ),
    ];
    for (name, e) in &protocols {
        let check = mismatch_bound_check(&part, e, &spec, &SinkhornConfig::default())?;
        println!(
            "{name:<18} sigma = {:.3}  |W~ - W| = {:.4e} <= tau sigma = {:.4e}: {}",
            protocol_mismatch(e, &p, &q)?,
            check.lhs,
            check.tau * check.sigma,
            check.holds
        );
    }

    let e = &protocols[1].1;
    let cfg = SolverConfig {
        epsilon: spec.epsilon,
        eta0: 2.0
            * curvature_step_for(
                e,
                &part.source_sizes(),
                &part.target_sizes(),
                spec.epsilon,
                2,
            ),
        iterations: 1000,
        batch: 2,
        clamp_batch: true,
        kernel_source: KernelSource::Approximated {
            projections: 256,
            normalized: false,
        },
        ..Default::default()
    };
    let out = solve(&part, e, &spec, &cfg, None)?;
    println!("\nsparse protocol, sketched kernel, 1000 iterations:");
    for phase in [Phase::KernelSketch, Phase::DualUpdate, Phase::Assembly] {
        let t = out.ledger.phase_totals(phase);
        println!(
            "  {phase:?}: {} messages, {} scalars, {} bits",
            t.messages, t.scalars, t.bits
        );
    }
    Ok(())
}
