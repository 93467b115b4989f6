//! A config-driven sweep over the partner count `L`.
//!
//! Each run writes its trace and ledger; `summary.json` collects the final
//! gaps with the config hash, so a rerun with the same config reproduces the
//! output byte for byte.
//!
//! `cargo run --release --example batch_sweep`

use deot::experiment::{run_experiment, ExperimentConfig};

fn main() -> deot::Result<()> {
    let out = std::env::temp_dir().join("deot_batch_sweep");
    let config = ExperimentConfig::from_json_with_overrides(
        &serde_json::to_string(&ExperimentConfig::default())?,
        &[
            "source.n=100".into(),
            "target.n=100".into(),
            "source_agents=5".into(),
            "target_agents=5".into(),
            "solver.iterations=3000".into(),
            "seeds=[0,1,2]".into(),
            "sweep.batch=[1,2,5]".into(),
            format!("output={:?}", out.display().to_string()),
        ],
    )?;
    let summary = run_experiment(&config)?;
    for label in ["L1", "L2", "L5"] {
        println!(
            "{label}: median final gap {:.3e}",
            summary.median_gap(label).unwrap_or(f64::NAN)
        );
    }
    println!(
        "traces, ledgers and summary.json written to {}",
        out.display()
    );
    Ok(())
}
