use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use deot::analysis::{decompose_errors, mismatch_bound_check, sketch_error_trials, SketchSpec};
use deot::eot::{sinkhorn_oracle, KernelBlocks};
use deot::experiment::{
    domain_adapt, generate_pair, run_experiment, setup_variant, ExperimentConfig,
};
use deot::mrbcd::{solve, KernelSource, SolverConfig};
use deot::netsim::Phase;
use deot::sketch::{distributed_sketch, draw_shared_randomness, sketch_error_bound, GipParams};
use deot::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Decentralized entropic optimal transport experiments.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// JSON experiment config; built-in defaults (listed below) when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Override a config entry by key path, e.g. `--set solver.eta0=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the source and target samples as CSV.
    GenData,
    /// Centralized log-domain Sinkhorn on the full measures.
    SolveCentralized,
    /// One decentralized run: trace, ledger and the assembled distance.
    SolveDecentralized,
    /// Sketch the kernel and compare it with the exact one.
    ApproxKernel {
        /// Projection count; defaults to the config's kernel or 1000.
        #[arg(long)]
        projections: Option<usize>,
    },
    /// Split the total error into model, kernel and algorithm parts.
    DecomposeError,
    /// Check the protocol-mismatch and kernel-sketch bounds.
    CheckBounds {
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Run the config's sweep over all seeds.
    Sweep,
    /// Transport labeled source data onto the target and classify with 1NN.
    DomainAdapt,
}

fn main() -> ExitCode {
    let defaults = serde_json::to_string_pretty(&ExperimentConfig::default())
        .expect("default config serializes");
    let matches = Cli::command()
        .after_long_help(format!("Default config:\n{defaults}"))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Aborted { trace, .. } = &e {
                let dir = out_dir(&cli, None);
                if std::fs::create_dir_all(&dir).is_ok() {
                    if let Ok(f) = std::fs::File::create(dir.join("trace_aborted.csv")) {
                        let _ = trace.write_csv(f, true);
                        eprintln!(
                            "partial trace written to {}",
                            dir.join("trace_aborted.csv").display()
                        );
                    }
                }
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> deot::Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => serde_json::to_string(&ExperimentConfig::default())?,
    };
    let mut cfg = ExperimentConfig::from_json_with_overrides(&text, &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.map(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes `name.json` or `name.csv` (header plus one row per record).
fn emit<T: Serialize>(dir: &Path, name: &str, format: Format, records: &[T]) -> deot::Result<()> {
    std::fs::create_dir_all(dir)?;
    match format {
        Format::Json => {
            let body = if records.len() == 1 {
                serde_json::to_string_pretty(&records[0])?
            } else {
                serde_json::to_string_pretty(records)?
            };
            std::fs::write(dir.join(format!("{name}.json")), body)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CentralizedRow {
    seed: u64,
    value: f64,
    dual_value: f64,
    iterations: usize,
    violation: f64,
    converged: bool,
}

#[derive(Serialize)]
struct DecentralizedRow {
    seed: u64,
    distance: f64,
    oracle: f64,
    gap: f64,
    sketch_bits: u64,
    dual_scalars: u64,
    assembly_scalars: u64,
    max_grad_norm: f64,
}

#[derive(Serialize)]
struct KernelRow {
    seed: u64,
    projections: usize,
    frobenius: f64,
    bound: f64,
    sketch_bits: u64,
    norm_scalars: u64,
}

#[derive(Serialize)]
struct BoundsRow {
    seed: u64,
    mismatch_lhs: f64,
    tau: f64,
    sigma: f64,
    mismatch_holds: bool,
    projections: usize,
    frobenius: f64,
    sketch_bound: f64,
    sketch_holds: bool,
}

#[derive(Serialize)]
struct DecompositionRow {
    seed: u64,
    #[serde(flatten)]
    errors: deot::analysis::ErrorDecomposition,
}

#[derive(Serialize)]
struct AdaptationRow {
    seed: u64,
    accuracy: f64,
    source_only_accuracy: f64,
    correct: usize,
    total: usize,
    distance: f64,
    config_hash: String,
}

fn projections_of(cfg: &ExperimentConfig, explicit: Option<usize>) -> (usize, bool) {
    match (explicit, cfg.solver.kernel_source) {
        (Some(p), KernelSource::Approximated { normalized, .. }) => (p, normalized),
        (Some(p), KernelSource::Exact) => (p, false),
        (
            None,
            KernelSource::Approximated {
                projections,
                normalized,
            },
        ) => (projections, normalized),
        (None, KernelSource::Exact) => (1000, false),
    }
}

fn run(cli: &Cli) -> deot::Result<()> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, Some(&cfg));
    let spec = cfg.spec()?;
    let base = cfg.variants().remove(0);
    match &cli.command {
        Command::GenData => {
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                std::fs::create_dir_all(&dir)?;
                mu.samples().write_csv(std::fs::File::create(
                    dir.join(format!("source_seed{seed}.csv")),
                )?)?;
                gamma.samples().write_csv(std::fs::File::create(
                    dir.join(format!("target_seed{seed}.csv")),
                )?)?;
                println!(
                    "seed {seed}: {} source and {} target samples written to {}",
                    mu.len(),
                    gamma.len(),
                    dir.display()
                );
            }
        }
        Command::SolveCentralized => {
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let r = sinkhorn_oracle(&mu, &gamma, &spec, &cfg.oracle)?;
                println!(
                    "seed {seed}: W_eps = {:.10} ({} iterations)",
                    r.dual_value, r.iterations
                );
                rows.push(CentralizedRow {
                    seed,
                    value: r.value,
                    dual_value: r.dual_value,
                    iterations: r.iterations,
                    violation: r.violation,
                    converged: r.converged,
                });
            }
            emit(&dir, "centralized", cli.format, &rows)?;
        }
        Command::SolveDecentralized => {
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let w = sinkhorn_oracle(&mu, &gamma, &spec, &cfg.oracle)?.dual_value;
                let (part, e) = setup_variant(&mu, &gamma, &base, seed)?;
                let solver = SolverConfig {
                    seed,
                    eta0: cfg.eta0_for(&part, &e, base.batch),
                    ..cfg.solver.clone()
                };
                let out = solve(&part, &e, &spec, &solver, Some(w))?;
                std::fs::create_dir_all(&dir)?;
                out.trace.write_csv(
                    std::fs::File::create(dir.join(format!("trace_seed{seed}.csv")))?,
                    cfg.record_wall_time,
                )?;
                std::fs::write(
                    dir.join(format!("ledger_seed{seed}.json")),
                    out.ledger.to_json()?,
                )?;
                println!(
                    "seed {seed}: W_tilde = {:.8}, oracle = {w:.8}, gap = {:.3e}",
                    out.distance,
                    (out.distance - w).abs()
                );
                rows.push(DecentralizedRow {
                    seed,
                    distance: out.distance,
                    oracle: w,
                    gap: (out.distance - w).abs(),
                    sketch_bits: out.ledger.phase_totals(Phase::KernelSketch).bits,
                    dual_scalars: out.ledger.phase_totals(Phase::DualUpdate).scalars,
                    assembly_scalars: out.ledger.phase_totals(Phase::Assembly).scalars,
                    max_grad_norm: out.max_grad_norm,
                });
            }
            emit(&dir, "decentralized", cli.format, &rows)?;
        }
        Command::ApproxKernel { projections } => {
            let (p, normalized) = projections_of(&cfg, *projections);
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let (part, _) = setup_variant(&mu, &gamma, &base, seed)?;
                let rand = draw_shared_randomness(seed, p, part.dim())?;
                let (approx, ledger) = distributed_sketch(&part, &rand, &spec, normalized)?;
                let exact = KernelBlocks::exact(&part, &spec)?;
                let params = GipParams::estimate(mu.samples(), gamma.samples(), spec.epsilon, 0.1)?;
                let row = KernelRow {
                    seed,
                    projections: p,
                    frobenius: exact.frobenius_distance(&approx),
                    bound: sketch_error_bound(mu.len(), gamma.len(), p, &params),
                    sketch_bits: ledger.total_bits(),
                    norm_scalars: ledger.total_scalars(),
                };
                println!(
                    "seed {seed}: ||K - K_hat||_F = {:.4e} (bound {:.4e}), {} bits",
                    row.frobenius, row.bound, row.sketch_bits
                );
                rows.push(row);
            }
            emit(&dir, "approx_kernel", cli.format, &rows)?;
        }
        Command::DecomposeError => {
            let sketch = match cfg.solver.kernel_source {
                KernelSource::Approximated {
                    projections,
                    normalized,
                } => Some((projections, normalized)),
                KernelSource::Exact => None,
            };
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let (part, e) = setup_variant(&mu, &gamma, &base, seed)?;
                let solver = SolverConfig {
                    seed,
                    clamp_batch: true,
                    eta0: cfg.eta0_for(&part, &e, base.batch),
                    ..cfg.solver.clone()
                };
                let sk = sketch.map(|(projections, normalized)| SketchSpec {
                    projections,
                    normalized,
                    seed,
                });
                let d = decompose_errors(&part, &e, &spec, sk, &solver, &cfg.oracle)?;
                println!(
                    "seed {seed}: e_model {:.3e}, e_kernel {:.3e}, e_algorithm {:.3e}, e_all {:.3e}",
                    d.e_model, d.e_kernel, d.e_algorithm, d.e_all
                );
                rows.push(DecompositionRow { seed, errors: d });
            }
            emit(&dir, "decomposition", cli.format, &rows)?;
        }
        Command::CheckBounds { delta } => {
            let (p, _) = projections_of(&cfg, None);
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let (part, e) = setup_variant(&mu, &gamma, &base, seed)?;
                let c = mismatch_bound_check(&part, &e, &spec, &cfg.oracle)?;
                let s = sketch_error_trials(&part, &spec, &[p], &[seed], *delta)?.remove(0);
                println!(
                    "seed {seed}: |W_tilde - W| = {:.3e} <= tau sigma = {:.3e}: {}; ||K - K_hat||_F = {:.3e} <= {:.3e}: {}",
                    c.lhs,
                    c.tau * c.sigma,
                    c.holds,
                    s.frobenius,
                    s.bound,
                    s.frobenius <= s.bound
                );
                rows.push(BoundsRow {
                    seed,
                    mismatch_lhs: c.lhs,
                    tau: c.tau,
                    sigma: c.sigma,
                    mismatch_holds: c.holds,
                    projections: p,
                    frobenius: s.frobenius,
                    sketch_bound: s.bound,
                    sketch_holds: s.frobenius <= s.bound,
                });
            }
            emit(&dir, "bounds", cli.format, &rows)?;
        }
        Command::Sweep => {
            let summary = run_experiment(&cfg)?;
            for r in &summary.runs {
                println!(
                    "{} seed {}: W_tilde = {:.6}, gap = {:.3e}",
                    r.variant, r.seed, r.distance, r.gap
                );
            }
            if let Format::Csv = cli.format {
                emit(&dir, "summary_runs", Format::Csv, &summary.runs)?;
            }
            println!("summary written to {}", dir.join("summary.json").display());
        }
        Command::DomainAdapt => {
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (mu, gamma) = generate_pair(&cfg, seed)?;
                let r = domain_adapt(mu.samples(), gamma.samples(), &cfg, seed)?;
                println!(
                    "seed {seed}: accuracy {:.3} (source only {:.3})",
                    r.accuracy, r.source_only_accuracy
                );
                rows.push(AdaptationRow {
                    seed,
                    accuracy: r.accuracy,
                    source_only_accuracy: r.source_only_accuracy,
                    correct: r.correct,
                    total: r.total,
                    distance: r.distance,
                    config_hash: r.config_hash,
                });
            }
            emit(&dir, "adaptation", cli.format, &rows)?;
        }
    }
    Ok(())
}
