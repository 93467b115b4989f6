//! Empirical checks of the error theory: the model / kernel / algorithm
//! decomposition, the protocol-mismatch bound, the rate-plus-sketch bound
//! curve, and kernel-error propagation.
//!
//! Every "optimal" value here comes from a high-accuracy reference solve
//! ([`DualProblem::solve_reference`] or the centralized oracle), never from
//! the stochastic solver itself.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eot::{sinkhorn_oracle, DualProblem, KernelBlocks, SinkhornConfig};
use crate::error::{Error, Result};
use crate::measures::CostSpec;
use crate::mrbcd::{Mrbcd, SolverConfig};
use crate::netsim::{protocol_mismatch, AgentPartition, ProtocolMatrix};
use crate::sketch::{distributed_sketch, draw_shared_randomness, sketch_error_bound, GipParams};

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// How the approximate kernel is built for an analysis run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub projections: usize,
    pub normalized: bool,
    pub seed: u64,
}

impl SketchSpec {
    pub fn build(&self, partition: &AgentPartition, spec: &CostSpec) -> Result<KernelBlocks> {
        let rand = draw_shared_randomness(self.seed, self.projections, partition.dim())?;
        Ok(distributed_sketch(partition, &rand, spec, self.normalized)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub e_model: f64,
    pub e_kernel: f64,
    pub e_algorithm: f64,
    pub e_all: f64,
    /// Centralized value `W_eps(mu, gamma)`.
    pub original_optimum: f64,
    /// Optimum of the protocol-weighted problem with the exact kernel.
    pub exact_kernel_optimum: f64,
    /// Optimum of the protocol-weighted problem with the approximate kernel.
    pub approx_kernel_optimum: f64,
    /// Objective at the solver's averaged iterates (approximate kernel).
    pub solver_value: f64,
    /// All three reference solves met their tolerance.
    pub reference_converged: bool,
}

impl ErrorDecomposition {
    /// `e_all <= e_model + e_kernel + e_algorithm + slack`.
    pub fn triangle_holds(&self, slack: f64) -> bool {
        self.e_all <= self.e_model + self.e_kernel + self.e_algorithm + slack
    }
}

/// Splits the total error of one solver run into its three sources.
///
/// `sketch = None` uses the exact kernel in place of the approximation, so
/// `e_kernel` is zero by construction.
pub fn decompose_errors(
    partition: &AgentPartition,
    protocol: &ProtocolMatrix,
    spec: &CostSpec,
    sketch: Option<SketchSpec>,
    solver: &SolverConfig,
    oracle: &SinkhornConfig,
) -> Result<ErrorDecomposition> {
    let original = sinkhorn_oracle(
        &partition.global_source()?,
        &partition.global_target()?,
        spec,
        oracle,
    )?;
    let exact = DualProblem::new(
        KernelBlocks::exact(partition, spec)?,
        protocol.clone(),
        spec.epsilon,
    )?;
    let (_, exact_ref) = exact.solve_reference(oracle)?;
    let approx = match sketch {
        Some(s) => DualProblem::new(s.build(partition, spec)?, protocol.clone(), spec.epsilon)?,
        None => exact.clone(),
    };
    let (_, approx_ref) = approx.solve_reference(oracle)?;
    let run = Mrbcd::new(&approx, solver.clone())?.run(None)?;

    let w = original.dual_value;
    let (we, wa, wt) = (exact_ref.dual_value, approx_ref.dual_value, run.distance);
    Ok(ErrorDecomposition {
        e_model: (we - w).abs(),
        e_kernel: (wa - we).abs(),
        e_algorithm: (wt - wa).abs(),
        e_all: (wt - w).abs(),
        original_optimum: w,
        exact_kernel_optimum: we,
        approx_kernel_optimum: wa,
        solver_value: wt,
        reference_converged: original.converged && exact_ref.converged && approx_ref.converged,
    })
}

/// Outcome of checking `|W_tilde - W| <= tau * sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchBoundCheck {
    pub lhs: f64,
    pub tau: f64,
    pub sigma: f64,
    pub holds: bool,
    pub protocol_value: f64,
    pub original_value: f64,
}

/// Absolute slack allowed on top of `tau * sigma`.
pub const MISMATCH_SLACK: f64 = 1e-6;

/// Solves both sides to high accuracy and compares against `tau * sigma`,
/// where `tau` is the largest pairwise EOT between agent shards.
///
/// The bound is only claimed for nonnegative pairwise values; instances with
/// a negative pair are rejected.
pub fn mismatch_bound_check(
    partition: &AgentPartition,
    protocol: &ProtocolMatrix,
    spec: &CostSpec,
    oracle: &SinkhornConfig,
) -> Result<MismatchBoundCheck> {
    let mut tau = f64::NEG_INFINITY;
    for (i, s) in partition.sources().iter().enumerate() {
        for (j, t) in partition.targets().iter().enumerate() {
            let w = sinkhorn_oracle(&s.measure, &t.measure, spec, oracle)?.dual_value;
            if w < 0.0 {
                return Err(Error::invalid(format!(
                    "pairwise EOT between source {i} and target {j} is negative ({w:.3e}); \
                     the mismatch bound needs costs large relative to epsilon"
                )));
            }
            tau = tau.max(w);
        }
    }
    let sigma = protocol_mismatch(protocol, &partition.source_mass(), &partition.target_mass())?;
    let problem = DualProblem::new(
        KernelBlocks::exact(partition, spec)?,
        protocol.clone(),
        spec.epsilon,
    )?;
    let protocol_value = problem.solve_reference(oracle)?.1.dual_value;
    let original_value = sinkhorn_oracle(
        &partition.global_source()?,
        &partition.global_target()?,
        spec,
        oracle,
    )?
    .dual_value;
    let lhs = (protocol_value - original_value).abs();
    Ok(MismatchBoundCheck {
        lhs,
        tau,
        sigma,
        holds: lhs <= tau * sigma + MISMATCH_SLACK,
        protocol_value,
        original_value,
    })
}

/// Constants that appear in the bounds, all estimated from data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub tau: f64,
    pub sigma: f64,
    pub lipschitz_g: f64,
    pub bound_b: f64,
    pub delta: f64,
    /// Largest stochastic gradient norm seen along a run.
    pub grad_bound: f64,
    /// Distance from the zero start to the reference optimum.
    pub initial_distance: f64,
    pub lipschitz_objective: Option<f64>,
    pub lipschitz_kernel: Option<f64>,
    /// Always true: none of these are exact constants.
    pub empirical: bool,
}

impl TheoryParams {
    pub fn estimate(
        partition: &AgentPartition,
        protocol: &ProtocolMatrix,
        spec: &CostSpec,
        solver: &SolverConfig,
        oracle: &SinkhornConfig,
        delta: f64,
    ) -> Result<Self> {
        let check = mismatch_bound_check(partition, protocol, spec, oracle)?;
        let gip = GipParams::estimate(
            partition.global_source()?.samples(),
            partition.global_target()?.samples(),
            spec.epsilon,
            delta,
        )?;
        let problem = DualProblem::new(
            KernelBlocks::exact(partition, spec)?,
            protocol.clone(),
            spec.epsilon,
        )?;
        let (opt, _) = problem.solve_reference(oracle)?;
        let r0 = opt
            .u_blocks
            .iter()
            .chain(opt.v_blocks.iter())
            .map(|b| b.dot(b))
            .sum::<f64>()
            .sqrt();
        let run = Mrbcd::new(&problem, solver.clone())?.run(None)?;
        Ok(Self {
            tau: check.tau,
            sigma: check.sigma,
            lipschitz_g: gip.lipschitz_g,
            bound_b: gip.bound_b,
            delta,
            grad_bound: run.max_grad_norm,
            initial_distance: r0,
            lipschitz_objective: None,
            lipschitz_kernel: None,
            empirical: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCurveRow {
    pub t: u64,
    /// `None` for the exact kernel.
    pub projections: Option<usize>,
    /// Mean over seeds of `|F(u_hat^t, v_hat^t; K_hat, E) - W_eps|`.
    pub measured: f64,
    /// `I J / sqrt(t)`.
    pub algorithm_term: f64,
    /// `(N + M) sqrt(ln(2 (N + M) / delta) / P)`; zero for the exact kernel.
    pub kernel_term: f64,
    /// `sigma`.
    pub model_term: f64,
}

impl BoundCurveRow {
    pub fn bound_shape(&self) -> f64 {
        self.algorithm_term + self.kernel_term + self.model_term
    }
}

/// Measured error against the three bound terms over a `(t, P)` grid.
/// Sketch seeds are fixed per trial; only agent selection varies with `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn bound_curve(
    partition: &AgentPartition,
    protocol: &ProtocolMatrix,
    spec: &CostSpec,
    solver: &SolverConfig,
    t_grid: &[u64],
    projections: &[Option<usize>],
    seeds: &[u64],
    delta: f64,
    oracle: &SinkhornConfig,
) -> Result<Vec<BoundCurveRow>> {
    if seeds.is_empty() || t_grid.is_empty() || t_grid.contains(&0) {
        return Err(Error::invalid(
            "need seeds and a grid of positive iteration counts",
        ));
    }
    let mut grid = t_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let w = sinkhorn_oracle(
        &partition.global_source()?,
        &partition.global_target()?,
        spec,
        oracle,
    )?
    .dual_value;
    let sigma = protocol_mismatch(protocol, &partition.source_mass(), &partition.target_mass())?;
    let (i, j) = (partition.n_sources() as f64, partition.n_targets() as f64);
    let nm = (partition.total_sources() + partition.total_targets()) as f64;
    let t_max = *grid.last().expect("nonempty");

    let mut rows = Vec::new();
    for &p in projections {
        let mut sums = vec![0.0; grid.len()];
        for &seed in seeds {
            let kernel = match p {
                Some(pp) => SketchSpec {
                    projections: pp,
                    normalized: false,
                    seed,
                }
                .build(partition, spec)?,
                None => KernelBlocks::exact(partition, spec)?,
            };
            let problem = DualProblem::new(kernel, protocol.clone(), spec.epsilon)?;
            let cfg = SolverConfig {
                seed,
                iterations: t_max,
                ..solver.clone()
            };
            let mut run = Mrbcd::new(&problem, cfg)?;
            let mut next = 0;
            while next < grid.len() {
                run.step()?;
                if run.state().iteration == grid[next] {
                    let (ua, va) = run.state().averaged_iterates();
                    sums[next] += (problem.objective(ua, va)? - w).abs();
                    next += 1;
                }
            }
        }
        for (k, &t) in grid.iter().enumerate() {
            rows.push(BoundCurveRow {
                t,
                projections: p,
                measured: sums[k] / seeds.len() as f64,
                algorithm_term: i * j / (t as f64).sqrt(),
                kernel_term: p.map_or(0.0, |pp| nm * ((2.0 * nm / delta).ln() / pp as f64).sqrt()),
                model_term: sigma,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelErrorRow {
    pub projections: usize,
    pub seed: u64,
    pub e_kernel: f64,
    pub frobenius: f64,
    pub ratio: f64,
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelErrorReport {
    pub rows: Vec<KernelErrorRow>,
    /// Largest `e_kernel / ||K - K_hat||_F` over the fitting seeds.
    pub lipschitz_kernel: f64,
    /// Every held-out row satisfies `e_kernel <= estimate * ||K - K_hat||_F`.
    pub held_out_ok: bool,
}

/// Measures how kernel error turns into objective error. The Lipschitz
/// estimate is fit on `fit_seeds` and checked on `held_out_seeds`.
pub fn kernel_error_propagation(
    partition: &AgentPartition,
    protocol: &ProtocolMatrix,
    spec: &CostSpec,
    projections: &[usize],
    fit_seeds: &[u64],
    held_out_seeds: &[u64],
    oracle: &SinkhornConfig,
) -> Result<KernelErrorReport> {
    if fit_seeds.is_empty() {
        return Err(Error::invalid("need at least one fitting seed"));
    }
    let exact_kernel = KernelBlocks::exact(partition, spec)?;
    let exact = DualProblem::new(exact_kernel.clone(), protocol.clone(), spec.epsilon)?;
    let we = exact.solve_reference(oracle)?.1.dual_value;
    let mut rows = Vec::new();
    for &p in projections {
        for (&seed, held_out) in fit_seeds
            .iter()
            .map(|s| (s, false))
            .chain(held_out_seeds.iter().map(|s| (s, true)))
        {
            let k = SketchSpec {
                projections: p,
                normalized: false,
                seed,
            }
            .build(partition, spec)?;
            let frobenius = exact_kernel.frobenius_distance(&k);
            let wa = DualProblem::new(k, protocol.clone(), spec.epsilon)?
                .solve_reference(oracle)?
                .1
                .dual_value;
            let e_kernel = (wa - we).abs();
            let ratio = if frobenius > 0.0 {
                e_kernel / frobenius
            } else {
                0.0
            };
            rows.push(KernelErrorRow {
                projections: p,
                seed,
                e_kernel,
                frobenius,
                ratio,
                held_out,
            });
        }
    }
    let lipschitz_kernel = rows
        .iter()
        .filter(|r| !r.held_out)
        .map(|r| r.ratio)
        .fold(0.0, f64::max);
    let held_out_ok = rows
        .iter()
        .filter(|r| r.held_out)
        .all(|r| r.e_kernel <= lipschitz_kernel * r.frobenius + 1e-12);
    Ok(KernelErrorReport {
        rows,
        lipschitz_kernel,
        held_out_ok,
    })
}

/// Measured `||K - K_hat||_F` next to the high-probability bound for one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchErrorRow {
    pub projections: usize,
    pub seed: u64,
    pub frobenius: f64,
    pub bound: f64,
}

pub fn sketch_error_trials(
    partition: &AgentPartition,
    spec: &CostSpec,
    projections: &[usize],
    seeds: &[u64],
    delta: f64,
) -> Result<Vec<SketchErrorRow>> {
    let exact = KernelBlocks::exact(partition, spec)?;
    let params = GipParams::estimate(
        partition.global_source()?.samples(),
        partition.global_target()?.samples(),
        spec.epsilon,
        delta,
    )?;
    let (n, m) = (partition.total_sources(), partition.total_targets());
    let mut rows = Vec::new();
    for &p in projections {
        let bound = sketch_error_bound(n, m, p, &params);
        for &seed in seeds {
            let k = SketchSpec {
                projections: p,
                normalized: false,
                seed,
            }
            .build(partition, spec)?;
            rows.push(SketchErrorRow {
                projections: p,
                seed,
                frobenius: exact.frobenius_distance(&k),
                bound,
            });
        }
    }
    Ok(rows)
}

/// A table that can be written as CSV with a header row.
pub trait CsvTable {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

impl CsvTable for [ErrorDecomposition] {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "e_model",
            "e_kernel",
            "e_algorithm",
            "e_all",
            "original_optimum",
            "exact_kernel_optimum",
            "approx_kernel_optimum",
            "solver_value",
            "reference_converged",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|d| {
                vec![
                    num(d.e_model),
                    num(d.e_kernel),
                    num(d.e_algorithm),
                    num(d.e_all),
                    num(d.original_optimum),
                    num(d.exact_kernel_optimum),
                    num(d.approx_kernel_optimum),
                    num(d.solver_value),
                    d.reference_converged.to_string(),
                ]
            })
            .collect()
    }
}

impl CsvTable for [BoundCurveRow] {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "t",
            "projections",
            "measured",
            "algorithm_term",
            "kernel_term",
            "model_term",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.t.to_string(),
                    r.projections
                        .map(|p| p.to_string())
                        .unwrap_or_else(|| "exact".into()),
                    num(r.measured),
                    num(r.algorithm_term),
                    num(r.kernel_term),
                    num(r.model_term),
                ]
            })
            .collect()
    }
}

impl CsvTable for [KernelErrorRow] {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "projections",
            "seed",
            "e_kernel",
            "frobenius",
            "ratio",
            "held_out",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.projections.to_string(),
                    r.seed.to_string(),
                    num(r.e_kernel),
                    num(r.frobenius),
                    num(r.ratio),
                    r.held_out.to_string(),
                ]
            })
            .collect()
    }
}

impl CsvTable for [SketchErrorRow] {
    fn header(&self) -> Vec<&'static str> {
        vec!["projections", "seed", "frobenius", "bound"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.projections.to_string(),
                    r.seed.to_string(),
                    num(r.frobenius),
                    num(r.bound),
                ]
            })
            .collect()
    }
}

pub fn write_table<T: CsvTable + ?Sized, W: Write>(table: &T, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(table.header())?;
    for r in table.rows() {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar written next to every exported table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub seed: Option<u64>,
    pub config_hash: String,
    pub columns: Vec<String>,
}

/// Writes `<stem>.csv` and `<stem>.json` (metadata) into `dir`.
pub fn export_table<T: CsvTable + ?Sized>(
    table: &T,
    dir: &Path,
    stem: &str,
    seed: Option<u64>,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(
        table,
        std::fs::File::create(dir.join(format!("{stem}.csv")))?,
    )?;
    let meta = TableMeta {
        seed,
        config_hash: config_hash.to_string(),
        columns: table.header().into_iter().map(String::from).collect(),
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}
