//! Mini-batch randomized block-coordinate dual ascent over agent blocks.
//!
//! Each iteration samples one agent pair `(i, j) ~ E`, then `L` target agents
//! from row `i` and `L` source agents from column `j` (without replacement).
//! Source `i` receives the sampled targets' `v` blocks and ascends its `u`
//! block; target `j` receives the sampled sources' `u` blocks (pre-update
//! values) and ascends its `v` block. The step is `eta0 / sqrt(t + 1)`.
//!
//! Updates carry the `e_ij / (N_i M_j)` weights of the objective by default;
//! `weighted = false` sums plain pair gradients instead.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::eot::{assemble_distance, DualProblem, DualState, KernelBlocks, PairObjectiveTable};
use crate::error::{Error, Result};
use crate::measures::CostSpec;
use crate::netsim::{
    sample_pair, sample_sources_for_target, sample_targets_for_source, sim_rng, AgentId,
    AgentPartition, CommLedger, Payload, Phase, ProtocolMatrix, SimRng,
};
use crate::sketch::{distributed_sketch, draw_shared_randomness};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum KernelSource {
    Exact,
    Approximated {
        projections: usize,
        normalized: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    /// Initial learning rate `eta`.
    pub eta0: f64,
    /// Iteration budget `T`.
    pub iterations: u64,
    /// Mini-batch agent count `L`.
    pub batch: usize,
    pub seed: u64,
    pub kernel_source: KernelSource,
    /// Trace stride; the final iteration is always recorded.
    pub record_every: u64,
    /// Apply `e_ij / (N_i M_j)` weights in the stochastic update.
    pub weighted: bool,
    /// Use `min(L, support)` for rows/columns of `E` with fewer than `L`
    /// positive entries instead of failing.
    pub clamp_batch: bool,
    /// Evaluate the objective at every trace record. Off saves `O(NM)` work.
    pub trace_objective: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            eta0: 1.0,
            iterations: 1000,
            batch: 1,
            seed: 0,
            kernel_source: KernelSource::Exact,
            record_every: 10,
            weighted: true,
            clamp_batch: false,
            trace_objective: true,
        }
    }
}

/// Default grid for `eta0` when tuning.
pub const ETA0_GRID: [f64; 5] = [1.0, 0.5, 0.1, 0.01, 0.001];

impl SolverConfig {
    /// Checks the config against a protocol; returns every problem found.
    pub fn validate(&self, protocol: &ProtocolMatrix) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0) {
            errs.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            errs.push(format!("eta0 must be positive, got {}", self.eta0));
        }
        if self.iterations == 0 {
            errs.push("iterations must be at least 1".into());
        }
        if self.batch == 0 {
            errs.push("batch size L must be at least 1".into());
        }
        if self.record_every == 0 {
            errs.push("record_every must be at least 1".into());
        }
        if let KernelSource::Approximated { projections: 0, .. } = self.kernel_source {
            errs.push("approximated kernel needs at least one projection".into());
        }
        if !self.clamp_batch && self.batch > 0 {
            let rows = (0..protocol.n_sources()).filter(|&i| protocol.row_mass(i) > 0.0);
            if let Some(min_row) = rows.map(|i| protocol.row_support(i)).min() {
                if self.batch > min_row {
                    errs.push(format!(
                        "L = {} exceeds the smallest positive row support {min_row} of E",
                        self.batch
                    ));
                }
            }
            let cols = (0..protocol.n_targets()).filter(|&j| protocol.col_mass(j) > 0.0);
            if let Some(min_col) = cols.map(|j| protocol.col_support(j)).min() {
                if self.batch > min_col {
                    errs.push(format!(
                        "L = {} exceeds the smallest positive column support {min_col} of E",
                        self.batch
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Inverse of the largest approximate block curvature near the optimum.
///
/// With weighted updates the curvature of source block `i` is about
/// `L a_i / (eps * support_i)` where `a_i = p_i / N_i`, and symmetrically for
/// targets; `eta0` of one to two times this value is a stable choice.
pub fn curvature_step(problem: &DualProblem, batch: usize) -> f64 {
    curvature_step_for(
        &problem.protocol,
        &problem.source_sizes(),
        &problem.target_sizes(),
        problem.epsilon,
        batch,
    )
}

/// [`curvature_step`] from the protocol and block sizes alone.
pub fn curvature_step_for(
    protocol: &ProtocolMatrix,
    source_sizes: &[usize],
    target_sizes: &[usize],
    epsilon: f64,
    batch: usize,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &n) in source_sizes.iter().enumerate() {
        let s = protocol.row_support(i);
        if s > 0 {
            worst = worst.max(batch.min(s) as f64 * protocol.row_mass(i) / (n as f64 * s as f64));
        }
    }
    for (j, &m) in target_sizes.iter().enumerate() {
        let s = protocol.col_support(j);
        if s > 0 {
            worst = worst.max(batch.min(s) as f64 * protocol.col_mass(j) / (m as f64 * s as f64));
        }
    }
    epsilon / worst
}

/// `eta0 / sqrt(t + 1)`.
pub fn learning_rate(t: u64, eta0: f64) -> f64 {
    eta0 / ((t + 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    /// Objective at the current iterate.
    pub dual_objective: Option<f64>,
    /// Objective at the averaged iterate.
    pub averaged_objective: Option<f64>,
    /// `|F(u_hat, v_hat) - reference|` when a reference value is known.
    pub gap: Option<f64>,
    pub comm_scalars: u64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    /// CSV with columns `t,F,F_avg,gap,comm_scalars,wall_ms`; missing values
    /// are empty fields.
    pub fn write_csv<W: std::io::Write>(&self, writer: W, include_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "F", "F_avg", "gap", "comm_scalars", "wall_ms"])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.records {
            let wall = if include_wall_time {
                format!("{:.3}", r.wall_ms)
            } else {
                String::new()
            };
            w.write_record([
                r.t.to_string(),
                opt(r.dual_objective),
                opt(r.averaged_objective),
                opt(r.gap),
                r.comm_scalars.to_string(),
                wall,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// First recorded iteration whose gap is at most `threshold`.
    pub fn iterations_to_gap(&self, threshold: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.gap.is_some_and(|g| g <= threshold))
            .map(|r| r.t)
    }
}

/// One running instance of the ascent.
pub struct Mrbcd<'a> {
    problem: &'a DualProblem,
    config: SolverConfig,
    rng: SimRng,
    state: DualState,
    ledger: CommLedger,
    max_grad_norm: f64,
}

impl<'a> Mrbcd<'a> {
    pub fn new(problem: &'a DualProblem, config: SolverConfig) -> Result<Self> {
        config.validate(&problem.protocol)?;
        Ok(Self {
            rng: sim_rng(config.seed),
            state: problem.zero_state(),
            problem,
            config,
            ledger: CommLedger::new(),
            max_grad_norm: 0.0,
        })
    }

    /// Starts from a given state instead of zeros.
    pub fn with_state(mut self, state: DualState) -> Self {
        self.state = state;
        self
    }

    pub fn state(&self) -> &DualState {
        &self.state
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Largest norm of an applied stochastic gradient so far.
    pub fn max_grad_norm(&self) -> f64 {
        self.max_grad_norm
    }

    fn batch_for(&self, support: usize) -> usize {
        if self.config.clamp_batch {
            self.config.batch.min(support)
        } else {
            self.config.batch
        }
    }

    /// One iteration. Returns the sampled pair and mini-batches.
    pub fn step(&mut self) -> Result<StepInfo> {
        let e = &self.problem.protocol;
        let t = self.state.iteration;
        let eta = learning_rate(t, self.config.eta0);
        let (i, j) = sample_pair(e, &mut self.rng);
        let targets =
            sample_targets_for_source(i, e, self.batch_for(e.row_support(i)), &mut self.rng)?;
        let sources =
            sample_sources_for_target(j, e, self.batch_for(e.col_support(j)), &mut self.rng)?;

        for &jj in &targets {
            self.ledger.record_transfer(
                Phase::DualUpdate,
                Some(t),
                AgentId::Target(jj),
                vec![AgentId::Source(i)],
                Payload::Duals {
                    len: self.state.v_blocks[jj].len(),
                },
            );
        }
        for &ii in &sources {
            self.ledger.record_transfer(
                Phase::DualUpdate,
                Some(t),
                AgentId::Source(ii),
                vec![AgentId::Target(j)],
                Payload::Duals {
                    len: self.state.u_blocks[ii].len(),
                },
            );
        }

        let ctx = |err: Error| err.with_context(format!("iteration {t}"));
        let (u, v) = (&self.state.u_blocks, &self.state.v_blocks);
        let gu = self
            .problem
            .block_gradient_u_scaled(i, u, v, &targets, self.config.weighted)
            .map_err(ctx)?;
        let gv = self
            .problem
            .block_gradient_v_scaled(j, u, v, &sources, self.config.weighted)
            .map_err(ctx)?;
        let norm = (gu.dot(&gu) + gv.dot(&gv)).sqrt();
        self.max_grad_norm = self.max_grad_norm.max(norm);

        self.state.u_blocks[i].scaled_add(eta, &gu);
        self.state.v_blocks[j].scaled_add(eta, &gv);
        if self.state.u_blocks[i]
            .iter()
            .chain(self.state.v_blocks[j].iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite(format!("dual state at iteration {t}")));
        }
        self.state.advance_average();
        Ok(StepInfo {
            pair: (i, j),
            targets,
            sources,
            eta,
        })
    }

    fn record(&self, trace: &mut RunTrace, reference: Option<f64>, start: Instant) -> Result<()> {
        let (f, fa) = if self.config.trace_objective {
            let (ua, va) = self.state.averaged_iterates();
            (
                Some(
                    self.problem
                        .objective(&self.state.u_blocks, &self.state.v_blocks)?,
                ),
                Some(self.problem.objective(ua, va)?),
            )
        } else {
            (None, None)
        };
        trace.records.push(TraceRecord {
            t: self.state.iteration,
            dual_objective: f,
            averaged_objective: fa,
            gap: reference.zip(fa).map(|(r, x)| (x - r).abs()),
            comm_scalars: self.ledger.phase_totals(Phase::DualUpdate).scalars,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    }

    /// Runs the remaining budget, then assembles the distance at the averaged
    /// iterates. On failure the trace so far is attached to the error.
    pub fn run(mut self, reference: Option<f64>) -> Result<SolveOutput> {
        let start = Instant::now();
        let mut trace = RunTrace::default();
        let abort = |err: Error, trace: RunTrace, it: u64| Error::Aborted {
            iteration: it,
            cause: Box::new(err),
            trace: Box::new(trace),
        };
        while self.state.iteration < self.config.iterations {
            if let Err(e) = self.step() {
                let it = self.state.iteration;
                return Err(abort(e, trace, it));
            }
            let t = self.state.iteration;
            if t.is_multiple_of(self.config.record_every) || t == self.config.iterations {
                if let Err(e) = self.record(&mut trace, reference, start) {
                    return Err(abort(e, trace, t));
                }
            }
        }
        let (ua, va) = self.state.averaged_iterates();
        let table = self.problem.pair_table(ua, va)?;
        let distance = assemble_distance(
            &table,
            &self.problem.protocol,
            &self.problem.source_sizes(),
            &self.problem.target_sizes(),
        )?;
        record_assembly(
            &mut self.ledger,
            self.problem.kernel.n_sources(),
            self.problem.kernel.n_targets(),
        );
        Ok(SolveOutput {
            distance,
            table,
            state: self.state,
            trace,
            ledger: self.ledger,
            max_grad_norm: self.max_grad_norm,
        })
    }
}

/// Source 0 collects the other sources' local objectives (`J` each) and
/// broadcasts the assembled distance to every other agent.
fn record_assembly(ledger: &mut CommLedger, sources: usize, targets: usize) {
    for i in 1..sources {
        ledger.record_transfer(
            Phase::Assembly,
            None,
            AgentId::Source(i),
            vec![AgentId::Source(0)],
            Payload::Objectives { len: targets },
        );
    }
    let others: Vec<AgentId> = (1..sources)
        .map(AgentId::Source)
        .chain((0..targets).map(AgentId::Target))
        .collect();
    ledger.record_transfer(
        Phase::Assembly,
        None,
        AgentId::Source(0),
        others,
        Payload::Distance,
    );
}

/// Closed-form assembly cost: `(I - 1) J + (I - 1 + J)` scalars.
pub fn assembly_scalars(sources: usize, targets: usize) -> u64 {
    ((sources - 1) * targets + (sources - 1 + targets)) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub pair: (usize, usize),
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub eta: f64,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    /// Assembled distance at the averaged iterates.
    pub distance: f64,
    pub table: PairObjectiveTable,
    pub state: DualState,
    pub trace: RunTrace,
    pub ledger: CommLedger,
    pub max_grad_norm: f64,
}

impl SolveOutput {
    /// `(u_hat^T, v_hat^T)`.
    pub fn averaged_iterates(&self) -> (&[Array1<f64>], &[Array1<f64>]) {
        self.state.averaged_iterates()
    }
}

/// Builds the kernel the config asks for. Approximated kernels run the sketch
/// exchange and return its ledger.
pub fn build_kernel(
    partition: &AgentPartition,
    spec: &CostSpec,
    config: &SolverConfig,
) -> Result<(KernelBlocks, CommLedger)> {
    match config.kernel_source {
        KernelSource::Exact => Ok((KernelBlocks::exact(partition, spec)?, CommLedger::new())),
        KernelSource::Approximated {
            projections,
            normalized,
        } => {
            let rand = draw_shared_randomness(config.seed, projections, partition.dim())?;
            distributed_sketch(partition, &rand, spec, normalized)
        }
    }
}

/// End-to-end decentralized solve: kernel construction, `T` iterations, and
/// distance assembly. The returned ledger covers all three phases.
pub fn solve(
    partition: &AgentPartition,
    protocol: &ProtocolMatrix,
    spec: &CostSpec,
    config: &SolverConfig,
    reference: Option<f64>,
) -> Result<SolveOutput> {
    if (spec.epsilon - config.epsilon).abs() > 0.0 {
        return Err(Error::invalid(
            "cost spec and solver config disagree on epsilon",
        ));
    }
    let (kernel, sketch_ledger) = build_kernel(partition, spec, config)?;
    let problem = DualProblem::new(kernel, protocol.clone(), config.epsilon)?;
    let mut out = Mrbcd::new(&problem, config.clone())?.run(reference)?;
    let mut ledger = sketch_ledger;
    ledger.extend(&out.ledger);
    out.ledger = ledger;
    Ok(out)
}
