//! Dual entropic OT machinery: the protocol-weighted sampled dual objective,
//! its block gradients, coupling recovery, and a log-domain Sinkhorn solver
//! used as the centralized reference.
//!
//! Throughout, the objective is
//!
//! ```text
//! F(u, v) = sum_ij  e_ij / (N_i M_j) * f_ij(u_i, v_j)
//! f_ij    = sum_nm  u_n + v_m - eps * exp((u_n + v_m) / eps) * k_nm
//! ```
//!
//! Exponents are evaluated as `(u_n + v_m)/eps + ln k_nm` and checked against
//! an overflow guard; an exponent above the guard is an error, never a
//! saturated value.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{
    cost_matrix, kernel_block_for_agents, CostSpec, DiscreteMeasure, KernelBlock,
};
use crate::netsim::{AgentPartition, ProtocolMatrix};

pub const DEFAULT_OVERFLOW_GUARD: f64 = 30.0;

#[inline]
fn guarded_exp(z: f64, guard: f64) -> Result<f64> {
    if z > guard {
        return Err(Error::Overflow {
            exponent: z,
            guard,
            context: None,
        });
    }
    if z.is_nan() {
        return Err(Error::NonFinite("dual exponent".into()));
    }
    Ok(z.exp())
}

/// Kernel blocks `K_ij` for every agent pair, indexed `[i][j]`.
#[derive(Clone, Debug)]
pub struct KernelBlocks {
    blocks: Vec<Vec<KernelBlock>>,
}

impl KernelBlocks {
    pub fn new(blocks: Vec<Vec<KernelBlock>>) -> Result<Self> {
        if blocks.is_empty() || blocks[0].is_empty() {
            return Err(Error::invalid("kernel needs at least one block"));
        }
        let cols = blocks[0].len();
        for (i, row) in blocks.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::invalid("ragged kernel block grid"));
            }
            for (j, b) in row.iter().enumerate() {
                if b.dim().0 != row[0].dim().0 || b.dim().1 != blocks[0][j].dim().1 {
                    return Err(Error::invalid(format!(
                        "kernel block ({i},{j}) has inconsistent shape"
                    )));
                }
            }
        }
        Ok(Self { blocks })
    }

    /// Exact Gibbs kernel for every pair of a partition.
    pub fn exact(partition: &AgentPartition, spec: &CostSpec) -> Result<Self> {
        let blocks = partition
            .sources()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                partition
                    .targets()
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        kernel_block_for_agents(
                            s.measure.samples(),
                            t.measure.samples(),
                            spec,
                            i,
                            j,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    pub fn get(&self, i: usize, j: usize) -> &KernelBlock {
        &self.blocks[i][j]
    }

    pub fn n_sources(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_targets(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|r| r[0].dim().0).collect()
    }

    pub fn target_sizes(&self) -> Vec<usize> {
        self.blocks[0].iter().map(|b| b.dim().1).collect()
    }

    /// All blocks stitched into one `N x M` matrix of `ln k` in block order
    /// (agent-major, local index minor).
    pub fn stitched_log(&self) -> Array2<f64> {
        let (rs, cs) = (offsets(&self.source_sizes()), offsets(&self.target_sizes()));
        let mut out = Array2::zeros((*rs.last().unwrap(), *cs.last().unwrap()));
        for (i, row) in self.blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                out.slice_mut(ndarray::s![rs[i]..rs[i + 1], cs[j]..cs[j + 1]])
                    .assign(&b.log_values());
            }
        }
        out
    }

    /// Frobenius distance between two kernels of the same shape, in value space.
    pub fn frobenius_distance(&self, other: &KernelBlocks) -> f64 {
        let mut s = 0.0;
        for (ra, rb) in self.blocks.iter().zip(&other.blocks) {
            for (a, b) in ra.iter().zip(rb) {
                for (x, y) in a.log_values().iter().zip(b.log_values().iter()) {
                    let d = x.exp() - y.exp();
                    s += d * d;
                }
            }
        }
        s.sqrt()
    }
}

pub(crate) fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(sizes.len() + 1);
    o.push(0);
    for s in sizes {
        o.push(o.last().unwrap() + s);
    }
    o
}

/// One vector per agent, in agent order.
pub type BlockVector = Vec<Array1<f64>>;

/// Block-partitioned dual potentials plus their running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub u_blocks: Vec<Array1<f64>>,
    pub v_blocks: Vec<Array1<f64>>,
    pub u_avg: Vec<Array1<f64>>,
    pub v_avg: Vec<Array1<f64>>,
    /// Number of completed iterations `t`.
    pub iteration: u64,
}

impl DualState {
    pub fn zeros(source_sizes: &[usize], target_sizes: &[usize]) -> Self {
        let u: Vec<Array1<f64>> = source_sizes.iter().map(|&n| Array1::zeros(n)).collect();
        let v: Vec<Array1<f64>> = target_sizes.iter().map(|&m| Array1::zeros(m)).collect();
        Self {
            u_avg: u.clone(),
            v_avg: v.clone(),
            u_blocks: u,
            v_blocks: v,
            iteration: 0,
        }
    }

    pub fn from_blocks(u_blocks: Vec<Array1<f64>>, v_blocks: Vec<Array1<f64>>) -> Result<Self> {
        let s = Self {
            u_avg: u_blocks.clone(),
            v_avg: v_blocks.clone(),
            u_blocks,
            v_blocks,
            iteration: 0,
        };
        s.check_finite()?;
        Ok(s)
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = self
            .u_blocks
            .iter()
            .chain(&self.v_blocks)
            .chain(&self.u_avg)
            .chain(&self.v_avg);
        for b in all {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("dual state".into()));
            }
        }
        Ok(())
    }

    /// Folds the current iterate into the running means and advances `t`:
    /// `avg_t = avg_{t-1} + (x_t - avg_{t-1}) / t`.
    pub fn advance_average(&mut self) {
        self.iteration += 1;
        let w = 1.0 / self.iteration as f64;
        for (avg, cur) in self.u_avg.iter_mut().zip(&self.u_blocks) {
            avg.zip_mut_with(cur, |a, &c| *a += (c - *a) * w);
        }
        for (avg, cur) in self.v_avg.iter_mut().zip(&self.v_blocks) {
            avg.zip_mut_with(cur, |a, &c| *a += (c - *a) * w);
        }
    }

    /// `(u_hat^t, v_hat^t)`.
    pub fn averaged_iterates(&self) -> (&[Array1<f64>], &[Array1<f64>]) {
        (&self.u_avg, &self.v_avg)
    }

    /// Concatenation of blocks in block order.
    pub fn flatten(blocks: &[Array1<f64>]) -> Array1<f64> {
        blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn split(flat: &Array1<f64>, sizes: &[usize]) -> Vec<Array1<f64>> {
        let o = offsets(sizes);
        (0..sizes.len())
            .map(|k| flat.slice(ndarray::s![o[k]..o[k + 1]]).to_owned())
            .collect()
    }
}

/// `f_ij` at the given blocks.
pub fn pair_objective(
    u: &Array1<f64>,
    v: &Array1<f64>,
    block: &KernelBlock,
    epsilon: f64,
) -> Result<f64> {
    pair_objective_guarded(u, v, block, epsilon, DEFAULT_OVERFLOW_GUARD)
}

pub fn pair_objective_guarded(
    u: &Array1<f64>,
    v: &Array1<f64>,
    block: &KernelBlock,
    epsilon: f64,
    guard: f64,
) -> Result<f64> {
    let (n, m) = block.dim();
    if u.len() != n || v.len() != m {
        return Err(Error::invalid(format!(
            "dual lengths ({}, {}) do not match kernel block {n}x{m}",
            u.len(),
            v.len()
        )));
    }
    let lk = block.log_values();
    let inv = 1.0 / epsilon;
    let mut exp_sum = 0.0;
    for a in 0..n {
        let row = lk.row(a);
        let ua = u[a] * inv;
        for (b, &l) in row.iter().enumerate() {
            exp_sum += guarded_exp(ua + v[b] * inv + l, guard)?;
        }
    }
    Ok(m as f64 * u.sum() + n as f64 * v.sum() - epsilon * exp_sum)
}

/// Table of `f_ij` for every agent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairObjectiveTable {
    pub values: Array2<f64>,
}

/// `sum_ij e_ij / (N_i M_j) * table_ij`.
pub fn assemble_distance(
    table: &PairObjectiveTable,
    protocol: &ProtocolMatrix,
    source_sizes: &[usize],
    target_sizes: &[usize],
) -> Result<f64> {
    let (i_n, j_n) = table.values.dim();
    if (i_n, j_n) != protocol.values().dim()
        || source_sizes.len() != i_n
        || target_sizes.len() != j_n
    {
        return Err(Error::invalid(
            "objective table, protocol and partition shapes disagree",
        ));
    }
    let mut s = 0.0;
    for (i, &n) in source_sizes.iter().enumerate() {
        for (j, &m) in target_sizes.iter().enumerate() {
            let e = protocol.get(i, j);
            if e > 0.0 {
                s += e / (n * m) as f64 * table.values[[i, j]];
            }
        }
    }
    Ok(s)
}

/// The protocol-weighted sampled dual problem.
#[derive(Clone, Debug)]
pub struct DualProblem {
    pub kernel: KernelBlocks,
    pub protocol: ProtocolMatrix,
    pub epsilon: f64,
    pub guard: f64,
}

impl DualProblem {
    pub fn new(kernel: KernelBlocks, protocol: ProtocolMatrix, epsilon: f64) -> Result<Self> {
        if kernel.n_sources() != protocol.n_sources() || kernel.n_targets() != protocol.n_targets()
        {
            return Err(Error::invalid(format!(
                "kernel grid {}x{} does not match protocol {}x{}",
                kernel.n_sources(),
                kernel.n_targets(),
                protocol.n_sources(),
                protocol.n_targets()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(Self {
            kernel,
            protocol,
            epsilon,
            guard: DEFAULT_OVERFLOW_GUARD,
        })
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.kernel.source_sizes()
    }

    pub fn target_sizes(&self) -> Vec<usize> {
        self.kernel.target_sizes()
    }

    /// `e_ij / (N_i M_j)`.
    pub fn pair_weight(&self, i: usize, j: usize) -> f64 {
        let (n, m) = self.kernel.get(i, j).dim();
        self.protocol.get(i, j) / (n * m) as f64
    }

    pub fn zero_state(&self) -> DualState {
        DualState::zeros(&self.source_sizes(), &self.target_sizes())
    }

    fn check_shapes(&self, u: &[Array1<f64>], v: &[Array1<f64>]) -> Result<()> {
        let ok = u.len() == self.kernel.n_sources()
            && v.len() == self.kernel.n_targets()
            && u.iter().zip(self.source_sizes()).all(|(b, n)| b.len() == n)
            && v.iter().zip(self.target_sizes()).all(|(b, m)| b.len() == m);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "dual blocks do not match the agent partition",
            ))
        }
    }

    pub fn pair_objective(
        &self,
        i: usize,
        j: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
    ) -> Result<f64> {
        pair_objective_guarded(
            &u[i],
            &v[j],
            self.kernel.get(i, j),
            self.epsilon,
            self.guard,
        )
        .map_err(|e| e.with_context(format!("pair ({i},{j})")))
    }

    /// All `f_ij` for communicating pairs. Pairs with `e_ij = 0` never
    /// exchange duals, so their entries are `NaN`.
    pub fn pair_table(&self, u: &[Array1<f64>], v: &[Array1<f64>]) -> Result<PairObjectiveTable> {
        self.check_shapes(u, v)?;
        let (i_n, j_n) = (self.kernel.n_sources(), self.kernel.n_targets());
        let mut values = Array2::zeros((i_n, j_n));
        for i in 0..i_n {
            for j in 0..j_n {
                values[[i, j]] = if self.protocol.get(i, j) > 0.0 {
                    self.pair_objective(i, j, u, v)?
                } else {
                    f64::NAN
                };
            }
        }
        Ok(PairObjectiveTable { values })
    }

    /// `F(u, v; K, E)`. Pairs with `e_ij = 0` are skipped.
    pub fn objective(&self, u: &[Array1<f64>], v: &[Array1<f64>]) -> Result<f64> {
        self.check_shapes(u, v)?;
        let mut s = 0.0;
        for i in 0..self.kernel.n_sources() {
            for j in 0..self.kernel.n_targets() {
                let w = self.pair_weight(i, j);
                if w > 0.0 {
                    s += w * self.pair_objective(i, j, u, v)?;
                }
            }
        }
        Ok(s)
    }

    /// Unweighted `grad_{u_i} f_ij`, accumulated into `out` with factor `scale`.
    fn accumulate_grad_u(
        &self,
        i: usize,
        j: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        scale: f64,
        out: &mut Array1<f64>,
    ) -> Result<()> {
        let lk = self.kernel.get(i, j).log_values();
        let inv = 1.0 / self.epsilon;
        let (ui, vj) = (&u[i], &v[j]);
        let m = vj.len() as f64;
        for (a, o) in out.iter_mut().enumerate() {
            let ua = ui[a] * inv;
            let mut e = 0.0;
            for (b, &l) in lk.row(a).iter().enumerate() {
                e += guarded_exp(ua + vj[b] * inv + l, self.guard).map_err(|err| {
                    err.with_context(format!("gradient of u block {i}, pair ({i},{j})"))
                })?;
            }
            *o += scale * (m - e);
        }
        Ok(())
    }

    fn accumulate_grad_v(
        &self,
        i: usize,
        j: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        scale: f64,
        out: &mut Array1<f64>,
    ) -> Result<()> {
        let lk = self.kernel.get(i, j).log_values();
        let inv = 1.0 / self.epsilon;
        let (ui, vj) = (&u[i], &v[j]);
        let n = ui.len() as f64;
        let mut e = Array1::<f64>::zeros(vj.len());
        for a in 0..ui.len() {
            let ua = ui[a] * inv;
            for (b, &l) in lk.row(a).iter().enumerate() {
                e[b] += guarded_exp(ua + vj[b] * inv + l, self.guard).map_err(|err| {
                    err.with_context(format!("gradient of v block {j}, pair ({i},{j})"))
                })?;
            }
        }
        for (o, eb) in out.iter_mut().zip(e.iter()) {
            *o += scale * (n - eb);
        }
        Ok(())
    }

    /// `sum_{j in subset} e_ij/(N_i M_j) * grad_{u_i} f_ij`. With `subset`
    /// covering all targets this is the exact block gradient of `F`.
    pub fn block_gradient_u(
        &self,
        i: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        subset: &[usize],
    ) -> Result<Array1<f64>> {
        self.block_gradient_u_scaled(i, u, v, subset, true)
    }

    /// As [`Self::block_gradient_u`]; with `weighted = false` the protocol
    /// weights are dropped and plain `grad f_ij` terms are summed.
    pub fn block_gradient_u_scaled(
        &self,
        i: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        subset: &[usize],
        weighted: bool,
    ) -> Result<Array1<f64>> {
        if subset.is_empty() {
            return Err(Error::invalid("target subset must be nonempty"));
        }
        let mut g = Array1::zeros(u[i].len());
        for &j in subset {
            let w = if weighted {
                self.pair_weight(i, j)
            } else {
                1.0
            };
            if w != 0.0 {
                self.accumulate_grad_u(i, j, u, v, w, &mut g)?;
            }
        }
        Ok(g)
    }

    pub fn block_gradient_v(
        &self,
        j: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        subset: &[usize],
    ) -> Result<Array1<f64>> {
        self.block_gradient_v_scaled(j, u, v, subset, true)
    }

    pub fn block_gradient_v_scaled(
        &self,
        j: usize,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
        subset: &[usize],
        weighted: bool,
    ) -> Result<Array1<f64>> {
        if subset.is_empty() {
            return Err(Error::invalid("source subset must be nonempty"));
        }
        let mut g = Array1::zeros(v[j].len());
        for &i in subset {
            let w = if weighted {
                self.pair_weight(i, j)
            } else {
                1.0
            };
            if w != 0.0 {
                self.accumulate_grad_v(i, j, u, v, w, &mut g)?;
            }
        }
        Ok(g)
    }

    /// Full gradient `(grad_u F, grad_v F)` in block form.
    pub fn full_gradient(
        &self,
        u: &[Array1<f64>],
        v: &[Array1<f64>],
    ) -> Result<(BlockVector, BlockVector)> {
        let all_t: Vec<usize> = (0..self.kernel.n_targets()).collect();
        let all_s: Vec<usize> = (0..self.kernel.n_sources()).collect();
        let gu = (0..all_s.len())
            .map(|i| self.block_gradient_u(i, u, v, &all_t))
            .collect::<Result<_>>()?;
        let gv = (0..all_t.len())
            .map(|j| self.block_gradient_v(j, u, v, &all_s))
            .collect::<Result<_>>()?;
        Ok((gu, gv))
    }

    /// Source-side marginal of the reference measure `xi_nm = e_ij/(N_i M_j)`,
    /// in block order.
    pub fn source_marginal(&self) -> Array1<f64> {
        let mut a = Vec::new();
        for (i, &n) in self.source_sizes().iter().enumerate() {
            let r = self.protocol.row_mass(i) / n as f64;
            a.extend(std::iter::repeat_n(r, n));
        }
        Array1::from(a)
    }

    pub fn target_marginal(&self) -> Array1<f64> {
        let mut b = Vec::new();
        for (j, &m) in self.target_sizes().iter().enumerate() {
            let c = self.protocol.col_mass(j) / m as f64;
            b.extend(std::iter::repeat_n(c, m));
        }
        Array1::from(b)
    }

    /// `ln xi_nm + ln k_nm` in block order; `-inf` where `e_ij = 0`.
    pub fn log_reference(&self) -> Array2<f64> {
        let mut lk = self.kernel.stitched_log();
        let (rs, cs) = (offsets(&self.source_sizes()), offsets(&self.target_sizes()));
        for i in 0..self.kernel.n_sources() {
            for j in 0..self.kernel.n_targets() {
                let lw = self.pair_weight(i, j).ln();
                lk.slice_mut(ndarray::s![rs[i]..rs[i + 1], cs[j]..cs[j + 1]])
                    .mapv_inplace(|x| x + lw);
            }
        }
        lk
    }

    /// High-accuracy maximizer of `F` by exact block maximization (log-domain
    /// Sinkhorn on the reference measure induced by `E`). Returns the optimum
    /// as a [`DualState`] together with the solver report.
    pub fn solve_reference(&self, config: &SinkhornConfig) -> Result<(DualState, SinkhornResult)> {
        let res = sinkhorn_log(
            &self.source_marginal(),
            &self.target_marginal(),
            self.log_reference().view(),
            self.epsilon,
            config,
        )?;
        let u = DualState::split(&res.u, &self.source_sizes());
        let v = DualState::split(&res.v, &self.target_sizes());
        Ok((DualState::from_blocks(u, v)?, res))
    }
}

/// Free-function form of [`DualProblem::objective`] on a state's current iterate.
pub fn dual_objective(
    state: &DualState,
    kernel: &KernelBlocks,
    protocol: &ProtocolMatrix,
    epsilon: f64,
) -> Result<f64> {
    DualProblem::new(kernel.clone(), protocol.clone(), epsilon)?
        .objective(&state.u_blocks, &state.v_blocks)
}

/// Dense coupling with cached marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub values: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl Coupling {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid(
                "coupling entries must be finite and nonnegative",
            ));
        }
        let row_marginal = values.sum_axis(ndarray::Axis(1));
        let col_marginal = values.sum_axis(ndarray::Axis(0));
        Ok(Self {
            values,
            row_marginal,
            col_marginal,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.row_marginal.sum()
    }
}

/// `pi_nm = exp((u_n + v_m - c_nm)/eps) mu_n gamma_m`, all vectors in the
/// measures' own index order.
pub fn coupling_from_duals(
    u: &Array1<f64>,
    v: &Array1<f64>,
    cost: ArrayView2<'_, f64>,
    mu: &DiscreteMeasure,
    gamma: &DiscreteMeasure,
    epsilon: f64,
) -> Result<Coupling> {
    let (n, m) = cost.dim();
    if u.len() != n || v.len() != m || mu.len() != n || gamma.len() != m {
        return Err(Error::invalid("coupling inputs disagree in shape"));
    }
    let mut p = Array2::zeros((n, m));
    for a in 0..n {
        for b in 0..m {
            let z = (u[a] + v[b] - cost[[a, b]]) / epsilon;
            p[[a, b]] =
                guarded_exp(z, DEFAULT_OVERFLOW_GUARD)? * mu.weights()[a] * gamma.weights()[b];
        }
    }
    Coupling::new(p)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornConfig {
    pub max_iter: usize,
    /// Max-norm tolerance on the row-marginal violation.
    pub tol: f64,
    /// How often (in iterations) the violation is measured.
    pub check_every: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-9,
            check_every: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// Primal value `<C, pi> + eps * sum pi (ln(pi / xi) - 1)`.
    pub value: f64,
    /// Dual value `<u, a> + <v, b> - eps * sum pi`.
    pub dual_value: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub coupling: Coupling,
    pub iterations: usize,
    /// Max-norm marginal violation at exit.
    pub violation: f64,
    pub converged: bool,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn for
/// `max <u,a> + <v,b> - eps * sum_nm exp((u_n + v_m)/eps + log_ref_nm)`.
///
/// `log_ref` may hold `-inf` (forbidden pairs). Rows or columns with zero
/// marginal keep a zero potential and carry no mass.
pub fn sinkhorn_log(
    a: &Array1<f64>,
    b: &Array1<f64>,
    log_ref: ArrayView2<'_, f64>,
    epsilon: f64,
    config: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let (n, m) = log_ref.dim();
    if a.len() != n || b.len() != m {
        return Err(Error::invalid(
            "marginals do not match the reference kernel",
        ));
    }
    let active_r: Vec<usize> = (0..n).filter(|&k| a[k] > 0.0).collect();
    let active_c: Vec<usize> = (0..m).filter(|&k| b[k] > 0.0).collect();
    let la = a.mapv(f64::ln);
    let lb = b.mapv(f64::ln);
    let lt = log_ref.t().to_owned();
    let mut u = Array1::<f64>::zeros(n);
    let mut v = Array1::<f64>::zeros(m);
    let inv = 1.0 / epsilon;

    let update_u = |u: &mut Array1<f64>, v: &Array1<f64>| {
        for &r in &active_r {
            let row = log_ref.row(r);
            let lse = log_sum_exp(active_c.iter().map(|&c| v[c] * inv + row[c]));
            u[r] = epsilon * (la[r] - lse);
        }
    };
    let update_v = |v: &mut Array1<f64>, u: &Array1<f64>| {
        for &c in &active_c {
            let col = lt.row(c);
            let lse = log_sum_exp(active_r.iter().map(|&r| u[r] * inv + col[r]));
            v[c] = epsilon * (lb[c] - lse);
        }
    };
    let row_violation = |u: &Array1<f64>, v: &Array1<f64>| -> f64 {
        active_r
            .iter()
            .map(|&r| {
                let row = log_ref.row(r);
                let s: f64 = active_c
                    .iter()
                    .map(|&c| ((u[r] + v[c]) * inv + row[c]).exp())
                    .sum();
                (s - a[r]).abs()
            })
            .fold(0.0, f64::max)
    };

    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    let check = config.check_every.max(1);
    while iterations < config.max_iter {
        update_u(&mut u, &v);
        update_v(&mut v, &u);
        iterations += 1;
        if iterations % check == 0 || iterations == config.max_iter {
            violation = row_violation(&u, &v);
            if !violation.is_finite() {
                return Err(Error::NonFinite("sinkhorn potentials".into()));
            }
            if violation < config.tol {
                break;
            }
        }
    }

    let mut pi = Array2::zeros((n, m));
    for &r in &active_r {
        for &c in &active_c {
            pi[[r, c]] = ((u[r] + v[c]) * inv + log_ref[[r, c]]).exp();
        }
    }
    let coupling = Coupling::new(pi)?;
    let mass = coupling.total_mass();
    let transported: f64 = active_r
        .iter()
        .flat_map(|&r| active_c.iter().map(move |&c| (r, c)))
        .map(|(r, c)| coupling.values[[r, c]] * (u[r] + v[c]))
        .sum();
    let value = transported - epsilon * mass;
    let dual_value = u.dot(a) + v.dot(b) - epsilon * mass;
    Ok(SinkhornResult {
        value,
        dual_value,
        u,
        v,
        coupling,
        iterations,
        violation,
        converged: violation < config.tol,
    })
}

/// Centralized EOT between two weighted measures; the entropy is taken
/// relative to `mu (x) gamma`, so that single atoms give `c - eps`.
pub fn sinkhorn_oracle(
    mu: &DiscreteMeasure,
    gamma: &DiscreteMeasure,
    spec: &CostSpec,
    config: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let c = cost_matrix(mu.samples(), gamma.samples(), spec.kind)?;
    let (lmu, lg) = (mu.weights().mapv(f64::ln), gamma.weights().mapv(f64::ln));
    let mut lr = c.mapv(|x| -x / spec.epsilon);
    for ((r, col), x) in lr.indexed_iter_mut() {
        *x += lmu[r] + lg[col];
    }
    sinkhorn_log(
        mu.weights(),
        gamma.weights(),
        lr.view(),
        spec.epsilon,
        config,
    )
}

/// Primal objective `<C, pi> + eps * sum pi (ln(pi/(mu gamma)) - 1)` of an
/// arbitrary coupling; zero entries contribute nothing.
pub fn primal_objective(
    coupling: &Array2<f64>,
    cost: ArrayView2<'_, f64>,
    mu: &DiscreteMeasure,
    gamma: &DiscreteMeasure,
    epsilon: f64,
) -> f64 {
    let mut s = 0.0;
    for ((r, c), &p) in coupling.indexed_iter() {
        if p > 0.0 {
            let xi = mu.weights()[r] * gamma.weights()[c];
            s += p * cost[[r, c]] + epsilon * p * ((p / xi).ln() - 1.0);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{CostKind, SampleSet};
    use crate::netsim::{shards_from_measures, AgentPartition};
    use ndarray::array;

    fn kb(v: Array2<f64>) -> KernelBlock {
        KernelBlock::from_values(v, 0, 0).unwrap()
    }

    fn atom(x: f64, y: f64) -> DiscreteMeasure {
        DiscreteMeasure::uniform(SampleSet::from_rows(&[vec![x, y]], None).unwrap())
    }

    /// Grid search for `max_s s - eps * exp((s - c)/eps)`.
    fn stationary_by_grid(c: f64, eps: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let steps = 200_000;
        for k in 0..=steps {
            let s = c - 1.0 + 2.0 * k as f64 / steps as f64;
            best = best.max(s - eps * ((s - c) / eps).exp());
        }
        best
    }

    #[test]
    fn pair_objective_examples() {
        let z = array![0.0];
        assert!((pair_objective(&z, &z, &kb(array![[1.0]]), 0.5).unwrap() + 0.5).abs() < 1e-15);

        let (c, eps) = (1.3, 0.4);
        let grid = stationary_by_grid(c, eps);
        assert!((grid - 0.9).abs() < 1e-6);
        let k = KernelBlock::from_log_values(array![[-c / eps]], 0, 0).unwrap();
        let f = pair_objective(&array![c], &array![0.0], &k, eps).unwrap();
        assert!((f - grid).abs() < 1e-6);
        assert!((f - (c - eps)).abs() < 1e-12);

        let z2 = array![0.0, 0.0];
        let f = pair_objective(&z2, &z2, &kb(Array2::ones((2, 2))), 1.0).unwrap();
        assert!((f + 4.0).abs() < 1e-15);
    }

    #[test]
    fn overflow_is_an_error() {
        let err = pair_objective(&array![40.0], &array![0.0], &kb(array![[1.0]]), 1.0).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
        // large u+v is fine when the kernel cancels it
        let k = KernelBlock::from_log_values(array![[-40.0]], 0, 0).unwrap();
        assert!(pair_objective(&array![40.0], &array![0.0], &k, 1.0).is_ok());
    }

    fn two_by_two_problem(e: ProtocolMatrix) -> DualProblem {
        let spec = CostSpec::squared_euclidean(0.5).unwrap();
        let ms = |pts: &[[f64; 2]]| {
            DiscreteMeasure::uniform(
                SampleSet::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>(), None)
                    .unwrap(),
            )
        };
        let part = AgentPartition::new(
            shards_from_measures(vec![ms(&[[0.0, 0.0], [0.5, 0.1]]), ms(&[[1.0, 0.2]])]),
            shards_from_measures(vec![
                ms(&[[0.2, 1.0]]),
                ms(&[[1.1, 0.9], [0.3, 0.3], [0.0, 0.7]]),
            ]),
        )
        .unwrap();
        DualProblem::new(KernelBlocks::exact(&part, &spec).unwrap(), e, spec.epsilon).unwrap()
    }

    #[test]
    fn dual_objective_examples() {
        let p = two_by_two_problem(ProtocolMatrix::uniform(2, 2).unwrap());
        let ones = KernelBlocks::new(
            (0..2)
                .map(|i| {
                    (0..2)
                        .map(|j| {
                            KernelBlock::from_values(Array2::ones(p.kernel.get(i, j).dim()), i, j)
                                .unwrap()
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let q = DualProblem::new(ones, p.protocol.clone(), 0.3).unwrap();
        let s = q.zero_state();
        assert!((q.objective(&s.u_blocks, &s.v_blocks).unwrap() + 0.3).abs() < 1e-15);
        assert!((dual_objective(&s, &q.kernel, &q.protocol, 0.3).unwrap() + 0.3).abs() < 1e-15);

        // single pair reduces to f / (N M)
        let k = KernelBlocks::new(vec![vec![kb(array![[0.5, 0.25], [1.0, 0.125]])]]).unwrap();
        let one = DualProblem::new(k, ProtocolMatrix::uniform(1, 1).unwrap(), 0.7).unwrap();
        let (u, v) = (vec![array![0.1, -0.2]], vec![array![0.3, 0.05]]);
        let f = pair_objective(&u[0], &v[0], one.kernel.get(0, 0), 0.7).unwrap();
        assert!((one.objective(&u, &v).unwrap() - f / 4.0).abs() < 1e-15);
        let t = one.pair_table(&u, &v).unwrap();
        assert_eq!(
            assemble_distance(&t, &one.protocol, &[2], &[2]).unwrap(),
            one.objective(&u, &v).unwrap()
        );
    }

    #[test]
    fn gradient_zero_cases() {
        let (c, eps) = (0.8, 0.25);
        let k = KernelBlocks::new(vec![vec![KernelBlock::from_log_values(
            array![[-c / eps]],
            0,
            0,
        )
        .unwrap()]])
        .unwrap();
        let p = DualProblem::new(k, ProtocolMatrix::uniform(1, 1).unwrap(), eps).unwrap();
        let (u, v) = (vec![array![0.5]], vec![array![0.3]]);
        assert!(p.block_gradient_u(0, &u, &v, &[0]).unwrap()[0].abs() < 1e-12);
        assert!(p.block_gradient_v(0, &u, &v, &[0]).unwrap()[0].abs() < 1e-12);

        let k = KernelBlocks::new(vec![vec![kb(Array2::ones((3, 2)))]]).unwrap();
        let p = DualProblem::new(k, ProtocolMatrix::uniform(1, 1).unwrap(), 1.0).unwrap();
        let s = p.zero_state();
        assert!(p
            .block_gradient_u(0, &s.u_blocks, &s.v_blocks, &[0])
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        assert!(p
            .block_gradient_u(0, &s.u_blocks, &s.v_blocks, &[])
            .is_err());
    }

    #[test]
    fn averaging_is_incremental_mean() {
        let mut s = DualState::zeros(&[2], &[1]);
        let (a, b) = (array![1.0, 2.0], array![3.0, -2.0]);
        s.u_blocks[0] = a.clone();
        s.advance_average();
        s.u_blocks[0] = b.clone();
        s.advance_average();
        assert_eq!(s.u_avg[0], (&a + &b) / 2.0);
        assert_eq!(s.iteration, 2);
    }

    #[test]
    fn sinkhorn_single_atoms() {
        let spec = CostSpec::squared_euclidean(0.3).unwrap();
        let cfg = SinkhornConfig::default();
        let r = sinkhorn_oracle(&atom(1.0, 2.0), &atom(1.0, 2.0), &spec, &cfg).unwrap();
        assert!((r.value + 0.3).abs() < 1e-12);
        let r = sinkhorn_oracle(&atom(0.0, 0.0), &atom(1.0, 1.0), &spec, &cfg).unwrap();
        assert!((r.value - (2.0 - 0.3)).abs() < 1e-9);
        assert!((r.value - stationary_by_grid(2.0, 0.3)).abs() < 1e-6);
    }

    /// The 2x2 uniform problem: feasible couplings are
    /// `[[t, 1/2 - t], [1/2 - t, t]]`, `t in [0, 1/2]`.
    #[test]
    fn sinkhorn_two_by_two_matches_one_parameter_search() {
        let spec = CostSpec::new(CostKind::SquaredEuclidean, 0.4).unwrap();
        let mu = DiscreteMeasure::uniform(
            SampleSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]], None).unwrap(),
        );
        let ga = DiscreteMeasure::uniform(
            SampleSet::from_rows(&[vec![0.2, 0.5], vec![1.5, -0.3]], None).unwrap(),
        );
        let c = cost_matrix(mu.samples(), ga.samples(), spec.kind).unwrap();
        let obj = |t: f64| {
            primal_objective(
                &array![[t, 0.5 - t], [0.5 - t, t]],
                c.view(),
                &mu,
                &ga,
                spec.epsilon,
            )
        };
        // golden-section on the strictly convex 1-D objective
        let (mut lo, mut hi) = (1e-15, 0.5 - 1e-15);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if obj(x1) < obj(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        let best = obj(0.5 * (lo + hi));
        let r = sinkhorn_oracle(&mu, &ga, &spec, &SinkhornConfig::default()).unwrap();
        assert!(r.converged);
        assert!((r.value - best).abs() < 1e-6, "{} vs {best}", r.value);
        assert!((r.value - r.dual_value).abs() < 1e-6);
    }

    #[test]
    fn coupling_examples() {
        let c = array![[0.7]];
        let p = coupling_from_duals(
            &array![0.5],
            &array![0.2],
            c.view(),
            &atom(0.0, 0.0),
            &atom(1.0, 1.0),
            0.1,
        )
        .unwrap();
        assert!((p.values[[0, 0]] - 1.0).abs() < 1e-12);

        let two =
            DiscreteMeasure::uniform(SampleSet::from_rows(&[vec![0.0], vec![1.0]], None).unwrap());
        let p = coupling_from_duals(
            &array![0.0, 0.0],
            &array![0.0, 0.0],
            Array2::zeros((2, 2)).view(),
            &two,
            &two,
            1.0,
        )
        .unwrap();
        assert!(p.values.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn reference_solve_matches_oracle_under_storage_protocol() {
        let p = two_by_two_problem(ProtocolMatrix::uniform(2, 2).unwrap());
        // shard masses are N_i/N = (2/3, 1/3) and M_j/M = (1/4, 3/4)
        let e = crate::netsim::storage_protocol(&array![2.0 / 3.0, 1.0 / 3.0], &array![0.25, 0.75])
            .unwrap();
        let p = DualProblem::new(p.kernel, e, p.epsilon).unwrap();
        let (state, res) = p.solve_reference(&SinkhornConfig::default()).unwrap();
        assert!(res.converged);
        let f = p.objective(&state.u_blocks, &state.v_blocks).unwrap();
        assert!((f - res.dual_value).abs() < 1e-10);
        let (gu, gv) = p.full_gradient(&state.u_blocks, &state.v_blocks).unwrap();
        assert!(gu
            .iter()
            .chain(&gv)
            .all(|g| g.iter().all(|x| x.abs() < 1e-8)));

        // uniform global measures give the same value through the plain oracle
        let spec = CostSpec::squared_euclidean(0.5).unwrap();
        let mu = DiscreteMeasure::uniform(
            SampleSet::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.1], vec![1.0, 0.2]], None).unwrap(),
        );
        let ga = DiscreteMeasure::uniform(
            SampleSet::from_rows(
                &[
                    vec![0.2, 1.0],
                    vec![1.1, 0.9],
                    vec![0.3, 0.3],
                    vec![0.0, 0.7],
                ],
                None,
            )
            .unwrap(),
        );
        let o = sinkhorn_oracle(&mu, &ga, &spec, &SinkhornConfig::default()).unwrap();
        assert!(
            (o.value - res.dual_value).abs() < 1e-8,
            "{} {}",
            o.value,
            res.dual_value
        );
    }
}
