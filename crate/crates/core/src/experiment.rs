//! Experiment orchestration: synthetic data, JSON configs, sweeps that write
//! traces and ledgers to disk, and the domain-adaptation pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::config_hash;
use crate::eot::{coupling_from_duals, sinkhorn_oracle, Coupling, DualState, SinkhornConfig};
use crate::error::{Error, Result};
use crate::measures::{CostKind, CostSpec, DiscreteMeasure, SampleSet};
use crate::mrbcd::{
    build_kernel, curvature_step_for, solve, KernelSource, SolveOutput, SolverConfig,
};
use crate::netsim::{
    protocol_generator, protocol_mismatch, sim_rng, storage_protocol, AgentPartition, Phase,
    ProtocolKind, ProtocolMatrix, StorageMode,
};

/// Covariance given as a variance, a diagonal, or a full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    fn matrix(&self, dim: usize) -> Result<Array2<f64>> {
        match self {
            Covariance::Isotropic(s) => Ok(Array2::eye(dim) * *s),
            Covariance::Diagonal(d) if d.len() == dim => {
                Ok(Array2::from_diag(&Array1::from(d.clone())))
            }
            Covariance::Full(rows) if rows.len() == dim && rows.iter().all(|r| r.len() == dim) => {
                Ok(Array2::from_shape_fn((dim, dim), |(a, b)| rows[a][b]))
            }
            _ => Err(Error::invalid(format!(
                "covariance does not match dimension {dim}"
            ))),
        }
    }
}

/// Lower-triangular factor `A` with `A A^T = cov`, allowing zero pivots.
/// Asymmetric, non-finite or indefinite matrices are degenerate.
fn psd_factor(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let scale = cov.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-12 * scale;
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("degenerate covariance: non-finite entry"));
    }
    for a in 0..d {
        for b in 0..a {
            if (cov[[a, b]] - cov[[b, a]]).abs() > tol {
                return Err(Error::invalid("degenerate covariance: not symmetric"));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((d, d));
    for c in 0..d {
        let pivot = cov[[c, c]] - (0..c).map(|k| l[[c, k]] * l[[c, k]]).sum::<f64>();
        if pivot < -tol {
            return Err(Error::invalid(
                "degenerate covariance: not positive semidefinite",
            ));
        }
        if pivot <= tol {
            for r in c + 1..d {
                let off = cov[[r, c]] - (0..c).map(|k| l[[r, k]] * l[[c, k]]).sum::<f64>();
                if off.abs() > tol.sqrt() {
                    return Err(Error::invalid(
                        "degenerate covariance: not positive semidefinite",
                    ));
                }
            }
            continue;
        }
        let root = pivot.sqrt();
        l[[c, c]] = root;
        for r in c + 1..d {
            l[[r, c]] = (cov[[r, c]] - (0..c).map(|k| l[[r, k]] * l[[c, k]]).sum::<f64>()) / root;
        }
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Gaussian {
        n: usize,
        mean: Vec<f64>,
        covariance: Covariance,
    },
    Gmm {
        n: usize,
        components: Vec<Component>,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            DatasetSpec::Gaussian { mean, .. } => Some(mean.len()),
            DatasetSpec::Gmm { components, .. } => components.first().map(|c| c.mean.len()),
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn size(&self) -> Option<usize> {
        match self {
            DatasetSpec::Gaussian { n, .. } | DatasetSpec::Gmm { n, .. } => Some(*n),
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn components(&self) -> Option<usize> {
        match self {
            DatasetSpec::Gaussian { .. } => Some(1),
            DatasetSpec::Gmm { components, .. } => Some(components.len()),
            DatasetSpec::Csv { .. } => None,
        }
    }

    fn problems(&self, what: &str, errs: &mut Vec<String>) {
        match self {
            DatasetSpec::Gaussian { n, mean, .. } => {
                if *n == 0 {
                    errs.push(format!("{what}: n must be positive"));
                }
                if mean.is_empty() {
                    errs.push(format!("{what}: mean must be nonempty"));
                }
            }
            DatasetSpec::Gmm { n, components } => {
                if *n == 0 {
                    errs.push(format!("{what}: n must be positive"));
                }
                if components.is_empty() {
                    errs.push(format!("{what}: at least one component is required"));
                }
                let d = components.first().map_or(0, |c| c.mean.len());
                if components.iter().any(|c| c.mean.len() != d || d == 0) {
                    errs.push(format!("{what}: component means disagree in dimension"));
                }
                if components
                    .iter()
                    .any(|c| !(c.weight > 0.0 && c.weight.is_finite()))
                {
                    errs.push(format!("{what}: component weights must be positive"));
                }
            }
            DatasetSpec::Csv { path } => {
                if !path.exists() {
                    errs.push(format!(
                        "{what}: csv file {} does not exist",
                        path.display()
                    ));
                }
            }
        }
    }
}

/// Component sample counts proportional to the weights, by largest remainder
/// (ties to the lower index), so equal weights give near-equal counts.
fn component_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Deterministic samples for a dataset spec. Component indices become labels;
/// CSV files keep their own label column if present.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<DiscreteMeasure> {
    let components = match spec {
        DatasetSpec::Csv { path } => {
            return Ok(DiscreteMeasure::uniform(SampleSet::from_csv_path(path)?))
        }
        DatasetSpec::Gaussian {
            n,
            mean,
            covariance,
        } => (
            *n,
            vec![Component {
                mean: mean.clone(),
                covariance: covariance.clone(),
                weight: 1.0,
            }],
        ),
        DatasetSpec::Gmm { n, components } => (*n, components.clone()),
    };
    let (n, comps) = components;
    let mut errs = Vec::new();
    spec.problems("dataset", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let d = comps[0].mean.len();
    let counts = component_counts(n, &comps.iter().map(|c| c.weight).collect::<Vec<_>>());
    let mut rng = sim_rng(seed);
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (k, (c, &count)) in comps.iter().zip(&counts).enumerate() {
        let factor = psd_factor(&c.covariance.matrix(d)?)?;
        let mean = Array1::from(c.mean.clone());
        for _ in 0..count {
            let z: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            points.row_mut(row).assign(&(&mean + &factor.dot(&z)));
            labels.push(k as i64);
            row += 1;
        }
    }
    Ok(DiscreteMeasure::uniform(SampleSet::new(
        points,
        Some(labels),
    )?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    #[serde(default = "half")]
    pub sparsity: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Ideal,
            sparsity: 0.5,
        }
    }
}

impl ProtocolSpec {
    /// The ideal protocol is the storage protocol `p (x) q` of the partition.
    pub fn build(&self, partition: &AgentPartition, seed: u64) -> Result<ProtocolMatrix> {
        match self.kind {
            ProtocolKind::Ideal => {
                storage_protocol(&partition.source_mass(), &partition.target_mass())
            }
            kind => protocol_generator(
                kind,
                partition.n_sources(),
                partition.n_targets(),
                self.sparsity,
                seed,
            ),
        }
    }
}

/// A projection count, either literal or tied to the instance size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProjectionCount {
    Fixed(usize),
    Relative(RelativeProjections),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeProjections {
    /// `ceil(ln N)`.
    LogN,
    Dim,
    N,
}

impl ProjectionCount {
    pub fn resolve(&self, n: usize, dim: usize) -> usize {
        match self {
            ProjectionCount::Fixed(p) => *p,
            ProjectionCount::Relative(RelativeProjections::LogN) => {
                ((n as f64).ln().ceil() as usize).max(1)
            }
            ProjectionCount::Relative(RelativeProjections::Dim) => dim,
            ProjectionCount::Relative(RelativeProjections::N) => n,
        }
    }
}

/// One axis varied across runs; everything else comes from the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Batch(Vec<usize>),
    Projections(Vec<ProjectionCount>),
    Protocol(Vec<ProtocolSpec>),
    Storage(Vec<StorageMode>),
    Agents(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    /// Number of source agents `I`.
    pub source_agents: usize,
    /// Number of target agents `J`.
    pub target_agents: usize,
    pub protocol: ProtocolSpec,
    pub storage: StorageMode,
    pub cost: CostKind,
    /// Solver settings; `seed` is replaced by each entry of `seeds`.
    pub solver: SolverConfig,
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
    pub oracle: SinkhornConfig,
    pub output: PathBuf,
    /// Wall time makes traces irreproducible, so it is off unless asked for.
    pub record_wall_time: bool,
    /// When set, each run uses `eta0 = eta_scale * curvature_step` for its own
    /// partition, protocol and batch size instead of `solver.eta0`.
    pub eta_scale: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let blob = |x: f64| DatasetSpec::Gaussian {
            n: 400,
            mean: vec![x, x],
            covariance: Covariance::Isotropic(0.0625),
        };
        Self {
            source: blob(0.0),
            target: blob(0.5),
            source_agents: 10,
            target_agents: 10,
            protocol: ProtocolSpec::default(),
            storage: StorageMode::Iid,
            cost: CostKind::SquaredEuclidean,
            solver: SolverConfig {
                epsilon: 0.1,
                eta0: 160.0,
                iterations: 5000,
                batch: 5,
                record_every: 50,
                ..Default::default()
            },
            seeds: vec![0],
            sweep: None,
            oracle: SinkhornConfig::default(),
            output: PathBuf::from("out"),
            record_wall_time: false,
            // Twice the curvature step, which is eta0 = 160 for this instance.
            eta_scale: Some(2.0),
        }
    }
}

/// One fully specified run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub batch: usize,
    pub kernel: KernelSource,
    pub protocol: ProtocolSpec,
    pub storage: StorageMode,
    pub agents: (usize, usize),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Reads a config and applies `key.path=value` overrides; values parse
    /// as JSON and fall back to plain strings.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        for o in overrides {
            set_key_path(&mut value, o)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn spec(&self) -> Result<CostSpec> {
        CostSpec::new(self.cost, self.solver.epsilon)
    }

    /// Initial step for one run, honoring `eta_scale`.
    pub fn eta0_for(
        &self,
        partition: &AgentPartition,
        protocol: &ProtocolMatrix,
        batch: usize,
    ) -> f64 {
        match self.eta_scale {
            Some(scale) => {
                scale
                    * curvature_step_for(
                        protocol,
                        &partition.source_sizes(),
                        &partition.target_sizes(),
                        self.solver.epsilon,
                        batch,
                    )
            }
            None => self.solver.eta0,
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let base = Variant {
            label: "base".into(),
            batch: self.solver.batch,
            kernel: self.solver.kernel_source,
            protocol: self.protocol,
            storage: self.storage,
            agents: (self.source_agents, self.target_agents),
        };
        let n = self.source.size().unwrap_or(0);
        let d = self.source.dim().unwrap_or(0);
        let normalized = match self.solver.kernel_source {
            KernelSource::Approximated { normalized, .. } => normalized,
            KernelSource::Exact => false,
        };
        match &self.sweep {
            None => vec![base],
            Some(Sweep::Batch(ls)) => ls
                .iter()
                .map(|&l| Variant {
                    label: format!("L{l}"),
                    batch: l,
                    ..base.clone()
                })
                .collect(),
            Some(Sweep::Projections(ps)) => ps
                .iter()
                .map(|p| {
                    let pp = p.resolve(n, d);
                    Variant {
                        label: format!("P{pp}"),
                        kernel: KernelSource::Approximated {
                            projections: pp,
                            normalized,
                        },
                        ..base.clone()
                    }
                })
                .collect(),
            Some(Sweep::Protocol(ps)) => ps
                .iter()
                .map(|p| Variant {
                    label: format!("{:?}", p.kind).to_lowercase(),
                    protocol: *p,
                    ..base.clone()
                })
                .collect(),
            Some(Sweep::Storage(ss)) => ss
                .iter()
                .map(|s| Variant {
                    label: format!("{s:?}").to_lowercase(),
                    storage: *s,
                    ..base.clone()
                })
                .collect(),
            Some(Sweep::Agents(a)) => a
                .iter()
                .map(|&(i, j)| Variant {
                    label: format!("I{i}J{j}"),
                    agents: (i, j),
                    ..base.clone()
                })
                .collect(),
        }
    }

    /// All problems at once, before anything runs.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.source.problems("source", &mut errs);
        self.target.problems("target", &mut errs);
        if let (Some(a), Some(b)) = (self.source.dim(), self.target.dim()) {
            if a != b {
                errs.push(format!(
                    "source dimension {a} differs from target dimension {b}"
                ));
            }
        }
        if self.seeds.is_empty() {
            errs.push("seed list is empty".into());
        }
        if !(self.solver.epsilon > 0.0) {
            errs.push(format!(
                "solver.epsilon must be positive, got {}",
                self.solver.epsilon
            ));
        }
        if let Some(scale) = self.eta_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                errs.push(format!("eta_scale must be positive, got {scale}"));
            }
        }
        if !(self.solver.eta0 > 0.0 && self.solver.eta0.is_finite()) {
            errs.push(format!(
                "solver.eta0 must be positive, got {}",
                self.solver.eta0
            ));
        }
        if self.solver.iterations == 0 {
            errs.push("solver.iterations must be at least 1".into());
        }
        if self.solver.record_every == 0 {
            errs.push("solver.record_every must be at least 1".into());
        }
        for v in self.variants() {
            let (i, j) = v.agents;
            if i == 0 || j == 0 {
                errs.push(format!("{}: agent counts must be positive", v.label));
                continue;
            }
            if let Some(n) = self.source.size() {
                if i > n {
                    errs.push(format!(
                        "{}: {i} source agents exceed {n} source samples",
                        v.label
                    ));
                }
            }
            if let Some(m) = self.target.size() {
                if j > m {
                    errs.push(format!(
                        "{}: {j} target agents exceed {m} target samples",
                        v.label
                    ));
                }
            }
            if v.batch == 0 {
                errs.push(format!("{}: batch size L must be at least 1", v.label));
            }
            let limit = match v.protocol.kind {
                ProtocolKind::Ideal => i.min(j),
                _ => {
                    let keep_row = j - (v.protocol.sparsity * j as f64).round() as usize;
                    let keep_col = i - (v.protocol.sparsity * i as f64).round() as usize;
                    keep_row.min(keep_col).max(1)
                }
            };
            if !self.solver.clamp_batch && v.batch > limit {
                errs.push(format!(
                    "{}: L = {} exceeds the available {limit} agents per row/column",
                    v.label, v.batch
                ));
            }
            if !(0.0..1.0).contains(&v.protocol.sparsity) {
                errs.push(format!("{}: sparsity must lie in [0, 1)", v.label));
            }
            if v.storage == StorageMode::NonIid {
                for (what, ds, agents) in [("source", &self.source, i), ("target", &self.target, j)]
                {
                    if let Some(k) = ds.components() {
                        if agents > k {
                            errs.push(format!("{}: non-i.i.d. storage needs {what} components >= agents ({k} < {agents})", v.label));
                        }
                    }
                }
            }
            if let KernelSource::Approximated { projections: 0, .. } = v.kernel {
                errs.push(format!("{}: projection count must be positive", v.label));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Sets `a.b.c=value` inside a JSON object, creating objects on the way.
pub fn set_key_path(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not key=value")]))?;
    let value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(vec![format!(
                "override `{path}`: `{key}` is not inside an object"
            )])
        })?;
        if k + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        let child = obj
            .entry(key.to_string())
            .or_insert(serde_json::Value::Null);
        if child.is_null() {
            *child = serde_json::json!({});
        }
        node = child;
    }
    Ok(())
}

/// Independent sub-seeds for the data streams of one experiment seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const SCATTER_STREAM: u64 = 3;
const PROTOCOL_STREAM: u64 = 4;

/// Source and target measures for one seed.
pub fn generate_pair(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    Ok((
        generate_synthetic(&config.source, derive_seed(seed, SOURCE_STREAM))?,
        generate_synthetic(&config.target, derive_seed(seed, TARGET_STREAM))?,
    ))
}

/// Partition and protocol of one variant for one seed.
pub fn setup_variant(
    mu: &DiscreteMeasure,
    gamma: &DiscreteMeasure,
    variant: &Variant,
    seed: u64,
) -> Result<(AgentPartition, ProtocolMatrix)> {
    let (i, j) = variant.agents;
    let part = AgentPartition::scatter_both(
        mu,
        gamma,
        i,
        j,
        variant.storage,
        derive_seed(seed, SCATTER_STREAM),
    )?;
    let e = variant
        .protocol
        .build(&part, derive_seed(seed, PROTOCOL_STREAM))?;
    Ok((part, e))
}

/// Per-run line of the experiment summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub distance: f64,
    pub oracle: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub sigma: f64,
    pub sketch_bits: u64,
    pub dual_scalars: u64,
    pub assembly_scalars: u64,
    pub max_grad_norm: f64,
    pub trace_file: String,
    pub ledger_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Centralized oracle value per seed.
    pub oracle: BTreeMap<u64, f64>,
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    /// Median gap of one variant over seeds.
    pub fn median_gap(&self, variant: &str) -> Option<f64> {
        let gaps: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.gap)
            .collect();
        median(&gaps)
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    })
}

/// Runs one variant for one seed against a known oracle value.
pub fn run_variant(
    config: &ExperimentConfig,
    mu: &DiscreteMeasure,
    gamma: &DiscreteMeasure,
    oracle: f64,
    variant: &Variant,
    seed: u64,
) -> Result<(SolveOutput, f64)> {
    let (part, e) = setup_variant(mu, gamma, variant, seed)?;
    let sigma = protocol_mismatch(&e, &part.source_mass(), &part.target_mass())?;
    let solver = SolverConfig {
        seed,
        batch: variant.batch,
        kernel_source: variant.kernel,
        eta0: config.eta0_for(&part, &e, variant.batch),
        ..config.solver.clone()
    };
    Ok((
        solve(&part, &e, &config.spec()?, &solver, Some(oracle))?,
        sigma,
    ))
}

/// Runs every variant for every seed, writing `trace_<variant>_seed<s>.csv`,
/// `ledger_<variant>_seed<s>.json`, `oracle.csv` and `summary.json` into the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let out = &config.output;
    std::fs::create_dir_all(out)?;
    let spec = config.spec()?;
    let mut summary = ExperimentSummary {
        config_hash: config.hash()?,
        config: config.clone(),
        oracle: BTreeMap::new(),
        runs: Vec::new(),
    };
    for &seed in &config.seeds {
        let (mu, gamma) = generate_pair(config, seed)?;
        let w = sinkhorn_oracle(&mu, &gamma, &spec, &config.oracle)?.dual_value;
        summary.oracle.insert(seed, w);
        for v in config.variants() {
            let (res, sigma) = run_variant(config, &mu, &gamma, w, &v, seed)?;
            let trace_file = format!("trace_{}_seed{seed}.csv", v.label);
            let ledger_file = format!("ledger_{}_seed{seed}.json", v.label);
            res.trace.write_csv(
                std::fs::File::create(out.join(&trace_file))?,
                config.record_wall_time,
            )?;
            std::fs::write(out.join(&ledger_file), res.ledger.to_json()?)?;
            let gap = (res.distance - w).abs();
            summary.runs.push(RunSummary {
                variant: v.label.clone(),
                seed,
                distance: res.distance,
                oracle: w,
                gap,
                relative_gap: gap / w.abs().max(f64::MIN_POSITIVE),
                sigma,
                sketch_bits: res.ledger.phase_totals(Phase::KernelSketch).bits,
                dual_scalars: res.ledger.phase_totals(Phase::DualUpdate).scalars,
                assembly_scalars: res.ledger.phase_totals(Phase::Assembly).scalars,
                max_grad_norm: res.max_grad_norm,
                trace_file,
                ledger_file,
            });
        }
    }
    let mut oracle_csv = csv::Writer::from_path(out.join("oracle.csv"))?;
    oracle_csv.write_record(["seed", "oracle"])?;
    for (s, w) in &summary.oracle {
        oracle_csv.write_record([s.to_string(), format!("{w:?}")])?;
    }
    oracle_csv.flush()?;
    let json = serde_json::to_value(&summary)?;
    check_summary(&json)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    Ok(summary)
}

/// Schema check for a summary document: oracle values, per-run distances and
/// ledger totals must all be present and numeric.
pub fn check_summary(doc: &serde_json::Value) -> Result<()> {
    let mut errs = Vec::new();
    if !doc
        .get("config_hash")
        .is_some_and(|h| h.as_str().is_some_and(|s| s.len() == 64))
    {
        errs.push("config_hash missing or malformed".to_string());
    }
    let oracle = doc.get("oracle").and_then(|o| o.as_object());
    match oracle {
        Some(o) if !o.is_empty() && o.values().all(|v| v.is_number()) => {}
        _ => errs.push("oracle values missing".to_string()),
    }
    match doc.get("runs").and_then(|r| r.as_array()) {
        Some(runs) if !runs.is_empty() => {
            for (k, run) in runs.iter().enumerate() {
                for key in [
                    "distance",
                    "oracle",
                    "gap",
                    "sketch_bits",
                    "dual_scalars",
                    "assembly_scalars",
                    "seed",
                ] {
                    if !run.get(key).is_some_and(|v| v.is_number()) {
                        errs.push(format!("run {k}: `{key}` missing or not numeric"));
                    }
                }
                let seed = run
                    .get("seed")
                    .and_then(|s| s.as_u64())
                    .map(|s| s.to_string());
                if let (Some(o), Some(s)) = (oracle, seed) {
                    if !o.contains_key(&s) {
                        errs.push(format!("run {k}: no oracle value for seed {s}"));
                    }
                }
            }
        }
        _ => errs.push("no runs recorded".to_string()),
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// `X_hat = N * Pi * Y` for a coupling of a uniform source.
pub fn barycentric_map(coupling: &Coupling, target: &SampleSet, n: usize) -> Result<Array2<f64>> {
    let (rows, cols) = coupling.values.dim();
    if rows != n || cols != target.len() {
        return Err(Error::DimensionMismatch {
            left: rows * cols,
            right: n * target.len(),
        });
    }
    let expected = 1.0 / n as f64;
    if coupling
        .row_marginal
        .iter()
        .any(|r| (r - expected).abs() > 1e-6 * expected.max(1e-300))
    {
        return Err(Error::invalid(
            "barycentric mapping assumes a uniform source: coupling rows must each sum to 1/N",
        ));
    }
    Ok(coupling.values.dot(&target.points()) * n as f64)
}

/// Rescales each row of a coupling to mass `1/N`; rows with no mass are
/// spread uniformly over the targets.
pub fn normalize_rows(coupling: &Coupling) -> Result<Coupling> {
    let (n, m) = coupling.values.dim();
    let mut v = coupling.values.clone();
    for (mut row, &mass) in v.axis_iter_mut(Axis(0)).zip(coupling.row_marginal.iter()) {
        if mass > 0.0 {
            row.mapv_inplace(|x| x / (mass * n as f64));
        } else {
            row.fill(1.0 / (n * m) as f64);
        }
    }
    Coupling::new(v)
}

/// Label of the nearest training point under Euclidean distance; ties go to
/// the lowest index.
pub fn one_nn(train: &Array2<f64>, labels: &[i64], query: &Array2<f64>) -> Result<Vec<i64>> {
    if train.nrows() != labels.len() || train.nrows() == 0 {
        return Err(Error::invalid(
            "training set must be nonempty with one label per point",
        ));
    }
    if train.ncols() != query.ncols() {
        return Err(Error::DimensionMismatch {
            left: train.ncols(),
            right: query.ncols(),
        });
    }
    Ok(query
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (k, t) in train.rows().into_iter().enumerate() {
                let d: f64 = t.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels[best.1]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    /// `correct / total` after transport.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: BTreeMap<i64, f64>,
    /// 1NN trained on the untransported source.
    pub source_only_accuracy: f64,
    pub distance: f64,
    pub config_hash: String,
}

fn accuracy_of(pred: &[i64], truth: &[i64]) -> (usize, BTreeMap<i64, f64>) {
    let mut tally: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, t) in pred.iter().zip(truth) {
        let e = tally.entry(*t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
            correct += 1;
        }
    }
    (
        correct,
        tally
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
    )
}

/// Transports labeled source samples onto the target domain with the
/// decentralized solver and classifies the target with 1NN.
///
/// The coupling is rebuilt globally from the averaged duals with the cost the
/// solver saw (`-eps ln K_hat` for an approximate kernel), then each row is
/// rescaled to `1/N` before the barycentric map.
pub fn domain_adapt(
    source: &SampleSet,
    target: &SampleSet,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<AdaptationResult> {
    let (src_labels, tgt_labels) = match (source.labels(), target.labels()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::invalid(
                "domain adaptation needs labels on both domains",
            ))
        }
    };
    let set = |l: &[i64]| l.iter().copied().collect::<std::collections::BTreeSet<_>>();
    if set(src_labels) != set(tgt_labels) {
        return Err(Error::invalid("source and target label sets differ"));
    }
    let mu = DiscreteMeasure::uniform(source.clone());
    let gamma = DiscreteMeasure::uniform(target.clone());
    let variant = config
        .variants()
        .into_iter()
        .next()
        .expect("at least one variant");
    let (part, e) = setup_variant(&mu, &gamma, &variant, seed)?;
    let spec = config.spec()?;
    let solver = SolverConfig {
        seed,
        eta0: config.eta0_for(&part, &e, variant.batch),
        ..config.solver.clone()
    };
    let (kernel, _) = build_kernel(&part, &spec, &solver)?;
    let problem = crate::eot::DualProblem::new(kernel, e, spec.epsilon)?;
    let out = crate::mrbcd::Mrbcd::new(&problem, solver)?.run(None)?;

    // Dual blocks are laid out agent by agent; follow the same order here.
    let block_src: Vec<usize> = part
        .sources()
        .iter()
        .flat_map(|s| s.global_index.iter().copied())
        .collect();
    let block_tgt: Vec<usize> = part
        .targets()
        .iter()
        .flat_map(|s| s.global_index.iter().copied())
        .collect();
    let (src_blocks, tgt_blocks) = (source.select(&block_src)?, target.select(&block_tgt)?);
    let (ua, va) = out.averaged_iterates();
    let cost = problem.kernel.stitched_log().mapv(|lk| -spec.epsilon * lk);
    let coupling = coupling_from_duals(
        &DualState::flatten(ua),
        &DualState::flatten(va),
        cost.view(),
        &DiscreteMeasure::uniform(src_blocks),
        &DiscreteMeasure::uniform(tgt_blocks.clone()),
        spec.epsilon,
    )?;
    let mapped = barycentric_map(&normalize_rows(&coupling)?, &tgt_blocks, block_src.len())?;
    let train_labels: Vec<i64> = block_src.iter().map(|&g| src_labels[g]).collect();
    let pred = one_nn(&mapped, &train_labels, &target.points().to_owned())?;
    let (correct, per_class) = accuracy_of(&pred, tgt_labels);
    let baseline = one_nn(
        &source.points().to_owned(),
        src_labels,
        &target.points().to_owned(),
    )?;
    let (base_correct, _) = accuracy_of(&baseline, tgt_labels);
    let total = target.len();
    Ok(AdaptationResult {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_class,
        source_only_accuracy: base_correct as f64 / total as f64,
        distance: out.distance,
        config_hash: config.hash()?,
    })
}
