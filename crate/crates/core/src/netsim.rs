//! In-process simulation of the agent network: data scattering, storage and
//! communication protocols, agent-pair sampling and the communication ledger.
//!
//! Nothing here touches sockets. Every message an agent would send is
//! represented by a [`LedgerEntry`] carrying its exact size; the ledger is the
//! observable for all communication-complexity claims.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, MASS_TOL};

/// Seedable generator used for every stochastic choice in the simulator.
pub type SimRng = ChaCha8Rng;

pub fn sim_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// One agent's local data together with where it came from globally.
#[derive(Clone, Debug)]
pub struct AgentShard {
    /// Local measure, weights renormalized to sum to one.
    pub measure: DiscreteMeasure,
    /// Global sample index of each local sample.
    pub global_index: Vec<usize>,
    /// Mass of the global measure held by this agent (its storage probability).
    pub mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    Iid,
    NonIid,
}

/// Splits a measure over `agents` agents.
///
/// `Iid` shuffles and cuts into near-equal parts (sizes differ by at most one).
/// `NonIid` stores whole label groups per agent: the k-th smallest label goes
/// to agent `k mod agents`.
pub fn scatter(
    data: &DiscreteMeasure,
    agents: usize,
    mode: StorageMode,
    seed: u64,
) -> Result<Vec<AgentShard>> {
    let n = data.len();
    if agents == 0 {
        return Err(Error::invalid("at least one agent is required"));
    }
    if agents > n {
        return Err(Error::invalid(format!(
            "{agents} agents but only {n} samples"
        )));
    }
    let groups: Vec<Vec<usize>> = match mode {
        StorageMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut sim_rng(seed));
            let (base, extra) = (n / agents, n % agents);
            let mut out = Vec::with_capacity(agents);
            let mut start = 0;
            for a in 0..agents {
                let len = base + usize::from(a < extra);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            out
        }
        StorageMode::NonIid => {
            let labels = data
                .samples()
                .labels()
                .ok_or_else(|| Error::invalid("non-i.i.d. scattering requires labels"))?;
            let mut by_label: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for (k, &l) in labels.iter().enumerate() {
                by_label.entry(l).or_default().push(k);
            }
            if agents > by_label.len() {
                return Err(Error::invalid(format!(
                    "{agents} agents but only {} components for non-i.i.d. storage",
                    by_label.len()
                )));
            }
            let mut out = vec![Vec::new(); agents];
            for (k, (_, members)) in by_label.into_iter().enumerate() {
                out[k % agents].extend(members);
            }
            for g in &mut out {
                g.sort_unstable();
            }
            out
        }
    };
    groups.into_iter().map(|g| shard(data, g)).collect()
}

fn shard(data: &DiscreteMeasure, idx: Vec<usize>) -> Result<AgentShard> {
    let samples = data.samples().select(&idx)?;
    let raw: Array1<f64> = idx.iter().map(|&k| data.weights()[k]).collect();
    let mass = raw.sum();
    let measure = if mass > 0.0 {
        let w = raw / mass;
        // renormalization can drift by an ulp or two
        let fix = 1.0 - w.sum();
        let mut w = w;
        w[0] += fix;
        DiscreteMeasure::new(samples, w)?
    } else {
        DiscreteMeasure::uniform(samples)
    };
    Ok(AgentShard {
        measure,
        global_index: idx,
        mass,
    })
}

/// Wraps an already-partitioned measure list as shards with consecutive
/// global indices and equal storage mass per sample.
pub fn shards_from_measures(measures: Vec<DiscreteMeasure>) -> Vec<AgentShard> {
    let total: usize = measures.iter().map(DiscreteMeasure::len).sum();
    let mut offset = 0;
    measures
        .into_iter()
        .map(|m| {
            let len = m.len();
            let s = AgentShard {
                mass: len as f64 / total as f64,
                global_index: (offset..offset + len).collect(),
                measure: m,
            };
            offset += len;
            s
        })
        .collect()
}

/// Source and target agents with their local data.
#[derive(Clone, Debug)]
pub struct AgentPartition {
    sources: Vec<AgentShard>,
    targets: Vec<AgentShard>,
}

impl AgentPartition {
    pub fn new(sources: Vec<AgentShard>, targets: Vec<AgentShard>) -> Result<Self> {
        if sources.is_empty() || targets.is_empty() {
            return Err(Error::invalid("both domains need at least one agent"));
        }
        for side in [&sources, &targets] {
            let total: usize = side.iter().map(|s| s.measure.len()).sum();
            let mut seen = vec![false; total];
            for s in side.iter() {
                if s.global_index.len() != s.measure.len() {
                    return Err(Error::invalid(
                        "global index map length differs from shard size",
                    ));
                }
                for &g in &s.global_index {
                    if g >= total || seen[g] {
                        return Err(Error::invalid(format!(
                            "global index {g} is duplicated or out of range"
                        )));
                    }
                    seen[g] = true;
                }
            }
            let mass: f64 = side.iter().map(|s| s.mass).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("agent masses sum to {mass}, not 1")));
            }
        }
        let d = sources[0].measure.dim();
        if sources.iter().chain(&targets).any(|s| s.measure.dim() != d) {
            return Err(Error::invalid(
                "all agents must hold samples of the same dimension",
            ));
        }
        Ok(Self { sources, targets })
    }

    /// Convenience: scatter both global measures and build the partition.
    pub fn scatter_both(
        mu: &DiscreteMeasure,
        gamma: &DiscreteMeasure,
        sources: usize,
        targets: usize,
        mode: StorageMode,
        seed: u64,
    ) -> Result<Self> {
        let s = scatter(mu, sources, mode, seed)?;
        let t = scatter(
            gamma,
            targets,
            mode,
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )?;
        Self::new(s, t)
    }

    pub fn sources(&self) -> &[AgentShard] {
        &self.sources
    }

    pub fn targets(&self) -> &[AgentShard] {
        &self.targets
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.measure.len()).collect()
    }

    pub fn target_sizes(&self) -> Vec<usize> {
        self.targets.iter().map(|s| s.measure.len()).collect()
    }

    pub fn total_sources(&self) -> usize {
        self.source_sizes().iter().sum()
    }

    pub fn total_targets(&self) -> usize {
        self.target_sizes().iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.sources[0].measure.dim()
    }

    /// Storage distribution `p` over source agents.
    pub fn source_mass(&self) -> Array1<f64> {
        self.sources.iter().map(|s| s.mass).collect()
    }

    /// Storage distribution `q` over target agents.
    pub fn target_mass(&self) -> Array1<f64> {
        self.targets.iter().map(|s| s.mass).collect()
    }

    /// The global source measure `sum_i p_i mu_i`, in global index order.
    pub fn global_source(&self) -> Result<DiscreteMeasure> {
        reassemble(&self.sources)
    }

    pub fn global_target(&self) -> Result<DiscreteMeasure> {
        reassemble(&self.targets)
    }
}

fn reassemble(side: &[AgentShard]) -> Result<DiscreteMeasure> {
    let total: usize = side.iter().map(|s| s.measure.len()).sum();
    let d = side[0].measure.dim();
    let mut points = Array2::zeros((total, d));
    let mut weights = Array1::zeros(total);
    let has_labels = side.iter().all(|s| s.measure.samples().labels().is_some());
    let mut labels = vec![0i64; total];
    for s in side {
        for (local, &g) in s.global_index.iter().enumerate() {
            points.row_mut(g).assign(&s.measure.samples().point(local));
            weights[g] = s.mass * s.measure.weights()[local];
            if has_labels {
                labels[g] = s.measure.samples().labels().unwrap()[local];
            }
        }
    }
    let fix = 1.0 - weights.sum();
    weights[0] += fix;
    let samples = crate::measures::SampleSet::new(points, has_labels.then_some(labels))?;
    DiscreteMeasure::new(samples, weights)
}

/// Nonnegative `I x J` matrix with unit total mass: a distribution over
/// agent pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMatrix {
    values: Array2<f64>,
}

impl ProtocolMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("protocol matrix must be non-empty"));
        }
        crate::measures::check_simplex(values.iter().copied(), "protocol matrix")?;
        Ok(Self { values })
    }

    /// Scales a nonnegative matrix to unit mass.
    pub fn normalized(values: Array2<f64>) -> Result<Self> {
        let total = values.sum();
        if !(total > 0.0) {
            return Err(Error::invalid("protocol matrix has no positive entry"));
        }
        let mut v = values / total;
        // land exactly on the simplex
        let fix = 1.0 - v.sum();
        if let Some(x) = v.iter_mut().find(|x| **x > 0.0) {
            *x += fix;
        }
        Self::new(v)
    }

    pub fn uniform(sources: usize, targets: usize) -> Result<Self> {
        Self::normalized(Array2::from_elem((sources, targets), 1.0))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn n_sources(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_mass(&self, i: usize) -> f64 {
        self.values.row(i).sum()
    }

    pub fn col_mass(&self, j: usize) -> f64 {
        self.values.column(j).sum()
    }

    pub fn row_support(&self, i: usize) -> usize {
        self.values.row(i).iter().filter(|&&x| x > 0.0).count()
    }

    pub fn col_support(&self, j: usize) -> usize {
        self.values.column(j).iter().filter(|&&x| x > 0.0).count()
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&x| x == 0.0).count()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("non-numeric protocol entry {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let j = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::invalid("ragged protocol matrix"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), j), flat)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for row in self.values.rows() {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `p (x) q`.
pub fn storage_protocol(p: &Array1<f64>, q: &Array1<f64>) -> Result<ProtocolMatrix> {
    crate::measures::check_simplex(p.iter().copied(), "p")?;
    crate::measures::check_simplex(q.iter().copied(), "q")?;
    let mut v = Array2::zeros((p.len(), q.len()));
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            v[[i, j]] = pi * qj;
        }
    }
    // the outer product of two simplex vectors can miss 1 by a few ulps
    ProtocolMatrix::normalized(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Ideal,
    Sparse,
    SparseAsymmetric,
}

/// Builds a communication protocol.
///
/// `Sparse` zeroes `round(sparsity * J)` randomly chosen entries in every row
/// (each source talks to a fixed random subset of targets) and renormalizes.
/// At most `J - 1` entries go, so every source keeps a partner.
/// `SparseAsymmetric` additionally zeroes every entry with `j > i`, which can
/// leave a source isolated.
pub fn protocol_generator(
    kind: ProtocolKind,
    sources: usize,
    targets: usize,
    sparsity: f64,
    seed: u64,
) -> Result<ProtocolMatrix> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity {sparsity} not in [0, 1)")));
    }
    if sources == 0 || targets == 0 {
        return Err(Error::invalid("protocol needs at least one agent per side"));
    }
    let mut v = Array2::from_elem((sources, targets), 1.0);
    if kind != ProtocolKind::Ideal {
        let mut rng = sim_rng(seed);
        let drop = ((sparsity * targets as f64).round() as usize).min(targets - 1);
        let mut cols: Vec<usize> = (0..targets).collect();
        for i in 0..sources {
            cols.shuffle(&mut rng);
            for &j in &cols[..drop] {
                v[[i, j]] = 0.0;
            }
        }
        if kind == ProtocolKind::SparseAsymmetric {
            for i in 0..sources {
                for j in (i + 1)..targets {
                    v[[i, j]] = 0.0;
                }
            }
        }
    }
    ProtocolMatrix::normalized(v)
}

/// `sum_ij |e_ij - p_i q_j|`.
pub fn protocol_mismatch(e: &ProtocolMatrix, p: &Array1<f64>, q: &Array1<f64>) -> Result<f64> {
    if e.n_sources() != p.len() || e.n_targets() != q.len() {
        return Err(Error::invalid(format!(
            "protocol is {}x{} but p, q have lengths {}, {}",
            e.n_sources(),
            e.n_targets(),
            p.len(),
            q.len()
        )));
    }
    let mut s = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            s += (e.get(i, j) - pi * qj).abs();
        }
    }
    Ok(s)
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut r = rng.random::<f64>() * total;
    let mut last = None;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if r < w {
                return Some(k);
            }
            r -= w;
            last = Some(k);
        }
    }
    // rounding pushed r past the end
    last
}

/// Draws `count` distinct indices, each successive draw proportional to the
/// remaining weights.
fn sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if count == 0 {
        return Err(Error::invalid("mini-batch size must be at least 1"));
    }
    if count > support {
        return Err(Error::invalid(format!(
            "mini-batch size {count} exceeds the {support} agents with positive probability"
        )));
    }
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = categorical(&w, rng).expect("positive support checked above");
        out.push(k);
        w[k] = 0.0;
    }
    out.sort_unstable();
    Ok(out)
}

/// Samples an agent pair from `E` viewed as a categorical distribution.
pub fn sample_pair<R: Rng + ?Sized>(e: &ProtocolMatrix, rng: &mut R) -> (usize, usize) {
    let flat = e
        .values()
        .as_slice()
        .expect("protocol matrices are standard layout");
    let k = categorical(flat, rng).expect("protocol matrix has positive mass");
    (k / e.n_targets(), k % e.n_targets())
}

/// `L` target agents drawn without replacement from `E[i, :] / ||E[i, :]||_1`.
pub fn sample_targets_for_source<R: Rng + ?Sized>(
    i: usize,
    e: &ProtocolMatrix,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if e.row_mass(i) <= 0.0 {
        return Err(Error::invalid(format!(
            "source agent {i} has an all-zero protocol row"
        )));
    }
    let row: Vec<f64> = e.values().row(i).to_vec();
    sample_without_replacement(&row, batch, rng)
}

/// `L` source agents drawn without replacement from `E[:, j] / ||E[:, j]||_1`.
pub fn sample_sources_for_target<R: Rng + ?Sized>(
    j: usize,
    e: &ProtocolMatrix,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if e.col_mass(j) <= 0.0 {
        return Err(Error::invalid(format!(
            "target agent {j} has an all-zero protocol column"
        )));
    }
    let col: Vec<f64> = e.values().column(j).to_vec();
    sample_without_replacement(&col, batch, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "domain", content = "index")]
pub enum AgentId {
    Source(usize),
    Target(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Seed and sketch exchange for the kernel approximation.
    KernelSketch,
    /// Dual-variable exchange during ascent.
    DualUpdate,
    /// Collecting local objectives and broadcasting the distance.
    Assembly,
}

/// What a message carries. Sizes are per receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Payload {
    /// The shared random seed.
    Seed,
    /// A `rows x cols` binary sign matrix.
    SignBits { rows: usize, cols: usize },
    /// Sample norms.
    Norms { len: usize },
    /// A block of dual variables.
    Duals { len: usize },
    /// Local pair objectives.
    Objectives { len: usize },
    /// The assembled distance.
    Distance,
}

impl Payload {
    pub fn scalar_count(&self) -> u64 {
        match *self {
            Payload::Seed | Payload::Distance => 1,
            Payload::SignBits { .. } => 0,
            Payload::Norms { len } | Payload::Duals { len } | Payload::Objectives { len } => {
                len as u64
            }
        }
    }

    pub fn bit_count(&self) -> u64 {
        match *self {
            Payload::SignBits { rows, cols } => (rows * cols) as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: Phase,
    pub iteration: Option<u64>,
    pub sender: AgentId,
    pub receivers: Vec<AgentId>,
    pub payload: Payload,
    /// Total over all receivers.
    pub scalar_count: u64,
    pub bit_count: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub messages: u64,
    pub scalars: u64,
    pub bits: u64,
}

/// Exact record of every simulated transfer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    totals: BTreeMap<Phase, PhaseTotals>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one transfer. A broadcast to `k` receivers costs `k` times the
    /// payload size.
    pub fn record_transfer(
        &mut self,
        phase: Phase,
        iteration: Option<u64>,
        sender: AgentId,
        receivers: Vec<AgentId>,
        payload: Payload,
    ) -> &LedgerEntry {
        let k = receivers.len() as u64;
        let entry = LedgerEntry {
            phase,
            iteration,
            sender,
            scalar_count: payload.scalar_count() * k,
            bit_count: payload.bit_count() * k,
            receivers,
            payload,
        };
        let t = self.totals.entry(phase).or_default();
        t.messages += 1;
        t.scalars += entry.scalar_count;
        t.bits += entry.bit_count;
        self.entries.push(entry);
        self.entries.last().unwrap()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn phase_totals(&self, phase: Phase) -> PhaseTotals {
        self.totals.get(&phase).copied().unwrap_or_default()
    }

    pub fn total_scalars(&self) -> u64 {
        self.totals.values().map(|t| t.scalars).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.totals.values().map(|t| t.bits).sum()
    }

    /// Sum of scalar counts over entries matching `pred`.
    pub fn scalars_where(&self, pred: impl Fn(&LedgerEntry) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.scalar_count)
            .sum()
    }

    pub fn extend(&mut self, other: &CommLedger) {
        for e in &other.entries {
            self.record_transfer(
                e.phase,
                e.iteration,
                e.sender,
                e.receivers.clone(),
                e.payload,
            );
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// True when `a` and `b` agree entrywise within `MASS_TOL`.
pub fn protocols_match(a: &ProtocolMatrix, b: &ProtocolMatrix) -> bool {
    a.values().dim() == b.values().dim()
        && a.values()
            .iter()
            .zip(b.values().iter())
            .all(|(x, y)| (x - y).abs() <= MASS_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::SampleSet;
    use ndarray::array;

    fn line_measure(n: usize, labels: Option<Vec<i64>>) -> DiscreteMeasure {
        let rows: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64, 0.0]).collect();
        DiscreteMeasure::uniform(SampleSet::from_rows(&rows, labels).unwrap())
    }

    #[test]
    fn scatter_single_agent_holds_everything() {
        let m = line_measure(7, None);
        let s = scatter(&m, 1, StorageMode::Iid, 3).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].measure.len(), 7);
        assert!((s[0].mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_iid_equal_sizes_and_union() {
        let m = line_measure(2000, None);
        let s = scatter(&m, 10, StorageMode::Iid, 42).unwrap();
        assert!(s.iter().all(|a| a.measure.len() == 200));
        let mut all: Vec<usize> = s.iter().flat_map(|a| a.global_index.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        for a in &s {
            for (local, &g) in a.global_index.iter().enumerate() {
                assert_eq!(a.measure.samples().point(local), m.samples().point(g));
            }
        }
        let uneven = scatter(&line_measure(23, None), 5, StorageMode::Iid, 1).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(|a| a.measure.len()).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
    }

    #[test]
    fn scatter_non_iid_by_label() {
        let labels = vec![1, 0, 1, 0, 0, 1];
        let m = line_measure(6, Some(labels.clone()));
        let s = scatter(&m, 2, StorageMode::NonIid, 0).unwrap();
        for (k, a) in s.iter().enumerate() {
            assert!(a
                .measure
                .samples()
                .labels()
                .unwrap()
                .iter()
                .all(|&l| l == k as i64));
            assert!(a.global_index.iter().all(|&g| labels[g] == k as i64));
        }
        assert!(scatter(&line_measure(6, None), 2, StorageMode::NonIid, 0).is_err());
        assert!(scatter(&m, 3, StorageMode::NonIid, 0).is_err());
        assert!(scatter(&m, 7, StorageMode::Iid, 0).is_err());
    }

    #[test]
    fn partition_reassembles_global_measure() {
        let m = line_measure(11, None);
        let p = AgentPartition::new(
            scatter(&m, 3, StorageMode::Iid, 9).unwrap(),
            scatter(&m, 2, StorageMode::Iid, 10).unwrap(),
        )
        .unwrap();
        let g = p.global_source().unwrap();
        assert_eq!(g.samples(), m.samples());
        assert!(g
            .weights()
            .iter()
            .zip(m.weights())
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(p.source_sizes().iter().sum::<usize>(), 11);
    }

    #[test]
    fn storage_protocol_examples() {
        let p = Array1::from_elem(10, 0.1);
        let e = storage_protocol(&p, &p).unwrap();
        assert!(e.values().iter().all(|&x| (x - 0.01).abs() < 1e-15));
        let e1 = array![1.0, 0.0, 0.0];
        let e = storage_protocol(&e1, &e1).unwrap();
        assert_eq!(e.get(0, 0), 1.0);
        assert_eq!(e.zero_count(), 8);
        assert!(storage_protocol(&array![0.5, 0.6], &e1).is_err());
        // rank one: every 2x2 minor vanishes
        let e = storage_protocol(&array![0.2, 0.3, 0.5], &array![0.6, 0.4]).unwrap();
        let v = e.values();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!((v[[a, 0]] * v[[b, 1]] - v[[a, 1]] * v[[b, 0]]).abs() < 1e-15);
        }
    }

    #[test]
    fn protocol_generator_examples() {
        let e = protocol_generator(ProtocolKind::Ideal, 10, 10, 0.0, 0).unwrap();
        assert!(e.values().iter().all(|&x| (x - 0.01).abs() < 1e-15));
        let e = protocol_generator(ProtocolKind::Sparse, 10, 10, 0.5, 7).unwrap();
        assert_eq!(e.zero_count(), 50);
        assert!((e.values().sum() - 1.0).abs() < 1e-12);
        let e = protocol_generator(ProtocolKind::SparseAsymmetric, 10, 10, 0.5, 7).unwrap();
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_eq!(e.get(i, j), 0.0);
            }
        }
        assert!((e.values().sum() - 1.0).abs() < 1e-12);
        assert!(protocol_generator(ProtocolKind::Sparse, 2, 2, 1.0, 0).is_err());
    }

    #[test]
    fn mismatch_examples() {
        let p = array![0.5, 0.5];
        let e = storage_protocol(&p, &p).unwrap();
        assert_eq!(protocol_mismatch(&e, &p, &p).unwrap(), 0.0);
        let d = ProtocolMatrix::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert!((protocol_mismatch(&d, &p, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!(protocol_mismatch(&d, &array![1.0], &p).is_err());
    }

    #[test]
    fn pair_sampling_single_entry_and_full_batch() {
        let e = ProtocolMatrix::new(array![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut rng = sim_rng(1);
        for _ in 0..50 {
            assert_eq!(sample_pair(&e, &mut rng), (1, 1));
        }
        let u = ProtocolMatrix::uniform(4, 5).unwrap();
        assert_eq!(
            sample_targets_for_source(2, &u, 5, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(
            sample_sources_for_target(0, &u, 4, &mut rng).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(sample_targets_for_source(0, &e, 1, &mut rng).is_err());
        assert!(sample_targets_for_source(1, &e, 2, &mut rng).is_err());
    }

    #[test]
    fn ledger_counts() {
        let mut l = CommLedger::new();
        let e = l.record_transfer(
            Phase::DualUpdate,
            Some(0),
            AgentId::Target(3),
            vec![AgentId::Source(1)],
            Payload::Duals { len: 200 },
        );
        assert_eq!(e.scalar_count, 200);
        let e = l.record_transfer(
            Phase::DualUpdate,
            Some(0),
            AgentId::Target(3),
            vec![],
            Payload::Duals { len: 5 },
        );
        assert_eq!(e.scalar_count, 0);
        let e = l.record_transfer(
            Phase::KernelSketch,
            None,
            AgentId::Source(0),
            vec![AgentId::Target(0), AgentId::Target(1)],
            Payload::SignBits { rows: 8, cols: 3 },
        );
        assert_eq!((e.scalar_count, e.bit_count), (0, 48));
        assert_eq!(l.phase_totals(Phase::DualUpdate).scalars, 200);
        assert_eq!(l.total_bits(), 48);
        let back = CommLedger::from_json(&l.to_json().unwrap()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn protocol_csv() {
        let e = protocol_generator(ProtocolKind::Sparse, 3, 4, 0.5, 2).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        assert_eq!(ProtocolMatrix::read_csv(buf.as_slice()).unwrap(), e);
        assert!(ProtocolMatrix::read_csv("0.5,0.6\n".as_bytes()).is_err());
    }
}
