//! Privacy-preserving kernel approximation from one-bit random projections.
//!
//! Every agent draws the same `P` Gaussian directions from a shared seed,
//! keeps only the sign pattern of `<w_l, x_n>` for its samples, and ships that
//! bit matrix (plus sample norms unless the data is normalized). The angle
//! between two samples is recovered from the overlap of their bit columns,
//! and the Gibbs kernel of the Euclidean cost is rebuilt from angle and norms:
//!
//! ```text
//! psi_hat = pi * |1 - 2 <a_n, a_m> / P|
//! c_hat   = |x|^2 + |y|^2 - 2 |x| |y| cos(psi_hat)
//! k_hat   = exp(-c_hat / eps)
//! ```
//!
//! Note that `<a_n, a_m> = P` (both columns all ones) maps to `psi_hat = pi`,
//! exactly as the estimator is written, even though such columns come from
//! nearly aligned vectors.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eot::KernelBlocks;
use crate::error::{Error, Result};
use crate::measures::{CostKind, CostSpec, KernelBlock, SampleSet};
use crate::netsim::{sim_rng, AgentId, AgentPartition, CommLedger, Payload, Phase};

/// `P` standard-normal directions in `R^D`, reproducible from the seed alone.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedRandomness {
    pub seed: u64,
    directions: Array2<f64>,
}

impl SharedRandomness {
    pub fn directions(&self) -> &Array2<f64> {
        &self.directions
    }

    pub fn projections(&self) -> usize {
        self.directions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }
}

pub fn draw_shared_randomness(
    seed: u64,
    projections: usize,
    dim: usize,
) -> Result<SharedRandomness> {
    if projections == 0 || dim == 0 {
        return Err(Error::invalid(
            "need at least one projection and one dimension",
        ));
    }
    let mut rng = sim_rng(seed);
    let flat: Vec<f64> = (0..projections * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let directions =
        Array2::from_shape_vec((projections, dim), flat).expect("shape matches length");
    Ok(SharedRandomness { seed, directions })
}

/// `P x N` binary matrix, stored column-wise as packed 64-bit words.
#[derive(Clone, Debug, PartialEq)]
pub struct SignMatrix {
    projections: usize,
    columns: Vec<Vec<u64>>,
    norms: Option<Vec<f64>>,
}

impl SignMatrix {
    pub fn projections(&self) -> usize {
        self.projections
    }

    pub fn samples(&self) -> usize {
        self.columns.len()
    }

    pub fn bit(&self, l: usize, n: usize) -> bool {
        (self.columns[n][l / 64] >> (l % 64)) & 1 == 1
    }

    pub fn column(&self, n: usize) -> Vec<bool> {
        (0..self.projections).map(|l| self.bit(l, n)).collect()
    }

    pub fn norms(&self) -> Option<&[f64]> {
        self.norms.as_deref()
    }

    /// `<a_n, b_m>` between a column of `self` and one of `other`.
    pub fn overlap(&self, n: usize, other: &SignMatrix, m: usize) -> u32 {
        self.columns[n]
            .iter()
            .zip(&other.columns[m])
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    /// Dense 0/1 view, `P x N`.
    pub fn to_dense(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.projections, self.samples()), |(l, n)| {
            u8::from(self.bit(l, n))
        })
    }
}

/// Sign sketch of one agent's samples. Ties (`<w, x> = 0`, including `x = 0`)
/// give bit 1. Norms are attached unless `normalized` is set.
pub fn sign_matrix(
    samples: &SampleSet,
    rand: &SharedRandomness,
    normalized: bool,
) -> Result<SignMatrix> {
    if samples.dim() != rand.dim() {
        return Err(Error::DimensionMismatch {
            left: samples.dim(),
            right: rand.dim(),
        });
    }
    let p = rand.projections();
    let words = p.div_ceil(64);
    let proj = samples.points().dot(&rand.directions().t());
    let columns = proj
        .rows()
        .into_iter()
        .map(|row| {
            let mut col = vec![0u64; words];
            for (l, &v) in row.iter().enumerate() {
                if v >= 0.0 {
                    col[l / 64] |= 1 << (l % 64);
                }
            }
            col
        })
        .collect();
    let norms = (!normalized).then(|| samples.norms().to_vec());
    Ok(SignMatrix {
        projections: p,
        columns,
        norms,
    })
}

/// `pi * |1 - 2 overlap / P|`, in `[0, pi]`.
pub fn angle_from_overlap(overlap: u32, projections: usize) -> f64 {
    PI * (1.0 - 2.0 * overlap as f64 / projections as f64).abs()
}

pub fn angle_estimate(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid("sign columns must be nonempty"));
    }
    let overlap = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u32;
    Ok(angle_from_overlap(overlap, a.len()))
}

/// Cost reconstructed from norms and estimated angle; never negative.
pub fn cost_from_angle(norm_x: f64, norm_y: f64, angle: f64, kind: CostKind) -> f64 {
    let sq = (norm_x * norm_x + norm_y * norm_y - 2.0 * norm_x * norm_y * angle.cos()).max(0.0);
    match kind {
        CostKind::SquaredEuclidean => sq,
        CostKind::Euclidean => sq.sqrt(),
    }
}

/// `K_hat` between two sketched agents. Agents flagged as normalized (no norms
/// attached) are treated as unit-norm.
pub fn approx_kernel_block(
    src: &SignMatrix,
    tgt: &SignMatrix,
    spec: &CostSpec,
) -> Result<KernelBlock> {
    approx_kernel_block_for_agents(src, tgt, spec, 0, 0)
}

fn approx_kernel_block_for_agents(
    src: &SignMatrix,
    tgt: &SignMatrix,
    spec: &CostSpec,
    source_agent: usize,
    target_agent: usize,
) -> Result<KernelBlock> {
    if src.projections != tgt.projections {
        return Err(Error::DimensionMismatch {
            left: src.projections,
            right: tgt.projections,
        });
    }
    if src.norms.is_some() != tgt.norms.is_some() {
        return Err(Error::invalid(
            "norms missing on one side: both sketches must carry norms or both be flagged normalized",
        ));
    }
    let ones_s = vec![1.0; src.samples()];
    let ones_t = vec![1.0; tgt.samples()];
    let ns = src.norms().unwrap_or(&ones_s);
    let nt = tgt.norms().unwrap_or(&ones_t);
    let mut lk = Array2::zeros((src.samples(), tgt.samples()));
    for n in 0..src.samples() {
        for m in 0..tgt.samples() {
            let psi = angle_from_overlap(src.overlap(n, tgt, m), src.projections);
            lk[[n, m]] = -cost_from_angle(ns[n], nt[m], psi, spec.kind) / spec.epsilon;
        }
    }
    KernelBlock::from_log_values(lk, source_agent, target_agent)
}

/// Everything each agent broadcasts in the sketch exchange.
#[derive(Clone, Debug)]
pub struct SketchMessage {
    pub sender: AgentId,
    pub sketch: SignMatrix,
}

/// Runs the sketch exchange over a partition.
///
/// Sources broadcast their sketch to all `J` targets and targets to all `I`
/// sources; receivers build `K_hat_ij` from the received messages alone. The
/// ledger records the seed broadcast, `J N_i P` bits (+ `J N_i` norms) per
/// source and `I M_j P` bits (+ `I M_j` norms) per target.
pub fn distributed_sketch(
    partition: &AgentPartition,
    rand: &SharedRandomness,
    spec: &CostSpec,
    normalized: bool,
) -> Result<(KernelBlocks, CommLedger)> {
    let (i_n, j_n) = (partition.n_sources(), partition.n_targets());
    if i_n == 0 || j_n == 0 {
        return Err(Error::invalid("sketch exchange needs agents on both sides"));
    }
    let mut ledger = CommLedger::new();
    let sources: Vec<AgentId> = (0..i_n).map(AgentId::Source).collect();
    let targets: Vec<AgentId> = (0..j_n).map(AgentId::Target).collect();

    let everyone_else: Vec<AgentId> = sources.iter().skip(1).chain(&targets).copied().collect();
    ledger.record_transfer(
        Phase::KernelSketch,
        None,
        AgentId::Source(0),
        everyone_else,
        Payload::Seed,
    );

    let mut broadcast =
        |sender: AgentId, samples: &SampleSet, receivers: &[AgentId]| -> Result<SketchMessage> {
            let sketch = sign_matrix(samples, rand, normalized)?;
            ledger.record_transfer(
                Phase::KernelSketch,
                None,
                sender,
                receivers.to_vec(),
                Payload::SignBits {
                    rows: sketch.projections(),
                    cols: sketch.samples(),
                },
            );
            if !normalized {
                ledger.record_transfer(
                    Phase::KernelSketch,
                    None,
                    sender,
                    receivers.to_vec(),
                    Payload::Norms {
                        len: sketch.samples(),
                    },
                );
            }
            Ok(SketchMessage { sender, sketch })
        };

    let from_sources = partition
        .sources()
        .iter()
        .enumerate()
        .map(|(i, s)| broadcast(AgentId::Source(i), s.measure.samples(), &targets))
        .collect::<Result<Vec<_>>>()?;
    let from_targets = partition
        .targets()
        .iter()
        .enumerate()
        .map(|(j, t)| broadcast(AgentId::Target(j), t.measure.samples(), &sources))
        .collect::<Result<Vec<_>>>()?;

    // source i and target j compute the same block from the same two messages
    let blocks = from_sources
        .iter()
        .enumerate()
        .map(|(i, ms)| {
            from_targets
                .iter()
                .enumerate()
                .map(|(j, mt)| approx_kernel_block_for_agents(&ms.sketch, &mt.sketch, spec, i, j))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((KernelBlocks::new(blocks)?, ledger))
}

/// Constants of the kernel-approximation bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GipParams {
    /// Lipschitz constant of the kernel in the angle.
    pub lipschitz_g: f64,
    /// Bound on kernel magnitude, at least 1.
    pub bound_b: f64,
    /// Failure probability.
    pub delta: f64,
}

impl GipParams {
    pub fn new(lipschitz_g: f64, bound_b: f64, delta: f64) -> Result<Self> {
        if !(lipschitz_g > 0.0) || !(bound_b >= 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!(
                "need G > 0, b >= 1, 0 < delta < 1; got G={lipschitz_g}, b={bound_b}, delta={delta}"
            )));
        }
        Ok(Self {
            lipschitz_g,
            bound_b,
            delta,
        })
    }

    /// Conservative `G` for the squared-Euclidean Gibbs kernel:
    /// `|d k / d phi| = k * 2|x||y| sin(phi) / eps <= 2 max|x| max|y| / eps`.
    /// This is an estimate, not a proven tight constant.
    pub fn estimate(src: &SampleSet, tgt: &SampleSet, epsilon: f64, delta: f64) -> Result<Self> {
        let mx = src.norms().iter().copied().fold(0.0, f64::max);
        let my = tgt.norms().iter().copied().fold(0.0, f64::max);
        // all-zero data gives G = 0; keep it strictly positive
        let g = (2.0 * mx * my / epsilon).max(f64::MIN_POSITIVE);
        Self::new(g, 1.0, delta)
    }
}

/// `G (N+M) ( sqrt(32 pi^2 / P * log(2(N+M)/delta)) + 8 pi / (3P) * log(2(N+M)/delta) )`.
pub fn sketch_error_bound(n: usize, m: usize, projections: usize, params: &GipParams) -> f64 {
    let total = (n + m) as f64;
    let p = projections as f64;
    let log_term = (2.0 * total / params.delta).ln();
    params.lipschitz_g
        * total
        * ((32.0 * PI * PI / p * log_term).sqrt() + 8.0 * PI / (3.0 * p) * log_term)
}

/// Sample norms as broadcast alongside the sketch.
pub fn sample_norms(samples: &SampleSet) -> Array1<f64> {
    samples.norms()
}
