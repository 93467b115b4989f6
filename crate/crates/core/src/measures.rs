//! Sample sets, discrete measures, ground costs and Gibbs kernels.
//!
//! Kernel blocks are stored in the log domain (`ln k = -c/eps`) so that large
//! costs at small `eps` never underflow to an exact zero; `value` and
//! `values` exponentiate on demand.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const MASS_TOL: f64 = 1e-12;

/// `N` points in `R^D`, stored row-wise, with optional integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
    labels: Option<Vec<i64>>,
}

impl SampleSet {
    pub fn new(points: Array2<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(Error::invalid("sample set must hold at least one point"));
        }
        if d == 0 {
            return Err(Error::invalid("sample dimension must be at least 1"));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "label count {} does not match sample count {n}",
                    l.len()
                )));
            }
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<i64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    left: d,
                    right: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        let points =
            Array2::from_shape_vec((n, d), flat).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, n: usize) -> ArrayView1<'_, f64> {
        self.points.row(n)
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    /// Rows selected by `idx`, in the given order, labels carried along.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let points = self.points.select(Axis(0), idx);
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect());
        Self::new(points, labels)
    }

    /// Euclidean norm of every sample.
    pub fn norms(&self) -> Array1<f64> {
        self.points
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }

    /// Reads a CSV with a header row, numeric feature columns and an optional
    /// trailing integer column named `label`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Err(Error::invalid("csv header row is empty"));
        }
        let has_label = headers
            .iter()
            .next_back()
            .is_some_and(|h| h.trim().eq_ignore_ascii_case("label"));
        let n_feat = headers.len() - usize::from(has_label);
        if n_feat == 0 {
            return Err(Error::invalid("csv has no feature columns"));
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::invalid(format!(
                    "row {} has {} fields, header has {}",
                    line + 2,
                    rec.len(),
                    headers.len()
                )));
            }
            for k in 0..n_feat {
                let v: f64 = rec[k].trim().parse().map_err(|_| {
                    Error::invalid(format!("row {}: non-numeric value {:?}", line + 2, &rec[k]))
                })?;
                flat.push(v);
            }
            if has_label {
                let raw = rec[n_feat].trim();
                let l: i64 = raw.parse().map_err(|_| {
                    Error::invalid(format!("row {}: non-integer label {raw:?}", line + 2))
                })?;
                labels.push(l);
            }
            rows += 1;
        }
        let points = Array2::from_shape_vec((rows, n_feat), flat)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(points, has_label.then_some(labels))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for n in 0..self.len() {
            let mut rec: Vec<String> = self.point(n).iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[n].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A weighted sample set: `sum_n w_n delta_{x_n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    samples: SampleSet,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(samples: SampleSet, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != samples.len() {
            return Err(Error::DimensionMismatch {
                left: samples.len(),
                right: weights.len(),
            });
        }
        check_simplex(weights.iter().copied(), "measure weights")?;
        Ok(Self { samples, weights })
    }

    pub fn uniform(samples: SampleSet) -> Self {
        let n = samples.len();
        Self {
            samples,
            weights: Array1::from_elem(n, 1.0 / n as f64),
        }
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    /// True when all weights equal `1/N` within `MASS_TOL`.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() <= MASS_TOL)
    }
}

pub(crate) fn check_simplex(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for v in values {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!(
                "{what}: entry {v} is not a nonnegative real"
            )));
        }
        total += v;
    }
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!(
            "{what}: total mass {total} is not 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub epsilon: f64,
}

impl CostSpec {
    pub fn new(kind: CostKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn squared_euclidean(epsilon: f64) -> Result<Self> {
        Self::new(CostKind::SquaredEuclidean, epsilon)
    }
}

pub fn cost(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, kind: CostKind) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match kind {
        CostKind::SquaredEuclidean => sq,
        CostKind::Euclidean => sq.sqrt(),
    })
}

/// `exp(-c(x, y) / eps)`.
pub fn gibbs_kernel(
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    spec: &CostSpec,
) -> Result<f64> {
    Ok((-cost(x, y, spec.kind)? / spec.epsilon).exp())
}

/// Full `N x M` ground-cost matrix.
pub fn cost_matrix(src: &SampleSet, tgt: &SampleSet, kind: CostKind) -> Result<Array2<f64>> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch {
            left: src.dim(),
            right: tgt.dim(),
        });
    }
    let mut c = Array2::zeros((src.len(), tgt.len()));
    for (n, x) in src.points().rows().into_iter().enumerate() {
        for (m, y) in tgt.points().rows().into_iter().enumerate() {
            c[[n, m]] = cost(x, y, kind)?;
        }
    }
    Ok(c)
}

/// One `(source agent, target agent)` block of the Gibbs kernel, kept as
/// `ln k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBlock {
    log_values: Array2<f64>,
    pub source_agent: usize,
    pub target_agent: usize,
}

impl KernelBlock {
    pub fn from_log_values(
        log_values: Array2<f64>,
        source_agent: usize,
        target_agent: usize,
    ) -> Result<Self> {
        if log_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel block".into()));
        }
        Ok(Self {
            log_values,
            source_agent,
            target_agent,
        })
    }

    /// Builds a block from plain kernel values, which must be strictly positive.
    pub fn from_values(
        values: Array2<f64>,
        source_agent: usize,
        target_agent: usize,
    ) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("kernel values must be finite and positive"));
        }
        Self::from_log_values(values.mapv(f64::ln), source_agent, target_agent)
    }

    pub fn log_values(&self) -> ArrayView2<'_, f64> {
        self.log_values.view()
    }

    pub fn values(&self) -> Array2<f64> {
        self.log_values.mapv(f64::exp)
    }

    pub fn value(&self, n: usize, m: usize) -> f64 {
        self.log_values[[n, m]].exp()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.log_values.dim()
    }

    pub fn transpose(&self) -> Self {
        Self {
            log_values: self.log_values.t().to_owned(),
            source_agent: self.target_agent,
            target_agent: self.source_agent,
        }
    }
}

/// Exact Gibbs kernel block between two measures.
pub fn kernel_block(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    spec: &CostSpec,
) -> Result<KernelBlock> {
    kernel_block_for_agents(src.samples(), tgt.samples(), spec, 0, 0)
}

pub(crate) fn kernel_block_for_agents(
    src: &SampleSet,
    tgt: &SampleSet,
    spec: &CostSpec,
    source_agent: usize,
    target_agent: usize,
) -> Result<KernelBlock> {
    let c = cost_matrix(src, tgt, spec.kind)?;
    KernelBlock::from_log_values(c.mapv(|v| -v / spec.epsilon), source_agent, target_agent)
}
