//! Discrete measures, cost matrices, divergences and seeded categorical sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a measure.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A non-empty list of points sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoints {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl SupportPoints {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptySupport)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("points must have dimension >= 1".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "point {i} has dimension {} but point 0 has {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("point {i} is not finite")));
            }
        }
        Ok(Self { points, dim })
    }

    /// The integer grid `0, 1, ..., n-1` embedded in one dimension.
    pub fn grid_1d(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| vec![i as f64]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            points: keep.iter().map(|&i| self.points[i].clone()).collect(),
            dim: self.dim,
        }
    }
}

/// Inverse-CDF sampler over a finite set of nonnegative weights.
///
/// Zero weights are skipped; a draw returns the original position of the atom.
/// Draws use a strict upper-bound search: the first prefix sum strictly greater
/// than the scaled uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    cumulative: Vec<f64>,
    positions: Vec<usize>,
}

impl Categorical {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut positions = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for (index, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight { index, value: w });
            }
            if w > 0.0 {
                acc += w;
                cumulative.push(acc);
                positions.push(index);
            }
        }
        if positions.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(Self { cumulative, positions })
    }

    /// Draws one index. A single-atom distribution consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.positions.len() == 1 {
            return self.positions[0];
        }
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.positions[k.min(self.positions.len() - 1)]
    }
}

/// A finitely supported probability measure. Weights are strictly positive unless
/// built with [`DiscreteMeasure::on_support`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    support: SupportPoints,
    sampler: Categorical,
}

impl DiscreteMeasure {
    /// Validates and normalizes raw weights, dropping zero-weight atoms together
    /// with their support points. Ordering of the surviving atoms is preserved.
    pub fn new(raw_weights: Vec<f64>, support: SupportPoints) -> Result<Self> {
        if raw_weights.len() != support.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                found: raw_weights.len(),
            });
        }
        for (index, &w) in raw_weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight { index, value: w });
            }
        }
        let keep: Vec<usize> = (0..raw_weights.len()).filter(|&i| raw_weights[i] > 0.0).collect();
        if keep.is_empty() {
            return Err(Error::EmptySupport);
        }
        let support = if keep.len() == support.len() { support } else { support.select(&keep) };
        let kept: Vec<f64> = keep.iter().map(|&i| raw_weights[i]).collect();
        let total: f64 = kept.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            log::debug!("renormalizing measure with total mass {total}");
        }
        let weights: Vec<f64> = kept.iter().map(|w| w / total).collect();
        Self::assemble(weights, support)
    }

    /// Like [`DiscreteMeasure::new`] but keeps zero-weight atoms, so the result stays
    /// aligned with `support`. Meant for reporting results such as projections.
    pub fn on_support(raw_weights: Vec<f64>, support: SupportPoints) -> Result<Self> {
        if raw_weights.len() != support.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                found: raw_weights.len(),
            });
        }
        let sampler = Categorical::new(&raw_weights)?;
        let total: f64 = raw_weights.iter().sum();
        let weights = raw_weights.iter().map(|w| w / total).collect();
        Ok(Self { weights, support, sampler })
    }

    pub fn uniform(support: SupportPoints) -> Result<Self> {
        let n = support.len();
        Self::new(vec![1.0; n], support)
    }

    /// Builds a measure from weights that are already a probability vector up to
    /// rounding, such as a softmax output. Entries that underflowed to zero are
    /// floored at the smallest positive normal so the support stays aligned.
    pub(crate) fn from_probabilities(mut weights: Vec<f64>, support: SupportPoints) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                found: weights.len(),
            });
        }
        for w in weights.iter_mut() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidParameter(format!("probability {w} is not valid")));
            }
            *w = w.max(f64::MIN_POSITIVE);
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Self::assemble(weights, support)
    }

    fn assemble(weights: Vec<f64>, support: SupportPoints) -> Result<Self> {
        let sampler = Categorical::new(&weights)?;
        Ok(Self { weights, support, sampler })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &SupportPoints {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Draws an atom index with probability equal to its weight.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Same atoms, new weights (validated like [`DiscreteMeasure::new`]).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(weights, self.support.clone())
    }

    pub fn to_file(&self) -> MeasureFile {
        MeasureFile {
            points: self.support.points().to_vec(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_measure()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("measure serializes")
    }
}

/// Alias kept for callers that prefer the operation name.
pub fn validate_measure(raw_weights: Vec<f64>, support: SupportPoints) -> Result<DiscreteMeasure> {
    DiscreteMeasure::new(raw_weights, support)
}

/// On-disk measure: `{"points": [[f64, ...], ...], "weights": [f64, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureFile {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl MeasureFile {
    pub fn into_measure(self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.weights, SupportPoints::new(self.points)?)
    }

    /// Keeps zero-weight atoms so the measure stays aligned with its point list.
    pub fn into_aligned_measure(self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::on_support(self.weights, SupportPoints::new(self.points)?)
    }
}

/// On-disk list of mixture components: `{"components": [measure, ...]}`.
/// Components keep their zero-weight atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentsFile {
    pub components: Vec<MeasureFile>,
}

impl ComponentsFile {
    pub fn from_json_str(s: &str) -> Result<Vec<DiscreteMeasure>> {
        let file: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        file.components.into_iter().map(MeasureFile::into_aligned_measure).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostFunction {
    SquaredEuclidean,
    Euclidean,
    /// `|i - j|` on atom indices; coordinates are ignored.
    AbsoluteIndex,
}

impl CostFunction {
    fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            CostFunction::SquaredEuclidean => sq,
            CostFunction::Euclidean => sq.sqrt(),
            CostFunction::AbsoluteIndex => unreachable!("index cost has no coordinates"),
        }
    }
}

impl FromStr for CostFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqeuclidean" => Ok(Self::SquaredEuclidean),
            "euclidean" => Ok(Self::Euclidean),
            "absindex" => Ok(Self::AbsoluteIndex),
            other => Err(Error::Parse(format!("unknown cost `{other}`"))),
        }
    }
}

impl fmt::Display for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SquaredEuclidean => "sqeuclidean",
            Self::Euclidean => "euclidean",
            Self::AbsoluteIndex => "absindex",
        })
    }
}

/// Dense row-major `I x J` cost matrix with cached extrema.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    min: f64,
    max: f64,
}

impl CostMatrix {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptySupport);
        }
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("cost entries must be finite".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { values, rows, cols, min, max })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged cost rows".into()));
        }
        Self::new(rows.concat(), rows.len(), cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// `R_C = max C - min C`.
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Evaluates `C[i][j] = c(x_i, y_j)`.
pub fn build_cost_matrix(x: &SupportPoints, y: &SupportPoints, cost: CostFunction) -> Result<CostMatrix> {
    let (rows, cols) = (x.len(), y.len());
    let values = match cost {
        CostFunction::AbsoluteIndex => {
            if rows != cols {
                return Err(Error::DimensionMismatch(format!(
                    "index cost needs matching index ranges, got {rows} and {cols}"
                )));
            }
            (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i as f64 - j as f64).abs()))
                .collect()
        }
        metric => {
            if x.dim() != y.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "supports live in dimensions {} and {}",
                    x.dim(),
                    y.dim()
                )));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for xi in x.points() {
                for yj in y.points() {
                    values.push(metric.eval(xi, yj));
                }
            }
            values
        }
    };
    CostMatrix::new(values, rows, cols)
}

/// Entropic parameters: `epsilon` on the transport plan and `eta` on the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegParams {
    epsilon: f64,
    eta: f64,
}

impl RegParams {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(eta > epsilon) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "eta must exceed epsilon ({epsilon}), got {eta}"
            )));
        }
        Ok(Self { epsilon, eta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `eta - epsilon`, the temperature of the estimate's softmax.
    pub fn gap(&self) -> f64 {
        self.eta - self.epsilon
    }
}

/// `KL(p, q) = sum_j p_j log(p_j / q_j)` for measures on a shared support.
pub fn kl_divergence(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    kl_weights(p.weights(), q.weights())
}

/// [`kl_divergence`] on raw probability vectors. Zero entries of `p` contribute nothing.
pub fn kl_weights(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut acc = 0.0;
    for (index, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj <= 0.0 {
            continue;
        }
        if qj <= 0.0 {
            return Err(Error::AbsoluteContinuityViolation { index });
        }
        acc += pj * (pj / qj).ln();
    }
    Ok(acc.max(0.0))
}
