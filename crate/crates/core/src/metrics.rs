//! Covariance metrics estimated in pairwise-difference space.
//!
//! A pair of feature maps `(a, b)` of shape `H×W×D` yields `H·W` difference
//! vectors `r = a[h,w] − b[h,w] ∈ R^D`. Pooling those vectors over a batch of
//! positive (same identity) or negative (different identity) pairs gives the
//! covariance `Σ⁺` or `Σ⁻` that the cross-domain triplet loss uses as a
//! Mahalanobis metric for another domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sym_eig, Graph, Matrix, Tensor};

/// Relative strength of the ridge added to every estimated covariance.
pub const RIDGE_SCALE: f64 = 1e-4;
/// Smallest ridge ever added.
pub const RIDGE_FLOOR: f64 = 1e-6;

/// Spatial layout of a feature map: `h·w` positions, each a `d`-vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl MapShape {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        if h * w * d == 0 {
            return Err(Error::Dimension(format!("empty feature map {h}x{w}x{d}")));
        }
        Ok(MapShape { h, w, d })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.h * self.w * self.d
    }
}

/// One image's `H×W×D` feature tensor, stored row-major so that position
/// `(h, w)` owns the contiguous slice `[(h·W + w)·D, (h·W + w + 1)·D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: MapShape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: MapShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "{}x{}x{} map needs {} values, got {}",
                shape.h,
                shape.w,
                shape.d,
                shape.numel(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    /// Rebuilds a map from its `H·W` position vectors (inverse of [`FeatureMap::flatten`]).
    pub fn unflatten(shape: MapShape, vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.len() != shape.positions() || vectors.iter().any(|v| v.len() != shape.d) {
            return Err(Error::Dimension("position vectors do not match the map shape".into()));
        }
        Self::new(shape, vectors.concat())
    }

    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The `H·W` position vectors, each in `R^D`.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.shape.d).map(<[f64]>::to_vec).collect()
    }
}

/// `a − b` position-wise.
pub fn difference_tensor(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "difference of maps {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    FeatureMap::new(a.shape, data)
}

/// Batched, differentiable form of [`difference_tensor`]: `a` and `b` are
/// `[B, H·W·D]` stacks of flattened maps and the result is the `[B·H·W, D]`
/// matrix of difference vectors, rows in `(b, h, w)` order.
pub fn difference_rows(a: &Tensor, b: &Tensor, shape: MapShape) -> Result<Tensor> {
    let sa = a.shape();
    if sa.len() != 2 || sa[1] != shape.numel() {
        return Err(Error::Dimension(format!(
            "expected [B, {}] feature maps, got {sa:?}",
            shape.numel()
        )));
    }
    a.sub(b)?.reshape(&[sa[0] * shape.positions(), shape.d])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Regularized covariance of difference vectors from positive or negative pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceRecord", into = "CovarianceRecord")]
pub struct PairCovariance {
    pub polarity: Polarity,
    pub sigma: Matrix,
    pub mean: Vec<f64>,
    pub sample_count: usize,
}

#[derive(Serialize, Deserialize)]
struct CovarianceRecord {
    polarity: Polarity,
    d: usize,
    sigma: Vec<f64>,
    mean: Vec<f64>,
    sample_count: usize,
}

impl From<PairCovariance> for CovarianceRecord {
    fn from(c: PairCovariance) -> Self {
        CovarianceRecord {
            polarity: c.polarity,
            d: c.sigma.rows(),
            sigma: c.sigma.into_vec(),
            mean: c.mean,
            sample_count: c.sample_count,
        }
    }
}

impl TryFrom<CovarianceRecord> for PairCovariance {
    type Error = Error;
    fn try_from(r: CovarianceRecord) -> Result<Self> {
        if r.mean.len() != r.d {
            return Err(Error::Dimension(format!("mean has {} entries for d = {}", r.mean.len(), r.d)));
        }
        Ok(PairCovariance {
            polarity: r.polarity,
            sigma: Matrix::from_vec(r.d, r.d, r.sigma)?,
            mean: r.mean,
            sample_count: r.sample_count,
        })
    }
}

impl PairCovariance {
    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    /// Wraps an externally supplied metric (e.g. the identity) so it can stand
    /// in for an estimated one.
    pub fn from_matrix(polarity: Polarity, sigma: Matrix) -> Result<Self> {
        if sigma.rows() != sigma.cols() {
            return Err(Error::Dimension("metric matrix must be square".into()));
        }
        let d = sigma.rows();
        Ok(PairCovariance {
            polarity,
            sigma,
            mean: vec![0.0; d],
            sample_count: 0,
        })
    }

    /// `Σ` as a constant `[D, D]` tensor on `graph`.
    pub fn to_tensor(&self, graph: &Graph) -> Tensor {
        let d = self.dim();
        graph
            .constant(self.sigma.as_slice().to_vec(), &[d, d])
            .expect("square matrix")
    }
}

/// `ε = max(1e-4 · trace(Σ)/d, 1e-6)`.
pub fn ridge(empirical: &Matrix) -> f64 {
    let d = empirical.rows().max(1) as f64;
    (RIDGE_SCALE * empirical.trace() / d).max(RIDGE_FLOOR)
}

/// Unbiased covariance of the rows of `diffs` plus the ridge `εI`.
pub fn covariance_of_differences(diffs: &[Vec<f64>], polarity: Polarity) -> Result<PairCovariance> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = diffs[0].len();
    if d == 0 || diffs.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("difference vectors of unequal length".into()));
    }
    let mut mean = vec![0.0; d];
    for r in diffs {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut sigma = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in diffs {
        for ((c, x), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            for j in i..d {
                sigma[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma[(i, j)] / denom;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let eps = ridge(&sigma);
    for i in 0..d {
        sigma[(i, i)] += eps;
    }
    Ok(PairCovariance {
        polarity,
        sigma,
        mean,
        sample_count: n,
    })
}

/// Covariance over all `B·H·W` difference vectors of the given pairs.
pub fn estimate_covariance(pairs: &[(FeatureMap, FeatureMap)], polarity: Polarity) -> Result<PairCovariance> {
    let mut diffs = Vec::new();
    for (a, b) in pairs {
        diffs.extend(difference_tensor(a, b)?.flatten());
    }
    covariance_of_differences(&diffs, polarity)
}

/// Differentiable covariance of the rows of a `[N, D]` tensor, plus `εI` with
/// `ε` taken from the current values (the ridge itself is a constant).
pub fn covariance_tensor(diffs: &Tensor) -> Result<Tensor> {
    let s = diffs.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("expected [N, D] differences, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = diffs.mean(&[0])?.repeat_rows(n)?;
    let centered = diffs.sub(&mean)?;
    let cov = centered.t()?.matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eps = ridge(&Matrix::from_vec(d, d, cov.to_vec())?);
    let ridge_matrix = diffs
        .graph()
        .constant(Matrix::identity(d).scale(eps).into_vec(), &[d, d])?;
    cov.add(&ridge_matrix)
}

/// `(x − y)ᵀ Σ (x − y)` on plain vectors.
pub fn mahalanobis_sq(x: &[f64], y: &[f64], metric: &PairCovariance) -> Result<f64> {
    if x.len() != metric.dim() || y.len() != metric.dim() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {} against a {}-dimensional metric",
            x.len(),
            y.len(),
            metric.dim()
        )));
    }
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    metric.sigma.quad_form(&diff)
}

/// Differentiable `(x − y)ᵀ Σ (x − y)` for `[D]` vectors; `sigma` is `[D, D]`.
pub fn mahalanobis_sq_tensor(x: &Tensor, y: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let d = x.numel();
    if sigma.shape() != [d, d] {
        return Err(Error::Dimension(format!(
            "length-{d} vectors against metric {:?}",
            sigma.shape()
        )));
    }
    let diff = x.sub(y)?.reshape(&[1, d])?;
    Ok(quadratic_rows(&diff, sigma)?.sum_all())
}

/// Row-wise quadratic forms: `q[n] = r_nᵀ Σ r_n` for `rows: [N, D]`.
pub fn quadratic_rows(rows: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    rows.matmul(sigma)?.mul(rows)?.sum(&[1])
}

/// Mean of `rᵀ Σ r` over `diffs`. Large where the differences follow the
/// leading eigenvectors of `Σ`, small where they fall in its trailing directions.
pub fn alignment_energy(diffs: &[Vec<f64>], metric: &PairCovariance) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::Contract("alignment energy of an empty set".into()));
    }
    let mut acc = 0.0;
    for r in diffs {
        acc += metric.sigma.quad_form(r)?;
    }
    Ok(acc / diffs.len() as f64)
}

/// Smallest eigenvalue, for PSD diagnostics.
pub fn min_eigenvalue(metric: &PairCovariance) -> Result<f64> {
    Ok(sym_eig(&metric.sigma)?
        .values
        .last()
        .copied()
        .unwrap_or(f64::INFINITY))
}
