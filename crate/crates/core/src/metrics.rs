//! Toy-scale Inception Score, Fréchet distance and embedding-cluster
//! diagnostics.
//!
//! Scores here are computed over the frozen toy classifier, not a network
//! pretrained on natural images. Their absolute values mean nothing on
//! their own; only differences between runs sharing seeds and data are
//! informative.

use thiserror::Error;

use crate::data::LabelSet;
use crate::tensor::Matrix;

pub const IS_SPLITS: usize = 10;
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
/// Eigenvalues in `[-EIGEN_CLAMP, 0)` are treated as zero; anything lower
/// is an error.
pub const EIGEN_CLAMP: f64 = 1e-8;
pub const MAX_JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("row {row} is not a probability vector ({reason})")]
    NotSimplex { row: usize, reason: String },
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("eigenvalue {value} below the clamp threshold; covariance is not PSD")]
    NegativeEigenvalue { value: f64 },
    #[error("Jacobi eigensolver did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("Fréchet distance came out at {0}, below the round-off tolerance")]
    NegativeDistance(f64),
    #[error("between-class similarity needs at least two classes")]
    SingleClass,
    #[error("within-class similarity needs a class with two members")]
    NoWithinPairs,
    #[error("embedding row {row} has zero norm")]
    ZeroVector { row: usize },
    #[error("{embeddings} embeddings but {labels} label sets")]
    LabelCount { embeddings: usize, labels: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Mean and spread of the per-split scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InceptionScore {
    pub mean: f64,
    pub std: f64,
}

fn check_simplex(p: &Matrix) -> Result<(), MetricsError> {
    for r in 0..p.rows() {
        let row = p.row(r);
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < -SIMPLEX_TOLERANCE) {
            return Err(MetricsError::NotSimplex {
                row: r,
                reason: format!("entry {v}"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(MetricsError::NotSimplex {
                row: r,
                reason: format!("sums to {s}"),
            });
        }
    }
    Ok(())
}

/// [`inception_score_splits`] with the standard ten splits.
pub fn inception_score(p: &Matrix) -> Result<InceptionScore, MetricsError> {
    inception_score_splits(p, IS_SPLITS)
}

/// Splits the rows into `splits` contiguous chunks; per chunk computes
/// `exp(mean_i KL(p_i ‖ p̂))` with `p̂` the chunk's mean row. Returns the
/// mean and population standard deviation over chunks.
pub fn inception_score_splits(p: &Matrix, splits: usize) -> Result<InceptionScore, MetricsError> {
    let m = p.rows();
    if splits == 0 || m < splits {
        return Err(MetricsError::TooFewRows {
            rows: m,
            needed: splits.max(1),
        });
    }
    check_simplex(p)?;
    let k = p.cols();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let (lo, hi) = (s * m / splits, (s + 1) * m / splits);
        let n = (hi - lo) as f64;
        let mut marginal = vec![0.0; k];
        for r in lo..hi {
            for (acc, v) in marginal.iter_mut().zip(p.row(r)) {
                *acc += v.max(0.0);
            }
        }
        marginal.iter_mut().for_each(|v| *v /= n);
        let mut kl = 0.0;
        for r in lo..hi {
            for (&pv, &q) in p.row(r).iter().zip(&marginal) {
                if pv > 0.0 {
                    kl += pv * (pv.ln() - q.ln());
                }
            }
        }
        scores.push((kl / n).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok(InceptionScore { mean, std: var.sqrt() })
}

/// First two moments of a feature population.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn gaussian_stats(features: &Matrix) -> Result<GaussianStats, MetricsError> {
    let (m, d) = features.shape();
    if m < 2 {
        return Err(MetricsError::TooFewRows { rows: m, needed: 2 });
    }
    if !features.is_finite() {
        return Err(MetricsError::NonFinite("features"));
    }
    let mut mu = vec![0.0; d];
    for r in 0..m {
        for (acc, v) in mu.iter_mut().zip(features.row(r)) {
            *acc += v;
        }
    }
    mu.iter_mut().for_each(|v| *v /= m as f64);
    let centered = Matrix::from_fn(m, d, |r, c| features.get(r, c) - mu[c]);
    let cov = centered.t_matmul(&centered).expect("shapes agree").scale(1.0 / (m - 1) as f64);
    let sigma = symmetrize(&cov);
    Ok(GaussianStats { mu, sigma, n: m })
}

fn symmetrize(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| 0.5 * (a.get(i, j) + a.get(j, i)))
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// `Q diag(f(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let q = &self.vectors;
        let scaled = Matrix::from_fn(n, n, |i, k| q.get(i, k) * f(self.values[k]));
        scaled.matmul_t(q).expect("square")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|v| v)
    }
}

/// Cyclic Jacobi eigendecomposition. Only the symmetric part of `a` is
/// used.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen, MetricsError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(MetricsError::NotSquare { rows: n, cols: a.cols() });
    }
    if !a.is_finite() {
        return Err(MetricsError::NonFinite("eigen input"));
    }
    let mut m = symmetrize(a);
    let mut q = Matrix::identity(n);
    let total = m.frobenius_norm();
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j).powi(2);
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > 1e-15 * total.max(f64::MIN_POSITIVE) {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(MetricsError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apr = m.get(p, r);
                if apr == 0.0 {
                    continue;
                }
                let theta = (m.get(r, r) - m.get(p, p)) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkr) = (m.get(k, p), m.get(k, r));
                    m.set(k, p, c * mkp - s * mkr);
                    m.set(k, r, s * mkp + c * mkr);
                }
                for k in 0..n {
                    let (mpk, mrk) = (m.get(p, k), m.get(r, k));
                    m.set(p, k, c * mpk - s * mrk);
                    m.set(r, k, s * mpk + c * mrk);
                }
                for k in 0..n {
                    let (qkp, qkr) = (q.get(k, p), q.get(k, r));
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    Ok(SymmetricEigen {
        values: (0..n).map(|i| m.get(i, i)).collect(),
        vectors: q,
    })
}

fn clamped_sqrt(v: f64) -> Result<f64, MetricsError> {
    if v < -EIGEN_CLAMP {
        Err(MetricsError::NegativeEigenvalue { value: v })
    } else {
        Ok(v.max(0.0).sqrt())
    }
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the
/// square root taken as `Σ √λ` over the eigenvalues of the symmetric
/// `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let ea = symmetric_eigen(&a.sigma)?;
    for &v in &ea.values {
        clamped_sqrt(v)?;
    }
    let root_a = ea.reconstruct_with(|v| v.max(0.0).sqrt());
    let inner = root_a
        .matmul(&b.sigma)
        .and_then(|m| m.matmul(&root_a))
        .map_err(|_| MetricsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        })?;
    let ei = symmetric_eigen(&inner)?;
    let mut cross = 0.0;
    for &v in &ei.values {
        cross += clamped_sqrt(v)?;
    }
    let trace = |m: &Matrix| (0..m.rows()).map(|i| m.get(i, i)).sum::<f64>();
    let d = mean_term + trace(&a.sigma) + trace(&b.sigma) - 2.0 * cross;
    if !d.is_finite() {
        return Err(MetricsError::NonFinite("Fréchet distance"));
    }
    if d < -1e-6 {
        return Err(MetricsError::NegativeDistance(d));
    }
    Ok(d.max(0.0))
}

/// Mean cosine similarity over same-class pairs and over different-class
/// pairs. Two examples share a class when their label sets are equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSimilarity {
    pub within: f64,
    pub between: f64,
}

impl ClusterSimilarity {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

pub fn same_label_similarity(embeddings: &Matrix, labels: &[LabelSet]) -> Result<ClusterSimilarity, MetricsError> {
    if embeddings.rows() != labels.len() {
        return Err(MetricsError::LabelCount {
            embeddings: embeddings.rows(),
            labels: labels.len(),
        });
    }
    let norms = embeddings.row_norms();
    if let Some(row) = norms.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(MetricsError::ZeroVector { row });
    }
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let cos = crate::tensor::dot(embeddings.row(i), embeddings.row(j)) / (norms[i] * norms[j]);
            if labels[i] == labels[j] {
                within += cos;
                nw += 1;
            } else {
                between += cos;
                nb += 1;
            }
        }
    }
    if nb == 0 {
        return Err(MetricsError::SingleClass);
    }
    if nw == 0 {
        return Err(MetricsError::NoWithinPairs);
    }
    Ok(ClusterSimilarity {
        within: within / nw as f64,
        between: between / nb as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mu: vec![mu],
            sigma: Matrix::from_rows(&[[var]]),
            n: 2,
        }
    }

    #[test]
    fn uniform_and_one_hot_scores() {
        let uniform = Matrix::filled(100, 4, 0.25);
        let s = inception_score(&uniform).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12 && s.std < 1e-12);
        let one_hot = Matrix::from_fn(200, 4, |r, c| if r % 4 == c { 1.0 } else { 0.0 });
        let s = inception_score(&one_hot).unwrap();
        assert!((s.mean - 4.0).abs() < 1e-12);
    }

    #[test]
    fn off_simplex_rejected() {
        let mut p = Matrix::filled(20, 2, 0.5);
        p.set(3, 0, 0.7);
        assert!(matches!(inception_score(&p), Err(MetricsError::NotSimplex { row: 3, .. })));
        assert!(matches!(
            inception_score(&Matrix::filled(5, 2, 0.5)),
            Err(MetricsError::TooFewRows { .. })
        ));
    }

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]])).unwrap();
        assert_eq!(s.mu, vec![1.0, 0.0]);
        assert_eq!(s.sigma, Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]));
        let same = gaussian_stats(&Matrix::filled(5, 3, 0.7)).unwrap();
        assert!(same.sigma.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(gaussian_stats(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats_1d(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let b = stats_1d(1.0, 4.0);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        let c = GaussianStats {
            mu: vec![0.0, 0.0],
            sigma: Matrix::identity(2),
            n: 2,
        };
        assert!(matches!(
            frechet_distance(&a, &c),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eigen_reconstructs() {
        let a = Matrix::from_rows(&[[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]]);
        let e = symmetric_eigen(&a).unwrap();
        assert!(e.reconstruct().max_abs_diff(&a) < 1e-12);
        let qtq = e.vectors.t_matmul(&e.vectors).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn strongly_negative_eigenvalue_is_an_error() {
        let bad = GaussianStats {
            mu: vec![0.0],
            sigma: Matrix::from_rows(&[[-1.0]]),
            n: 2,
        };
        assert!(matches!(
            frechet_distance(&bad, &stats_1d(0.0, 1.0)),
            Err(MetricsError::NegativeEigenvalue { .. })
        ));
        let tiny = GaussianStats {
            sigma: Matrix::from_rows(&[[-1e-10]]),
            ..bad
        };
        assert!(frechet_distance(&tiny, &tiny).is_ok());
    }

    #[test]
    fn similarity_limits() {
        let labels: Vec<_> = [0, 0, 1, 1].iter().map(|&l| LabelSet::single(l)).collect();
        let e = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]);
        let s = same_label_similarity(&e, &labels).unwrap();
        assert_eq!((s.within, s.between), (1.0, 0.0));
        let flat = Matrix::filled(4, 2, 1.0);
        let s = same_label_similarity(&flat, &labels).unwrap();
        assert!((s.within - 1.0).abs() < 1e-15 && (s.between - 1.0).abs() < 1e-15);
        let one = vec![LabelSet::single(0); 3];
        assert_eq!(
            same_label_similarity(&Matrix::filled(3, 2, 1.0), &one).unwrap_err(),
            MetricsError::SingleClass
        );
    }
}
