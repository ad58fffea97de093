use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Linear projection onto the top principal directions of a sample.
#[derive(Clone, Debug)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, rows orthonormal.
    pub basis: DMatrix<f64>,
    /// Variance along each retained direction, descending.
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: f.len(),
            });
        }
        Ok((0..self.k())
            .map(|r| {
                self.basis
                    .row(r)
                    .iter()
                    .zip(f.iter().zip(&self.mean))
                    .map(|(b, (x, m))| b * (x - m))
                    .sum()
            })
            .collect())
    }

    /// Maps PCA coefficients back to the input space.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (r, c) in coeffs.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis.row(r).iter()) {
                *o += c * b;
            }
        }
        out
    }
}

pub fn fit_pca(features: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = features.len();
    let d = features.first().map_or(0, |f| f.len());
    if k == 0 || k > d.min(n) {
        return Err(Error::InvalidParameter(format!(
            "retained dimension {k} must be in 1..={}",
            d.min(n)
        )));
    }
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let denom = if n > 1 { n as f64 - 1.0 } else { 1.0 };
    let cov = centered.tr_mul(&centered) / denom;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let basis = DMatrix::from_fn(k, d, |r, c| eig.eigenvectors[(c, order[r])]);
    let variances = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    Ok(PcaModel { mean, basis, variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated data: random mixing of independent sources
        let mix: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..d).map(|i| rng.random_range(-1.0..1.0) * (i + 1) as f64).collect();
                (0..d)
                    .map(|r| mix[r].iter().zip(&s).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_data_reconstructs_exactly() {
        let dir = [1.0, -2.0, 0.5];
        let data: Vec<Vec<f64>> = (0..10)
            .map(|i| dir.iter().map(|d| d * (i as f64 - 3.0) + 1.0).collect())
            .collect();
        let m = fit_pca(&data, 1).unwrap();
        for f in &data {
            let r = m.reconstruct(&m.apply(f).unwrap());
            assert!(dist(&r, f) < 1e-10);
        }
    }

    #[test]
    fn full_rank_preserves_distances() {
        let data = sample(1, 20, 5);
        let m = fit_pca(&data, 5).unwrap();
        let proj: Vec<Vec<f64>> = data.iter().map(|f| m.apply(f).unwrap()).collect();
        for i in 0..data.len() {
            for j in 0..data.len() {
                assert!((dist(&data[i], &data[j]) - dist(&proj[i], &proj[j])).abs() < 1e-8);
            }
        }
        for r in 0..5 {
            for s in 0..5 {
                let dot: f64 = m.basis.row(r).dot(&m.basis.row(s));
                assert!((dot - if r == s { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn explained_variance_matches_svd_oracle() {
        let data = sample(2, 40, 10);
        let m = fit_pca(&data, 3).unwrap();
        // explained variance from the projected sample itself
        let proj: Vec<Vec<f64>> = data.iter().map(|f| m.apply(f).unwrap()).collect();
        let explained: f64 = (0..3)
            .map(|c| proj.iter().map(|p| p[c] * p[c]).sum::<f64>() / (data.len() as f64 - 1.0))
            .sum();
        // oracle: singular values of the centered data matrix
        let n = data.len();
        let mean: Vec<f64> = (0..10)
            .map(|j| data.iter().map(|f| f[j]).sum::<f64>() / n as f64)
            .collect();
        let x = DMatrix::from_fn(n, 10, |i, j| data[i][j] - mean[j]);
        let mut sv: Vec<f64> = x.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let oracle: f64 = sv[..3].iter().map(|s| s * s / (n as f64 - 1.0)).sum();
        assert!((explained - oracle).abs() < 1e-8 * oracle.max(1.0));
        assert!((m.variances.iter().sum::<f64>() - oracle).abs() < 1e-8 * oracle.max(1.0));
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_k() {
        let data = sample(3, 25, 6);
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let m = fit_pca(&data, k).unwrap();
            let err: f64 = data
                .iter()
                .map(|f| dist(&m.reconstruct(&m.apply(f).unwrap()), f).powi(2))
                .sum();
            assert!(err <= prev + 1e-9);
            prev = err;
        }
    }

    #[test]
    fn k_too_large_is_rejected() {
        let data = sample(4, 3, 5);
        assert!(fit_pca(&data, 4).is_err());
        assert!(fit_pca(&data, 0).is_err());
    }
}
