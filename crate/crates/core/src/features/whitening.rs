use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use sha2::{Digest, Sha256};

use super::{extract_patch_feature_into, FeaturePyramid, LatentLocation, Window};
use crate::error::{Error, Result};

/// Background patch statistics (μ, Σ) with Σ regularized to be positive
/// definite. Immutable after fitting.
#[derive(Clone, Debug)]
pub struct WhiteningModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    shrinkage: f64,
    floor: f64,
    factor: Cholesky<f64, Dyn>,
}

impl WhiteningModel {
    /// Builds a model from an explicit mean and an SPD covariance.
    pub fn from_parts(mean: Vec<f64>, covariance: DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: covariance.nrows(),
            });
        }
        let factor = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            shrinkage,
            floor: 0.0,
            factor,
        })
    }

    /// Σ = I, μ = 0.
    pub fn identity(d: usize) -> Self {
        Self::from_parts(vec![0.0; d], DMatrix::identity(d, d), 0.0).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// The multiple of the identity added to the sample covariance.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Σ⁻¹(f − μ), by triangular solves against the cached factor.
    pub fn whiten(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: f.len(),
            });
        }
        let centered = DVector::from_iterator(f.len(), f.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        Ok(self.factor.solve(&centered).data.into())
    }

    /// Stable digest of (μ, Σ) used to stamp model files.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.mean.iter().chain(self.covariance.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Fits (μ, Σ) to `patches`. The sample covariance is regularized by adding
/// `shrinkage · tr(Σ)/d · I` (or `shrinkage · I` when the sample has no
/// variance at all).
pub fn fit_whitening(patches: &[Vec<f64>], shrinkage: f64) -> Result<WhiteningModel> {
    if patches.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "whitening needs at least 2 patches, got {}",
            patches.len()
        )));
    }
    if !(shrinkage > 0.0) {
        return Err(Error::InvalidParameter("shrinkage must be positive".into()));
    }
    let d = patches[0].len();
    if let Some(bad) = patches.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let n = patches.len();
    let mut mean = vec![0.0; d];
    for p in patches {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| patches[i][j] - mean[j]);
    let mut cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let trace = cov.trace();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    let floor = shrinkage * scale;
    for i in 0..d {
        cov[(i, i)] += floor;
    }
    let mut model = WhiteningModel::from_parts(mean, cov, shrinkage)?;
    model.floor = floor;
    Ok(model)
}

/// Whitened-feature norm of every anchor of `window`, in lexicographic
/// location order.
pub(crate) fn whitened_norms(
    pyramid: &FeaturePyramid,
    model: &WhiteningModel,
    window: Window,
) -> Result<Vec<(LatentLocation, f64)>> {
    let locs = pyramid.locations(window);
    let mut buf = vec![0.0; window.cells() * pyramid.dim()];
    locs.into_iter()
        .map(|z| {
            extract_patch_feature_into(pyramid, z, window, &mut buf)?;
            let w = model.whiten(&buf)?;
            Ok((z, w.iter().map(|v| v * v).sum::<f64>().sqrt()))
        })
        .collect()
}

/// Keeps the `ceil(keep_fraction · |H(x)|)` locations whose whitened features
/// have the largest norm. The result is returned in lexicographic order.
pub fn discriminability_filter(
    pyramid: &FeaturePyramid,
    model: &WhiteningModel,
    window: Window,
    keep_fraction: f64,
) -> Result<Vec<LatentLocation>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut scored = whitened_norms(pyramid, model, window)?;
    if scored.is_empty() {
        return Err(Error::EmptyPyramid);
    }
    let keep = ((keep_fraction * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<LatentLocation> = scored[..keep].iter().map(|s| s.0).collect();
    kept.sort();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::test_util::random_pyramid;
    use crate::features::Level;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn identical_patches_give_pure_floor() {
        let p = vec![1.0, -2.0, 0.5];
        let m = fit_whitening(&[p.clone(), p.clone()], 0.1).unwrap();
        assert_eq!(m.mean(), &p[..]);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.1 } else { 0.0 };
                assert_eq!(m.covariance()[(i, j)], expected);
            }
        }
    }

    #[test]
    fn basis_vectors_approach_analytic_covariance() {
        let d = 4;
        let patches: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = fit_whitening(&patches, 1e-9).unwrap();
        // direct formula: (δ_ij − 1/d) / (d − 1)
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                let oracle = (delta - 1.0 / d as f64) / (d as f64 - 1.0);
                assert!((m.covariance()[(i, j)] - oracle).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fewer_than_two_patches_is_an_error() {
        assert!(matches!(
            fit_whitening(&[vec![1.0]], 0.1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn covariance_is_symmetric_and_floored() {
        let m = fit_whitening(&random_vectors(7, 30, 6), 0.05).unwrap();
        let c = m.covariance();
        for i in 0..6 {
            for j in 0..6 {
                assert!((c[(i, j)] - c[(j, i)]).abs() <= 1e-12);
            }
        }
        let eig = c.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= m.floor() - 1e-12);
    }

    #[test]
    fn whiten_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
        let mu: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = WhiteningModel::from_parts(mu.clone(), sigma.clone(), 0.0).unwrap();
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let inv = sigma.try_inverse().unwrap();
        let oracle = inv * DVector::from_iterator(5, f.iter().zip(&mu).map(|(a, b)| a - b));
        let got = m.whiten(&f).unwrap();
        for (g, o) in got.iter().zip(oracle.iter()) {
            assert!((g - o).abs() < 1e-8);
        }
    }

    #[test]
    fn whiten_centering_and_identity() {
        let m = fit_whitening(&random_vectors(3, 20, 4), 0.1).unwrap();
        let centered = m.whiten(&m.mean().to_vec()).unwrap();
        assert!(centered.iter().all(|v| *v == 0.0));

        let id = WhiteningModel::identity(4);
        for f in random_vectors(5, 100, 4) {
            assert_eq!(id.whiten(&f).unwrap(), f);
        }
        assert!(matches!(id.whiten(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn whitened_sample_has_zero_mean() {
        let data = random_vectors(9, 50, 5);
        let m = fit_whitening(&data, 0.01).unwrap();
        let mut acc = vec![0.0; 5];
        for f in &data {
            for (a, v) in acc.iter_mut().zip(m.whiten(f).unwrap()) {
                *a += v / data.len() as f64;
            }
        }
        assert!(acc.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn filter_keeps_largest_norm() {
        let level = Level::new(1, 2, 1, 1.0, vec![3.0, 1.0]).unwrap();
        let p = FeaturePyramid::new(vec![level], 1, "two").unwrap();
        let id = WhiteningModel::identity(1);
        let kept = discriminability_filter(&p, &id, Window::new(1, 1), 0.5).unwrap();
        assert_eq!(kept, vec![LatentLocation::new(0, 0, 0)]);
        let all = discriminability_filter(&p, &id, Window::new(1, 1), 1.0).unwrap();
        assert_eq!(all, p.locations(Window::new(1, 1)));
    }

    #[test]
    fn filter_keeps_half() {
        let p = random_pyramid(4, &[(6, 6), (4, 4)], 3);
        let w = Window::new(2, 2);
        let m = fit_whitening(&random_vectors(1, 40, 12), 0.1).unwrap();
        let kept = discriminability_filter(&p, &m, w, 0.5).unwrap();
        assert_eq!(kept.len(), (p.locations(w).len() + 1) / 2);
    }

    #[test]
    fn filter_rejects_bad_fraction_and_empty() {
        let p = random_pyramid(4, &[(2, 2)], 1);
        let m = WhiteningModel::identity(1);
        assert!(discriminability_filter(&p, &m, Window::new(1, 1), 0.0).is_err());
        let empty = FeaturePyramid::new(vec![], 1, "e").unwrap();
        assert!(matches!(
            discriminability_filter(&empty, &m, Window::new(1, 1), 0.5),
            Err(Error::EmptyPyramid)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn filter_is_monotone_subset(seed in 0u64..1000, a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = random_pyramid(seed, &[(4, 5), (3, 3)], 2);
            let w = Window::new(1, 2);
            let m = WhiteningModel::identity(4);
            let small = discriminability_filter(&p, &m, w, lo).unwrap();
            let large = discriminability_filter(&p, &m, w, hi).unwrap();
            let all = p.locations(w);
            prop_assert!(small.iter().all(|z| large.contains(z)));
            prop_assert!(large.iter().all(|z| all.contains(z)));
        }
    }
}
