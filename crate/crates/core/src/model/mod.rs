//! Part filters, part weights and the multi-class scoring rule.
//!
//! An image is represented by the `m·R` vector of maximal part responses, one
//! per (part, pooling region) slot, laid out part-major. Class `y` scores
//! `u_y · r`, and the predicted class is the argmax (lowest index on ties).
//! Class labels are 0-based throughout the crate.

mod io;
mod pooling;
mod table;

pub use io::{read_model, read_model_file, write_model, write_model_file, write_weights_csv, ModelFile, MODEL_MAGIC};
pub use pooling::{PoolingGrid, Region};
pub(crate) use table::combine_views;
pub use table::{ExampleTable, SlotResponses, TrainingSet, ViewTable};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_patch_feature_into, FeaturePyramid, LatentLocation, Window};

#[derive(Clone, Debug, PartialEq)]
pub struct PartFilter {
    pub weights: Vec<f64>,
    pub window: Window,
    /// Channels per cell.
    pub dim: usize,
    pub part_id: usize,
}

impl PartFilter {
    pub fn new(weights: Vec<f64>, window: Window, dim: usize, part_id: usize) -> Result<Self> {
        if weights.len() != window.cells() * dim {
            return Err(Error::DimensionMismatch {
                expected: window.cells() * dim,
                actual: weights.len(),
            });
        }
        Ok(Self {
            weights,
            window,
            dim,
            part_id,
        })
    }

    pub fn zeros(window: Window, dim: usize, part_id: usize) -> Self {
        Self {
            weights: vec![0.0; window.cells() * dim],
            window,
            dim,
            part_id,
        }
    }
}

/// The shared part filters `w = (w_1, …, w_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartBank {
    pub parts: Vec<PartFilter>,
}

impl PartBank {
    pub fn new(parts: Vec<PartFilter>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidParameter("a part bank needs at least one part".into()))?;
        for p in &parts {
            if p.window != first.window || p.dim != first.dim {
                return Err(Error::InvalidParameter(
                    "parts must share window and channel dimension".into(),
                ));
            }
        }
        Ok(Self { parts })
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn window(&self) -> Window {
        self.parts[0].window
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim
    }

    /// Length of one filter, `window cells × channels`.
    pub fn part_len(&self) -> usize {
        self.window().cells() * self.dim()
    }

    /// All filters concatenated, part-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.weights.iter().copied()).collect()
    }

    /// Inverse of [`to_flat`](Self::to_flat); part ids are reassigned 0..m.
    pub fn from_flat(flat: &[f64], window: Window, dim: usize) -> Result<Self> {
        let len = window.cells() * dim;
        if len == 0 || flat.len() % len != 0 || flat.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: flat.len(),
            });
        }
        let parts = flat
            .chunks(len)
            .enumerate()
            .map(|(j, c)| PartFilter::new(c.to_vec(), window, dim, j))
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }

    pub fn norm_sq(&self) -> f64 {
        self.parts.iter().flat_map(|p| &p.weights).map(|v| v * v).sum()
    }

    /// Keeps the listed parts, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let parts = indices
            .iter()
            .map(|&j| {
                self.parts
                    .get(j)
                    .cloned()
                    .ok_or_else(|| Error::InvalidParameter(format!("part index {j} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }
}

/// The `n × mR` matrix `u` of per-class part weights. Column `j·R + ρ` holds
/// part `j` in pooling region `ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartWeights {
    pub n_classes: usize,
    pub n_parts: usize,
    pub n_regions: usize,
    /// Row-major `n_classes × (n_parts · n_regions)`.
    pub data: Vec<f64>,
}

impl PartWeights {
    pub fn zeros(n_classes: usize, n_parts: usize, n_regions: usize) -> Self {
        Self {
            n_classes,
            n_parts,
            n_regions,
            data: vec![0.0; n_classes * n_parts * n_regions],
        }
    }

    pub fn from_data(n_classes: usize, n_parts: usize, n_regions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_classes * n_parts * n_regions {
            return Err(Error::DimensionMismatch {
                expected: n_classes * n_parts * n_regions,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("part weights must be finite".into()));
        }
        Ok(Self {
            n_classes,
            n_parts,
            n_regions,
            data,
        })
    }

    pub fn cols(&self) -> usize {
        self.n_parts * self.n_regions
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.cols()..(y + 1) * self.cols()]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[y * c..(y + 1) * c]
    }

    #[inline]
    pub fn get(&self, y: usize, col: usize) -> f64 {
        self.data[y * self.cols() + col]
    }

    /// Part index owning a column.
    pub fn part_of_column(&self, col: usize) -> usize {
        col / self.n_regions
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Keeps the columns of the listed parts.
    pub fn subset_parts(&self, parts: &[usize]) -> Self {
        let r = self.n_regions;
        let mut data = Vec::with_capacity(self.n_classes * parts.len() * r);
        for y in 0..self.n_classes {
            let row = self.row(y);
            for &j in parts {
                data.extend_from_slice(&row[j * r..(j + 1) * r]);
            }
        }
        Self {
            n_classes: self.n_classes,
            n_parts: parts.len(),
            n_regions: r,
            data,
        }
    }
}

/// Maximal part responses per slot plus where each maximum was found.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseVector {
    pub values: Vec<f64>,
    pub argmax: Vec<Option<LatentLocation>>,
}

/// A training or test image: its pyramid, optionally the pyramid of its
/// mirror image, and a 0-based class label.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub pyramid: FeaturePyramid,
    pub mirrored: Option<FeaturePyramid>,
    pub label: usize,
}

/// Relative role of a part between two classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartSign {
    Positive,
    Negative,
    Neutral,
}

/// `s(x, z, w_j) = w_j · ψ(x, z)`.
pub fn part_score(pyramid: &FeaturePyramid, z: LatentLocation, filter: &PartFilter) -> Result<f64> {
    if pyramid.dim() != filter.dim {
        return Err(Error::DimensionMismatch {
            expected: filter.dim,
            actual: pyramid.dim(),
        });
    }
    let mut psi = vec![0.0; filter.weights.len()];
    extract_patch_feature_into(pyramid, z, filter.window, &mut psi)?;
    Ok(dot(&filter.weights, &psi))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Locations of `pyramid` whose window center falls in `region`, in
/// lexicographic order.
pub fn region_locations(
    pyramid: &FeaturePyramid,
    window: Window,
    grid: &PoolingGrid,
    region: usize,
) -> Vec<LatentLocation> {
    pyramid
        .locations(window)
        .into_iter()
        .filter(|&z| {
            let (cx, cy) = pyramid.anchor_center(z, window);
            grid.members(cx, cy).contains(&region)
        })
        .collect()
}

/// Maximum score of `filter` over the locations in pooling region `region`.
/// An empty region yields `(0, None)`.
pub fn part_response(
    pyramid: &FeaturePyramid,
    filter: &PartFilter,
    grid: &PoolingGrid,
    region: usize,
) -> Result<(f64, Option<LatentLocation>)> {
    let mut best: Option<(f64, LatentLocation)> = None;
    for z in region_locations(pyramid, filter.window, grid, region) {
        let s = part_score(pyramid, z, filter)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, z));
        }
    }
    Ok(best.map_or((0.0, None), |(s, z)| (s, Some(z))))
}

/// `r(x, w)`: responses of every part in every pooling region, part-major.
pub fn response_vector(pyramid: &FeaturePyramid, bank: &PartBank, grid: &PoolingGrid) -> Result<ResponseVector> {
    if pyramid.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: pyramid.dim(),
        });
    }
    let view = ViewTable::build(pyramid, bank.window(), grid)?;
    let r = grid.len();
    let mut values = Vec::with_capacity(bank.len() * r);
    let mut argmax = Vec::with_capacity(bank.len() * r);
    for part in &bank.parts {
        let scores = view.scores(&part.weights);
        for rho in 0..r {
            let (v, idx) = view.region_max(&scores, rho);
            values.push(v);
            argmax.push(idx.map(|i| view.locs[i as usize]));
        }
    }
    Ok(ResponseVector { values, argmax })
}

/// `[r(x) + r(x')] / 2` for an image and its mirror.
pub fn flip_average(r_x: &ResponseVector, r_xflip: &ResponseVector) -> Result<Vec<f64>> {
    if r_x.values.len() != r_xflip.values.len() {
        return Err(Error::DimensionMismatch {
            expected: r_x.values.len(),
            actual: r_xflip.values.len(),
        });
    }
    Ok(r_x
        .values
        .iter()
        .zip(&r_xflip.values)
        .map(|(a, b)| (a + b) * 0.5)
        .collect())
}

/// The representation used for classification: the flip average when a
/// mirrored pyramid is present, otherwise the plain response vector.
pub fn representation(example: &LabeledExample, bank: &PartBank, grid: &PoolingGrid) -> Result<Vec<f64>> {
    let r = response_vector(&example.pyramid, bank, grid)?;
    match &example.mirrored {
        Some(m) => flip_average(&r, &response_vector(m, bank, grid)?),
        None => Ok(r.values),
    }
}

pub fn class_scores(r: &[f64], u: &PartWeights) -> Result<Vec<f64>> {
    if r.len() != u.cols() {
        return Err(Error::DimensionMismatch {
            expected: u.cols(),
            actual: r.len(),
        });
    }
    Ok((0..u.n_classes).map(|y| dot(u.row(y), r)).collect())
}

pub fn predict(r: &[f64], u: &PartWeights) -> Result<usize> {
    let scores = class_scores(r, u)?;
    Ok(argmax_lowest(&scores))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Subtracts each column's mean so that columns sum to zero. Score
/// differences between classes, and hence predictions, are unchanged.
pub fn canonicalize_columns(u: &PartWeights) -> PartWeights {
    let mut out = u.clone();
    let n = u.n_classes as f64;
    for c in 0..u.cols() {
        let mean = (0..u.n_classes).map(|y| u.get(y, c)).sum::<f64>() / n;
        for y in 0..u.n_classes {
            out.row_mut(y)[c] -= mean;
        }
    }
    out
}

/// Whether part `j` is positive, negative or neutral for `class_a` relative
/// to `class_b`, judged on its whole-image (region 0) column.
pub fn relative_part_sign(u: &PartWeights, class_a: usize, class_b: usize, part: usize) -> Result<PartSign> {
    if class_a >= u.n_classes || class_b >= u.n_classes || part >= u.n_parts {
        return Err(Error::InvalidParameter(format!(
            "class ({class_a}, {class_b}) or part {part} out of range"
        )));
    }
    let col = part * u.n_regions;
    let diff = u.get(class_a, col) - u.get(class_b, col);
    Ok(if diff > 0.0 {
        PartSign::Positive
    } else if diff < 0.0 {
        PartSign::Negative
    } else {
        PartSign::Neutral
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::test_util::random_pyramid;
    use crate::features::{extract_patch_feature, Level};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_filter(seed: u64, window: Window, dim: usize) -> PartFilter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..window.cells() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        PartFilter::new(w, window, dim, 0).unwrap()
    }

    fn brute_force_max(p: &FeaturePyramid, f: &PartFilter) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for z in p.locations(f.window) {
            let psi = extract_patch_feature(p, z, f.window).unwrap();
            let mut s = 0.0;
            for k in 0..psi.len() {
                s += f.weights[k] * psi[k];
            }
            best = best.max(s);
        }
        best
    }

    #[test]
    fn part_score_arithmetic() {
        let level = Level::new(1, 1, 2, 1.0, vec![3.0, 1.0]).unwrap();
        let p = FeaturePyramid::new(vec![level], 1, "t").unwrap();
        let f = PartFilter::new(vec![1.0, -2.0], Window::new(1, 1), 2, 0).unwrap();
        assert_eq!(part_score(&p, LatentLocation::new(0, 0, 0), &f).unwrap(), 1.0);
        let zero = PartFilter::zeros(Window::new(1, 1), 2, 0);
        assert_eq!(part_score(&p, LatentLocation::new(0, 0, 0), &zero).unwrap(), 0.0);
    }

    #[test]
    fn part_score_matches_scalar_loop_in_1152_dims() {
        let p = random_pyramid(3, &[(7, 7)], 32);
        let f = random_filter(4, Window::new(6, 6), 32);
        let z = LatentLocation::new(0, 1, 0);
        let psi = extract_patch_feature(&p, z, f.window).unwrap();
        let mut oracle = 0.0;
        for k in 0..1152 {
            oracle += f.weights[k] * psi[k];
        }
        assert!((part_score(&p, z, &f).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn part_response_picks_maximum() {
        let level = Level::new(1, 2, 1, 1.0, vec![1.0, 4.0]).unwrap();
        let p = FeaturePyramid::new(vec![level], 1, "t").unwrap();
        let f = PartFilter::new(vec![1.0], Window::new(1, 1), 1, 0).unwrap();
        let (v, z) = part_response(&p, &f, &PoolingGrid::global(), 0).unwrap();
        assert_eq!((v, z), (4.0, Some(LatentLocation::new(0, 0, 1))));
    }

    #[test]
    fn global_region_is_max_of_quadrants() {
        let p = random_pyramid(8, &[(6, 6), (4, 4)], 2);
        let f = random_filter(9, Window::new(2, 2), 2);
        let g = PoolingGrid::default();
        let global = part_response(&p, &f, &g, 0).unwrap().0;
        let quad = (1..5)
            .map(|r| part_response(&p, &f, &g, r).unwrap().0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(global, quad);
    }

    #[test]
    fn part_response_matches_exhaustive_scan() {
        let p = random_pyramid(10, &[(5, 5)], 3);
        let f = random_filter(11, Window::new(1, 1), 3);
        let (v, _) = part_response(&p, &f, &PoolingGrid::global(), 0).unwrap();
        assert_eq!(v, brute_force_max(&p, &f));
    }

    #[test]
    fn response_vector_layout() {
        let p = random_pyramid(12, &[(6, 6)], 2);
        let w = Window::new(2, 2);
        let a = random_filter(1, w, 2);
        let mut b = random_filter(2, w, 2);
        b.part_id = 1;
        let single = response_vector(&p, &PartBank::new(vec![a.clone()]).unwrap(), &PoolingGrid::global()).unwrap();
        assert_eq!(
            single.values,
            vec![part_response(&p, &a, &PoolingGrid::global(), 0).unwrap().0]
        );

        let g = PoolingGrid::default();
        let ab = response_vector(&p, &PartBank::new(vec![a.clone(), b.clone()]).unwrap(), &g).unwrap();
        let _ = &b;
        let ba = response_vector(&p, &PartBank::new(vec![b, a]).unwrap(), &g).unwrap();
        assert_eq!(ab.values.len(), 10);
        assert_eq!(&ab.values[..5], &ba.values[5..]);
        assert_eq!(&ab.values[5..], &ba.values[..5]);
        // argmax locations re-score to the stored value
        let bank = PartBank::new(vec![random_filter(1, w, 2), random_filter(2, w, 2)]).unwrap();
        for (slot, z) in ab.argmax.iter().enumerate() {
            let s = part_score(&p, z.unwrap(), &bank.parts[slot / 5]).unwrap();
            assert!((s - ab.values[slot]).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_region_is_zero_sentinel() {
        // one location centered at (0.5, 0.5): quadrant 1 claims it
        let f = random_filter(2, Window::new(1, 1), 1);
        let g = PoolingGrid::default();
        let p = random_pyramid(1, &[(1, 1)], 1);
        let r = response_vector(&p, &PartBank::new(vec![f]).unwrap(), &g).unwrap();
        assert!(r.argmax[1].is_some());
        for rho in 2..5 {
            assert_eq!(r.argmax[rho], None);
            assert_eq!(r.values[rho], 0.0);
        }
    }

    #[test]
    fn flip_average_arithmetic() {
        let a = ResponseVector {
            values: vec![0.0, 2.0],
            argmax: vec![None, None],
        };
        let b = ResponseVector {
            values: vec![2.0, 0.0],
            argmax: vec![None, None],
        };
        assert_eq!(flip_average(&a, &b).unwrap(), vec![1.0, 1.0]);
        assert_eq!(flip_average(&a, &a).unwrap(), a.values);
        let c = ResponseVector {
            values: vec![1.0],
            argmax: vec![None],
        };
        assert!(flip_average(&a, &c).is_err());
    }

    #[test]
    fn scores_and_prediction() {
        let u = PartWeights::from_data(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = [0.2, 0.7];
        assert_eq!(class_scores(&r, &u).unwrap(), vec![0.2, 0.7]);
        assert_eq!(predict(&r, &u).unwrap(), 1);
        let z = PartWeights::zeros(3, 2, 1);
        assert_eq!(class_scores(&r, &z).unwrap(), vec![0.0; 3]);
        assert_eq!(predict(&r, &z).unwrap(), 0);
        assert!(class_scores(&[1.0], &u).is_err());
    }

    #[test]
    fn class_scores_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = PartWeights::from_data(3, 6, 1, data.clone()).unwrap();
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = class_scores(&r, &u).unwrap();
        for y in 0..3 {
            let mut o = 0.0;
            for c in 0..6 {
                o += data[y * 6 + c] * r[c];
            }
            assert!((s[y] - o).abs() < 1e-12);
        }
    }

    #[test]
    fn canonicalize_examples() {
        let u = PartWeights::from_data(3, 2, 1, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let c = canonicalize_columns(&u);
        for col in 0..2 {
            let s: f64 = (0..3).map(|y| c.get(y, col)).sum();
            assert!(s.abs() < 1e-15);
        }
        let again = canonicalize_columns(&c);
        assert_eq!(again, c);
    }

    #[test]
    fn part_signs() {
        let u = PartWeights::from_data(2, 1, 1, vec![2.0, 1.0]).unwrap();
        assert_eq!(relative_part_sign(&u, 0, 1, 0).unwrap(), PartSign::Positive);
        assert_eq!(relative_part_sign(&u, 1, 0, 0).unwrap(), PartSign::Negative);
        assert_eq!(relative_part_sign(&u, 0, 0, 0).unwrap(), PartSign::Neutral);
        assert!(relative_part_sign(&u, 0, 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn column_shift_preserves_prediction(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, cols) = (rng.random_range(2..6), rng.random_range(1..8));
            let data: Vec<f64> = (0..n * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u = PartWeights::from_data(n, cols, 1, data).unwrap();
            let canon = canonicalize_columns(&u);
            prop_assert!(canon.norm_sq() <= u.norm_sq() + 1e-12);
            for _ in 0..10 {
                let r: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
                prop_assert_eq!(predict(&r, &u).unwrap(), predict(&r, &canon).unwrap());
            }
        }

        #[test]
        fn scaling_a_filter_scales_responses(seed in 0u64..10_000, alpha in 0.1f64..10.0) {
            let p = random_pyramid(seed, &[(4, 4)], 2);
            let f = random_filter(seed + 1, Window::new(1, 2), 2);
            let mut g = f.clone();
            g.weights.iter_mut().for_each(|v| *v *= alpha);
            let grid = PoolingGrid::default();
            let rf = response_vector(&p, &PartBank::new(vec![f]).unwrap(), &grid).unwrap();
            let rg = response_vector(&p, &PartBank::new(vec![g]).unwrap(), &grid).unwrap();
            for (a, b) in rf.values.iter().zip(&rg.values) {
                prop_assert!((a * alpha - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
